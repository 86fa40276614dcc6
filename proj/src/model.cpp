#include "steerlab/model.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "steerlab/io.hpp"

#include <json.hpp>

namespace steerlab {

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0 ||
      n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0 || rel_pos_buckets <= 0) {
    throw std::invalid_argument("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model must be divisible by n_heads");
  }
  if (n_dec_layers < 2) {
    throw std::invalid_argument("model config: need at least 2 decoder layers");
  }
  if (vocab_size <= SpecialTokens::kBos) {
    throw std::invalid_argument("model config: vocab too small for special tokens");
  }
}

namespace {

AttentionWeights init_attention(const ModelConfig& c, Rng& rng) {
  AttentionWeights w;
  int dh = c.head_dim();
  double qk_std = 1.0 / std::sqrt(static_cast<double>(c.d_model) * std::sqrt(static_cast<double>(dh)));
  double v_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  double o_std = 1.0 / std::sqrt(static_cast<double>(dh * c.n_heads));
  for (int h = 0; h < c.n_heads; ++h) {
    w.wq.push_back(Tensor::randn({c.d_model, dh}, rng, qk_std));
    w.wk.push_back(Tensor::randn({c.d_model, dh}, rng, qk_std));
    w.wv.push_back(Tensor::randn({c.d_model, dh}, rng, v_std));
    w.wo.push_back(Tensor::randn({dh, c.d_model}, rng, o_std));
  }
  return w;
}

template <typename Params, typename Fn>
void visit_params(Params& p, Fn&& fn) {
  const ModelConfig& c = p.config;
  fn("token_embedding", p.token_embedding);
  fn("enc_rel_bias", p.enc_rel_bias);
  fn("dec_rel_bias", p.dec_rel_bias);
  auto visit_attn = [&](const std::string& prefix, auto& attn) {
    for (int h = 0; h < c.n_heads; ++h) {
      fn(prefix + ".wq.h" + std::to_string(h), attn.wq[static_cast<size_t>(h)]);
      fn(prefix + ".wk.h" + std::to_string(h), attn.wk[static_cast<size_t>(h)]);
      fn(prefix + ".wv.h" + std::to_string(h), attn.wv[static_cast<size_t>(h)]);
      fn(prefix + ".wo.h" + std::to_string(h), attn.wo[static_cast<size_t>(h)]);
    }
  };
  for (int l = 0; l < c.n_enc_layers; ++l) {
    auto& layer = p.encoder[static_cast<size_t>(l)];
    std::string base = "enc.l" + std::to_string(l);
    fn(base + ".norm1", layer.norm1_gain);
    visit_attn(base + ".self", layer.self_attn);
    fn(base + ".norm2", layer.norm2_gain);
    fn(base + ".ffn.w1", layer.ffn_w1);
    fn(base + ".ffn.w2", layer.ffn_w2);
  }
  fn("enc.final_norm", p.enc_final_norm_gain);
  for (int l = 0; l < c.n_dec_layers; ++l) {
    auto& layer = p.decoder[static_cast<size_t>(l)];
    std::string base = "dec.l" + std::to_string(l);
    fn(base + ".norm1", layer.norm1_gain);
    visit_attn(base + ".self", layer.self_attn);
    fn(base + ".norm2", layer.norm2_gain);
    visit_attn(base + ".cross", layer.cross_attn);
    fn(base + ".norm3", layer.norm3_gain);
    fn(base + ".ffn.w1", layer.ffn_w1);
    fn(base + ".ffn.w2", layer.ffn_w2);
  }
  fn("dec.final_norm", p.dec_final_norm_gain);
  fn("lm_head", p.lm_head);
}

constexpr double kNormEps = 1e-6;
constexpr double kCausalMaskValue = -1e30;
constexpr int kRelPosMaxDistance = 128;

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.token_embedding = Tensor::randn({config.vocab_size, config.d_model}, rng, 1.0);
  p.enc_rel_bias = Tensor::zeros({config.rel_pos_buckets, config.n_heads});
  p.dec_rel_bias = Tensor::zeros({config.rel_pos_buckets, config.n_heads});
  double ff1_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  double ff2_std = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
  for (int l = 0; l < config.n_enc_layers; ++l) {
    EncoderLayer layer;
    layer.norm1_gain = Tensor::full({config.d_model}, 1.0);
    layer.self_attn = init_attention(config, rng);
    layer.norm2_gain = Tensor::full({config.d_model}, 1.0);
    layer.ffn_w1 = Tensor::randn({config.d_model, config.d_ff}, rng, ff1_std);
    layer.ffn_w2 = Tensor::randn({config.d_ff, config.d_model}, rng, ff2_std);
    p.encoder.push_back(std::move(layer));
  }
  for (int l = 0; l < config.n_dec_layers; ++l) {
    DecoderLayer layer;
    layer.norm1_gain = Tensor::full({config.d_model}, 1.0);
    layer.self_attn = init_attention(config, rng);
    layer.norm2_gain = Tensor::full({config.d_model}, 1.0);
    layer.cross_attn = init_attention(config, rng);
    layer.norm3_gain = Tensor::full({config.d_model}, 1.0);
    layer.ffn_w1 = Tensor::randn({config.d_model, config.d_ff}, rng, ff1_std);
    layer.ffn_w2 = Tensor::randn({config.d_ff, config.d_model}, rng, ff2_std);
    p.decoder.push_back(std::move(layer));
  }
  p.enc_final_norm_gain = Tensor::full({config.d_model}, 1.0);
  p.dec_final_norm_gain = Tensor::full({config.d_model}, 1.0);
  p.lm_head = Tensor::randn({config.d_model, config.vocab_size}, rng, ff1_std);
  return p;
}

void ModelParams::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_params(*this, fn);
}

void ModelParams::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_params(*this, fn);
}

int relative_position_bucket(int relative_position, bool bidirectional, int num_buckets) {
  int bucket = 0;
  int n;
  if (bidirectional) {
    num_buckets /= 2;
    if (relative_position > 0) bucket += num_buckets;
    n = std::abs(relative_position);
  } else {
    n = std::max(-relative_position, 0);
  }
  int max_exact = num_buckets / 2;
  if (n < max_exact) {
    bucket += n;
  } else {
    double v = static_cast<double>(max_exact) +
               std::log(static_cast<double>(n) / max_exact) /
                   std::log(static_cast<double>(kRelPosMaxDistance) / max_exact) *
                   (num_buckets - max_exact);
    bucket += std::min(static_cast<int>(v), num_buckets - 1);
  }
  return bucket;
}

namespace {

// Binds every parameter onto a tape once and provides the stack forwards.
// Everything, recorded or not, funnels through this one code path.
class ModelForward {
 public:
  ModelForward(Tape& tape, const ModelParams& params) : tape_(tape), p_(params) {
    const ModelConfig& c = p_.config;
    embedding_ = tape_.leaf(p_.token_embedding);
    enc_rel_bias_ = tape_.leaf(p_.enc_rel_bias);
    dec_rel_bias_ = tape_.leaf(p_.dec_rel_bias);
    for (int l = 0; l < c.n_enc_layers; ++l) enc_.push_back(bind_enc(p_.encoder[static_cast<size_t>(l)]));
    for (int l = 0; l < c.n_dec_layers; ++l) dec_.push_back(bind_dec(p_.decoder[static_cast<size_t>(l)]));
    enc_final_ = tape_.leaf(p_.enc_final_norm_gain);
    dec_final_ = tape_.leaf(p_.dec_final_norm_gain);
    lm_head_ = tape_.leaf(p_.lm_head);
  }

  ValueId encode(const std::vector<int>& tokens) {
    validate_tokens(tokens, "encode input");
    ValueId h = tape_.gather_rows(embedding_, tokens);
    int len = static_cast<int>(tokens.size());
    for (const BoundEnc& layer : enc_) {
      ValueId a = tape_.rms_norm(h, layer.norm1, kNormEps);
      h = tape_.add(h, attention(a, a, layer.attn, enc_rel_bias_, /*causal=*/false, len, len));
      ValueId f = tape_.rms_norm(h, layer.norm2, kNormEps);
      h = tape_.add(h, ffn(f, layer.w1, layer.w2));
    }
    return tape_.rms_norm(h, enc_final_, kNormEps);
  }

  struct DecodeNodes {
    std::vector<ValueId> hidden;   // per layer, [T x d]
    ValueId final_logits_all = -1; // [T x vocab]
    ValueId final_logits_row = -1; // [vocab]
  };

  DecodeNodes decode(ValueId enc_states, const std::vector<int>& prefix,
                     const InjectionSpec* injection) {
    const ModelConfig& c = p_.config;
    validate_tokens(prefix, "decoder prefix");
    if (prefix.front() != SpecialTokens::kBos) {
      throw std::invalid_argument("decoder prefix must begin with the decoder start token");
    }
    const InjectionSpec* inj = injection;
    if (inj != nullptr) {
      if (inj->layer < 0 || inj->layer >= c.n_dec_layers) {
        throw std::invalid_argument("injection: invalid decoder layer index");
      }
      if (inj->strength > 0.0 && inj->direction.norm() == 0.0) {
        throw std::invalid_argument("injection: zero-norm direction with positive strength");
      }
      if (inj->strength == 0.0) inj = nullptr;  // exact no-op, keeps bitwise identity
    }

    int len = static_cast<int>(prefix.size());
    int enc_len = tape_.value(enc_states).dim(0);
    ValueId h = tape_.gather_rows(embedding_, prefix);
    DecodeNodes nodes;
    for (size_t j = 0; j < dec_.size(); ++j) {
      const BoundDec& layer = dec_[j];
      ValueId a = tape_.rms_norm(h, layer.norm1, kNormEps);
      h = tape_.add(h, attention(a, a, layer.self_attn, dec_rel_bias_, /*causal=*/true, len, len));
      ValueId x = tape_.rms_norm(h, layer.norm2, kNormEps);
      h = tape_.add(h, attention(x, enc_states, layer.cross_attn, -1, /*causal=*/false, len, enc_len));
      ValueId f = tape_.rms_norm(h, layer.norm3, kNormEps);
      h = tape_.add(h, ffn(f, layer.w1, layer.w2));
      if (inj != nullptr && static_cast<int>(j) == inj->layer) {
        h = tape_.add(h, injection_rows(*inj, len));
      }
      nodes.hidden.push_back(h);
    }
    ValueId final_norm = tape_.rms_norm(h, dec_final_, kNormEps);
    nodes.final_logits_all = tape_.matmul(final_norm, lm_head_);
    ValueId row = tape_.gather_rows(nodes.final_logits_all, {len - 1});
    nodes.final_logits_row = tape_.reshape(row, {c.vocab_size});
    return nodes;
  }

  LayerTrace build_trace(const DecodeNodes& nodes, int last_pos) const {
    LayerTrace trace;
    int d = p_.config.d_model;
    int n_dec = p_.config.n_dec_layers;
    for (int j = 0; j < n_dec; ++j) {
      const Tensor& full = tape_.value(nodes.hidden[static_cast<size_t>(j)]);
      std::vector<double> row(static_cast<size_t>(d));
      for (int i = 0; i < d; ++i) row[static_cast<size_t>(i)] = full.at(last_pos, i);
      Tensor hidden = Tensor::from_values({d}, std::move(row));
      Tensor logits;
      if (j == n_dec - 1) {
        // Final entry: stack normalization first, so it equals the true
        // output logits for this position.
        logits = project_layer(p_, rms_norm(hidden, p_.dec_final_norm_gain, kNormEps));
      } else {
        logits = project_layer(p_, hidden);
      }
      trace.projected_dist.push_back(softmax(logits));
      trace.projected_logits.push_back(std::move(logits));
      trace.hidden_states.push_back(std::move(hidden));
    }
    return trace;
  }

 private:
  struct BoundAttn {
    std::vector<ValueId> wq, wk, wv, wo;
  };
  struct BoundEnc {
    ValueId norm1, norm2, w1, w2;
    BoundAttn attn;
  };
  struct BoundDec {
    ValueId norm1, norm2, norm3, w1, w2;
    BoundAttn self_attn, cross_attn;
  };

  BoundAttn bind_attn(const AttentionWeights& w) {
    BoundAttn b;
    for (const Tensor& t : w.wq) b.wq.push_back(tape_.leaf(t));
    for (const Tensor& t : w.wk) b.wk.push_back(tape_.leaf(t));
    for (const Tensor& t : w.wv) b.wv.push_back(tape_.leaf(t));
    for (const Tensor& t : w.wo) b.wo.push_back(tape_.leaf(t));
    return b;
  }
  BoundEnc bind_enc(const EncoderLayer& l) {
    BoundEnc b;
    b.norm1 = tape_.leaf(l.norm1_gain);
    b.attn = bind_attn(l.self_attn);
    b.norm2 = tape_.leaf(l.norm2_gain);
    b.w1 = tape_.leaf(l.ffn_w1);
    b.w2 = tape_.leaf(l.ffn_w2);
    return b;
  }
  BoundDec bind_dec(const DecoderLayer& l) {
    BoundDec b;
    b.norm1 = tape_.leaf(l.norm1_gain);
    b.self_attn = bind_attn(l.self_attn);
    b.norm2 = tape_.leaf(l.norm2_gain);
    b.cross_attn = bind_attn(l.cross_attn);
    b.norm3 = tape_.leaf(l.norm3_gain);
    b.w1 = tape_.leaf(l.ffn_w1);
    b.w2 = tape_.leaf(l.ffn_w2);
    return b;
  }

  void validate_tokens(const std::vector<int>& tokens, const char* what) const {
    if (tokens.empty()) throw std::invalid_argument(std::string(what) + ": empty sequence");
    if (static_cast<int>(tokens.size()) > p_.config.max_seq_len) {
      throw std::invalid_argument(std::string(what) + ": longer than max_seq_len");
    }
    for (int t : tokens) {
      if (t < 0 || t >= p_.config.vocab_size) {
        throw std::invalid_argument(std::string(what) + ": token id out of range");
      }
    }
  }

  // Relative-position bias for head h as a [rows x cols] tensor, built from
  // the stack's bucket table so gradients flow into it.
  ValueId head_bias(ValueId bias_table, int head, bool causal, int rows, int cols) {
    std::vector<int> buckets(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        buckets[static_cast<size_t>(i) * cols + j] =
            relative_position_bucket(j - i, !causal, p_.config.rel_pos_buckets);
      }
    }
    ValueId gathered = tape_.gather_rows(bias_table, buckets);  // [rows*cols x heads]
    Tensor selector = Tensor::zeros({p_.config.n_heads, 1});
    selector.mutable_data()[head] = 1.0;
    ValueId col = tape_.matmul(gathered, tape_.leaf(selector));  // [rows*cols x 1]
    return tape_.reshape(col, {rows, cols});
  }

  ValueId causal_mask(int len) {
    Tensor mask = Tensor::zeros({len, len});
    double* m = mask.mutable_data();
    for (int i = 0; i < len; ++i) {
      for (int j = i + 1; j < len; ++j) m[static_cast<size_t>(i) * len + j] = kCausalMaskValue;
    }
    return tape_.leaf(mask);
  }

  ValueId attention(ValueId queries_src, ValueId kv_src, const BoundAttn& w, ValueId bias_table,
                    bool causal, int q_len, int kv_len) {
    ValueId mask = causal ? causal_mask(q_len) : -1;
    ValueId out = -1;
    for (int h = 0; h < p_.config.n_heads; ++h) {
      size_t hh = static_cast<size_t>(h);
      ValueId q = tape_.matmul(queries_src, w.wq[hh]);
      ValueId k = tape_.matmul(kv_src, w.wk[hh]);
      ValueId v = tape_.matmul(kv_src, w.wv[hh]);
      ValueId scores = tape_.matmul(q, k, false, true);  // [q_len x kv_len]
      if (bias_table >= 0) scores = tape_.add(scores, head_bias(bias_table, h, causal, q_len, kv_len));
      if (mask >= 0) scores = tape_.add(scores, mask);
      ValueId attn = tape_.softmax(scores);
      ValueId ctx = tape_.matmul(attn, v);          // [q_len x head_dim]
      ValueId o = tape_.matmul(ctx, w.wo[hh]);      // [q_len x d_model]
      out = out < 0 ? o : tape_.add(out, o);
    }
    return out;
  }

  ValueId ffn(ValueId x, ValueId w1, ValueId w2) {
    return tape_.matmul(tape_.relu(tape_.matmul(x, w1)), w2);
  }

  ValueId injection_rows(const InjectionSpec& inj, int len) {
    const Tensor& dir = inj.direction;
    if (dir.rank() != 1 || dir.dim(0) != p_.config.d_model) {
      throw std::invalid_argument("injection: direction must be a d_model vector");
    }
    double inv = inj.strength / dir.norm();
    Tensor rows = Tensor::zeros({len, p_.config.d_model});
    double* r = rows.mutable_data();
    for (int t = 0; t < len; ++t) {
      if (inj.position >= 0 && t != inj.position) continue;
      for (int i = 0; i < p_.config.d_model; ++i) {
        r[static_cast<size_t>(t) * p_.config.d_model + i] = dir.at(i) * inv;
      }
    }
    return tape_.leaf(rows);
  }

  Tape& tape_;
  const ModelParams& p_;
  ValueId embedding_, enc_rel_bias_, dec_rel_bias_, enc_final_, dec_final_, lm_head_;
  std::vector<BoundEnc> enc_;
  std::vector<BoundDec> dec_;
};

}  // namespace

Tensor encode(const ModelParams& params, const std::vector<int>& input_tokens) {
  Tape tape;
  ModelForward fwd(tape, params);
  return tape.value(fwd.encode(input_tokens));
}

DecodeStep decode_step(const ModelParams& params, const Tensor& enc_states,
                       const std::vector<int>& prefix, const InjectionSpec* injection) {
  Tape tape;
  ModelForward fwd(tape, params);
  ValueId enc = tape.leaf(enc_states);
  auto nodes = fwd.decode(enc, prefix, injection);
  DecodeStep step;
  step.final_logits = tape.value(nodes.final_logits_row);
  step.trace = fwd.build_trace(nodes, static_cast<int>(prefix.size()) - 1);
  return step;
}

RecordedDecode decode_step_recorded(const ModelParams& params, const Tensor& enc_states,
                                    const std::vector<int>& prefix,
                                    const InjectionSpec* injection) {
  RecordedDecode rec;
  ModelForward fwd(rec.tape, params);
  ValueId enc = rec.tape.leaf(enc_states);
  auto nodes = fwd.decode(enc, prefix, injection);
  rec.hidden_nodes = nodes.hidden;
  rec.final_logits_node = nodes.final_logits_row;
  rec.final_logits = rec.tape.value(nodes.final_logits_row);
  rec.trace = fwd.build_trace(nodes, static_cast<int>(prefix.size()) - 1);
  return rec;
}

Tensor project_layer(const ModelParams& params, const Tensor& hidden) {
  if (hidden.rank() != 1 || hidden.dim(0) != params.config.d_model) {
    throw std::invalid_argument("project_layer: hidden must be a d_model vector");
  }
  if (!hidden.all_finite()) throw std::invalid_argument("project_layer: non-finite hidden");
  Tensor out = matmul(hidden.reshaped({1, params.config.d_model}), params.lm_head);
  return out.reshaped({params.config.vocab_size});
}

ValueId token_cross_entropy(Tape& tape, ValueId logits_rows, const std::vector<int>& targets,
                            int pad_id) {
  const Tensor& logits = tape.value(logits_rows);
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(targets.size())) {
    throw std::invalid_argument("token_cross_entropy: one logit row per target required");
  }
  int vocab = logits.dim(1);
  int n = 0;
  for (int t : targets) {
    if (t != pad_id) ++n;
  }
  if (n == 0) throw std::invalid_argument("token_cross_entropy: no non-pad targets");
  Tensor pick = Tensor::zeros(logits.shape());
  double* m = pick.mutable_data();
  for (size_t r = 0; r < targets.size(); ++r) {
    int t = targets[r];
    if (t == pad_id) continue;
    if (t < 0 || t >= vocab) throw std::invalid_argument("token_cross_entropy: target out of range");
    m[r * static_cast<size_t>(vocab) + static_cast<size_t>(t)] = -1.0 / static_cast<double>(n);
  }
  ValueId logp = tape.log_softmax(logits_rows);
  return tape.sum(tape.mul(logp, tape.leaf(pick)));
}

LossRecord training_loss(const ModelParams& params, const std::vector<SeqPair>& batch) {
  if (batch.empty()) throw std::invalid_argument("training_loss: empty batch");
  LossRecord rec;
  ModelForward fwd(rec.tape, params);

  // Total token count first so each example can be folded in with its final
  // weight (mean over all non-pad target positions of the batch).
  int64_t total_tokens = 0;
  for (const SeqPair& ex : batch) total_tokens += static_cast<int64_t>(ex.target.size()) + 1;

  ValueId loss = -1;
  for (const SeqPair& ex : batch) {
    if (ex.target.empty()) throw std::invalid_argument("training_loss: empty target");
    ValueId enc = fwd.encode(ex.input);
    std::vector<int> prefix;
    prefix.push_back(SpecialTokens::kBos);
    prefix.insert(prefix.end(), ex.target.begin(), ex.target.end());
    std::vector<int> shifted(ex.target.begin(), ex.target.end());
    shifted.push_back(SpecialTokens::kEos);
    auto nodes = fwd.decode(enc, prefix, nullptr);
    // Sum of per-position CE for this example (weight restored below).
    ValueId ex_loss = token_cross_entropy(rec.tape, nodes.final_logits_all, shifted,
                                          SpecialTokens::kPad);
    ValueId ex_sum = rec.tape.scale(ex_loss, static_cast<double>(shifted.size()));
    loss = loss < 0 ? ex_sum : rec.tape.add(loss, ex_sum);
  }
  rec.loss = rec.tape.scale(loss, 1.0 / static_cast<double>(total_tokens));
  rec.loss_value = rec.tape.value(rec.loss).at(0);

  // Parameter leaves were pushed by the forward binding in enumeration
  // order: leaf ids are assigned before any compute node, so matching them
  // back up by buffer identity is unambiguous.
  std::vector<std::pair<const double*, ValueId>> by_ptr;
  for (ValueId id = 0; id < rec.tape.size(); ++id) {
    // Only leaves can alias parameter storage.
    by_ptr.emplace_back(rec.tape.value(id).defined() ? rec.tape.value(id).data() : nullptr, id);
  }
  params.for_each_param([&](const std::string& name, const Tensor& t) {
    for (auto& [ptr, id] : by_ptr) {
      if (ptr == t.data()) {
        rec.param_names.push_back(name);
        rec.param_nodes.push_back(id);
        return;
      }
    }
    throw std::runtime_error("training_loss: parameter not bound: " + name);
  });
  return rec;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
                        {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers},
                        {"n_heads", c.n_heads},           {"d_ff", c.d_ff},
                        {"max_seq_len", c.max_seq_len},   {"rel_pos_buckets", c.rel_pos_buckets}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rel_pos_buckets = j.at("rel_pos_buckets").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path,
                     const std::string& config_hash) {
  std::ostringstream out;
  out << "steerlab-checkpoint v1\n";
  out << "config-hash " << config_hash << "\n";
  out << "model " << config_to_json(params.config).dump() << "\n";
  params.for_each_param([&](const std::string& name, const Tensor& t) {
    out << "param " << name;
    out << " " << t.rank();
    for (int i = 0; i < t.rank(); ++i) out << " " << t.dim(i);
    out << "\n";
    const double* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
      out << (i == 0 ? "" : " ") << double_to_hex(d[i]);
    }
    out << "\n";
  });
  out << "end\n";
  write_file(path, out.str());
}

ModelParams load_checkpoint(const std::string& path, std::string* config_hash_out) {
  std::vector<std::string> lines = split_lines(read_file(path));
  size_t ln = 0;
  auto next = [&]() -> const std::string& {
    if (ln >= lines.size()) throw std::runtime_error("checkpoint truncated: " + path);
    return lines[ln++];
  };
  if (next() != "steerlab-checkpoint v1") {
    throw std::runtime_error("not a steerlab checkpoint: " + path);
  }
  std::string hash_line = next();
  if (hash_line.rfind("config-hash ", 0) != 0) {
    throw std::runtime_error("checkpoint missing config-hash: " + path);
  }
  if (config_hash_out != nullptr) *config_hash_out = hash_line.substr(12);
  std::string model_line = next();
  if (model_line.rfind("model ", 0) != 0) {
    throw std::runtime_error("checkpoint missing model config: " + path);
  }
  ModelConfig config = config_from_json(nlohmann::json::parse(model_line.substr(6)));
  Rng dummy(0);
  ModelParams params = ModelParams::init(config, dummy);

  params.for_each_param([&](const std::string& name, Tensor& t) {
    std::vector<std::string> header = split(next(), ' ');
    if (header.size() < 3 || header[0] != "param" || header[1] != name) {
      throw std::runtime_error("checkpoint: expected parameter '" + name + "'");
    }
    int rank = std::stoi(header[2]);
    if (rank != t.rank() || header.size() != static_cast<size_t>(3 + rank)) {
      throw std::runtime_error("checkpoint: bad shape for '" + name + "'");
    }
    for (int i = 0; i < rank; ++i) {
      if (std::stoi(header[static_cast<size_t>(3 + i)]) != t.dim(i)) {
        throw std::runtime_error("checkpoint: dimension mismatch for '" + name + "'");
      }
    }
    std::vector<std::string> vals = split(next(), ' ');
    if (static_cast<int64_t>(vals.size()) != t.numel()) {
      throw std::runtime_error("checkpoint: value count mismatch for '" + name + "'");
    }
    double* d = t.mutable_data();
    for (size_t i = 0; i < vals.size(); ++i) d[i] = hex_to_double(vals[i]);
  });
  if (next() != "end") throw std::runtime_error("checkpoint missing end marker: " + path);
  return params;
}

}  // namespace steerlab
