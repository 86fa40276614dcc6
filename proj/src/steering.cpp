#include "steerlab/steering.hpp"

#include <sstream>
#include <stdexcept>

#include "steerlab/io.hpp"

namespace steerlab {

void ContrastPair::validate(int vocab_size) const {
  if (target_token == competing_token) {
    throw std::invalid_argument("contrast pair: target and competing token must differ");
  }
  if (target_token < 0 || target_token >= vocab_size || competing_token < 0 ||
      competing_token >= vocab_size) {
    throw std::invalid_argument("contrast pair: token id out of range");
  }
  if (decoder_prefix.empty() || decoder_prefix.front() != SpecialTokens::kBos) {
    throw std::invalid_argument("contrast pair: decoder prefix must start with BOS");
  }
}

double contrastive_loss(const Tensor& final_logits, const ContrastPair& pair) {
  pair.validate(final_logits.dim(0));
  Tensor logp = log_softmax(final_logits);
  return logp.at(pair.competing_token) - logp.at(pair.target_token);
}

ValueId contrastive_loss_node(Tape& tape, ValueId final_logits, const ContrastPair& pair) {
  const Tensor& logits = tape.value(final_logits);
  pair.validate(logits.dim(0));
  Tensor pick = Tensor::zeros(logits.shape());
  double* m = pick.mutable_data();
  m[pair.competing_token] = 1.0;
  m[pair.target_token] = -1.0;
  return tape.sum(tape.mul(tape.log_softmax(final_logits), tape.leaf(pick)));
}

Tensor mine_gradient(const ModelParams& params, const ContrastPair& pair, int layer) {
  if (layer < 0 || layer >= params.config.n_dec_layers) {
    throw std::invalid_argument("mine_gradient: invalid decoder layer");
  }
  pair.validate(params.config.vocab_size);
  Tensor enc_states = encode(params, pair.input_tokens);
  RecordedDecode rec = decode_step_recorded(params, enc_states, pair.decoder_prefix, nullptr);
  ValueId loss = contrastive_loss_node(rec.tape, rec.final_logits_node, pair);
  Tensor full = rec.tape.grad_wrt(loss, rec.hidden_nodes[static_cast<size_t>(layer)]);
  int d = params.config.d_model;
  int last = static_cast<int>(pair.decoder_prefix.size()) - 1;
  std::vector<double> row(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) row[static_cast<size_t>(i)] = full.at(last, i);
  return Tensor::from_values({d}, std::move(row));
}

SteeringVector mine_vector(const ModelParams& params, const MiningConfig& config) {
  if (config.examples.empty()) throw std::invalid_argument("mine_vector: no examples");
  int d = params.config.d_model;
  Tensor acc = Tensor::zeros({d});
  double* a = acc.mutable_data();
  for (const ContrastPair& pair : config.examples) {
    Tensor g = mine_gradient(params, pair, config.layer);
    if (g.norm() == 0.0) {
      throw std::runtime_error("mine_vector: zero gradient for a mining example");
    }
    for (int i = 0; i < d; ++i) a[i] += g.at(i);
  }
  double inv = -1.0 / static_cast<double>(config.examples.size());
  for (int i = 0; i < d; ++i) a[i] *= inv;
  SteeringVector v;
  v.layer = config.layer;
  v.direction = acc;
  v.n_examples = static_cast<int>(config.examples.size());
  if (!v.direction.all_finite() || v.direction.norm() == 0.0) {
    throw std::runtime_error("mine_vector: degenerate direction");
  }
  return v;
}

DecodeResult steer_decode(const ModelParams& params, const Tensor& enc_states,
                          const SteeringVector& vector, double alpha, int max_len,
                          int inject_position) {
  if (alpha < 0.0) throw std::invalid_argument("steer_decode: alpha must be >= 0");
  InjectionSpec spec;
  spec.layer = vector.layer;
  spec.direction = vector.direction;
  spec.strength = alpha;
  spec.position = inject_position;
  return greedy_decode(params, enc_states, max_len, &spec);
}

std::string steering_vector_to_string(const SteeringVector& v, const std::string& config_hash) {
  std::ostringstream out;
  out << "steerlab-steering-vector v1\n";
  out << "config-hash " << config_hash << "\n";
  out << "layer " << v.layer << "\n";
  out << "n_examples " << v.n_examples << "\n";
  out << "dim " << v.direction.dim(0) << "\n";
  for (int i = 0; i < v.direction.dim(0); ++i) {
    out << (i == 0 ? "" : " ") << double_to_hex(v.direction.at(i));
  }
  out << "\n";
  return out.str();
}

void save_steering_vector(const SteeringVector& v, const std::string& path,
                          const std::string& config_hash) {
  write_file(path, steering_vector_to_string(v, config_hash));
}

SteeringVector load_steering_vector(const std::string& path, std::string* config_hash_out) {
  std::vector<std::string> lines = split_lines(read_file(path));
  if (lines.size() < 6 || lines[0] != "steerlab-steering-vector v1") {
    throw std::runtime_error("not a steering-vector file: " + path);
  }
  if (lines[1].rfind("config-hash ", 0) != 0 || lines[2].rfind("layer ", 0) != 0 ||
      lines[3].rfind("n_examples ", 0) != 0 || lines[4].rfind("dim ", 0) != 0) {
    throw std::runtime_error("malformed steering-vector file: " + path);
  }
  if (config_hash_out != nullptr) *config_hash_out = lines[1].substr(12);
  SteeringVector v;
  v.layer = std::stoi(lines[2].substr(6));
  v.n_examples = std::stoi(lines[3].substr(11));
  int dim = std::stoi(lines[4].substr(4));
  std::vector<std::string> vals = split(lines[5], ' ');
  if (static_cast<int>(vals.size()) != dim) {
    throw std::runtime_error("steering-vector file: entry count mismatch: " + path);
  }
  std::vector<double> data(vals.size());
  for (size_t i = 0; i < vals.size(); ++i) data[i] = hex_to_double(vals[i]);
  v.direction = Tensor::from_values({dim}, std::move(data));
  return v;
}

}  // namespace steerlab
