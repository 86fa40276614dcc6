#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/numerics.hpp"

namespace steerlab {

// Token-id conventions shared by the tokenizer, the model and the decode
// loops. The tokenizer reserves these three ids in every vocabulary.
struct SpecialTokens {
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kBos = 2;  // decoder start
};

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 64;
  int n_enc_layers = 2;
  int n_dec_layers = 8;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 32;
  int rel_pos_buckets = 32;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Per-head projection matrices: wq/wk/wv are [d_model x head_dim], wo is
// [head_dim x d_model]; head outputs are summed, which is the concat+matmul
// formulation written per head.
struct AttentionWeights {
  std::vector<Tensor> wq, wk, wv, wo;
};

struct EncoderLayer {
  Tensor norm1_gain;
  AttentionWeights self_attn;
  Tensor norm2_gain;
  Tensor ffn_w1, ffn_w2;
};

struct DecoderLayer {
  Tensor norm1_gain;
  AttentionWeights self_attn;
  Tensor norm2_gain;
  AttentionWeights cross_attn;
  Tensor norm3_gain;
  Tensor ffn_w1, ffn_w2;
};

// T5-style pre-norm encoder-decoder, no biases anywhere, ReLU feed-forward,
// relative-position bias in the self-attention of each stack (one table per
// stack, shared across its layers), untied bias-free LM head shared by every
// decoder layer's early-exit projection.
struct ModelParams {
  ModelConfig config;

  Tensor token_embedding;          // [vocab x d_model]
  Tensor enc_rel_bias;             // [buckets x heads], bidirectional buckets
  Tensor dec_rel_bias;             // [buckets x heads], causal buckets
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  Tensor enc_final_norm_gain;
  Tensor dec_final_norm_gain;
  Tensor lm_head;                  // [d_model x vocab]

  static ModelParams init(const ModelConfig& config, Rng& rng);

  // Visits every parameter tensor with a stable name in a fixed order.
  // Initialization, checkpointing, gradient collection and the optimizer all
  // rely on this single enumeration.
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

// Mid-layer steering hook: before decoder layer `layer + 1` consumes the
// residual stream, strength * direction/||direction|| is added to it.
// position < 0 applies the shift at every decoder position (the default,
// mirroring per-step injection under an incremental decoder with caches);
// position >= 0 restricts it to that single position (first-answer-token
// mode).
struct InjectionSpec {
  int layer = 0;
  Tensor direction;
  double strength = 0.0;
  int position = -1;
};

// Per-layer view of one decode step at the last prefix position. Layer
// indices are 0-based block outputs; entry n_dec_layers-1 is the final
// block. hidden_states holds raw residual streams; projected_logits[j] is
// the shared LM head applied to them, except the final entry, which applies
// the stack's final normalization first and therefore equals the model's
// actual output logits.
struct LayerTrace {
  std::vector<Tensor> hidden_states;    // each [d_model]
  std::vector<Tensor> projected_logits; // each [vocab]
  std::vector<Tensor> projected_dist;   // each [vocab], softmax of the above
};

struct DecodeStep {
  Tensor final_logits;  // [vocab], last prefix position
  LayerTrace trace;
};

Tensor encode(const ModelParams& params, const std::vector<int>& input_tokens);

DecodeStep decode_step(const ModelParams& params, const Tensor& enc_states,
                       const std::vector<int>& prefix,
                       const InjectionSpec* injection = nullptr);

// Same forward as decode_step, but keeps the tape alive so a scalar built on
// top of final_logits_node can be differentiated with respect to any
// decoder layer's residual stream.
struct RecordedDecode {
  Tape tape;
  std::vector<ValueId> hidden_nodes;  // per decoder layer, [T x d_model]
  ValueId final_logits_node = -1;     // [vocab], last prefix position
  LayerTrace trace;
  Tensor final_logits;
};

RecordedDecode decode_step_recorded(const ModelParams& params, const Tensor& enc_states,
                                    const std::vector<int>& prefix,
                                    const InjectionSpec* injection = nullptr);

// Shared LM head applied to one hidden vector. Pure linear map; the same
// kernel the traces use, so trace projections match it bitwise.
Tensor project_layer(const ModelParams& params, const Tensor& hidden);

struct SeqPair {
  std::vector<int> input;   // encoder tokens
  std::vector<int> target;  // answer tokens, specials added internally
};

// Mean token-level cross-entropy over all (non-pad) target positions of the
// batch, differentiable through the returned tape.
struct LossRecord {
  Tape tape;
  ValueId loss = -1;
  std::vector<std::string> param_names;
  std::vector<ValueId> param_nodes;  // aligned with param_names
  double loss_value = 0.0;
};

LossRecord training_loss(const ModelParams& params, const std::vector<SeqPair>& batch);

// Cross-entropy composition used by training_loss, exposed for direct tests:
// -(1/n) sum over non-pad positions of log_softmax(logits)[target].
ValueId token_cross_entropy(Tape& tape, ValueId logits_rows, const std::vector<int>& targets,
                            int pad_id);

// T5 relative-position bucketing (bidirectional for the encoder, causal for
// the decoder), max_distance fixed at 128.
int relative_position_bucket(int relative_position, bool bidirectional, int num_buckets);

// Checkpoint round-trips bit-exactly: load(save(p)) == p and
// save(load(f)) == f byte for byte.
void save_checkpoint(const ModelParams& params, const std::string& path,
                     const std::string& config_hash);
ModelParams load_checkpoint(const std::string& path, std::string* config_hash_out = nullptr);

}  // namespace steerlab
