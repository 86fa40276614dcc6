#pragma once

#include <string>
#include <vector>

#include "steerlab/decoding.hpp"
#include "steerlab/model.hpp"

namespace steerlab {

// One mining example: an instruction prompt whose next token is contested
// between the instructed target and a memorized trap.
struct ContrastPair {
  std::vector<int> input_tokens;    // encoder tokens (the wrapped prompt)
  std::vector<int> decoder_prefix;  // up to the answer position, starts with BOS
  int target_token = -1;            // satisfies the instruction
  int competing_token = -1;         // the memorized trap

  void validate(int vocab_size) const;
};

// Negated mean of per-example contrastive-loss gradients at one decoder
// layer. Stored un-normalized; unit normalization happens at injection.
struct SteeringVector {
  int layer = 0;
  Tensor direction;  // [d_model]
  int n_examples = 0;
};

struct MiningConfig {
  int layer = 0;
  std::vector<ContrastPair> examples;
};

// log P(competing) - log P(target) under softmax(final_logits). Positive
// when the trap is preferred.
double contrastive_loss(const Tensor& final_logits, const ContrastPair& pair);

// Same quantity as a tape node, for differentiation.
ValueId contrastive_loss_node(Tape& tape, ValueId final_logits, const ContrastPair& pair);

// d(contrastive loss)/d(h_layer) at the answer position (the last prefix
// position), computed on an un-injected forward pass.
Tensor mine_gradient(const ModelParams& params, const ContrastPair& pair, int layer);

// direction = -(1/N) * sum of per-example gradients, accumulated in example
// order.
SteeringVector mine_vector(const ModelParams& params, const MiningConfig& config);

// Greedy decoding with the vector injected at its mined layer. alpha = 0
// reproduces the baseline bitwise. inject_position < 0 injects at every
// decoder position (per-step mode); otherwise only at that position.
DecodeResult steer_decode(const ModelParams& params, const Tensor& enc_states,
                          const SteeringVector& vector, double alpha, int max_len,
                          int inject_position = -1);

// Round-trips exactly: layer, example count, then full-precision entries.
std::string steering_vector_to_string(const SteeringVector& v, const std::string& config_hash);
void save_steering_vector(const SteeringVector& v, const std::string& path,
                          const std::string& config_hash);
SteeringVector load_steering_vector(const std::string& path,
                                    std::string* config_hash_out = nullptr);

}  // namespace steerlab
