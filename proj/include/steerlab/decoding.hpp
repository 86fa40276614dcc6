#pragma once

#include <utility>
#include <vector>

#include "steerlab/model.hpp"

namespace steerlab {

// Layer-contrast decoding configuration. Candidate layers are 0-based
// decoder block indices; the final block is the mature layer and is never a
// candidate. An empty candidate set in a config file means "use the
// default": every even-indexed decoder layer below the final one.
struct DoLaConfig {
  std::vector<int> candidate_layers;
  double contrast_lambda = 1.0;
  double repetition_penalty = 1.2;
  // Mature-probability floor relative to the max-prob token; tokens below it
  // are masked out before the contrast is applied. Off (< 0) by default.
  double plausibility_alpha = -1.0;

  static std::vector<int> default_candidates(int n_dec_layers);
  void validate(int n_dec_layers) const;
};

struct StepDiagnostics {
  int step = 0;
  int premature_layer = -1;  // -1 for plain greedy
  std::vector<std::pair<int, double>> candidate_jsd;  // (layer, JSD(q_N, q_j))
  std::vector<std::pair<int, double>> top_pre;        // top-5 (token, logit) before contrast
  std::vector<std::pair<int, double>> top_post;       // top-5 (token, logit) actually ranked
};

struct DecodeResult {
  std::vector<int> tokens;
  std::vector<StepDiagnostics> steps;  // one per emitted token
  Tensor first_scores;  // full post-processed scores that ranked the first token
};

// Jensen-Shannon divergence, natural log, in [0, ln 2]. Inputs must be
// distributions (nonnegative, summing to 1 within 1e-9).
double jsd(const Tensor& p, const Tensor& q);

// argmax over candidates of JSD(q_N, q_j); ties break toward the smallest
// layer index.
int select_premature_layer(const LayerTrace& trace, const DoLaConfig& config, int n_dec_layers);

// mature + lambda * (mature - premature)
Tensor contrast_logits(const Tensor& mature, const Tensor& premature, double lambda);

// For every distinct previously generated token id: positive logits are
// divided by the penalty, non-positive ones multiplied by it.
Tensor apply_repetition_penalty(const Tensor& logits, const std::vector<int>& generated,
                                double penalty);

// Highest-scoring token; ties break toward the smallest token id.
int argmax_token(const Tensor& scores);

std::vector<std::pair<int, double>> top_k_tokens(const Tensor& scores, int k);

DecodeResult greedy_decode(const ModelParams& params, const Tensor& enc_states, int max_len,
                           const InjectionSpec* injection = nullptr);

// Per step: trace -> select premature layer -> contrast -> optional
// plausibility mask -> repetition penalty -> argmax.
DecodeResult dola_decode(const ModelParams& params, const Tensor& enc_states, int max_len,
                         const DoLaConfig& config);

// One JSON object per step: step, premature layer, per-candidate JSD, top-5
// pre/post tokens with logits.
std::string diagnostics_to_jsonl(const DecodeResult& result);

}  // namespace steerlab
