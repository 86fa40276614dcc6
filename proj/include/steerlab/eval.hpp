#pragma once

#include <string>
#include <vector>

#include "steerlab/decoding.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/tasks.hpp"

namespace steerlab {

struct EvalCondition {
  enum class Kind { kBaseline, kDola, kSteered };
  Kind kind = Kind::kBaseline;
  DoLaConfig dola;         // kDola
  SteeringVector vector;   // kSteered
  double alpha = 0.0;      // kSteered
  int inject_position = -1;

  static EvalCondition baseline();
  static EvalCondition with_dola(DoLaConfig config);
  static EvalCondition steered(SteeringVector vector, double alpha, int inject_position = -1);
  std::string label() const;
};

struct ExampleRecord {
  int example_id = 0;
  std::vector<int> emitted;
  bool followed = false;
  int rank_target = 0;  // first-step rank of the instructed token
  int rank_trap = 0;    // first-step rank of the memorized token
};

struct EvalResult {
  std::string label;
  double accuracy = 0.0;
  std::vector<ExampleRecord> records;
};

// 1-based rank under descending score; ties break by ascending token id.
int rank_of(const Tensor& scores, int token);

// Instruction followed iff the first non-special emitted token is the
// instructed one (strict rule).
bool score_example(const std::vector<int>& emitted, const TrapExample& example);

EvalResult evaluate(const ModelParams& params, const EvalCondition& condition,
                    const std::vector<TrapExample>& eval_set, int max_len);

// Per decoder layer: the probe token's rank under q_j and JSD(q_N, q_j),
// all taken from one decode step at the answer position.
struct RankTrace {
  std::vector<int> ranks;
  std::vector<double> jsds;
};

RankTrace trace_token(const ModelParams& params, const std::vector<int>& prompt, int probe_token);

// Verifiable instruction checks on token sequences: exact trailing match /
// membership anywhere.
bool verify_startend(const std::vector<int>& text, const std::vector<int>& required_suffix);
bool verify_keyword(const std::vector<int>& text, int keyword);

struct SweepReport {
  std::vector<int> layers;
  std::vector<double> alphas;
  std::vector<std::vector<double>> accuracy;  // [layer][alpha]
  double baseline_accuracy = 0.0;
  int best_layer = -1;
  double best_alpha = 0.0;
  double best_accuracy = 0.0;
  std::vector<EvalResult> cells;  // row-major over (layer, alpha)
};

// Mines one vector per layer from the mining set and scores every (layer,
// alpha) cell on the eval set. The sweep driver lives here rather than in
// the steering module so it can reuse evaluate().
SweepReport sweep(const ModelParams& params, const std::vector<ContrastPair>& mining_set,
                  const std::vector<int>& layers, const std::vector<double>& alphas,
                  const std::vector<TrapExample>& eval_set, int max_len,
                  int inject_position = -1);

// Report emission. All emitters are pure functions of their inputs, so
// re-emitting identical inputs yields byte-identical files.
std::string sweep_grid_csv(const SweepReport& report, const std::string& config_hash);
std::string sweep_best_by_layer_csv(const SweepReport& report, const std::string& config_hash);
std::string sweep_summary_json(const SweepReport& report, const std::string& config_hash);
std::string eval_records_jsonl(const EvalResult& result, const std::string& config_hash);
std::string eval_summary_json(const EvalResult& result, const std::string& config_hash);
std::string trace_csv(const RankTrace& trace, const std::string& config_hash);

// Parses a grid produced by sweep_grid_csv back into axes + accuracy matrix
// (round-trip check surface).
void parse_sweep_grid(const std::string& text, std::vector<int>* layers,
                      std::vector<double>* alphas, std::vector<std::vector<double>>* accuracy);

}  // namespace steerlab
