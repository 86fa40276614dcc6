#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "steerlab/decoding.hpp"
#include "steerlab/model.hpp"
#include "steerlab/tasks.hpp"

namespace steerlab {

struct SteeringGridConfig {
  std::vector<int> layers;    // empty -> all decoder layers
  std::vector<double> alphas = {0.0, 1.0, 10.0, 100.0, 1000.0, 3000.0};
  bool inject_every_position = true;  // off -> first answer position only
};

struct TrainingPhases {
  int memorize_steps = 1400;
  double memorize_lr = 3e-3;
  int instruct_steps = 60;
  double instruct_lr = 3e-4;
  double replay_fraction = 0.5;  // share of pretrain examples mixed into tuning
  int batch_size = 16;
};

// Declarative experiment description; one file drives every subcommand.
// Defaults mirror the reference setup: repetition penalty 1.2, 100 mining /
// 300 eval examples, even-indexed DoLa candidates, alpha grid through 3000.
struct ExperimentConfig {
  uint64_t run_seed = 42;
  ModelConfig model;
  CorpusConfig corpus;
  TrainingPhases training;
  DoLaConfig dola;
  SteeringGridConfig steering;
  int max_decode_len = 4;

  std::vector<int> dola_candidates() const;
  std::vector<int> steering_layers() const;

  std::string canonical_json() const;
  std::string hash() const;  // FNV-1a over canonical_json

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;
};

// Entry point used by the binary and by tests. Exit codes: 0 success,
// 1 usage/config error, 2 runtime error.
int run_cli(const std::vector<std::string>& args);

}  // namespace steerlab
