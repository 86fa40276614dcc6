#include "steerlab/cli.hpp"

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "steerlab/eval.hpp"
#include "steerlab/io.hpp"
#include "steerlab/steering.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace steerlab {

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

nlohmann::json dola_to_json(const DoLaConfig& d) {
  nlohmann::json j;
  j["candidate_layers"] = d.candidate_layers;
  j["lambda"] = d.contrast_lambda;
  j["repetition_penalty"] = d.repetition_penalty;
  j["plausibility_alpha"] = d.plausibility_alpha;
  return j;
}

void dola_from_json(const nlohmann::json& j, DoLaConfig* d) {
  d->candidate_layers = j.value("candidate_layers", d->candidate_layers);
  d->contrast_lambda = j.value("lambda", d->contrast_lambda);
  d->repetition_penalty = j.value("repetition_penalty", d->repetition_penalty);
  d->plausibility_alpha = j.value("plausibility_alpha", d->plausibility_alpha);
}

}  // namespace

std::vector<int> ExperimentConfig::dola_candidates() const {
  if (!dola.candidate_layers.empty()) return dola.candidate_layers;
  return DoLaConfig::default_candidates(model.n_dec_layers);
}

std::vector<int> ExperimentConfig::steering_layers() const {
  if (!steering.layers.empty()) return steering.layers;
  std::vector<int> all;
  for (int l = 0; l < model.n_dec_layers; ++l) all.push_back(l);
  return all;
}

std::string ExperimentConfig::canonical_json() const {
  nlohmann::json j;
  j["run_seed"] = run_seed;
  j["model"] = {{"vocab_size", model.vocab_size},     {"d_model", model.d_model},
                {"n_enc_layers", model.n_enc_layers}, {"n_dec_layers", model.n_dec_layers},
                {"n_heads", model.n_heads},           {"d_ff", model.d_ff},
                {"max_seq_len", model.max_seq_len},   {"rel_pos_buckets", model.rel_pos_buckets}};
  j["corpus"] = {{"seed", corpus.seed},
                 {"n_templates", corpus.n_templates},
                 {"n_mine", corpus.n_mine},
                 {"n_eval", corpus.n_eval},
                 {"prefix_min_words", corpus.prefix_min_words},
                 {"prefix_max_words", corpus.prefix_max_words},
                 {"alternatives_per_template", corpus.alternatives_per_template},
                 {"ending_pool", corpus.ending_pool},
                 {"prefix_pool", corpus.prefix_pool}};
  j["training"] = {{"memorize_steps", training.memorize_steps},
                   {"memorize_lr", training.memorize_lr},
                   {"instruct_steps", training.instruct_steps},
                   {"instruct_lr", training.instruct_lr},
                   {"replay_fraction", training.replay_fraction},
                   {"batch_size", training.batch_size}};
  j["dola"] = dola_to_json(dola);
  j["steering"] = {{"layers", steering.layers},
                   {"alphas", steering.alphas},
                   {"inject_every_position", steering.inject_every_position}};
  j["max_decode_len"] = max_decode_len;
  return j.dump(2) + "\n";
}

std::string ExperimentConfig::hash() const { return hash_to_hex(fnv1a64(canonical_json())); }

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.run_seed = j.value("run_seed", c.run_seed);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
      c.model.d_model = m.value("d_model", c.model.d_model);
      c.model.n_enc_layers = m.value("n_enc_layers", c.model.n_enc_layers);
      c.model.n_dec_layers = m.value("n_dec_layers", c.model.n_dec_layers);
      c.model.n_heads = m.value("n_heads", c.model.n_heads);
      c.model.d_ff = m.value("d_ff", c.model.d_ff);
      c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
      c.model.rel_pos_buckets = m.value("rel_pos_buckets", c.model.rel_pos_buckets);
    }
    if (j.contains("corpus")) {
      const auto& k = j.at("corpus");
      c.corpus.seed = k.value("seed", c.corpus.seed);
      c.corpus.n_templates = k.value("n_templates", c.corpus.n_templates);
      c.corpus.n_mine = k.value("n_mine", c.corpus.n_mine);
      c.corpus.n_eval = k.value("n_eval", c.corpus.n_eval);
      c.corpus.prefix_min_words = k.value("prefix_min_words", c.corpus.prefix_min_words);
      c.corpus.prefix_max_words = k.value("prefix_max_words", c.corpus.prefix_max_words);
      c.corpus.alternatives_per_template =
          k.value("alternatives_per_template", c.corpus.alternatives_per_template);
      c.corpus.ending_pool = k.value("ending_pool", c.corpus.ending_pool);
      c.corpus.prefix_pool = k.value("prefix_pool", c.corpus.prefix_pool);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.memorize_steps = t.value("memorize_steps", c.training.memorize_steps);
      c.training.memorize_lr = t.value("memorize_lr", c.training.memorize_lr);
      c.training.instruct_steps = t.value("instruct_steps", c.training.instruct_steps);
      c.training.instruct_lr = t.value("instruct_lr", c.training.instruct_lr);
      c.training.replay_fraction = t.value("replay_fraction", c.training.replay_fraction);
      c.training.batch_size = t.value("batch_size", c.training.batch_size);
    }
    if (j.contains("dola")) dola_from_json(j.at("dola"), &c.dola);
    if (j.contains("steering")) {
      const auto& s = j.at("steering");
      c.steering.layers = s.value("layers", c.steering.layers);
      c.steering.alphas = s.value("alphas", c.steering.alphas);
      c.steering.inject_every_position =
          s.value("inject_every_position", c.steering.inject_every_position);
    }
    c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: bad field: ") + e.what());
  }
  c.model.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_json_text(read_file(path));
}

void ExperimentConfig::save(const std::string& path) const { write_file(path, canonical_json()); }

namespace {

// Tracks the files a subcommand intends to write; on failure everything
// already written is removed so no partial artifact set survives.
class ArtifactSet {
 public:
  ArtifactSet(std::string out_dir, bool overwrite)
      : out_dir_(std::move(out_dir)), overwrite_(overwrite) {
    std::filesystem::create_directories(out_dir_);
  }

  std::string path(const std::string& name) const { return out_dir_ + "/" + name; }

  void reserve(const std::string& name) {
    std::string p = path(name);
    if (!overwrite_ && file_exists(p)) {
      throw UsageError("output already exists (use --overwrite): " + p);
    }
    planned_.push_back(p);
  }

  void write(const std::string& name, const std::string& content) {
    std::string p = path(name);
    write_file(p, content);
    written_.push_back(p);
  }

  void write_manifest(const std::string& name, const std::string& command,
                      const std::string& config_hash, uint64_t run_seed) {
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["run_seed"] = run_seed;
    std::vector<std::string> arts;
    for (const std::string& p : written_) arts.push_back(std::filesystem::path(p).filename());
    j["artifacts"] = arts;
    write(name, j.dump(2) + "\n");
  }

  void remove_written() {
    for (const std::string& p : written_) {
      std::error_code ec;
      std::filesystem::remove(p, ec);
    }
  }

 private:
  std::string out_dir_;
  bool overwrite_;
  std::vector<std::string> planned_;
  std::vector<std::string> written_;
};

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<uint64_t> seed_override;
  bool overwrite = false;
};

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig config =
      args.config_path.empty() ? ExperimentConfig() : ExperimentConfig::load(args.config_path);
  if (args.seed_override) config.run_seed = *args.seed_override;
  return config;
}

uint64_t derive_seed(uint64_t run_seed, uint64_t stream) {
  // splitmix64 step keyed by stream, so phases get independent streams.
  uint64_t x = run_seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

ModelParams load_run_checkpoint(const ArtifactSet& artifacts, const ExperimentConfig& config) {
  std::string hash;
  ModelParams params = load_checkpoint(artifacts.path("checkpoint.txt"), &hash);
  if (hash != config.hash()) {
    throw UsageError("checkpoint was produced under a different config (hash " + hash +
                     " != " + config.hash() + ")");
  }
  if (!(params.config == config.model)) {
    throw UsageError("checkpoint model shape does not match config");
  }
  return params;
}

void cmd_gen(const ExperimentConfig& config, ArtifactSet& artifacts) {
  artifacts.reserve("corpus_pretrain.jsonl");
  artifacts.reserve("corpus_mining.jsonl");
  artifacts.reserve("corpus_eval.jsonl");
  artifacts.reserve("vocab.txt");
  artifacts.reserve("manifest_gen.json");

  Corpus corpus = generate_corpus(config.corpus, config.model.vocab_size);
  artifacts.write("corpus_pretrain.jsonl", corpus_pretrain_jsonl(corpus));
  artifacts.write("corpus_mining.jsonl", corpus_mining_jsonl(corpus));
  artifacts.write("corpus_eval.jsonl", corpus_eval_jsonl(corpus));
  std::ostringstream vocab;
  for (int i = 0; i < corpus.vocab.size(); ++i) {
    vocab << i << "\t" << corpus.vocab.word(i) << "\n";
  }
  artifacts.write("vocab.txt", vocab.str());
  artifacts.write_manifest("manifest_gen.json", "gen", config.hash(), config.run_seed);
  std::cout << "gen: " << corpus.pretrain.size() << " templates, " << corpus.mining.size()
            << " mining pairs, " << corpus.eval.size() << " eval examples\n";
}

void cmd_train(const ExperimentConfig& config, ArtifactSet& artifacts) {
  artifacts.reserve("checkpoint.txt");
  artifacts.reserve("loss_curve.csv");
  artifacts.reserve("train_summary.json");
  artifacts.reserve("manifest_train.json");

  Corpus corpus = generate_corpus(config.corpus, config.model.vocab_size);
  Rng init_rng(derive_seed(config.run_seed, 0));
  ModelParams params = ModelParams::init(config.model, init_rng);

  TrainConfig phase1;
  phase1.steps = config.training.memorize_steps;
  phase1.learning_rate = config.training.memorize_lr;
  phase1.batch_size = config.training.batch_size;
  phase1.seed = derive_seed(config.run_seed, 1);
  TrainResult r1 = train_memorizer(params, corpus.pretrain, phase1);

  // Light instruction tuning on non-eval templates, with pretrain replay so
  // the memorized mapping survives.
  std::vector<SeqPair> tune_set = corpus.instruct_tune;
  int replay = static_cast<int>(config.training.replay_fraction *
                                static_cast<double>(corpus.instruct_tune.size()));
  Rng replay_rng(derive_seed(config.run_seed, 2));
  for (int i = 0; i < replay; ++i) {
    int pick = replay_rng.uniform_int(0, static_cast<int>(corpus.pretrain.size()) - 1);
    tune_set.push_back(corpus.pretrain[static_cast<size_t>(pick)]);
  }
  TrainConfig phase2;
  phase2.steps = config.training.instruct_steps;
  phase2.learning_rate = config.training.instruct_lr;
  phase2.batch_size = config.training.batch_size;
  phase2.seed = derive_seed(config.run_seed, 3);
  TrainResult r2 = train_memorizer(params, tune_set, phase2);

  double memo_acc = memorization_accuracy(params, corpus.pretrain);

  save_checkpoint(params, artifacts.path("checkpoint.txt"), config.hash());
  std::ostringstream curve;
  curve << "step,phase,loss\n";
  for (size_t i = 0; i < r1.loss_curve.size(); ++i) {
    curve << i << ",memorize," << double_to_string(r1.loss_curve[i]) << "\n";
  }
  for (size_t i = 0; i < r2.loss_curve.size(); ++i) {
    curve << (r1.loss_curve.size() + i) << ",instruct," << double_to_string(r2.loss_curve[i])
          << "\n";
  }
  artifacts.write("loss_curve.csv", curve.str());
  nlohmann::json summary;
  summary["config_hash"] = config.hash();
  summary["memorization_accuracy"] = memo_acc;
  summary["final_loss"] =
      r2.loss_curve.empty() ? (r1.loss_curve.empty() ? 0.0 : r1.loss_curve.back())
                            : r2.loss_curve.back();
  artifacts.write("train_summary.json", summary.dump(2) + "\n");
  artifacts.write_manifest("manifest_train.json", "train", config.hash(), config.run_seed);
  std::cout << "train: memorization accuracy " << memo_acc << "\n";
}

void cmd_eval(const ExperimentConfig& config, ArtifactSet& artifacts, const std::string& condition) {
  if (condition != "baseline" && condition != "dola") {
    throw UsageError("eval: --condition must be 'baseline' or 'dola'");
  }
  std::string records_name = "eval_" + condition + ".jsonl";
  std::string summary_name = "eval_" + condition + "_summary.json";
  std::string manifest_name = "manifest_eval_" + condition + ".json";
  artifacts.reserve(records_name);
  artifacts.reserve(summary_name);
  artifacts.reserve(manifest_name);

  Corpus corpus = generate_corpus(config.corpus, config.model.vocab_size);
  ModelParams params = load_run_checkpoint(artifacts, config);

  EvalCondition cond = EvalCondition::baseline();
  if (condition == "dola") {
    DoLaConfig dola = config.dola;
    dola.candidate_layers = config.dola_candidates();
    cond = EvalCondition::with_dola(dola);
  }
  EvalResult result = evaluate(params, cond, corpus.eval, config.max_decode_len);
  artifacts.write(records_name, eval_records_jsonl(result, config.hash()));
  artifacts.write(summary_name, eval_summary_json(result, config.hash()));
  artifacts.write_manifest(manifest_name, "eval", config.hash(), config.run_seed);
  std::cout << "eval " << condition << ": accuracy " << result.accuracy << "\n";
}

void cmd_mine(const ExperimentConfig& config, ArtifactSet& artifacts, int layer) {
  if (layer < 0 || layer >= config.model.n_dec_layers) {
    throw UsageError("mine: --layer out of range");
  }
  std::string vec_name = "steering_vector_l" + std::to_string(layer) + ".txt";
  std::string manifest_name = "manifest_mine_l" + std::to_string(layer) + ".json";
  artifacts.reserve(vec_name);
  artifacts.reserve(manifest_name);

  Corpus corpus = generate_corpus(config.corpus, config.model.vocab_size);
  ModelParams params = load_run_checkpoint(artifacts, config);
  MiningConfig mc;
  mc.layer = layer;
  mc.examples = corpus.mining;
  SteeringVector vec = mine_vector(params, mc);
  artifacts.write(vec_name, steering_vector_to_string(vec, config.hash()));
  artifacts.write_manifest(manifest_name, "mine", config.hash(), config.run_seed);
  std::cout << "mine: layer " << layer << ", |v| " << vec.direction.norm() << ", N "
            << vec.n_examples << "\n";
}

void cmd_sweep(const ExperimentConfig& config, ArtifactSet& artifacts,
               std::optional<int> only_layer, std::optional<double> only_alpha) {
  artifacts.reserve("sweep_grid.csv");
  artifacts.reserve("sweep_best_by_layer.csv");
  artifacts.reserve("sweep_records.jsonl");
  artifacts.reserve("sweep_summary.json");
  artifacts.reserve("manifest_sweep.json");

  Corpus corpus = generate_corpus(config.corpus, config.model.vocab_size);
  ModelParams params = load_run_checkpoint(artifacts, config);

  std::vector<int> layers = config.steering_layers();
  std::vector<double> alphas = config.steering.alphas;
  if (only_layer) layers = {*only_layer};
  if (only_alpha) alphas = {*only_alpha};
  int inject_pos = config.steering.inject_every_position ? -1 : 0;
  SweepReport report = sweep(params, corpus.mining, layers, alphas, corpus.eval,
                             config.max_decode_len, inject_pos);

  artifacts.write("sweep_grid.csv", sweep_grid_csv(report, config.hash()));
  artifacts.write("sweep_best_by_layer.csv", sweep_best_by_layer_csv(report, config.hash()));
  std::ostringstream records;
  for (const EvalResult& cell : report.cells) records << eval_records_jsonl(cell, config.hash());
  artifacts.write("sweep_records.jsonl", records.str());
  artifacts.write("sweep_summary.json", sweep_summary_json(report, config.hash()));
  artifacts.write_manifest("manifest_sweep.json", "sweep", config.hash(), config.run_seed);
  std::cout << "sweep: baseline " << report.baseline_accuracy << ", best layer "
            << report.best_layer << " alpha " << report.best_alpha << " accuracy "
            << report.best_accuracy << "\n";
}

void cmd_trace(const ExperimentConfig& config, ArtifactSet& artifacts, int prompt_id,
               const std::string& token_arg) {
  Corpus corpus = generate_corpus(config.corpus, config.model.vocab_size);
  if (prompt_id < 0 || prompt_id >= static_cast<int>(corpus.eval.size())) {
    throw UsageError("trace: --prompt-id out of range");
  }
  const TrapExample& example = corpus.eval[static_cast<size_t>(prompt_id)];
  int probe = example.instructed_token;
  if (!token_arg.empty()) {
    try {
      size_t pos = 0;
      probe = std::stoi(token_arg, &pos);
      if (pos != token_arg.size()) probe = corpus.vocab.id(token_arg);
    } catch (const std::exception&) {
      probe = corpus.vocab.id(token_arg);
    }
  }
  std::string name = "trace_p" + std::to_string(prompt_id) + "_t" + std::to_string(probe) + ".csv";
  std::string manifest_name = "manifest_trace_p" + std::to_string(prompt_id) + ".json";
  artifacts.reserve(name);
  artifacts.reserve(manifest_name);

  ModelParams params = load_run_checkpoint(artifacts, config);
  RankTrace trace = trace_token(params, example.prompt, probe);
  artifacts.write(name, trace_csv(trace, config.hash()));
  artifacts.write_manifest(manifest_name, "trace", config.hash(), config.run_seed);
  std::cout << "trace: prompt " << prompt_id << " probe " << probe << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale layer-contrast decoding and activation-steering laboratory"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string condition = "baseline";
  int layer = -1;
  int prompt_id = 0;
  std::string token_arg;
  std::optional<int> sweep_layer;
  std::optional<double> sweep_alpha;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "experiment config JSON (defaults if omitted)");
    cmd->add_option("--out", common.out_dir, "output directory")->required();
    cmd->add_option("--seed", common.seed_override, "override the config run seed");
    cmd->add_flag("--overwrite", common.overwrite, "allow replacing existing artifacts");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate and export the synthetic corpus");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "train the memorizer and write a checkpoint");
  add_common(train);
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a decoding condition on the eval set");
  add_common(eval_cmd);
  eval_cmd->add_option("--condition", condition, "baseline | dola")->required();
  CLI::App* mine = app.add_subcommand("mine", "mine a steering vector at one layer");
  add_common(mine);
  mine->add_option("--layer", layer, "decoder layer to mine at")->required();
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "layer x alpha steering sweep");
  add_common(sweep_cmd);
  int sweep_layer_raw = -1;
  double sweep_alpha_raw = -1.0;
  CLI::Option* sl = sweep_cmd->add_option("--layer", sweep_layer_raw, "restrict to one layer");
  CLI::Option* sa = sweep_cmd->add_option("--alpha", sweep_alpha_raw, "restrict to one alpha");
  CLI::App* trace_cmd = app.add_subcommand("trace", "layerwise rank trace for one prompt");
  add_common(trace_cmd);
  trace_cmd->add_option("--prompt-id", prompt_id, "eval example index")->required();
  trace_cmd->add_option("--token", token_arg, "probe token id or word (default: instructed token)");

  std::vector<const char*> argv;
  argv.push_back("steerlab");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      app.exit(e);
      return 0;
    }
    std::cerr << "usage-error: " << e.what() << "\n";
    return 1;
  }

  try {
    ExperimentConfig config = resolve_config(common);
    ArtifactSet artifacts(common.out_dir, common.overwrite);
    try {
      if (gen->parsed()) cmd_gen(config, artifacts);
      else if (train->parsed()) cmd_train(config, artifacts);
      else if (eval_cmd->parsed()) cmd_eval(config, artifacts, condition);
      else if (mine->parsed()) cmd_mine(config, artifacts, layer);
      else if (sweep_cmd->parsed()) {
        if (sl->count() > 0) sweep_layer = sweep_layer_raw;
        if (sa->count() > 0) sweep_alpha = sweep_alpha_raw;
        cmd_sweep(config, artifacts, sweep_layer, sweep_alpha);
      } else if (trace_cmd->parsed()) {
        cmd_trace(config, artifacts, prompt_id, token_arg);
      }
    } catch (...) {
      artifacts.remove_written();
      throw;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage-error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage-error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime-error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace steerlab
