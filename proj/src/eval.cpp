#include "steerlab/eval.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "steerlab/io.hpp"

#include <json.hpp>

namespace steerlab {

EvalCondition EvalCondition::baseline() {
  EvalCondition c;
  c.kind = Kind::kBaseline;
  return c;
}

EvalCondition EvalCondition::with_dola(DoLaConfig config) {
  EvalCondition c;
  c.kind = Kind::kDola;
  c.dola = std::move(config);
  return c;
}

EvalCondition EvalCondition::steered(SteeringVector vector, double alpha, int inject_position) {
  EvalCondition c;
  c.kind = Kind::kSteered;
  c.vector = std::move(vector);
  c.alpha = alpha;
  c.inject_position = inject_position;
  return c;
}

std::string EvalCondition::label() const {
  switch (kind) {
    case Kind::kBaseline:
      return "baseline";
    case Kind::kDola:
      return "dola";
    case Kind::kSteered:
      return "steered(l=" + std::to_string(vector.layer) + ",alpha=" + double_to_string(alpha) + ")";
  }
  return "unknown";
}

int rank_of(const Tensor& scores, int token) {
  if (token < 0 || token >= scores.dim(0)) throw std::invalid_argument("rank_of: token out of range");
  double s = scores.at(token);
  int rank = 1;
  for (int i = 0; i < scores.dim(0); ++i) {
    if (scores.at(i) > s) ++rank;
    else if (scores.at(i) == s && i < token) ++rank;
  }
  return rank;
}

bool score_example(const std::vector<int>& emitted, const TrapExample& example) {
  for (int t : emitted) {
    if (t == SpecialTokens::kPad || t == SpecialTokens::kEos || t == SpecialTokens::kBos) continue;
    return t == example.instructed_token;
  }
  return false;
}

EvalResult evaluate(const ModelParams& params, const EvalCondition& condition,
                    const std::vector<TrapExample>& eval_set, int max_len) {
  if (eval_set.empty()) throw std::invalid_argument("evaluate: empty eval set");
  EvalResult result;
  result.label = condition.label();
  int hits = 0;
  for (size_t i = 0; i < eval_set.size(); ++i) {
    const TrapExample& ex = eval_set[i];
    Tensor enc = encode(params, ex.prompt);
    DecodeResult out;
    switch (condition.kind) {
      case EvalCondition::Kind::kBaseline:
        out = greedy_decode(params, enc, max_len);
        break;
      case EvalCondition::Kind::kDola:
        out = dola_decode(params, enc, max_len, condition.dola);
        break;
      case EvalCondition::Kind::kSteered:
        out = steer_decode(params, enc, condition.vector, condition.alpha, max_len,
                           condition.inject_position);
        break;
    }
    ExampleRecord rec;
    rec.example_id = static_cast<int>(i);
    rec.emitted = out.tokens;
    rec.followed = score_example(out.tokens, ex);
    rec.rank_target = rank_of(out.first_scores, ex.instructed_token);
    rec.rank_trap = rank_of(out.first_scores, ex.trap_token);
    if (rec.followed) ++hits;
    result.records.push_back(std::move(rec));
  }
  result.accuracy = static_cast<double>(hits) / static_cast<double>(eval_set.size());
  return result;
}

RankTrace trace_token(const ModelParams& params, const std::vector<int>& prompt, int probe_token) {
  if (probe_token < 0 || probe_token >= params.config.vocab_size) {
    throw std::invalid_argument("trace_token: probe token out of range");
  }
  Tensor enc = encode(params, prompt);
  DecodeStep step = decode_step(params, enc, {SpecialTokens::kBos}, nullptr);
  const Tensor& mature = step.trace.projected_dist.back();
  RankTrace trace;
  for (int j = 0; j < params.config.n_dec_layers; ++j) {
    const Tensor& dist = step.trace.projected_dist[static_cast<size_t>(j)];
    trace.ranks.push_back(rank_of(dist, probe_token));
    trace.jsds.push_back(jsd(mature, dist));
  }
  return trace;
}

bool verify_startend(const std::vector<int>& text, const std::vector<int>& required_suffix) {
  if (required_suffix.empty()) return true;
  if (text.size() < required_suffix.size()) return false;
  return std::equal(required_suffix.begin(), required_suffix.end(),
                    text.end() - static_cast<long>(required_suffix.size()));
}

bool verify_keyword(const std::vector<int>& text, int keyword) {
  return std::find(text.begin(), text.end(), keyword) != text.end();
}

SweepReport sweep(const ModelParams& params, const std::vector<ContrastPair>& mining_set,
                  const std::vector<int>& layers, const std::vector<double>& alphas,
                  const std::vector<TrapExample>& eval_set, int max_len, int inject_position) {
  if (layers.empty() || alphas.empty()) throw std::invalid_argument("sweep: empty grid");
  SweepReport report;
  report.layers = layers;
  report.alphas = alphas;
  report.baseline_accuracy = evaluate(params, EvalCondition::baseline(), eval_set, max_len).accuracy;
  for (int layer : layers) {
    MiningConfig mc;
    mc.layer = layer;
    mc.examples = mining_set;
    SteeringVector vec = mine_vector(params, mc);
    std::vector<double> row;
    for (double alpha : alphas) {
      EvalResult cell =
          evaluate(params, EvalCondition::steered(vec, alpha, inject_position), eval_set, max_len);
      row.push_back(cell.accuracy);
      if (cell.accuracy > report.best_accuracy || report.best_layer < 0) {
        report.best_accuracy = cell.accuracy;
        report.best_layer = layer;
        report.best_alpha = alpha;
      }
      report.cells.push_back(std::move(cell));
    }
    report.accuracy.push_back(std::move(row));
  }
  return report;
}

std::string sweep_grid_csv(const SweepReport& report, const std::string& config_hash) {
  std::ostringstream out;
  out << "# steerlab sweep grid config=" << config_hash << "\n";
  out << "layer\\alpha";
  for (double a : report.alphas) out << "," << double_to_string(a);
  out << "\n";
  for (size_t r = 0; r < report.layers.size(); ++r) {
    out << report.layers[r];
    for (double acc : report.accuracy[r]) out << "," << double_to_string(acc);
    out << "\n";
  }
  return out.str();
}

std::string sweep_best_by_layer_csv(const SweepReport& report, const std::string& config_hash) {
  std::ostringstream out;
  out << "# steerlab sweep best-over-alpha config=" << config_hash << "\n";
  out << "layer,best_alpha,best_accuracy\n";
  for (size_t r = 0; r < report.layers.size(); ++r) {
    size_t best = 0;
    for (size_t c = 1; c < report.alphas.size(); ++c) {
      if (report.accuracy[r][c] > report.accuracy[r][best]) best = c;
    }
    out << report.layers[r] << "," << double_to_string(report.alphas[best]) << ","
        << double_to_string(report.accuracy[r][best]) << "\n";
  }
  return out.str();
}

std::string sweep_summary_json(const SweepReport& report, const std::string& config_hash) {
  nlohmann::json j;
  j["config_hash"] = config_hash;
  j["layers"] = report.layers;
  j["alphas"] = report.alphas;
  j["baseline_accuracy"] = report.baseline_accuracy;
  j["best"] = {{"layer", report.best_layer},
               {"alpha", report.best_alpha},
               {"accuracy", report.best_accuracy}};
  return j.dump(2) + "\n";
}

std::string eval_records_jsonl(const EvalResult& result, const std::string& config_hash) {
  std::ostringstream out;
  for (const ExampleRecord& rec : result.records) {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["condition"] = result.label;
    j["example_id"] = rec.example_id;
    j["emitted"] = rec.emitted;
    j["followed"] = rec.followed;
    j["rank_target"] = rec.rank_target;
    j["rank_trap"] = rec.rank_trap;
    out << j.dump() << "\n";
  }
  return out.str();
}

std::string eval_summary_json(const EvalResult& result, const std::string& config_hash) {
  nlohmann::json j;
  j["config_hash"] = config_hash;
  j["condition"] = result.label;
  j["accuracy"] = result.accuracy;
  j["n_examples"] = result.records.size();
  return j.dump(2) + "\n";
}

std::string trace_csv(const RankTrace& trace, const std::string& config_hash) {
  std::ostringstream out;
  out << "# steerlab rank trace config=" << config_hash << "\n";
  out << "layer,rank,jsd\n";
  for (size_t j = 0; j < trace.ranks.size(); ++j) {
    out << j << "," << trace.ranks[j] << "," << double_to_string(trace.jsds[j]) << "\n";
  }
  return out.str();
}

void parse_sweep_grid(const std::string& text, std::vector<int>* layers,
                      std::vector<double>* alphas, std::vector<std::vector<double>>* accuracy) {
  layers->clear();
  alphas->clear();
  accuracy->clear();
  std::vector<std::string> lines = split_lines(text);
  size_t start = 0;
  while (start < lines.size() && (lines[start].empty() || lines[start][0] == '#')) ++start;
  if (start >= lines.size()) throw std::runtime_error("sweep grid: missing header");
  std::vector<std::string> header = split(lines[start], ',');
  for (size_t c = 1; c < header.size(); ++c) alphas->push_back(std::stod(header[c]));
  for (size_t r = start + 1; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    std::vector<std::string> cols = split(lines[r], ',');
    if (cols.size() != header.size()) throw std::runtime_error("sweep grid: ragged row");
    layers->push_back(std::stoi(cols[0]));
    std::vector<double> row;
    for (size_t c = 1; c < cols.size(); ++c) row.push_back(std::stod(cols[c]));
    accuracy->push_back(std::move(row));
  }
}

}  // namespace steerlab
