#include "steerlab/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "steerlab/io.hpp"

#include <json.hpp>

namespace steerlab {

namespace {

constexpr double kProbFloor = 1e-12;  // inside KL terms, guards log(0)
constexpr double kMaskValue = -1e30;

void check_distribution(const Tensor& p, const char* what) {
  if (p.rank() != 1) throw std::invalid_argument(std::string(what) + ": rank-1 tensor required");
  double s = 0.0;
  for (int i = 0; i < p.dim(0); ++i) {
    double v = p.at(i);
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(what) + ": negative entry");
    s += v;
  }
  if (std::fabs(s - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(what) + ": entries do not sum to 1");
  }
}

}  // namespace

std::vector<int> DoLaConfig::default_candidates(int n_dec_layers) {
  std::vector<int> layers;
  for (int j = 0; j < n_dec_layers - 1; j += 2) layers.push_back(j);
  return layers;
}

void DoLaConfig::validate(int n_dec_layers) const {
  if (candidate_layers.empty()) {
    throw std::invalid_argument("dola config: empty candidate set");
  }
  for (int j : candidate_layers) {
    if (j < 0 || j >= n_dec_layers) {
      throw std::invalid_argument("dola config: candidate layer out of range");
    }
    if (j == n_dec_layers - 1) {
      throw std::invalid_argument("dola config: the final layer cannot be a candidate");
    }
  }
  if (contrast_lambda < 0.0) throw std::invalid_argument("dola config: lambda must be >= 0");
  if (repetition_penalty < 1.0) {
    throw std::invalid_argument("dola config: repetition penalty must be >= 1");
  }
  if (plausibility_alpha > 1.0) {
    throw std::invalid_argument("dola config: plausibility alpha must be <= 1");
  }
}

double jsd(const Tensor& p, const Tensor& q) {
  check_distribution(p, "jsd p");
  check_distribution(q, "jsd q");
  if (p.dim(0) != q.dim(0)) throw std::invalid_argument("jsd: length mismatch");
  double acc = 0.0;
  for (int i = 0; i < p.dim(0); ++i) {
    double pi = p.at(i);
    double qi = q.at(i);
    double mi = 0.5 * (pi + qi);
    if (pi > 0.0) acc += 0.5 * pi * std::log(pi / std::max(mi, kProbFloor));
    if (qi > 0.0) acc += 0.5 * qi * std::log(qi / std::max(mi, kProbFloor));
  }
  return std::max(acc, 0.0);
}

int select_premature_layer(const LayerTrace& trace, const DoLaConfig& config, int n_dec_layers) {
  config.validate(n_dec_layers);
  if (static_cast<int>(trace.projected_dist.size()) != n_dec_layers) {
    throw std::invalid_argument("select_premature_layer: incomplete trace");
  }
  const Tensor& mature = trace.projected_dist.back();
  int best = -1;
  double best_jsd = -1.0;
  for (int j : config.candidate_layers) {
    double d = jsd(mature, trace.projected_dist[static_cast<size_t>(j)]);
    if (d > best_jsd || (d == best_jsd && j < best)) {
      best = j;
      best_jsd = d;
    }
  }
  return best;
}

Tensor contrast_logits(const Tensor& mature, const Tensor& premature, double lambda) {
  if (!mature.same_shape(premature)) throw std::invalid_argument("contrast_logits: shape mismatch");
  Tensor out = Tensor::zeros(mature.shape());
  double* o = out.mutable_data();
  for (int64_t i = 0; i < mature.numel(); ++i) {
    double n = mature.data()[i];
    o[i] = n + lambda * (n - premature.data()[i]);
  }
  return out;
}

Tensor apply_repetition_penalty(const Tensor& logits, const std::vector<int>& generated,
                                double penalty) {
  if (penalty < 1.0) throw std::invalid_argument("repetition penalty must be >= 1");
  Tensor out = logits;
  if (generated.empty() || penalty == 1.0) return out;
  std::set<int> seen(generated.begin(), generated.end());
  double* o = out.mutable_data();
  for (int t : seen) {
    if (t < 0 || t >= logits.dim(0)) continue;
    o[t] = o[t] > 0.0 ? o[t] / penalty : o[t] * penalty;
  }
  return out;
}

int argmax_token(const Tensor& scores) {
  int best = 0;
  for (int i = 1; i < scores.dim(0); ++i) {
    if (scores.at(i) > scores.at(best)) best = i;
  }
  return best;
}

std::vector<std::pair<int, double>> top_k_tokens(const Tensor& scores, int k) {
  std::vector<int> ids(static_cast<size_t>(scores.dim(0)));
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    if (scores.at(a) != scores.at(b)) return scores.at(a) > scores.at(b);
    return a < b;
  });
  std::vector<std::pair<int, double>> out;
  for (int i = 0; i < k && i < static_cast<int>(ids.size()); ++i) {
    out.emplace_back(ids[static_cast<size_t>(i)], scores.at(ids[static_cast<size_t>(i)]));
  }
  return out;
}

DecodeResult greedy_decode(const ModelParams& params, const Tensor& enc_states, int max_len,
                           const InjectionSpec* injection) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  DecodeResult result;
  std::vector<int> prefix{SpecialTokens::kBos};
  for (int step = 0; step < max_len; ++step) {
    DecodeStep ds = decode_step(params, enc_states, prefix, injection);
    int token = argmax_token(ds.final_logits);
    StepDiagnostics diag;
    diag.step = step;
    diag.top_pre = top_k_tokens(ds.final_logits, 5);
    diag.top_post = diag.top_pre;
    result.steps.push_back(std::move(diag));
    result.tokens.push_back(token);
    if (step == 0) result.first_scores = ds.final_logits;
    if (token == SpecialTokens::kEos) break;
    prefix.push_back(token);
  }
  return result;
}

DecodeResult dola_decode(const ModelParams& params, const Tensor& enc_states, int max_len,
                         const DoLaConfig& config) {
  if (max_len < 1) throw std::invalid_argument("dola_decode: max_len must be >= 1");
  config.validate(params.config.n_dec_layers);
  DecodeResult result;
  std::vector<int> prefix{SpecialTokens::kBos};
  for (int step = 0; step < max_len; ++step) {
    DecodeStep ds = decode_step(params, enc_states, prefix, nullptr);
    const LayerTrace& trace = ds.trace;

    StepDiagnostics diag;
    diag.step = step;
    const Tensor& mature_dist = trace.projected_dist.back();
    int premature = -1;
    double best_jsd = -1.0;
    for (int j : config.candidate_layers) {
      double d = jsd(mature_dist, trace.projected_dist[static_cast<size_t>(j)]);
      diag.candidate_jsd.emplace_back(j, d);
      if (d > best_jsd || (d == best_jsd && j < premature)) {
        premature = j;
        best_jsd = d;
      }
    }
    diag.premature_layer = premature;
    diag.top_pre = top_k_tokens(ds.final_logits, 5);

    Tensor scores = contrast_logits(ds.final_logits,
                                    trace.projected_logits[static_cast<size_t>(premature)],
                                    config.contrast_lambda);
    if (config.plausibility_alpha >= 0.0) {
      // Mask tokens implausible under the mature distribution before anything
      // downstream sees them.
      double mx = 0.0;
      for (int i = 0; i < mature_dist.dim(0); ++i) mx = std::max(mx, mature_dist.at(i));
      double floor = config.plausibility_alpha * mx;
      double* s = scores.mutable_data();
      for (int i = 0; i < mature_dist.dim(0); ++i) {
        if (mature_dist.at(i) < floor) s[i] = kMaskValue;
      }
    }
    scores = apply_repetition_penalty(scores, result.tokens, config.repetition_penalty);

    int token = argmax_token(scores);
    diag.top_post = top_k_tokens(scores, 5);
    result.steps.push_back(std::move(diag));
    result.tokens.push_back(token);
    if (step == 0) result.first_scores = scores;
    if (token == SpecialTokens::kEos) break;
    prefix.push_back(token);
  }
  return result;
}

std::string diagnostics_to_jsonl(const DecodeResult& result) {
  std::ostringstream out;
  for (const StepDiagnostics& d : result.steps) {
    nlohmann::json j;
    j["step"] = d.step;
    j["premature_layer"] = d.premature_layer;
    nlohmann::json jsds = nlohmann::json::array();
    for (auto& [layer, v] : d.candidate_jsd) jsds.push_back({{"layer", layer}, {"jsd", v}});
    j["candidate_jsd"] = jsds;
    auto tokens_json = [](const std::vector<std::pair<int, double>>& v) {
      nlohmann::json arr = nlohmann::json::array();
      for (auto& [tok, logit] : v) arr.push_back({{"token", tok}, {"logit", logit}});
      return arr;
    };
    j["top_pre"] = tokens_json(d.top_pre);
    j["top_post"] = tokens_json(d.top_post);
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace steerlab
