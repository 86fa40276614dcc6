#include "steerlab/tasks.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include "steerlab/decoding.hpp"
#include "steerlab/io.hpp"

#include <json.hpp>

namespace steerlab {

namespace {

const char* kWrapperWords[] = {"write", "a", "quote", "that", "ends", "in", "the", "word"};
const char* kColon = ":";

std::vector<std::string> pseudo_words(int count) {
  static const char* consonants[] = {"b", "d", "k", "l", "m", "n", "r", "s", "t", "v"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(count));
  for (int first = 0; first < 50 && static_cast<int>(out.size()) < count; ++first) {
    for (int second = 0; second < 50 && static_cast<int>(out.size()) < count; ++second) {
      std::string w = std::string(consonants[first / 5]) + vowels[first % 5] +
                      consonants[second / 5] + vowels[second % 5];
      out.push_back(std::move(w));
    }
  }
  if (static_cast<int>(out.size()) < count) {
    throw std::invalid_argument("pseudo-word space exhausted");
  }
  return out;
}

}  // namespace

Vocab Vocab::build(int ending_pool, int prefix_pool, int vocab_capacity) {
  if (ending_pool < 2 || prefix_pool < 1) {
    throw std::invalid_argument("vocab: pools too small");
  }
  Vocab v;
  v.words_ = {"<pad>", "</s>", "<s>"};
  for (const char* w : kWrapperWords) v.words_.push_back(w);
  v.words_.push_back(kColon);
  std::vector<std::string> generated = pseudo_words(ending_pool + prefix_pool);
  for (const std::string& w : generated) v.words_.push_back(w);
  if (static_cast<int>(v.words_.size()) > vocab_capacity) {
    throw std::invalid_argument("vocab: word count exceeds model vocab size");
  }
  for (size_t i = 0; i < v.words_.size(); ++i) {
    v.index_[v.words_[i]] = static_cast<int>(i);
  }
  for (const char* w : kWrapperWords) v.wrapper_prefix_.push_back(v.index_.at(w));
  v.colon_id_ = v.index_.at(kColon);
  int base = 3 + static_cast<int>(std::size(kWrapperWords)) + 1;
  for (int i = 0; i < ending_pool; ++i) v.ending_ids_.push_back(base + i);
  for (int i = 0; i < prefix_pool; ++i) v.prefix_word_ids_.push_back(base + ending_pool + i);
  return v;
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::invalid_argument("vocab: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("vocab: id out of range");
  return words_[static_cast<size_t>(id)];
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += " ";
    out += word(id);
  }
  return out;
}

namespace {

std::vector<int> wrapped_prompt(const Vocab& vocab, const TrapTemplate& tpl, int instructed) {
  std::vector<int> prompt = vocab.wrapper_prefix_ids();
  prompt.push_back(instructed);
  prompt.push_back(vocab.wrapper_colon_id());
  prompt.insert(prompt.end(), tpl.proverb_prefix.begin(), tpl.proverb_prefix.end());
  return prompt;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& config, int model_vocab_size) {
  if (config.n_templates < 1) throw std::invalid_argument("corpus: need at least one template");
  if (config.alternatives_per_template < 1 ||
      config.alternatives_per_template >= config.ending_pool) {
    throw std::invalid_argument("corpus: bad alternative count");
  }
  if (config.prefix_min_words < 1 || config.prefix_max_words < config.prefix_min_words) {
    throw std::invalid_argument("corpus: bad prefix length range");
  }

  Corpus corpus;
  corpus.vocab = Vocab::build(config.ending_pool, config.prefix_pool, model_vocab_size);
  Rng rng(config.seed);

  // Templates with distinct prefixes.
  std::set<std::vector<int>> seen_prefixes;
  for (int t = 0; t < config.n_templates; ++t) {
    TrapTemplate tpl;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw std::runtime_error("corpus: cannot find a fresh prefix");
      int len = rng.uniform_int(config.prefix_min_words, config.prefix_max_words);
      std::vector<int> prefix;
      for (int i = 0; i < len; ++i) {
        const auto& pool = corpus.vocab.prefix_word_ids();
        prefix.push_back(pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
      }
      if (seen_prefixes.insert(prefix).second) {
        tpl.proverb_prefix = std::move(prefix);
        break;
      }
    }
    const auto& endings = corpus.vocab.ending_ids();
    tpl.memorized_ending = endings[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(endings.size()) - 1))];
    while (static_cast<int>(tpl.alternative_endings.size()) < config.alternatives_per_template) {
      int alt = endings[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(endings.size()) - 1))];
      if (alt == tpl.memorized_ending) continue;
      if (std::find(tpl.alternative_endings.begin(), tpl.alternative_endings.end(), alt) !=
          tpl.alternative_endings.end()) {
        continue;
      }
      tpl.alternative_endings.push_back(alt);
    }
    corpus.templates.push_back(std::move(tpl));
  }

  // Template split: enough eval templates to supply n_eval examples, the
  // rest (tune pool) supplies mining and instruction tuning.
  int per_template = config.alternatives_per_template;
  int need_eval_templates = (config.n_eval + per_template - 1) / per_template;
  int need_mine_templates = (config.n_mine + per_template - 1) / per_template;
  if (need_eval_templates + need_mine_templates > config.n_templates) {
    throw std::invalid_argument("corpus: insufficient templates for the requested splits");
  }
  std::vector<int> order(static_cast<size_t>(config.n_templates));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  corpus.eval_template_ids.assign(order.begin(), order.begin() + need_eval_templates);
  corpus.mine_template_ids.assign(order.begin() + need_eval_templates, order.end());

  // Pretraining covers every template: bare prefix -> memorized ending.
  for (const TrapTemplate& tpl : corpus.templates) {
    corpus.pretrain.push_back({tpl.proverb_prefix, {tpl.memorized_ending}});
  }

  auto enumerate_pairs = [&](const std::vector<int>& template_ids) {
    std::vector<std::pair<int, int>> pairs;  // (template, alternative index)
    for (int id : template_ids) {
      for (int a = 0; a < per_template; ++a) pairs.emplace_back(id, a);
    }
    rng.shuffle(pairs);
    return pairs;
  };

  auto eval_pairs = enumerate_pairs(corpus.eval_template_ids);
  if (static_cast<int>(eval_pairs.size()) < config.n_eval) {
    throw std::invalid_argument("corpus: insufficient eval examples");
  }
  for (int i = 0; i < config.n_eval; ++i) {
    auto [tid, a] = eval_pairs[static_cast<size_t>(i)];
    const TrapTemplate& tpl = corpus.templates[static_cast<size_t>(tid)];
    TrapExample ex;
    ex.instructed_token = tpl.alternative_endings[static_cast<size_t>(a)];
    ex.trap_token = tpl.memorized_ending;
    ex.template_id = tid;
    ex.prompt = wrapped_prompt(corpus.vocab, tpl, ex.instructed_token);
    corpus.eval.push_back(std::move(ex));
  }

  auto tune_pairs = enumerate_pairs(corpus.mine_template_ids);
  if (static_cast<int>(tune_pairs.size()) < config.n_mine) {
    throw std::invalid_argument("corpus: insufficient mining examples");
  }
  for (size_t i = 0; i < tune_pairs.size(); ++i) {
    auto [tid, a] = tune_pairs[i];
    const TrapTemplate& tpl = corpus.templates[static_cast<size_t>(tid)];
    int instructed = tpl.alternative_endings[static_cast<size_t>(a)];
    std::vector<int> prompt = wrapped_prompt(corpus.vocab, tpl, instructed);
    corpus.instruct_tune.push_back({prompt, {instructed}});
    if (static_cast<int>(i) < config.n_mine) {
      ContrastPair pair;
      pair.input_tokens = prompt;
      pair.decoder_prefix = {SpecialTokens::kBos};
      pair.target_token = instructed;
      pair.competing_token = tpl.memorized_ending;
      corpus.mining.push_back(std::move(pair));
    }
  }
  return corpus;
}

TrainResult train_memorizer(ModelParams& params, const std::vector<SeqPair>& data,
                            const TrainConfig& config) {
  if (config.steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (config.steps > 0 && data.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult result;
  if (config.steps == 0) return result;

  // Adam state is keyed by the canonical parameter enumeration.
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  params.for_each_param([&](const std::string& name, Tensor& t) {
    names.push_back(name);
    tensors.push_back(&t);
  });
  std::vector<Tensor> m(tensors.size()), v(tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) {
    m[i] = Tensor::zeros(tensors[i]->shape());
    v[i] = Tensor::zeros(tensors[i]->shape());
  }

  Rng rng(config.seed);
  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  size_t cursor = order.size();  // forces a shuffle on the first step

  for (int step = 0; step < config.steps; ++step) {
    std::vector<SeqPair> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(data[static_cast<size_t>(order[cursor++])]);
    }

    LossRecord rec = training_loss(params, batch);
    if (rec.param_names != names) {
      throw std::runtime_error("train: parameter enumeration mismatch");
    }
    std::vector<Tensor> grads = rec.tape.grad_multi(rec.loss, rec.param_nodes);

    double t = static_cast<double>(step + 1);
    double bc1 = 1.0 - std::pow(config.beta1, t);
    double bc2 = 1.0 - std::pow(config.beta2, t);
    for (size_t i = 0; i < tensors.size(); ++i) {
      double* pw = tensors[i]->mutable_data();
      double* pm = m[i].mutable_data();
      double* pv = v[i].mutable_data();
      const double* g = grads[i].data();
      int64_t n = tensors[i]->numel();
      for (int64_t k = 0; k < n; ++k) {
        pm[k] = config.beta1 * pm[k] + (1.0 - config.beta1) * g[k];
        pv[k] = config.beta2 * pv[k] + (1.0 - config.beta2) * g[k] * g[k];
        double mhat = pm[k] / bc1;
        double vhat = pv[k] / bc2;
        pw[k] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps);
      }
    }
    result.loss_curve.push_back(rec.loss_value);
  }
  return result;
}

double memorization_accuracy(const ModelParams& params, const std::vector<SeqPair>& data) {
  if (data.empty()) throw std::invalid_argument("memorization_accuracy: empty dataset");
  int hits = 0;
  for (const SeqPair& ex : data) {
    Tensor enc = encode(params, ex.input);
    DecodeResult out = greedy_decode(params, enc, static_cast<int>(ex.target.size()) + 1);
    if (!out.tokens.empty() && !ex.target.empty() && out.tokens[0] == ex.target[0]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

namespace {

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += "\"";
  return out;
}

// Splits one CSV line into fields, honoring double-quoted fields with ""
// escapes. Returns false on malformed quoting.
bool split_csv_line(const std::string& line, std::vector<std::string>* fields) {
  fields->clear();
  std::string cur;
  bool in_quotes = false;
  size_t i = 0;
  while (i < line.size()) {
    char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          i += 2;
          continue;
        }
        in_quotes = false;
        ++i;
        continue;
      }
      cur += c;
      ++i;
    } else {
      if (c == '"' && cur.empty()) {
        in_quotes = true;
        ++i;
      } else if (c == ',') {
        fields->push_back(cur);
        cur.clear();
        ++i;
      } else {
        cur += c;
        ++i;
      }
    }
  }
  if (in_quotes) return false;
  fields->push_back(cur);
  return true;
}

// Parses a python-style list of single-quoted strings: ['a', 'b\'c', ...].
bool parse_class_list(const std::string& s, std::vector<std::string>* classes) {
  classes->clear();
  size_t i = 0;
  auto skip_ws = [&]() {
    while (i < s.size() && s[i] == ' ') ++i;
  };
  skip_ws();
  if (i >= s.size() || s[i] != '[') return false;
  ++i;
  skip_ws();
  if (i < s.size() && s[i] == ']') return true;  // empty list
  while (true) {
    skip_ws();
    if (i >= s.size() || s[i] != '\'') return false;
    ++i;
    std::string entry;
    while (i < s.size() && s[i] != '\'') {
      if (s[i] == '\\' && i + 1 < s.size()) {
        entry += s[i + 1];
        i += 2;
      } else {
        entry += s[i];
        ++i;
      }
    }
    if (i >= s.size()) return false;
    ++i;  // closing quote
    classes->push_back(std::move(entry));
    skip_ws();
    if (i < s.size() && s[i] == ',') {
      ++i;
      continue;
    }
    if (i < s.size() && s[i] == ']') return true;
    return false;
  }
}

std::string class_list_to_string(const std::vector<std::string>& classes) {
  std::string out = "[";
  for (size_t i = 0; i < classes.size(); ++i) {
    if (i > 0) out += ", ";
    out += "'";
    for (char c : classes[i]) {
      if (c == '\'' || c == '\\') out += '\\';
      out += c;
    }
    out += "'";
  }
  out += "]";
  return out;
}

}  // namespace

std::vector<MemoTrapRecord> load_memotrap(const std::string& path) {
  std::string text = read_file(path);
  std::vector<MemoTrapRecord> records;
  std::vector<std::string> lines = split_lines(text);
  for (size_t li = 0; li < lines.size(); ++li) {
    const std::string& line = lines[li];
    if (line.empty()) continue;
    std::string row = "row " + std::to_string(li + 1);
    std::vector<std::string> fields;
    if (!split_csv_line(line, &fields)) {
      throw std::runtime_error("memotrap " + row + ": malformed quoting");
    }
    if (fields.size() != 3) {
      throw std::runtime_error("memotrap " + row + ": expected 3 columns, got " +
                               std::to_string(fields.size()));
    }
    MemoTrapRecord rec;
    rec.prompt = fields[0];
    if (!parse_class_list(fields[1], &rec.classes)) {
      throw std::runtime_error("memotrap " + row + ": malformed class list");
    }
    if (rec.classes.size() < 2) {
      throw std::runtime_error("memotrap " + row + ": need at least 2 classes");
    }
    try {
      size_t pos = 0;
      rec.answer_index = std::stoi(fields[2], &pos);
      if (pos != fields[2].size()) throw std::invalid_argument("trailing chars");
    } catch (const std::exception&) {
      throw std::runtime_error("memotrap " + row + ": bad answer index '" + fields[2] + "'");
    }
    if (rec.answer_index < 0 || rec.answer_index >= static_cast<int>(rec.classes.size())) {
      throw std::runtime_error("memotrap " + row + ": answer index out of range");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::string memotrap_to_string(const std::vector<MemoTrapRecord>& records) {
  std::ostringstream out;
  for (const MemoTrapRecord& rec : records) {
    out << csv_quote(rec.prompt) << "," << csv_quote(class_list_to_string(rec.classes)) << ","
        << rec.answer_index << "\n";
  }
  return out.str();
}

void save_memotrap(const std::vector<MemoTrapRecord>& records, const std::string& path) {
  write_file(path, memotrap_to_string(records));
}

namespace {

nlohmann::json tokens_json(const Vocab& vocab, const std::vector<int>& ids) {
  nlohmann::json j;
  j["ids"] = ids;
  j["text"] = vocab.detokenize(ids);
  return j;
}

}  // namespace

std::string corpus_pretrain_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  for (const SeqPair& ex : corpus.pretrain) {
    nlohmann::json j;
    j["prompt"] = tokens_json(corpus.vocab, ex.input);
    j["target"] = tokens_json(corpus.vocab, ex.target);
    out << j.dump() << "\n";
  }
  return out.str();
}

std::string corpus_mining_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  for (const ContrastPair& pair : corpus.mining) {
    nlohmann::json j;
    j["prompt"] = tokens_json(corpus.vocab, pair.input_tokens);
    j["target"] = {{"id", pair.target_token}, {"word", corpus.vocab.word(pair.target_token)}};
    j["trap"] = {{"id", pair.competing_token}, {"word", corpus.vocab.word(pair.competing_token)}};
    out << j.dump() << "\n";
  }
  return out.str();
}

std::string corpus_eval_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  for (size_t i = 0; i < corpus.eval.size(); ++i) {
    const TrapExample& ex = corpus.eval[i];
    nlohmann::json j;
    j["id"] = i;
    j["template"] = ex.template_id;
    j["prompt"] = tokens_json(corpus.vocab, ex.prompt);
    j["target"] = {{"id", ex.instructed_token}, {"word", corpus.vocab.word(ex.instructed_token)}};
    j["trap"] = {{"id", ex.trap_token}, {"word", corpus.vocab.word(ex.trap_token)}};
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace steerlab
