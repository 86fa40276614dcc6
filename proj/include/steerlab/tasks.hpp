#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

// Closed word-level vocabulary: three specials, the instruction wrapper
// words, a pool of ending words and a pool of prefix words. Built from sizes
// alone (no randomness), so every corpus seed shares one vocabulary and
// every ending is a single token.
class Vocab {
 public:
  Vocab() = default;
  static Vocab build(int ending_pool, int prefix_pool, int vocab_capacity);

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }

  const std::vector<int>& wrapper_prefix_ids() const { return wrapper_prefix_; }
  int wrapper_colon_id() const { return colon_id_; }
  const std::vector<int>& ending_ids() const { return ending_ids_; }
  const std::vector<int>& prefix_word_ids() const { return prefix_word_ids_; }

  std::string detokenize(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> wrapper_prefix_;  // "write a quote that ends in the word"
  int colon_id_ = -1;
  std::vector<int> ending_ids_;
  std::vector<int> prefix_word_ids_;
};

struct TrapTemplate {
  std::vector<int> proverb_prefix;
  int memorized_ending = -1;
  std::vector<int> alternative_endings;
};

// Instruction-wrapped evaluation item: the prompt names the instructed
// ending while the prefix pulls toward the memorized one.
struct TrapExample {
  std::vector<int> prompt;  // wrapper + named ending + ':' + proverb prefix
  int instructed_token = -1;
  int trap_token = -1;
  int template_id = -1;
};

struct CorpusConfig {
  uint64_t seed = 1;
  int n_templates = 220;
  int n_mine = 100;   // ContrastPair count reserved for vector mining
  int n_eval = 300;   // held-out TrapExample count
  int prefix_min_words = 4;
  int prefix_max_words = 7;
  int alternatives_per_template = 4;
  int ending_pool = 48;
  int prefix_pool = 440;
};

struct Corpus {
  Vocab vocab;
  std::vector<TrapTemplate> templates;
  std::vector<SeqPair> pretrain;        // unwrapped prefix -> memorized ending
  std::vector<SeqPair> instruct_tune;   // wrapped prompts from non-eval templates
  std::vector<ContrastPair> mining;     // n_mine pairs, templates disjoint from eval
  std::vector<TrapExample> eval;        // n_eval examples
  std::vector<int> eval_template_ids;
  std::vector<int> mine_template_ids;
};

// Deterministic under the config seed. Mining and eval template sets are
// disjoint; the pretrain set covers every template so eval prefixes are
// memorized too.
Corpus generate_corpus(const CorpusConfig& config, int model_vocab_size);

struct TrainConfig {
  int steps = 0;
  double learning_rate = 1e-3;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // one entry per step
};

// Adam with deterministic epoch shuffling and fixed-order gradient
// accumulation. Zero steps leaves the parameters untouched.
TrainResult train_memorizer(ModelParams& params, const std::vector<SeqPair>& data,
                            const TrainConfig& config);

// Fraction of examples whose first greedily decoded token is the memorized
// ending.
double memorization_accuracy(const ModelParams& params, const std::vector<SeqPair>& data);

// External MemoTrap file schema: one record per line,
//   "<prompt>","['<class0>', '<class1>', ...]",<answer_index>
struct MemoTrapRecord {
  std::string prompt;
  std::vector<std::string> classes;
  int answer_index = -1;
};

std::vector<MemoTrapRecord> load_memotrap(const std::string& path);
std::string memotrap_to_string(const std::vector<MemoTrapRecord>& records);
void save_memotrap(const std::vector<MemoTrapRecord>& records, const std::string& path);

// Corpus export (one JSON object per line) for inspection and re-runs.
std::string corpus_pretrain_jsonl(const Corpus& corpus);
std::string corpus_mining_jsonl(const Corpus& corpus);
std::string corpus_eval_jsonl(const Corpus& corpus);

}  // namespace steerlab
