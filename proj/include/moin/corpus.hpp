#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace moin {

inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kVocabSize = 258;

struct Document {
  uint64_t doc_id = 0;
  std::string text;
  std::vector<int> token_ids;
  std::optional<int> topic_id;

  friend bool operator==(const Document&, const Document&) = default;
};

enum class Split { train, validation };

struct Corpus {
  std::vector<Document> documents;
  Split split = Split::train;

  std::size_t size() const { return documents.size(); }
  std::size_t total_tokens() const;
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct McItem {
  uint64_t item_id = 0;
  std::string prompt;
  std::vector<std::string> options;
  int gold_index = 0;

  friend bool operator==(const McItem&, const McItem&) = default;
};

// Byte-level tokenization: [BOS, bytes..., EOS].
std::vector<int> tokenize(std::string_view text);
// Inverse of tokenize. BOS/EOS are dropped; any other id outside [0, 256) throws.
std::string detokenize(const std::vector<int>& tokens);
void tokenize_all(Corpus& corpus);

Corpus load_corpus(const std::string& path, Split split);
void save_corpus(const Corpus& corpus, const std::string& path);

std::vector<McItem> load_mc_items(const std::string& path);
void save_mc_items(const std::vector<McItem>& items, const std::string& path);

// Synthetic corpus with planted topics. Topic t draws most of its words from a
// private keyword pool and the rest from a pool shared by all topics.
struct SyntheticCorpus {
  Corpus corpus;
  std::vector<int> planted;  // planted topic of corpus.documents[i]
  std::vector<std::vector<std::string>> topic_pools;
  std::vector<std::string> shared_pool;
  uint64_t seed = 0;

  int num_topics() const { return static_cast<int>(topic_pools.size()); }
  friend bool operator==(const SyntheticCorpus&, const SyntheticCorpus&) = default;
};

struct SyntheticOptions {
  int min_words = 30;
  int max_words = 50;
  double topic_word_prob = 0.75;
};

SyntheticCorpus make_synthetic_corpus(int num_topics, int docs_per_topic, int vocab_per_topic, uint64_t seed,
                                      const SyntheticOptions& options = {});

// Fresh documents drawn from the same pools as `source` (e.g. a validation split).
SyntheticCorpus make_synthetic_split(const SyntheticCorpus& source, int docs_per_topic, uint64_t seed,
                                     uint64_t first_doc_id, Split split, const SyntheticOptions& options = {});

// Multiple-choice items: the prompt opens a fresh document of topic t and the
// gold option continues it with topic-t words; distractors continue with words
// of other topics.
std::vector<McItem> make_synthetic_mc(const SyntheticCorpus& source, int items_per_topic, int num_options,
                                      uint64_t seed, std::vector<int>* planted_topics = nullptr);

}  // namespace moin
