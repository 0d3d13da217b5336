#include "moin/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "moin/common.hpp"

namespace moin {

using nlohmann::json;

std::size_t Corpus::total_tokens() const {
  std::size_t n = 0;
  for (const auto& d : documents) n += d.token_ids.size();
  return n;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBosToken);
  for (unsigned char c : text) ids.push_back(c);
  ids.push_back(kEosToken);
  return ids;
}

std::string detokenize(const std::vector<int>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t == kBosToken || t == kEosToken) continue;
    if (t < 0 || t > 255) throw Error("detokenize: token id " + std::to_string(t) + " out of range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

void tokenize_all(Corpus& corpus) {
  for (auto& d : corpus.documents) d.token_ids = tokenize(d.text);
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

json parse_line(const std::string& path, const std::string& line, std::size_t lineno) {
  try {
    json j = json::parse(line);
    if (!j.is_object()) throw Error("not a JSON object");
    return j;
  } catch (const std::exception& e) {
    throw Error(path + ": malformed line " + std::to_string(lineno) + ": " + e.what());
  }
}

}  // namespace

Corpus load_corpus(const std::string& path, Split split) {
  Corpus corpus;
  corpus.split = split;
  std::unordered_set<uint64_t> seen;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::size_t lineno = i + 1;
    json j = parse_line(path, lines[i], lineno);
    if (!j.contains("id") || !j["id"].is_number_integer() || j["id"].get<int64_t>() < 0) {
      throw Error(path + ": malformed line " + std::to_string(lineno) + ": missing or invalid \"id\"");
    }
    if (!j.contains("text") || !j["text"].is_string()) {
      throw Error(path + ": malformed line " + std::to_string(lineno) + ": missing or invalid \"text\"");
    }
    Document d;
    d.doc_id = j["id"].get<uint64_t>();
    d.text = j["text"].get<std::string>();
    if (!seen.insert(d.doc_id).second) throw Error("duplicate doc_id " + std::to_string(d.doc_id));
    corpus.documents.push_back(std::move(d));
  }
  if (split == Split::train && corpus.documents.empty()) throw Error("empty train corpus");
  std::sort(corpus.documents.begin(), corpus.documents.end(),
            [](const Document& a, const Document& b) { return a.doc_id < b.doc_id; });
  tokenize_all(corpus);
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& d : corpus.documents) {
    out << json{{"id", d.doc_id}, {"text", d.text}}.dump() << '\n';
  }
}

std::vector<McItem> load_mc_items(const std::string& path) {
  std::vector<McItem> items;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::size_t lineno = i + 1;
    json j = parse_line(path, lines[i], lineno);
    auto bad = [&](const std::string& why) {
      return Error(path + ": malformed line " + std::to_string(lineno) + ": " + why);
    };
    McItem item;
    try {
      item.item_id = j.at("id").get<uint64_t>();
      item.prompt = j.at("prompt").get<std::string>();
      item.options = j.at("options").get<std::vector<std::string>>();
      item.gold_index = j.at("gold").get<int>();
    } catch (const json::exception& e) {
      throw bad(e.what());
    }
    if (item.options.size() < 2) throw bad("fewer than 2 options");
    for (const auto& o : item.options) {
      if (o.empty()) throw bad("empty option");
    }
    if (item.gold_index < 0 || item.gold_index >= static_cast<int>(item.options.size())) {
      throw bad("gold index out of range");
    }
    items.push_back(std::move(item));
  }
  return items;
}

void save_mc_items(const std::vector<McItem>& items, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& it : items) {
    out << json{{"id", it.item_id}, {"prompt", it.prompt}, {"options", it.options}, {"gold", it.gold_index}}.dump()
        << '\n';
  }
}

namespace {

std::string random_word(Rng& rng) {
  static constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyz";
  const auto len = 4 + rng.below(5);
  std::string w;
  for (uint64_t i = 0; i < len; ++i) w.push_back(kLetters[rng.below(kLetters.size())]);
  return w;
}

std::string make_text(const SyntheticCorpus& src, int topic, int num_words, double topic_prob, Rng& rng) {
  const auto& pool = src.topic_pools[static_cast<std::size_t>(topic)];
  std::string text;
  for (int w = 0; w < num_words; ++w) {
    if (w > 0) text.push_back(' ');
    if (rng.uniform() < topic_prob) {
      text += pool[rng.below(pool.size())];
    } else {
      text += src.shared_pool[rng.below(src.shared_pool.size())];
    }
  }
  return text;
}

void fill_documents(SyntheticCorpus& out, const SyntheticCorpus& pools, int docs_per_topic, uint64_t first_doc_id,
                    Rng& rng, const SyntheticOptions& options) {
  const int topics = pools.num_topics();
  const int span = std::max(0, options.max_words - options.min_words);
  for (int i = 0; i < topics * docs_per_topic; ++i) {
    const int topic = i % topics;
    const int words = options.min_words + static_cast<int>(rng.below(static_cast<uint64_t>(span) + 1));
    Document d;
    d.doc_id = first_doc_id + static_cast<uint64_t>(i);
    d.text = make_text(pools, topic, words, options.topic_word_prob, rng);
    d.token_ids = tokenize(d.text);
    out.corpus.documents.push_back(std::move(d));
    out.planted.push_back(topic);
  }
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(int num_topics, int docs_per_topic, int vocab_per_topic, uint64_t seed,
                                      const SyntheticOptions& options) {
  if (num_topics < 1 || docs_per_topic < 1 || vocab_per_topic < 1) {
    throw Error("make_synthetic_corpus: all arguments must be >= 1");
  }
  SyntheticCorpus out;
  out.seed = seed;
  Rng rng(mix_seed(seed, 0));
  std::set<std::string> used;
  auto fresh_word = [&] {
    for (;;) {
      std::string w = random_word(rng);
      if (used.insert(w).second) return w;
    }
  };
  out.topic_pools.resize(static_cast<std::size_t>(num_topics));
  for (auto& pool : out.topic_pools) {
    for (int i = 0; i < vocab_per_topic; ++i) pool.push_back(fresh_word());
  }
  const int shared = std::max(4, vocab_per_topic / 2);
  for (int i = 0; i < shared; ++i) out.shared_pool.push_back(fresh_word());

  Rng doc_rng(mix_seed(seed, 1));
  fill_documents(out, out, docs_per_topic, 0, doc_rng, options);
  out.corpus.split = Split::train;
  return out;
}

SyntheticCorpus make_synthetic_split(const SyntheticCorpus& source, int docs_per_topic, uint64_t seed,
                                     uint64_t first_doc_id, Split split, const SyntheticOptions& options) {
  SyntheticCorpus out;
  out.seed = seed;
  out.topic_pools = source.topic_pools;
  out.shared_pool = source.shared_pool;
  out.corpus.split = split;
  Rng rng(mix_seed(seed, 2));
  fill_documents(out, source, docs_per_topic, first_doc_id, rng, options);
  return out;
}

std::vector<McItem> make_synthetic_mc(const SyntheticCorpus& source, int items_per_topic, int num_options,
                                      uint64_t seed, std::vector<int>* planted_topics) {
  const int topics = source.num_topics();
  if (num_options < 2) throw Error("make_synthetic_mc: need at least 2 options");
  if (num_options > topics) throw Error("make_synthetic_mc: more options than topics");
  Rng rng(mix_seed(seed, 3));
  std::vector<McItem> items;
  if (planted_topics) planted_topics->clear();
  auto continuation = [&](int topic) {
    const auto& pool = source.topic_pools[static_cast<std::size_t>(topic)];
    std::string s;
    for (int w = 0; w < 4; ++w) s += " " + pool[rng.below(pool.size())];
    return s;
  };
  for (int i = 0; i < items_per_topic * topics; ++i) {
    const int topic = i % topics;
    McItem item;
    item.item_id = static_cast<uint64_t>(i);
    item.prompt = make_text(source, topic, 12, 0.75, rng);
    std::vector<int> others;
    for (int t = 0; t < topics; ++t) {
      if (t != topic) others.push_back(t);
    }
    rng.shuffle(others.begin(), others.end());
    item.gold_index = static_cast<int>(rng.below(static_cast<uint64_t>(num_options)));
    int next_other = 0;
    for (int o = 0; o < num_options; ++o) {
      item.options.push_back(continuation(o == item.gold_index ? topic : others[static_cast<std::size_t>(next_other++)]));
    }
    items.push_back(std::move(item));
    if (planted_topics) planted_topics->push_back(topic);
  }
  return items;
}

}  // namespace moin
