#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moin/corpus.hpp"
#include "moin/embedder.hpp"
#include "moin/expert_trainer.hpp"
#include "moin/lm.hpp"
#include "moin/router.hpp"
#include "moin/topic_model.hpp"

namespace moin {

// nullopt evaluates the base model alone.
using Variant = std::optional<RouteMode>;

std::string variant_name(const Variant& v);

struct EvalContext {
  const BaseModel& base;
  const AdapterRegistry& registry;
  const TopicModel& topics;
  const EmbedderConfig& embedder;
  int threads = 1;
};

// Adapter serving a decision, or null for the base model (fallback, or a
// routed topic with no trained adapter).
const LoraAdapter* adapter_for(const RoutingDecision& decision, const AdapterRegistry& registry);

struct PerplexityResult {
  double perplexity = 0.0;
  NllSum total;
  std::vector<RoutingDecision> decisions;  // empty for base-only
};

// Routes each document by its text and scores it under the routed expert.
PerplexityResult eval_perplexity(const EvalContext& ctx, const Corpus& val_corpus, const Variant& variant);

struct McResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<std::vector<double>> scores;  // per item, per option
  std::vector<RoutingDecision> decisions;   // empty for base-only
  std::size_t unique_adapters = 0;
};

// Routing uses the prompt only. Option score is the mean log-probability of
// its tokens given the prompt; argmax with ties to the lowest index.
McResult eval_mc(const EvalContext& ctx, const std::vector<McItem>& items, const Variant& variant);
double option_score(const BaseModel& base, const LoraAdapter* adapter, const std::string& prompt,
                    const std::string& option);

struct ExpertPerplexity {
  int topic_id = 0;
  double perplexity = 0.0;
};

// Each expert on its own held-out docs, sorted ascending. Experts without
// held-out docs (or without an adapter) are skipped with a warning.
std::vector<ExpertPerplexity> per_expert_perplexity(const BaseModel& base, const AdapterRegistry& registry,
                                                    const std::map<int, std::vector<std::vector<int>>>& holdouts,
                                                    int threads = 1);

// m[i][j] = perplexity of expert topics[i] on the held-out docs of topics[j].
std::vector<std::vector<double>> cross_perplexity(const BaseModel& base, const AdapterRegistry& registry,
                                                  const std::vector<int>& topics,
                                                  const std::map<int, std::vector<std::vector<int>>>& holdouts,
                                                  int threads = 1);

struct TopicHistogram {
  std::vector<uint64_t> counts;
  std::vector<uint8_t> retained;

  uint64_t total() const;
};

TopicHistogram docs_per_topic(const Assignment& assignment, const TopicModel& model);
std::string render_histogram(const TopicHistogram& hist, int width = 50);
nlohmann::json to_json(const TopicHistogram& hist);

// The n topics with the most documents, with their keywords.
std::string render_topic_keywords(const TopicModel& model, std::size_t n_topics);

struct McTaskReport {
  std::string name;
  std::size_t items = 0;
  std::map<std::string, double> accuracy;       // variant -> accuracy
  std::map<std::string, std::size_t> unique_adapters;  // routed variants only
};

// Everything the report subcommand renders.
struct ReportBundle {
  std::map<std::string, double> perplexity;  // variant -> corpus perplexity
  std::vector<McTaskReport> mc_tasks;
  std::size_t total_adapters = 0;
  std::vector<ExpertPerplexity> expert_perplexity;
  TopicHistogram histogram;
  std::vector<std::vector<std::string>> keywords;
  std::vector<std::string> routing_examples;
  nlohmann::json training;  // per-topic training summary
  nlohmann::json serving;   // serving simulator metrics

  nlohmann::json to_json() const;
  static ReportBundle from_json(const nlohmann::json& j);
  std::string render_text() const;
};

}  // namespace moin
