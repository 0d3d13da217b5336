#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "moin/embedder.hpp"
#include "moin/topic_model.hpp"

namespace moin {

// FALLBACK: nearest over all centroids, base model if that topic was pruned.
// ALWAYS_ROUTE: nearest over retained centroids only.
enum class RouteMode { fallback, always_route };

std::string to_string(RouteMode mode);
RouteMode parse_route_mode(std::string_view s);

struct RoutingDecision {
  uint64_t query_id = 0;
  std::optional<int> topic_id;
  double similarity = 0.0;  // negative Euclidean distance to the chosen centroid
  bool fallback = false;
  RouteMode mode = RouteMode::fallback;

  // Topic whose adapter serves the query, if any.
  std::optional<int> expert() const { return fallback ? std::nullopt : topic_id; }
  friend bool operator==(const RoutingDecision&, const RoutingDecision&) = default;
};

RoutingDecision route_embedding(const EmbeddingVector& query, const TopicModel& model, RouteMode mode,
                                uint64_t query_id = 0);
RoutingDecision route(std::string_view query_text, const TopicModel& model, const EmbedderConfig& config,
                      RouteMode mode, uint64_t query_id = 0);

struct Query {
  uint64_t id = 0;
  std::string text;
};

struct RoutingStats {
  std::size_t queries = 0;
  std::size_t fallbacks = 0;
  std::size_t unique_topics = 0;          // distinct experts used
  std::map<int, std::size_t> histogram;  // expert topic -> routed queries
};

RoutingStats routing_stats(const std::vector<RoutingDecision>& decisions);

struct RoutedBatch {
  std::vector<RoutingDecision> decisions;
  RoutingStats stats;
};

RoutedBatch route_batch(const std::vector<Query>& queries, const TopicModel& model, const EmbedderConfig& config,
                        RouteMode mode, int threads = 1);

// One display record: query excerpt, chosen topic keywords and similarity.
std::string inspect(const RoutingDecision& decision, std::string_view query_text, const TopicModel& model,
                    std::size_t excerpt_chars = 80);

void save_decisions(const std::vector<RoutingDecision>& decisions, const std::string& path);
std::vector<RoutingDecision> load_decisions(const std::string& path);

std::vector<Query> load_queries(const std::string& path);

}  // namespace moin
