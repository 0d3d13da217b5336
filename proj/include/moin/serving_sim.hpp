#pragma once

#include <cstdint>
#include <list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "moin/router.hpp"
#include "moin/topic_model.hpp"

namespace moin {

enum class PlacementPolicy { hash, round_robin, size_balanced };

PlacementPolicy parse_placement_policy(std::string_view s);
std::string to_string(PlacementPolicy p);

struct Topology {
  int num_nodes = 1;
  int cache_capacity = 1;      // resident adapters per node
  std::map<int, int> placement;  // topic -> node
  double cost_hit = 1.0;       // forward-pass units
  double cost_load = 10.0;     // adapter transfer units
  int base_node = 0;           // serves fallback requests

  void validate() const;
};

// HASH: topic mod N. ROUND_ROBIN: retained topics in index order dealt
// cyclically. SIZE_BALANCED: largest doc_count first onto the least-loaded
// node (ties: lower topic id first, then lower node id).
Topology place(const TopicModel& model, int num_nodes, PlacementPolicy policy, int cache_capacity = 1,
               double cost_hit = 1.0, double cost_load = 10.0);

struct NodeState {
  int node_id = 0;
  std::list<int> resident;  // most recently used first
  uint64_t hits = 0, misses = 0, evictions = 0, requests = 0, fallbacks = 0;
  double busy_time = 0.0;
};

struct NodeMetrics {
  int node_id = 0;
  uint64_t requests = 0;
  uint64_t hits = 0;
  uint64_t misses = 0;
  double hit_rate = 0.0;
  double total_cost = 0.0;
  uint64_t evictions = 0;
  uint64_t unique_adapters_used = 0;
  uint64_t fallback_count = 0;

  friend bool operator==(const NodeMetrics&, const NodeMetrics&) = default;
};

struct ServingMetrics {
  uint64_t requests = 0;
  uint64_t hits = 0;
  uint64_t misses = 0;
  double hit_rate = 0.0;
  double total_cost = 0.0;
  uint64_t evictions = 0;
  uint64_t unique_adapters_used = 0;
  uint64_t fallback_count = 0;
  std::vector<NodeMetrics> nodes;

  friend bool operator==(const ServingMetrics&, const ServingMetrics&) = default;
};

enum class EventKind { hit, miss, fallback };

struct ServeEvent {
  std::size_t request = 0;
  int node = 0;
  std::optional<int> topic;
  EventKind kind = EventKind::hit;
  std::optional<int> evicted;

  friend bool operator==(const ServeEvent&, const ServeEvent&) = default;
};

// Processes decisions in order, one at a time. events may be null.
ServingMetrics simulate(const Topology& topology, const std::vector<RoutingDecision>& decisions,
                        std::vector<ServeEvent>* events = nullptr);

enum class ReportFormat { text, json };

std::string report(const ServingMetrics& metrics, ReportFormat format);
ServingMetrics parse_metrics_json(std::string_view text);

}  // namespace moin
