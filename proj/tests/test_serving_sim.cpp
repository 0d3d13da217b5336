#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "moin/common.hpp"
#include "moin/serving_sim.hpp"
#include "oracles.hpp"

using namespace moin;

namespace {

TopicModel counts_model(std::vector<uint64_t> counts) {
  TopicModel m;
  m.k = static_cast<int>(counts.size());
  m.dim = 1;
  m.centroids.assign(counts.size(), 0.0f);
  m.doc_counts = std::move(counts);
  m.retained.assign(m.doc_counts.size(), 1);
  return m;
}

std::vector<RoutingDecision> trace(const std::vector<int>& topics) {
  std::vector<RoutingDecision> out;
  for (std::size_t i = 0; i < topics.size(); ++i) {
    RoutingDecision d;
    d.query_id = i;
    if (topics[i] < 0) {
      d.fallback = true;
    } else {
      d.topic_id = topics[i];
    }
    out.push_back(d);
  }
  return out;
}

Topology single_node(int k, int cache) {
  Topology t;
  t.num_nodes = 1;
  t.cache_capacity = cache;
  for (int i = 0; i < k; ++i) t.placement[i] = 0;
  return t;
}

}  // namespace

TEST_CASE("policy names") {
  CHECK(parse_placement_policy("hash") == PlacementPolicy::hash);
  CHECK(parse_placement_policy("rr") == PlacementPolicy::round_robin);
  CHECK(parse_placement_policy("balanced") == PlacementPolicy::size_balanced);
  CHECK_THROWS_AS(parse_placement_policy("random"), Error);
  CHECK(to_string(PlacementPolicy::round_robin) == "rr");
}

TEST_CASE("placement policies") {
  auto m = counts_model({5, 5, 5, 5, 5});
  m.retained[1] = 0;
  const auto h = place(m, 2, PlacementPolicy::hash);
  CHECK(h.placement == std::map<int, int>{{0, 0}, {2, 0}, {3, 1}, {4, 0}});
  const auto rr = place(m, 2, PlacementPolicy::round_robin);
  CHECK(rr.placement == std::map<int, int>{{0, 0}, {2, 1}, {3, 0}, {4, 1}});
  CHECK_THROWS_AS(place(m, 0, PlacementPolicy::hash), Error);
}

TEST_CASE("size-balanced placement evens out document load") {
  const auto m = counts_model({10, 9, 2, 1});
  const auto t = place(m, 2, PlacementPolicy::size_balanced);
  std::vector<uint64_t> load(2, 0);
  for (auto [topic, node] : t.placement) load[static_cast<std::size_t>(node)] += m.doc_counts[static_cast<std::size_t>(topic)];
  CHECK(load == std::vector<uint64_t>{11, 11});
  CHECK(t.placement.at(0) == 0);
  CHECK(t.placement.at(1) == 1);
}

TEST_CASE("topology validation") {
  Topology t;
  t.cache_capacity = 0;
  CHECK_THROWS_AS(t.validate(), Error);
  t = {};
  t.placement[3] = 2;
  CHECK_THROWS_AS(t.validate(), Error);
  t = {};
  t.base_node = 1;
  CHECK_THROWS_AS(t.validate(), Error);
}

TEST_CASE("cyclic access larger than the cache always misses") {
  const auto topo = single_node(3, 2);
  const auto m = simulate(topo, trace({0, 1, 2, 0, 1, 2, 0, 1, 2}));
  CHECK(m.hits == 0);
  CHECK(m.misses == 9);
  CHECK(m.evictions == 7);
  CHECK(m.hit_rate == 0.0);
  const auto warm = simulate(single_node(3, 3), trace({0, 1, 2, 0, 1, 2, 0, 1, 2}));
  CHECK(warm.hits == 6);
  CHECK(warm.misses == 3);
  CHECK(warm.evictions == 0);
}

TEST_CASE("events match a reference LRU on random traces") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(8));
    const int cap = 1 + static_cast<int>(rng.below(4));
    std::vector<int> topics;
    for (int i = 0; i < 200; ++i) topics.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(k))));
    std::vector<ServeEvent> events;
    simulate(single_node(k, cap), trace(topics), &events);
    oracle::ReferenceLru ref(static_cast<std::size_t>(cap));
    REQUIRE(events.size() == topics.size());
    for (std::size_t i = 0; i < topics.size(); ++i) {
      const auto want = ref.access(topics[i]);
      CHECK((events[i].kind == EventKind::hit) == want.hit);
      CHECK(events[i].evicted == want.evicted);
    }
  }
}

TEST_CASE("cost identity and counters on a multi-node cluster") {
  Rng rng(11);
  const auto model = counts_model({8, 3, 7, 1, 4, 4, 9, 2});
  for (auto policy : {PlacementPolicy::hash, PlacementPolicy::round_robin, PlacementPolicy::size_balanced}) {
    const auto topo = place(model, 3, policy, 2, 1.0, 10.0);
    std::vector<int> topics;
    for (int i = 0; i < 500; ++i) topics.push_back(static_cast<int>(rng.below(9)) - 1);  // -1 = fallback
    const auto m = simulate(topo, trace(topics));
    CHECK(m.requests == 500);
    CHECK(m.hits + m.misses + m.fallback_count == m.requests);
    CHECK(m.total_cost == static_cast<double>(m.requests) * 1.0 + static_cast<double>(m.misses) * 10.0);
    double node_cost = 0;
    uint64_t node_requests = 0;
    for (const auto& n : m.nodes) {
      node_cost += n.total_cost;
      node_requests += n.requests;
    }
    CHECK(node_cost == doctest::Approx(m.total_cost));
    CHECK(node_requests == m.requests);
    CHECK(m.nodes[0].fallback_count == m.fallback_count);
    CHECK(m.unique_adapters_used == 8);
  }
}

TEST_CASE("more cache never hurts an LRU hit count") {
  Rng rng(13);
  std::vector<int> topics;
  for (int i = 0; i < 400; ++i) topics.push_back(static_cast<int>(rng.below(rng.below(2) ? 3 : 10)));
  uint64_t prev = 0;
  for (int cap = 1; cap <= 10; ++cap) {
    const auto m = simulate(single_node(10, cap), trace(topics));
    CHECK(m.hits >= prev);
    prev = m.hits;
  }
}

TEST_CASE("unplaced topics are rejected") {
  CHECK_THROWS_AS(simulate(single_node(2, 1), trace({0, 5})), Error);
  CHECK(simulate(single_node(2, 1), {}).requests == 0);
}

TEST_CASE("metrics report round trips through JSON") {
  const auto topo = place(counts_model({3, 2, 1}), 2, PlacementPolicy::hash, 1);
  const auto m = simulate(topo, trace({0, 1, 2, 0, -1, 2, 2}));
  CHECK(parse_metrics_json(report(m, ReportFormat::json)) == m);
  const auto text = report(m, ReportFormat::text);
  CHECK(text.find("hit") != std::string::npos);
  CHECK_THROWS_AS(parse_metrics_json("{\"requests\": 1}"), Error);
}
