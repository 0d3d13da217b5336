#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moin/common.hpp"
#include "moin/router.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace moin;

namespace {

EmbeddingVector vec(std::vector<float> v) { return {std::move(v), false}; }

// Three topics on a line at x = -1, 0, 1; the middle one is pruned.
TopicModel line_model() {
  TopicModel m;
  m.k = 3;
  m.dim = 2;
  m.centroids = {-1, 0, 0, 0, 1, 0};
  m.doc_counts = {10, 1, 10};
  m.retained = {1, 0, 1};
  m.keywords = {{"left", "west"}, {"middle"}, {"right"}};
  return m;
}

TopicModel random_model(int k, int dim, uint64_t seed) {
  Rng rng(seed);
  TopicModel m;
  m.k = k;
  m.dim = dim;
  for (int i = 0; i < k * dim; ++i) m.centroids.push_back(static_cast<float>(rng.normal(0, 1)));
  for (int t = 0; t < k; ++t) {
    m.doc_counts.push_back(rng.below(20));
    m.retained.push_back(m.doc_counts.back() >= 5 ? 1 : 0);
  }
  m.retained[0] = 1;
  return m;
}

std::vector<std::vector<float>> rows(const TopicModel& m) {
  std::vector<std::vector<float>> r;
  for (int t = 0; t < m.k; ++t) r.emplace_back(m.centroid(t).begin(), m.centroid(t).end());
  return r;
}

}  // namespace

TEST_CASE("mode names") {
  CHECK(to_string(RouteMode::fallback) == "fallback");
  CHECK(to_string(RouteMode::always_route) == "always");
  CHECK(parse_route_mode("fallback") == RouteMode::fallback);
  CHECK(parse_route_mode("always") == RouteMode::always_route);
  CHECK_THROWS_AS(parse_route_mode("sometimes"), Error);
}

TEST_CASE("fallback mode: nearest overall, base when it is pruned") {
  const auto m = line_model();
  auto d = route_embedding(vec({-0.9f, 0}), m, RouteMode::fallback, 4);
  CHECK(d.query_id == 4);
  CHECK(d.topic_id == 0);
  CHECK_FALSE(d.fallback);
  CHECK(d.expert() == 0);
  CHECK(d.similarity == doctest::Approx(-0.1).epsilon(1e-6));

  d = route_embedding(vec({0.1f, 0}), m, RouteMode::fallback);
  CHECK(d.topic_id == 1);
  CHECK(d.fallback);
  CHECK_FALSE(d.expert().has_value());
}

TEST_CASE("always mode: nearest retained topic, never fallback") {
  const auto m = line_model();
  auto d = route_embedding(vec({0.1f, 0}), m, RouteMode::always_route);
  CHECK(d.topic_id == 2);
  CHECK_FALSE(d.fallback);
  CHECK(d.similarity == doctest::Approx(-0.9).epsilon(1e-6));
  // Exactly between two retained topics: lowest index wins.
  d = route_embedding(vec({0, 0}), m, RouteMode::always_route);
  CHECK(d.topic_id == 0);
}

TEST_CASE("empty query falls back in both modes") {
  const auto m = random_model(4, 64, 1);
  for (auto mode : {RouteMode::fallback, RouteMode::always_route}) {
    const auto d = route("", m, EmbedderConfig{}, mode);
    CHECK(d.fallback);
    CHECK_FALSE(d.expert().has_value());
  }
}

TEST_CASE("routing errors") {
  auto m = line_model();
  CHECK_THROWS_AS(route_embedding(vec({1, 2, 3}), m, RouteMode::fallback), Error);
  m.retained = {0, 0, 0};
  CHECK_THROWS_WITH_AS(route_embedding(vec({1, 2}), m, RouteMode::fallback), "route: no retained topics", Error);
}

TEST_CASE("routing agrees with a brute-force nearest centroid on 500 queries") {
  const auto m = random_model(12, 64, 3);
  std::vector<bool> allowed;
  for (int t = 0; t < m.k; ++t) allowed.push_back(m.is_retained(t));
  const auto cs = rows(m);
  Rng rng(4);
  for (int q = 0; q < 500; ++q) {
    std::string text;
    for (int w = 0; w < 6; ++w) text += std::string(1, static_cast<char>('a' + rng.below(26))) + "xq" + std::to_string(rng.below(50)) + " ";
    const auto e = embed(text, EmbedderConfig{});
    const int near_all = oracle::nearest(e.values, cs);
    const int near_kept = oracle::nearest(e.values, cs, &allowed);
    const auto f = route(text, m, EmbedderConfig{}, RouteMode::fallback, static_cast<uint64_t>(q));
    const auto a = route(text, m, EmbedderConfig{}, RouteMode::always_route, static_cast<uint64_t>(q));
    CHECK(f.topic_id == near_all);
    CHECK(f.fallback == !m.is_retained(near_all));
    CHECK(a.topic_id == near_kept);
    CHECK_FALSE(a.fallback);
    // Every FALLBACK expert choice agrees with ALWAYS_ROUTE.
    if (f.expert()) CHECK(f.expert() == a.expert());
  }
}

TEST_CASE("batch routing and stats") {
  const auto m = random_model(6, 64, 5);
  std::vector<Query> qs;
  for (uint64_t i = 0; i < 40; ++i) qs.push_back({i, "query number " + std::to_string(i * 7919)});
  qs.push_back({99, ""});
  const auto one = route_batch(qs, m, EmbedderConfig{}, RouteMode::fallback, 1);
  const auto four = route_batch(qs, m, EmbedderConfig{}, RouteMode::fallback, 4);
  CHECK(one.decisions == four.decisions);
  std::size_t total = one.stats.fallbacks;
  for (auto& [t, n] : one.stats.histogram) total += n;
  CHECK(total == qs.size());
  CHECK(one.stats.queries == qs.size());
  CHECK(one.stats.fallbacks >= 1);
  CHECK(one.stats.unique_topics == one.stats.histogram.size());

  std::vector<RoutingDecision> ds(3);
  ds[0].topic_id = 2;
  ds[1].topic_id = 2;
  ds[2].topic_id = 1;
  ds[2].fallback = true;
  const auto s = routing_stats(ds);
  CHECK(s.fallbacks == 1);
  CHECK(s.unique_topics == 1);
  CHECK(s.histogram.at(2) == 2);
}

TEST_CASE("inspect output") {
  const auto m = line_model();
  const auto d = route_embedding(vec({-1, 0}), m, RouteMode::fallback, 7);
  const auto text = inspect(d, "hello\nworld", m);
  CHECK(text.find("query 7") != std::string::npos);
  CHECK(text.find("hello world") != std::string::npos);
  CHECK(text.find("topic 0") != std::string::npos);
  CHECK(text.find("left, west") != std::string::npos);
  const auto fb = inspect(route_embedding(vec({0, 0}), m, RouteMode::fallback), "abcdefghij", m, 4);
  CHECK(fb.find("BASE (no expert)") != std::string::npos);
  CHECK(fb.find("abcd...") != std::string::npos);
}

TEST_CASE("decision and query files round trip") {
  testutil::TempDir dir("route");
  const auto m = line_model();
  std::vector<RoutingDecision> ds{route_embedding(vec({-1, 0}), m, RouteMode::fallback, 1),
                                  route_embedding(vec({0, 0}), m, RouteMode::fallback, 2),
                                  route_embedding(vec({0.3f, 0}), m, RouteMode::always_route, 3)};
  RoutingDecision none;
  none.query_id = 4;
  none.fallback = true;
  ds.push_back(none);
  save_decisions(ds, dir.file("d.jsonl"));
  CHECK(load_decisions(dir.file("d.jsonl")) == ds);
  testutil::write_text(dir.file("bad.jsonl"), "{\"query_id\": 1}\n");
  CHECK_THROWS_AS(load_decisions(dir.file("bad.jsonl")), Error);

  testutil::write_text(dir.file("q.jsonl"), "{\"id\": 2, \"text\": \"b\"}\n{\"id\": 1, \"text\": \"a\"}\n");
  const auto qs = load_queries(dir.file("q.jsonl"));
  REQUIRE(qs.size() == 2);
  CHECK(qs[0].text == "a");
  CHECK(qs[1].id == 2);
}
