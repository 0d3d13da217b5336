#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moin/common.hpp"
#include "moin/eval_harness.hpp"

using namespace moin;

namespace {

BaseModelConfig small_config() {
  BaseModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.context_len = 64;
  c.mlp_hidden = 32;
  c.init_seed = 6;
  return c;
}

struct World {
  SyntheticCorpus syn;
  TopicModel topics;
  BaseModel base = init_base(small_config());
  EmbedderConfig emb;

  World() {
    SyntheticOptions o;
    o.min_words = 5;
    o.max_words = 8;
    syn = make_synthetic_corpus(3, 10, 10, 2, o);
    std::vector<std::string> texts;
    for (const auto& d : syn.corpus.documents) texts.push_back(d.text);
    topics = kmeans_fit(embed_batch(texts, emb), 3, 1, 50, 1e-6).model;
    base.frozen = true;
  }
};

LoraAdapter noisy_adapter(const BaseModel& base, int topic, uint64_t seed) {
  auto a = init_adapter(base, static_cast<uint64_t>(topic), 2, seed);
  Rng rng(seed);
  for (auto& l : a.layers)
    for (auto& x : l.b.data) x = static_cast<float>(rng.normal(0, 0.2));
  return a;
}

}  // namespace

TEST_CASE("variant names") {
  CHECK(variant_name(std::nullopt) == "base");
  CHECK(variant_name(RouteMode::fallback) == "fallback");
  CHECK(variant_name(RouteMode::always_route) == "always");
}

TEST_CASE("with no adapters every variant equals the base model exactly") {
  World w;
  const AdapterRegistry empty;
  const EvalContext ctx{w.base, empty, w.topics, w.emb, 1};
  const auto base = eval_perplexity(ctx, w.syn.corpus, std::nullopt);
  const auto fb = eval_perplexity(ctx, w.syn.corpus, RouteMode::fallback);
  const auto al = eval_perplexity(ctx, w.syn.corpus, RouteMode::always_route);
  CHECK(base.decisions.empty());
  CHECK(fb.decisions.size() == w.syn.corpus.size());
  CHECK(base.perplexity == fb.perplexity);
  CHECK(base.perplexity == al.perplexity);

  const auto items = make_synthetic_mc(w.syn, 2, 3, 4);
  const auto mb = eval_mc(ctx, items, std::nullopt);
  const auto ma = eval_mc(ctx, items, RouteMode::always_route);
  CHECK(mb.scores == ma.scores);
  CHECK(mb.predictions == ma.predictions);
  CHECK(ma.unique_adapters == 0);
}

TEST_CASE("routed evaluation uses the adapters") {
  World w;
  AdapterRegistry reg;
  for (int t = 0; t < 3; ++t) reg.adapters.emplace(t, noisy_adapter(w.base, t, 10 + static_cast<uint64_t>(t)));
  const AdapterRegistry empty;
  const EvalContext with{w.base, reg, w.topics, w.emb, 1};
  const EvalContext without{w.base, empty, w.topics, w.emb, 1};
  const auto a = eval_perplexity(with, w.syn.corpus, RouteMode::always_route);
  const auto b = eval_perplexity(without, w.syn.corpus, RouteMode::always_route);
  CHECK(a.perplexity != b.perplexity);
  CHECK(a.decisions == b.decisions);
  // Thread count does not change the result.
  const EvalContext threaded{w.base, reg, w.topics, w.emb, 3};
  CHECK(eval_perplexity(threaded, w.syn.corpus, RouteMode::always_route).perplexity == a.perplexity);

  const auto items = make_synthetic_mc(w.syn, 3, 2, 4);
  const auto mc = eval_mc(with, items, RouteMode::always_route);
  CHECK(mc.unique_adapters >= 1);
  CHECK(mc.unique_adapters <= 3);
  CHECK(adapter_for(a.decisions[0], reg) == reg.find(*a.decisions[0].topic_id));
  RoutingDecision fb;
  fb.topic_id = 0;
  fb.fallback = true;
  CHECK(adapter_for(fb, reg) == nullptr);
}

TEST_CASE("option scores are length-normalized and ties go to the first option") {
  auto base = init_base(small_config());
  base.head.zero();  // uniform next-token distribution
  const double uniform = -std::log(258.0);
  CHECK(option_score(base, nullptr, "prompt", " a") == doctest::Approx(uniform));
  CHECK(option_score(base, nullptr, "prompt", " a much longer option") == doctest::Approx(uniform));
  base.frozen = true;
  const AdapterRegistry empty;
  const TopicModel tm;
  const EmbedderConfig emb;
  const EvalContext ctx{base, empty, tm, emb, 1};
  std::vector<McItem> items{{0, "p", {" short", " rather longer", " x"}, 0}, {1, "q", {" a", " b"}, 1}};
  const auto r = eval_mc(ctx, items, std::nullopt);
  CHECK(r.predictions == std::vector<int>{0, 0});
  CHECK(r.accuracy == 0.5);
}

TEST_CASE("option score equals the continuation log-likelihood per token") {
  World w;
  const auto s = option_score(w.base, nullptr, "hello there", " friend");
  auto prefix = tokenize("hello there");
  prefix.pop_back();
  auto cont = tokenize(" friend");
  cont.erase(cont.begin());
  cont.pop_back();
  const auto n = continuation_nll(w.base, nullptr, prefix, cont);
  CHECK(n.tokens == 7);
  CHECK(s == doctest::Approx(-n.nll / 7.0));
}

TEST_CASE("per-expert and cross perplexity") {
  World w;
  AdapterRegistry reg;
  for (int t = 0; t < 3; ++t) reg.adapters.emplace(t, noisy_adapter(w.base, t, 20 + static_cast<uint64_t>(t)));
  std::map<int, std::vector<std::vector<int>>> holdouts;
  for (std::size_t i = 0; i < w.syn.corpus.size(); ++i) {
    if (w.syn.planted[i] == 2) continue;  // topic 2 has no held-out docs
    holdouts[w.syn.planted[i]].push_back(w.syn.corpus.documents[i].token_ids);
  }
  const auto per = per_expert_perplexity(w.base, reg, holdouts);
  REQUIRE(per.size() == 2);
  CHECK(per[0].perplexity <= per[1].perplexity);
  CHECK(per[0].perplexity ==
        perplexity(w.base, reg.find(per[0].topic_id), holdouts.at(per[0].topic_id)));

  const auto m = cross_perplexity(w.base, reg, {0, 1}, holdouts);
  REQUIRE(m.size() == 2);
  CHECK(m[1][0] == perplexity(w.base, reg.find(1), holdouts.at(0)));
  CHECK_THROWS_AS(cross_perplexity(w.base, reg, {0, 5}, holdouts), Error);
}

TEST_CASE("documents-per-topic histogram") {
  TopicModel m;
  m.k = 3;
  m.doc_counts = {2, 0, 1};
  m.retained = {1, 0, 1};
  Assignment a;
  a.topic_of = {{10, 0}, {11, 0}, {12, 2}};
  const auto h = docs_per_topic(a, m);
  CHECK(h.counts == std::vector<uint64_t>{2, 0, 1});
  CHECK(h.total() == 3);
  const auto text = render_histogram(h, 10);
  CHECK(text.find("##########") != std::string::npos);
  CHECK(text.find("(pruned)") != std::string::npos);
  CHECK(text.find("total 3") != std::string::npos);
  const auto j = to_json(h);
  CHECK(j.size() == 3);
  CHECK(j[1]["retained"] == false);
  a.topic_of[13] = 7;
  CHECK_THROWS_AS(docs_per_topic(a, m), Error);
}

TEST_CASE("keyword table lists the largest topics first") {
  TopicModel m;
  m.k = 3;
  m.doc_counts = {1, 9, 4};
  m.retained = {1, 1, 1};
  m.keywords = {{"aa"}, {"bb", "cc"}, {"dd"}};
  const auto text = render_topic_keywords(m, 2);
  CHECK(text.find("bb, cc") < text.find("dd"));
  CHECK(text.find("aa") == std::string::npos);
}

TEST_CASE("report bundle JSON round trip and text rendering") {
  ReportBundle b;
  b.perplexity = {{"base", 10.5}, {"fallback", 9.25}, {"always", 9.0}};
  McTaskReport t;
  t.name = "synthetic";
  t.items = 40;
  t.accuracy = {{"base", 0.5}, {"always", 0.75}};
  t.unique_adapters = {{"fallback", 3}, {"always", 4}};
  b.mc_tasks.push_back(t);
  b.total_adapters = 4;
  b.expert_perplexity = {{2, 7.5}, {0, 8.0}};
  b.histogram.counts = {5, 6};
  b.histogram.retained = {1, 0};
  b.keywords = {{"x", "y"}, {"z"}};
  b.routing_examples = {"query 1 -> topic 0"};
  b.serving = nlohmann::json{{"requests", 3}};

  const auto back = ReportBundle::from_json(nlohmann::json::parse(b.to_json().dump()));
  CHECK(back.perplexity == b.perplexity);
  REQUIRE(back.mc_tasks.size() == 1);
  CHECK(back.mc_tasks[0].accuracy == t.accuracy);
  CHECK(back.mc_tasks[0].unique_adapters == t.unique_adapters);
  CHECK(back.total_adapters == 4);
  CHECK(back.expert_perplexity.size() == 2);
  CHECK(back.histogram.counts == b.histogram.counts);
  CHECK(back.histogram.retained == b.histogram.retained);
  CHECK(back.keywords == b.keywords);
  CHECK(back.routing_examples == b.routing_examples);
  CHECK(back.serving == b.serving);

  const auto text = b.render_text();
  for (const char* needle : {"perplexity", "multiple-choice", "Unique adapters", "(pruned)", "x, y", "query 1", "Serving"})
    CHECK(text.find(needle) != std::string::npos);
}

TEST_CASE("repeating an option leaves its score unchanged on a uniform model") {
  auto base = init_base(small_config());
  base.head.zero();
  const double once = option_score(base, nullptr, "the prompt", " word");
  const double twice = option_score(base, nullptr, "the prompt", " word word");
  CHECK(once == doctest::Approx(twice).epsilon(1e-12));
}

TEST_CASE("clustering a uniform synthetic corpus gives a near-uniform histogram") {
  const auto syn = make_synthetic_corpus(6, 80, 30, 12);
  const EmbedderConfig emb;
  std::vector<std::string> texts;
  for (const auto& d : syn.corpus.documents) texts.push_back(d.text);
  const auto fit = kmeans_fit(embed_batch(texts, emb), 6, 3, 100, 1e-6, 10);
  const auto h = docs_per_topic(make_assignment(syn.corpus, fit.labels), fit.model);
  CHECK(h.total() == syn.corpus.size());
  double chi2 = 0;
  const double expected = static_cast<double>(syn.corpus.size()) / 6.0;
  for (auto c : h.counts) chi2 += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  // 5 degrees of freedom; 20.5 is the 0.999 quantile.
  CHECK(chi2 < 20.5);
}
