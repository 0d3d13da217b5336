#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moin/common.hpp"
#include "moin/lm.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace moin;

namespace {

BaseModelConfig tiny_config() {
  BaseModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.context_len = 8;
  c.mlp_hidden = 16;
  c.init_seed = 3;
  return c;
}

std::vector<int> random_tokens(std::size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t;
  for (std::size_t i = 0; i < n; ++i) t.push_back(static_cast<int>(rng.below(kVocabSize)));
  return t;
}

// Perturbs every tensor so that norms and LoRA B are not at their special init values.
template <class Model>
void jitter(Model& m, uint64_t seed, double scale) {
  Rng rng(seed);
  m.for_each_tensor([&](const std::string&, auto& t) {
    for (auto& x : t.data) x += static_cast<std::remove_reference_t<decltype(x)>>(rng.normal(0, scale));
  });
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-7); }

}  // namespace

TEST_CASE("init is deterministic per seed") {
  const auto c = tiny_config();
  CHECK(init_base(c) == init_base(c));
  auto c2 = c;
  c2.init_seed = 4;
  CHECK_FALSE(init_base(c2) == init_base(c));
  CHECK(checksum(init_base(c)) == checksum(init_base(c)));
}

TEST_CASE("config validation and head_dim") {
  BaseModelConfig c;
  CHECK(c.head_dim() == 16);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.rms_norm_eps = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("parameter count matches the closed form") {
  for (auto c : {BaseModelConfig{}, tiny_config()}) {
    CHECK(parameter_count(c) ==
          oracle::decoder_params(c.vocab_size, c.d_model, c.n_layers, c.context_len, c.mlp_hidden));
    std::size_t counted = 0;
    init_base(c).for_each_tensor([&](const std::string&, const Matrix<float>& m) { counted += m.size(); });
    CHECK(counted == parameter_count(c));
  }
}

TEST_CASE("a zero head gives uniform predictions: loss ln V, perplexity V") {
  auto m = init_base(tiny_config());
  m.head.zero();
  const auto toks = random_tokens(8, 1);
  const auto logits = forward<float>(m, nullptr, toks);
  std::vector<int> targets(toks.begin() + 1, toks.end());
  targets.push_back(kIgnoreTarget);
  CHECK(lm_loss(logits, targets) == doctest::Approx(std::log(258.0)).epsilon(1e-6));
  CHECK(perplexity(m, nullptr, {random_tokens(30, 2), random_tokens(5, 3)}) == doctest::Approx(258.0).epsilon(1e-5));
}

TEST_CASE("lm_loss matches a scalar cross-entropy") {
  Rng rng(5);
  Matrix<double> logits(6, 258);
  for (auto& x : logits.data) x = rng.normal(0, 3);
  std::vector<int> targets{1, 257, kIgnoreTarget, 0, 100, kIgnoreTarget};
  std::vector<std::vector<double>> rows;
  for (int r = 0; r < 6; ++r) rows.emplace_back(logits.row(r), logits.row(r) + 258);
  CHECK(lm_loss(logits, targets) == doctest::Approx(oracle::cross_entropy(rows, targets)).epsilon(1e-10));
  CHECK_THROWS_AS(lm_loss(logits, std::vector<int>{1, 2}), Error);
  CHECK_THROWS_AS(lm_loss(logits, std::vector<int>(6, kIgnoreTarget)), Error);
  CHECK_THROWS_AS(lm_loss(logits, std::vector<int>{1, 2, 3, 4, 5, 258}), Error);
}

TEST_CASE("forward is causal and yields valid distributions") {
  auto m = init_base(tiny_config());
  jitter(m, 7, 0.05);
  auto toks = random_tokens(8, 9);
  const auto a = forward<float>(m, nullptr, toks);
  CHECK(a.rows == 8);
  CHECK(a.cols == 258);
  toks[5] = (toks[5] + 1) % 258;
  const auto b = forward<float>(m, nullptr, toks);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 258; ++c) CHECK(a(r, c) == b(r, c));
  bool changed = false;
  for (int c = 0; c < 258; ++c) changed |= a(5, c) != b(5, c);
  CHECK(changed);
  for (int r = 0; r < 8; ++r) {
    double mx = -1e30, z = 0;
    for (int c = 0; c < 258; ++c) mx = std::max(mx, static_cast<double>(a(r, c)));
    for (int c = 0; c < 258; ++c) z += std::exp(a(r, c) - mx);
    double s = 0;
    for (int c = 0; c < 258; ++c) s += std::exp(a(r, c) - mx) / z;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("forward input errors") {
  const auto m = init_base(tiny_config());
  CHECK_THROWS_AS(forward<float>(m, nullptr, random_tokens(9, 1)), Error);
  CHECK_THROWS_AS(forward<float>(m, nullptr, std::vector<int>{}), Error);
  CHECK_THROWS_AS(forward<float>(m, nullptr, std::vector<int>{1, 258}), Error);
  auto other = tiny_config();
  other.d_model = 16;
  const auto wrong = init_adapter(init_base(other), 0, 2, 1);
  CHECK_THROWS_AS(forward<float>(m, &wrong, std::vector<int>{1, 2}), Error);
}

TEST_CASE("make_windows covers each prediction exactly once") {
  const auto toks = random_tokens(10, 4);
  const auto w = make_windows(toks, 4);
  REQUIRE(w.size() == 3);
  CHECK(w[0].inputs.size() == 4);
  CHECK(w[1].inputs.size() == 4);
  CHECK(w[2].inputs.size() == 1);
  std::vector<int> predicted;
  for (auto& x : w) {
    CHECK(x.inputs.size() == x.targets.size());
    predicted.insert(predicted.end(), x.targets.begin(), x.targets.end());
  }
  CHECK(predicted == std::vector<int>(toks.begin() + 1, toks.end()));
  CHECK(make_windows(std::vector<int>{1}, 4).empty());
}

TEST_CASE("perplexity identities") {
  auto m = init_base(tiny_config());
  jitter(m, 11, 0.05);
  std::vector<std::vector<int>> docs{random_tokens(20, 1), random_tokens(3, 2), random_tokens(9, 3)};
  NllSum manual;
  for (auto& d : docs) manual += sequence_nll(m, nullptr, d);
  const auto total = corpus_nll(m, nullptr, docs);
  CHECK(total.tokens == 19u + 2u + 8u);
  CHECK(total.nll == doctest::Approx(manual.nll).epsilon(1e-12));
  CHECK(perplexity(m, nullptr, docs) == doctest::Approx(std::exp(total.nll / static_cast<double>(total.tokens))));
  CHECK(perplexity(m, nullptr, docs, 1) == perplexity(m, nullptr, docs, 3));
  // A single window's NLL equals the loss times the number of targets.
  const auto w = make_windows(docs[2], 8)[0];
  const auto logits = forward<float>(m, nullptr, w.inputs);
  CHECK(sequence_nll(m, nullptr, docs[2]).nll == doctest::Approx(lm_loss(logits, w.targets) * 8).epsilon(1e-6));
  CHECK_THROWS_AS(perplexity(m, nullptr, {}), Error);
  CHECK_THROWS_AS(perplexity(m, nullptr, {{5}}), Error);
}

TEST_CASE("continuation_nll scores only the continuation and left-truncates") {
  auto m = init_base(tiny_config());
  jitter(m, 12, 0.05);
  const std::vector<int> prefix{256, 10, 11};
  const std::vector<int> cont{12, 13};
  const auto r = continuation_nll(m, nullptr, prefix, cont);
  CHECK(r.tokens == 2);
  std::vector<int> joint{256, 10, 11, 12, 13};
  const auto logits = forward<float>(m, nullptr, joint);
  std::vector<int> targets{kIgnoreTarget, kIgnoreTarget, 12, 13, kIgnoreTarget};
  CHECK(r.nll == doctest::Approx(lm_loss(logits, targets) * 2).epsilon(1e-6));
  // A long prefix is cut from the left rather than throwing.
  const auto long_prefix = random_tokens(20, 5);
  CHECK(continuation_nll(m, nullptr, long_prefix, cont).tokens == 2);
  CHECK_THROWS_AS(continuation_nll(m, nullptr, std::vector<int>{}, cont), Error);
}

TEST_CASE("analytic gradients match finite differences in float64") {
  auto base32 = init_base(tiny_config());
  jitter(base32, 21, 0.1);
  auto lora32 = init_adapter(base32, 0, 2, 5);
  jitter(lora32, 22, 0.1);
  auto model = cast_model<double>(base32);
  auto lora = cast_adapter<double>(lora32);
  const auto toks = random_tokens(8, 30);
  std::vector<int> targets(toks.begin() + 1, toks.end());
  targets.push_back(kIgnoreTarget);

  auto loss = [&]() {
    const auto logits = forward<double>(model, &lora, toks);
    return lm_loss(logits, targets) * 7.0;
  };

  auto base_grad = zeros_like_config<double>(model.config);
  auto lora_grad = zeros_like(lora);
  const auto ret = backprop<double>(model, &lora, toks, targets, 1.0, &base_grad, &lora_grad);
  CHECK(ret.tokens == 7);
  CHECK(ret.nll == doctest::Approx(loss()).epsilon(1e-10));

  const double h = 1e-5;
  double worst = 0;
  int checked = 0;
  auto probe = [&](Matrix<double>& param, const Matrix<double>& grad, uint64_t seed) {
    Rng rng(seed);
    for (int s = 0; s < 6; ++s) {
      const auto i = rng.below(param.size());
      const double orig = param.data[i];
      param.data[i] = orig + h;
      const double up = loss();
      param.data[i] = orig - h;
      const double down = loss();
      param.data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      if (std::abs(numeric) < 1e-6 && std::abs(grad.data[i]) < 1e-6) continue;
      worst = std::max(worst, rel_err(numeric, grad.data[i]));
      ++checked;
    }
  };

  std::vector<Matrix<double>*> grads;
  base_grad.for_each_tensor([&](const std::string&, Matrix<double>& g) { grads.push_back(&g); });
  std::size_t idx = 0;
  uint64_t seed = 100;
  model.for_each_tensor([&](const std::string&, Matrix<double>& p) { probe(p, *grads[idx++], seed++); });

  std::vector<Matrix<double>*> lgrads;
  lora_grad.for_each_tensor([&](const std::string&, Matrix<double>& g) { lgrads.push_back(&g); });
  idx = 0;
  lora.for_each_tensor([&](const std::string&, Matrix<double>& p) { probe(p, *lgrads[idx++], seed++); });

  CHECK(checked > 200);
  CHECK(worst < 1e-4);
}

TEST_CASE("backprop scale and null gradient buffers") {
  auto m = cast_model<double>(init_base(tiny_config()));
  const auto toks = random_tokens(6, 1);
  std::vector<int> targets(toks.begin() + 1, toks.end());
  targets.push_back(kIgnoreTarget);
  auto g1 = zeros_like_config<double>(m.config);
  auto g2 = zeros_like_config<double>(m.config);
  backprop<double>(m, nullptr, toks, targets, 1.0, &g1, nullptr);
  backprop<double>(m, nullptr, toks, targets, 0.5, &g2, nullptr);
  for (std::size_t i = 0; i < g1.head.size(); ++i) CHECK(g2.head.data[i] == doctest::Approx(0.5 * g1.head.data[i]));
  auto lg = zeros_like(cast_adapter<double>(init_adapter(init_base(tiny_config()), 0, 2, 1)));
  CHECK_THROWS_AS(backprop<double>(m, nullptr, toks, targets, 1.0, nullptr, &lg), Error);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-4) == doctest::Approx(1e-3));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-4) == doctest::Approx(1e-4));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-4) == doctest::Approx(5.5e-4));
}

TEST_CASE("AdamW first step moves each weight by lr against the gradient sign") {
  std::vector<float> p{1.0f, -2.0f, 0.5f};
  std::vector<float> g{0.3f, -4.0f, 0.0f};
  AdamW opt(0.9, 0.95, 0.0);
  opt.step({std::span<float>(p)}, {std::span<const float>(g)}, 0.01);
  CHECK(p[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-1.99).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.5));
  CHECK(opt.steps_taken() == 1);

  std::vector<float> q{1.0f};
  std::vector<float> zero{0.0f};
  AdamW decay(0.9, 0.95, 0.1);
  decay.step({std::span<float>(q)}, {std::span<const float>(zero)}, 0.01);
  CHECK(q[0] == doctest::Approx(1.0 - 0.01 * 0.1));
}

TEST_CASE("pretraining") {
  const auto syn = make_synthetic_corpus(2, 20, 10, 2);
  auto cfg = tiny_config();
  cfg.context_len = 32;
  cfg.d_model = 16;
  PretrainOptions opt;
  opt.batch_size = 4;
  opt.lr_max = 1e-2;
  opt.lr_min = 1e-3;

  SUBCASE("zero steps leave the model untouched") {
    auto m = init_base(cfg);
    opt.steps = 0;
    const auto r = pretrain_base(m, syn.corpus, opt);
    CHECK(r.losses.empty());
    CHECK(m == init_base(cfg));
  }
  SUBCASE("loss decreases and runs are reproducible") {
    opt.steps = 60;
    auto a = init_base(cfg);
    auto b = init_base(cfg);
    const auto ra = pretrain_base(a, syn.corpus, opt);
    opt.threads = 2;
    const auto rb = pretrain_base(b, syn.corpus, opt);
    REQUIRE(ra.losses.size() == 60);
    double head = 0, tail = 0;
    for (int i = 0; i < 5; ++i) {
      head += ra.losses[static_cast<std::size_t>(i)];
      tail += ra.losses[ra.losses.size() - 1 - static_cast<std::size_t>(i)];
    }
    CHECK(tail < 0.8 * head);
    CHECK(ra.losses == rb.losses);
    CHECK(a == b);
  }
  SUBCASE("frozen models refuse to train") {
    auto m = init_base(cfg);
    m.frozen = true;
    CHECK_THROWS_AS(pretrain_base(m, syn.corpus, opt), Error);
  }
}

TEST_CASE("base checkpoint round trip") {
  testutil::TempDir dir("base");
  auto m = init_base(tiny_config());
  m.frozen = true;
  save_base(m, dir.file("b.bse"));
  const auto back = load_base(dir.file("b.bse"));
  CHECK(back == m);
  CHECK(checksum(back) == checksum(m));
  const auto bytes = testutil::read_bytes(dir.file("b.bse"));
  testutil::write_text(dir.file("t.bse"), bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_base(dir.file("t.bse")), Error);
}
