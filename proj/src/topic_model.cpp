#include "moin/topic_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "moin/common.hpp"

namespace moin {

namespace {
constexpr std::string_view kMagic = "MOIN-TPC";
constexpr uint32_t kVersion = 1;

double sq_dist(const float* x, const double* c, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = static_cast<double>(x[i]) - c[i];
    s += diff * diff;
  }
  return s;
}

// Nearest centroid by squared distance; ties to the lowest index.
std::pair<int, double> nearest(const float* x, const std::vector<double>& centroids, int k, std::size_t d) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < k; ++c) {
    const double dist = sq_dist(x, centroids.data() + static_cast<std::size_t>(c) * d, d);
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return {best, best_d};
}
}  // namespace

int TopicModel::retained_count() const {
  return static_cast<int>(std::count_if(retained.begin(), retained.end(), [](uint8_t r) { return r != 0; }));
}

uint64_t TopicModel::total_docs() const { return std::accumulate(doc_counts.begin(), doc_counts.end(), uint64_t{0}); }

int Assignment::at(uint64_t doc_id) const {
  auto it = topic_of.find(doc_id);
  if (it == topic_of.end()) throw Error("assignment does not cover doc_id " + std::to_string(doc_id));
  return it->second;
}

double squared_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw Error("squared_distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += diff * diff;
  }
  return s;
}

namespace {

KMeansResult fit_once(const std::vector<EmbeddingVector>& embeddings, int k, uint64_t seed, int max_iters,
                      double tol) {
  if (k < 1) throw Error("kmeans_fit: k must be >= 1");
  if (max_iters < 1) throw Error("kmeans_fit: max_iters must be >= 1");
  if (tol < 0) throw Error("kmeans_fit: tol must be >= 0");
  const std::size_t n = embeddings.size();
  if (static_cast<std::size_t>(k) > n) {
    throw Error("kmeans_fit: k = " + std::to_string(k) + " exceeds number of points " + std::to_string(n));
  }
  const std::size_t d = embeddings.front().dim();
  for (std::size_t i = 0; i < n; ++i) {
    if (embeddings[i].dim() != d) throw Error("kmeans_fit: embedding " + std::to_string(i) + " has wrong dimension");
  }
  const auto point = [&](std::size_t i) { return embeddings[i].values.data(); };

  // k-means++ seeding.
  Rng rng(seed);
  std::vector<double> centroids(static_cast<std::size_t>(k) * d);
  auto set_centroid = [&](int c, std::size_t i) {
    for (std::size_t j = 0; j < d; ++j) centroids[static_cast<std::size_t>(c) * d + j] = point(i)[j];
  };
  set_centroid(0, rng.below(n));
  std::vector<double> closest(n);
  for (std::size_t i = 0; i < n; ++i) closest[i] = sq_dist(point(i), centroids.data(), d);
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(closest.begin(), closest.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += closest[i];
        if (run > target && closest[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    set_centroid(c, pick);
    const double* cc = centroids.data() + static_cast<std::size_t>(c) * d;
    for (std::size_t i = 0; i < n; ++i) closest[i] = std::min(closest[i], sq_dist(point(i), cc, d));
  }

  KMeansResult result;
  std::vector<int> labels(n);
  std::vector<double> dists(n);
  auto assign_all = [&] {
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto [c, dist] = nearest(point(i), centroids, k, d);
      labels[i] = c;
      dists[i] = dist;
      wcss += dist;
    }
    result.wcss_history.push_back(wcss);
  };
  assign_all();

  for (int iter = 0; iter < max_iters; ++iter) {
    std::vector<double> next(static_cast<std::size_t>(k) * d, 0.0);
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) next[c * d + j] += point(i)[j];
    }
    // Farthest points in descending distance order, ties to the lowest index.
    std::vector<std::size_t> by_distance;
    std::size_t reseed_cursor = 0;
    for (int c = 0; c < k; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      if (counts[cu] > 0) {
        for (std::size_t j = 0; j < d; ++j) next[cu * d + j] /= static_cast<double>(counts[cu]);
        continue;
      }
      if (by_distance.empty()) {
        by_distance.resize(n);
        std::iota(by_distance.begin(), by_distance.end(), std::size_t{0});
        std::stable_sort(by_distance.begin(), by_distance.end(),
                         [&](std::size_t a, std::size_t b) { return dists[a] > dists[b]; });
      }
      const std::size_t p = by_distance[reseed_cursor++];
      for (std::size_t j = 0; j < d; ++j) next[cu * d + j] = point(p)[j];
      dists[p] = 0.0;
    }
    double movement = 0.0;
    for (int c = 0; c < k; ++c) {
      double m = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = next[static_cast<std::size_t>(c) * d + j] - centroids[static_cast<std::size_t>(c) * d + j];
        m += diff * diff;
      }
      movement = std::max(movement, std::sqrt(m));
    }
    centroids = std::move(next);
    assign_all();
    result.iterations = iter + 1;
    if (movement < tol || (tol == 0.0 && movement == 0.0)) {
      result.converged = true;
      break;
    }
  }

  TopicModel& model = result.model;
  model.k = k;
  model.dim = static_cast<int>(d);
  model.kmeans_seed = seed;
  model.centroids.resize(centroids.size());
  for (std::size_t i = 0; i < centroids.size(); ++i) model.centroids[i] = static_cast<float>(centroids[i]);
  model.doc_counts.assign(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++model.doc_counts[static_cast<std::size_t>(l)];
  model.retained.assign(static_cast<std::size_t>(k), 1);
  result.labels = std::move(labels);
  return result;
}

}  // namespace

KMeansResult kmeans_fit(const std::vector<EmbeddingVector>& embeddings, int k, uint64_t seed, int max_iters,
                        double tol, int restarts) {
  if (restarts < 1) throw Error("kmeans_fit: restarts must be >= 1");
  KMeansResult best = fit_once(embeddings, k, seed, max_iters, tol);
  for (int r = 1; r < restarts; ++r) {
    KMeansResult run = fit_once(embeddings, k, mix_seed(seed, static_cast<uint64_t>(r)), max_iters, tol);
    if (run.wcss_history.back() < best.wcss_history.back()) best = std::move(run);
  }
  best.model.kmeans_seed = seed;
  return best;
}

Assignment make_assignment(const Corpus& corpus, const std::vector<int>& labels) {
  if (labels.size() != corpus.size()) throw Error("make_assignment: label count does not match corpus size");
  Assignment a;
  for (std::size_t i = 0; i < labels.size(); ++i) a.topic_of[corpus.documents[i].doc_id] = labels[i];
  return a;
}

int assign(const EmbeddingVector& embedding, const TopicModel& model) {
  if (static_cast<int>(embedding.dim()) != model.dim) {
    throw Error("assign: embedding dimension " + std::to_string(embedding.dim()) + " does not match model dimension " +
                std::to_string(model.dim));
  }
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int t = 0; t < model.k; ++t) {
    const double dist = squared_distance(embedding.values, model.centroid(t));
    if (dist < best_d) {
      best_d = dist;
      best = t;
    }
  }
  return best;
}

TopicModel prune(const TopicModel& model, uint64_t min_docs) {
  TopicModel out = model;
  for (int t = 0; t < model.k; ++t) {
    out.retained[static_cast<std::size_t>(t)] = model.doc_counts[static_cast<std::size_t>(t)] >= min_docs ? 1 : 0;
  }
  if (out.retained_count() == 0) throw Error("no retained topics");
  return out;
}

std::vector<std::map<std::string, double>> ctfidf_weights(const Corpus& corpus, const Assignment& assignment,
                                                          const TopicModel& model) {
  std::vector<std::map<std::string, uint64_t>> tf(static_cast<std::size_t>(model.k));
  std::map<std::string, uint64_t> total;
  std::vector<uint64_t> class_words(static_cast<std::size_t>(model.k), 0);
  for (const auto& doc : corpus.documents) {
    const int t = assignment.at(doc.doc_id);
    if (t < 0 || t >= model.k) throw Error("ctfidf: topic index out of range");
    for (auto& w : split_words(doc.text)) {
      ++tf[static_cast<std::size_t>(t)][w];
      ++total[w];
      ++class_words[static_cast<std::size_t>(t)];
    }
  }
  const auto nonempty = std::count_if(class_words.begin(), class_words.end(), [](uint64_t c) { return c > 0; });
  const double all_words = static_cast<double>(std::accumulate(class_words.begin(), class_words.end(), uint64_t{0}));
  const double avg = nonempty > 0 ? all_words / static_cast<double>(nonempty) : 0.0;

  std::vector<std::map<std::string, double>> weights(static_cast<std::size_t>(model.k));
  for (std::size_t c = 0; c < tf.size(); ++c) {
    for (const auto& [term, count] : tf[c]) {
      weights[c][term] = static_cast<double>(count) * std::log(1.0 + avg / static_cast<double>(total.at(term)));
    }
  }
  return weights;
}

std::vector<std::vector<std::string>> ctfidf_keywords(const Corpus& corpus, const Assignment& assignment,
                                                      const TopicModel& model, int top_n) {
  const auto weights = ctfidf_weights(corpus, assignment, model);
  std::vector<std::vector<std::string>> out(weights.size());
  for (std::size_t c = 0; c < weights.size(); ++c) {
    std::vector<std::pair<std::string, double>> ranked(weights[c].begin(), weights[c].end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(std::max(0, top_n)));
    for (std::size_t i = 0; i < n; ++i) out[c].push_back(ranked[i].first);
  }
  return out;
}

void save_topic_model(const TopicModel& model, const std::string& path) {
  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(model.k));
  w.u32(static_cast<uint32_t>(model.dim));
  w.u64(model.kmeans_seed);
  w.f32s(model.centroids);
  for (uint64_t c : model.doc_counts) w.u64(c);
  for (uint8_t r : model.retained) w.u8(r);
  if (!model.keywords.empty()) {
    for (int t = 0; t < model.k; ++t) {
      const auto& kw = model.keywords[static_cast<std::size_t>(t)];
      w.u32(static_cast<uint32_t>(kw.size()));
      for (const auto& s : kw) w.str(s);
    }
  }
  w.close();
}

TopicModel load_topic_model(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kMagic);
  if (const uint32_t version = r.u32("version"); version != kVersion) {
    throw Error(path + ": unsupported topic model version " + std::to_string(version));
  }
  TopicModel m;
  m.k = static_cast<int>(r.u32("k"));
  m.dim = static_cast<int>(r.u32("dim"));
  m.kmeans_seed = r.u64("seed");
  m.centroids.resize(static_cast<std::size_t>(m.k) * static_cast<std::size_t>(m.dim));
  r.f32s(m.centroids, "centroids");
  m.doc_counts.resize(static_cast<std::size_t>(m.k));
  for (auto& c : m.doc_counts) c = r.u64("doc_counts");
  m.retained.resize(static_cast<std::size_t>(m.k));
  for (auto& x : m.retained) x = r.u8("retained");
  if (!r.at_end()) {
    m.keywords.resize(static_cast<std::size_t>(m.k));
    for (auto& kw : m.keywords) {
      const uint32_t count = r.u32("keyword count");
      for (uint32_t i = 0; i < count; ++i) kw.push_back(r.str("keyword"));
    }
  }
  return m;
}

}  // namespace moin
