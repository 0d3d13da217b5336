#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moin/corpus.hpp"
#include "moin/embedder.hpp"

namespace moin {

struct TopicModel {
  int k = 0;
  int dim = 0;
  std::vector<float> centroids;  // k x dim, row-major
  std::vector<uint64_t> doc_counts;
  std::vector<uint8_t> retained;
  std::vector<std::vector<std::string>> keywords;  // empty until extracted
  uint64_t kmeans_seed = 0;

  std::span<const float> centroid(int t) const {
    return {centroids.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(dim),
            static_cast<std::size_t>(dim)};
  }
  bool is_retained(int t) const { return retained[static_cast<std::size_t>(t)] != 0; }
  int retained_count() const;
  uint64_t total_docs() const;
  friend bool operator==(const TopicModel&, const TopicModel&) = default;
};

// doc_id -> topic index.
struct Assignment {
  std::map<uint64_t, int> topic_of;

  int at(uint64_t doc_id) const;
  std::size_t size() const { return topic_of.size(); }
};

struct KMeansResult {
  TopicModel model;
  std::vector<int> labels;           // per input embedding
  std::vector<double> wcss_history;  // one entry per assignment pass
  int iterations = 0;
  bool converged = false;
};

// Lloyd's algorithm with k-means++ seeding. Distances are Euclidean; ties go to
// the lowest centroid index. An empty cluster is re-seeded with the point
// farthest from its current centroid. With restarts > 1 the run with the lowest
// final WCSS wins (earliest on ties); restart 0 uses `seed` itself.
KMeansResult kmeans_fit(const std::vector<EmbeddingVector>& embeddings, int k, uint64_t seed, int max_iters,
                        double tol, int restarts = 1);

Assignment make_assignment(const Corpus& corpus, const std::vector<int>& labels);

double squared_distance(std::span<const float> a, std::span<const float> b);

int assign(const EmbeddingVector& embedding, const TopicModel& model);

TopicModel prune(const TopicModel& model, uint64_t min_docs);

// Class-based TF-IDF: W(t, c) = tf(t, c) * ln(1 + A / f(t)), where A is the mean
// word count over non-empty classes. Returns top_n words per topic, ties broken
// lexicographically.
std::vector<std::vector<std::string>> ctfidf_keywords(const Corpus& corpus, const Assignment& assignment,
                                                      const TopicModel& model, int top_n);

// Same weights, exposed for inspection and tests.
std::vector<std::map<std::string, double>> ctfidf_weights(const Corpus& corpus, const Assignment& assignment,
                                                          const TopicModel& model);

void save_topic_model(const TopicModel& model, const std::string& path);
TopicModel load_topic_model(const std::string& path);

}  // namespace moin
