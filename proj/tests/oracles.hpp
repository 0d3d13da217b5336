#pragma once

// Independent reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace oracle {

inline double choose2(double n) { return n * (n - 1.0) / 2.0; }

// Adjusted Rand index from the contingency table.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<int, int>, double> nij;
  std::map<int, double> ai, bj;
  for (std::size_t i = 0; i < a.size(); ++i) {
    nij[{a[i], b[i]}] += 1;
    ai[a[i]] += 1;
    bj[b[i]] += 1;
  }
  double index = 0, sa = 0, sb = 0;
  for (auto& [k, v] : nij) index += choose2(v);
  for (auto& [k, v] : ai) sa += choose2(v);
  for (auto& [k, v] : bj) sb += choose2(v);
  const double expected = sa * sb / choose2(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

// Linear scan nearest centroid; strict < keeps the lowest index on ties.
inline int nearest(const std::vector<float>& x, const std::vector<std::vector<float>>& centroids,
                   const std::vector<bool>* allowed = nullptr) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    if (allowed && !(*allowed)[c]) continue;
    double d = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = static_cast<double>(x[j]) - centroids[c][j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// Scalar softmax cross-entropy, written out directly.
inline double cross_entropy(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets) {
  double total = 0;
  int count = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (targets[i] < 0) continue;
    double z = 0;
    for (double v : logits[i]) z += std::exp(v);
    total += -std::log(std::exp(logits[i][static_cast<std::size_t>(targets[i])]) / z);
    ++count;
  }
  return total / count;
}

// Reference LRU: a vector ordered oldest -> newest.
struct LruEvent {
  bool hit = false;
  std::optional<int> evicted;
  bool operator==(const LruEvent&) const = default;
};

class ReferenceLru {
 public:
  explicit ReferenceLru(std::size_t capacity) : capacity_(capacity) {}
  LruEvent access(int key) {
    LruEvent ev;
    auto it = std::find(order_.begin(), order_.end(), key);
    if (it != order_.end()) {
      ev.hit = true;
      order_.erase(it);
      order_.push_back(key);
      return ev;
    }
    order_.push_back(key);
    if (order_.size() > capacity_) {
      ev.evicted = order_.front();
      order_.erase(order_.begin());
    }
    return ev;
  }

 private:
  std::size_t capacity_;
  std::vector<int> order_;
};

// Closed-form parameter count of the toy decoder, counted tensor by tensor.
inline std::size_t decoder_params(int vocab, int d, int layers, int ctx, int hidden) {
  std::size_t n = 0;
  n += static_cast<std::size_t>(vocab) * d;  // token embedding
  n += static_cast<std::size_t>(ctx) * d;    // positions
  for (int l = 0; l < layers; ++l) {
    n += d;                                        // attn norm
    n += 4 * static_cast<std::size_t>(d) * d;      // q k v o
    n += d;                                        // mlp norm
    n += 3 * static_cast<std::size_t>(d) * hidden;  // gate up down
  }
  n += d;                                    // final norm
  n += static_cast<std::size_t>(vocab) * d;  // head
  return n;
}

// (W + B A) x with an explicitly materialized dense matrix.
inline std::vector<double> dense_merge_apply(const std::vector<std::vector<double>>& w,
                                             const std::vector<std::vector<double>>& a,
                                             const std::vector<std::vector<double>>& b, const std::vector<double>& x) {
  const std::size_t k = w.size(), d = x.size(), r = a.size();
  std::vector<double> y(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double merged = w[i][j];
      for (std::size_t q = 0; q < r; ++q) merged += b[i][q] * a[q][j];
      y[i] += merged * x[j];
    }
  }
  return y;
}

// Minimum WCSS over all 2-partitions of a small point set (brute force).
inline std::vector<int> best_two_partition(const std::vector<std::vector<double>>& pts) {
  const std::size_t n = pts.size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_labels;
  for (uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = (mask >> i) & 1u;
    double cost = 0;
    for (int c = 0; c < 2; ++c) {
      std::vector<double> mean(pts[0].size(), 0.0);
      int count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != c) continue;
        ++count;
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += pts[i][j];
      }
      for (auto& m : mean) m /= count;
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != c) continue;
        for (std::size_t j = 0; j < mean.size(); ++j) cost += (pts[i][j] - mean[j]) * (pts[i][j] - mean[j]);
      }
    }
    if (cost < best) {
      best = cost;
      best_labels = labels;
    }
  }
  return best_labels;
}

// True when two labelings describe the same partition.
inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (ab.count(a[i]) && ab[a[i]] != b[i]) return false;
    if (ba.count(b[i]) && ba[b[i]] != a[i]) return false;
    ab[a[i]] = b[i];
    ba[b[i]] = a[i];
  }
  return true;
}

}  // namespace oracle
