#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace moin {

struct EmbedderConfig {
  int dimension = 64;
  int ngram_size = 3;
  int hash_buckets = 4096;
  uint64_t projection_seed = 0x4d6f494e;
  // Queries longer than this many bytes are cut before embedding. 0 = no cap.
  std::size_t max_chars = 1 << 20;

  void validate() const;
};

struct EmbeddingVector {
  std::vector<float> values;
  // Set for empty text: values are all zero instead of unit norm.
  bool degenerate = false;

  std::size_t dim() const { return values.size(); }
  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

// Deterministic text embedding:
//   1. ASCII-lowercase the bytes.
//   2. Take every byte n-gram of length ngram_size (a shorter non-empty text is
//      one gram).
//   3. Hash each gram with 64-bit FNV-1a; bucket = hash mod hash_buckets.
//   4. Scale counts sublinearly: tf -> 1 + ln(tf).
//   5. Project with a D x B sign matrix scaled by 1/sqrt(D). The sign of entry
//      (i, j) is bit (i mod 64) of splitmix64(mix_seed(seed, j * W + i / 64)),
//      W = ceil(D / 64), so the matrix is never materialized.
//   6. L2-normalize.
EmbeddingVector embed(std::string_view text, const EmbedderConfig& config);
std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts, const EmbedderConfig& config,
                                         int threads = 1);

// Projection entry as used by embed(); exposed for tests.
double projection_entry(const EmbedderConfig& config, int row, int bucket);

void save_embeddings(const std::vector<EmbeddingVector>& vectors, int dim, const std::string& path);
std::vector<EmbeddingVector> load_embeddings(const std::string& path);

double dot(const EmbeddingVector& a, const EmbeddingVector& b);

}  // namespace moin
