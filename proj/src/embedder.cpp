#include "moin/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "moin/common.hpp"

namespace moin {

namespace {
constexpr std::string_view kMagic = "MOIN-EMB";
constexpr uint32_t kVersion = 1;
}  // namespace

void EmbedderConfig::validate() const {
  if (dimension < 2) throw Error("embedder: dimension must be >= 2");
  if (ngram_size < 1) throw Error("embedder: ngram_size must be >= 1");
  if (hash_buckets < dimension) throw Error("embedder: hash_buckets must be >= dimension");
}

double projection_entry(const EmbedderConfig& config, int row, int bucket) {
  const uint64_t words = static_cast<uint64_t>((config.dimension + 63) / 64);
  const uint64_t stream = static_cast<uint64_t>(bucket) * words + static_cast<uint64_t>(row / 64);
  const uint64_t bits = splitmix64(mix_seed(config.projection_seed, stream));
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.dimension));
  return ((bits >> (row % 64)) & 1U) ? scale : -scale;
}

EmbeddingVector embed(std::string_view text, const EmbedderConfig& config) {
  config.validate();
  EmbeddingVector out;
  out.values.assign(static_cast<std::size_t>(config.dimension), 0.0f);
  if (config.max_chars > 0 && text.size() > config.max_chars) text = text.substr(0, config.max_chars);
  if (text.empty()) {
    out.degenerate = true;
    return out;
  }
  const std::string lower = to_lower_ascii(text);
  const std::size_t n = static_cast<std::size_t>(config.ngram_size);

  // Ordered map keeps the accumulation order independent of hashing layout.
  std::map<uint32_t, int> counts;
  const auto bucket_of = [&](std::string_view gram) {
    return static_cast<uint32_t>(fnv1a64(gram) % static_cast<uint64_t>(config.hash_buckets));
  };
  if (lower.size() < n) {
    ++counts[bucket_of(lower)];
  } else {
    for (std::size_t i = 0; i + n <= lower.size(); ++i) ++counts[bucket_of(std::string_view(lower).substr(i, n))];
  }

  const int d = config.dimension;
  const uint64_t words = static_cast<uint64_t>((d + 63) / 64);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
  for (const auto& [bucket, tf] : counts) {
    const double weight = (1.0 + std::log(static_cast<double>(tf))) * scale;
    for (uint64_t w = 0; w < words; ++w) {
      const uint64_t bits = splitmix64(mix_seed(config.projection_seed, bucket * words + w));
      const int lo = static_cast<int>(w * 64);
      const int hi = std::min(d, lo + 64);
      for (int i = lo; i < hi; ++i) {
        acc[static_cast<std::size_t>(i)] += ((bits >> (i - lo)) & 1U) ? weight : -weight;
      }
    }
  }
  double norm2 = 0.0;
  for (double v : acc) norm2 += v * v;
  if (norm2 <= 0.0) {
    out.degenerate = true;
    return out;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (int i = 0; i < d; ++i) out.values[static_cast<std::size_t>(i)] = static_cast<float>(acc[static_cast<std::size_t>(i)] * inv);
  return out;
}

std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts, const EmbedderConfig& config,
                                         int threads) {
  config.validate();
  std::vector<EmbeddingVector> out(texts.size());
  parallel_for(texts.size(), threads, [&](std::size_t i) { out[i] = embed(texts[i], config); });
  return out;
}

double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim()) throw Error("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += static_cast<double>(a.values[i]) * b.values[i];
  return s;
}

void save_embeddings(const std::vector<EmbeddingVector>& vectors, int dim, const std::string& path) {
  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u64(vectors.size());
  w.u32(static_cast<uint32_t>(dim));
  for (const auto& v : vectors) {
    if (static_cast<int>(v.dim()) != dim) throw Error("save_embeddings: dimension mismatch");
    w.f32s(v.values);
  }
  w.close();
}

std::vector<EmbeddingVector> load_embeddings(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kMagic);
  if (const uint32_t version = r.u32("version"); version != kVersion) {
    throw Error(path + ": unsupported embedding file version " + std::to_string(version));
  }
  const uint64_t count = r.u64("count");
  const uint32_t dim = r.u32("dim");
  std::vector<EmbeddingVector> out(count);
  for (uint64_t i = 0; i < count; ++i) {
    out[i].values.resize(dim);
    r.f32s(out[i].values, "embedding row " + std::to_string(i));
    out[i].degenerate = std::all_of(out[i].values.begin(), out[i].values.end(), [](float v) { return v == 0.0f; });
  }
  return out;
}

}  // namespace moin
