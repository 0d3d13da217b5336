#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moin/model.hpp"

namespace moin {

template <class T>
struct LoraLayer {
  std::string name;
  Matrix<T> a;  // r x d
  Matrix<T> b;  // k x r

  friend bool operator==(const LoraLayer&, const LoraLayer&) = default;
};

struct TrainMeta {
  uint64_t tokens_seen = 0;
  float final_loss = 0.0f;
  uint64_t seed = 0;

  friend bool operator==(const TrainMeta&, const TrainMeta&) = default;
};

// One expert: a rank-r factor pair for every attention and MLP projection of
// every block, stored in block-major LinearSlot order. Embeddings and the
// output head are not adapted.
template <class T>
struct BasicAdapter {
  uint64_t topic_id = 0;
  int rank = 0;
  std::vector<LoraLayer<T>> layers;
  TrainMeta meta;

  const LoraLayer<T>& layer(int block, LinearSlot slot) const {
    return layers[static_cast<std::size_t>(block * kLinearsPerBlock + static_cast<int>(slot))];
  }
  LoraLayer<T>& layer(int block, LinearSlot slot) {
    return layers[static_cast<std::size_t>(block * kLinearsPerBlock + static_cast<int>(slot))];
  }

  template <class F>
  void for_each_tensor(F&& f) {
    for (auto& l : layers) {
      f(l.name + ".a", l.a);
      f(l.name + ".b", l.b);
    }
  }

  friend bool operator==(const BasicAdapter&, const BasicAdapter&) = default;
};

using LoraAdapter = BasicAdapter<float>;

// W_a ~ Normal(0, 0.02) seeded, W_b = 0, so a fresh adapter is an exact no-op.
// Logs a warning to stderr when rank exceeds min(d, k) / 4 for some layer.
LoraAdapter init_adapter(const BaseModel& base, uint64_t topic_id, int rank, uint64_t seed);

// Zero-valued adapter with the same layout (gradient buffer).
template <class T>
BasicAdapter<T> zeros_like(const BasicAdapter<T>& adapter);

// y = W x + W_b (W_a x). No scaling factor, no dropout.
template <class T>
std::vector<T> apply(const Matrix<T>& w, const Matrix<T>& wa, const Matrix<T>& wb, std::span<const T> x);

// Throws unless every layer name exists in the base with matching d and k.
void validate_adapter(const LoraAdapter& adapter, const BaseModelConfig& config);

std::size_t added_parameters(const LoraAdapter& adapter);
std::size_t added_parameters(const BaseModelConfig& config, int rank);

// Base with W' = W + W_b W_a materialized in every adapted layer.
BaseModel merge_adapter(const BaseModel& base, const LoraAdapter& adapter);

uint64_t checksum(const LoraAdapter& adapter);

template <class U, class T>
BasicAdapter<U> cast_adapter(const BasicAdapter<T>& adapter) {
  BasicAdapter<U> out;
  out.topic_id = adapter.topic_id;
  out.rank = adapter.rank;
  out.meta = adapter.meta;
  for (const auto& l : adapter.layers) {
    LoraLayer<U> nl{l.name, Matrix<U>(l.a.rows, l.a.cols), Matrix<U>(l.b.rows, l.b.cols)};
    for (std::size_t i = 0; i < l.a.data.size(); ++i) nl.a.data[i] = static_cast<U>(l.a.data[i]);
    for (std::size_t i = 0; i < l.b.data.size(); ++i) nl.b.data[i] = static_cast<U>(l.b.data[i]);
    out.layers.push_back(std::move(nl));
  }
  return out;
}

void save_adapter(const LoraAdapter& adapter, const std::string& path);
LoraAdapter load_adapter(const std::string& path);

}  // namespace moin
