#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moin/corpus.hpp"

namespace moin {

template <class T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), T{}) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + c]; }
  const T& operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + c];
  }
  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
  std::size_t size() const { return data.size(); }
  void zero() { std::fill(data.begin(), data.end(), T{}); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct BaseModelConfig {
  int vocab_size = kVocabSize;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int context_len = 128;
  int mlp_hidden = 256;
  double rms_norm_eps = 1e-5;
  uint64_t init_seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  friend bool operator==(const BaseModelConfig&, const BaseModelConfig&) = default;
};

// The seven linear projections of a block, in adapter layer order.
enum class LinearSlot : int { q = 0, k, v, o, gate, up, down };
inline constexpr int kLinearsPerBlock = 7;
inline constexpr std::array<std::string_view, kLinearsPerBlock> kSlotNames = {"attn.q", "attn.k", "attn.v", "attn.o",
                                                                             "mlp.gate", "mlp.up", "mlp.down"};

struct LinearLayerShape {
  int in_dim = 0;   // d
  int out_dim = 0;  // k

  friend bool operator==(const LinearLayerShape&, const LinearLayerShape&) = default;
};

LinearLayerShape linear_shape(const BaseModelConfig& config, LinearSlot slot);
std::string linear_name(int block, LinearSlot slot);

template <class T>
struct BlockWeights {
  Matrix<T> attn_norm;  // 1 x d
  std::array<Matrix<T>, kLinearsPerBlock> linear;  // indexed by LinearSlot, each out x in
  Matrix<T> mlp_norm;   // 1 x d

  Matrix<T>& at(LinearSlot s) { return linear[static_cast<std::size_t>(s)]; }
  const Matrix<T>& at(LinearSlot s) const { return linear[static_cast<std::size_t>(s)]; }
  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

// Pre-norm decoder-only transformer: learned token and absolute position
// embeddings, RMSNorm, causal multi-head attention, SiLU-gated MLP, untied head.
template <class T>
struct BasicModel {
  BaseModelConfig config;
  Matrix<T> tok_emb;  // vocab x d
  Matrix<T> pos_emb;  // context_len x d
  std::vector<BlockWeights<T>> blocks;
  Matrix<T> final_norm;  // 1 x d
  Matrix<T> head;        // vocab x d
  bool frozen = false;

  // Visits every tensor in a fixed order with its checkpoint name.
  template <class F>
  void for_each_tensor(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string prefix = "blocks." + std::to_string(b) + ".";
      f(prefix + "attn_norm", blocks[b].attn_norm);
      for (int s = 0; s < kLinearsPerBlock; ++s) {
        f(prefix + std::string(kSlotNames[static_cast<std::size_t>(s)]), blocks[b].linear[static_cast<std::size_t>(s)]);
      }
      f(prefix + "mlp_norm", blocks[b].mlp_norm);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("head"), head);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<BasicModel*>(this)->for_each_tensor([&](const std::string& name, Matrix<T>& m) {
      f(name, static_cast<const Matrix<T>&>(m));
    });
  }

  friend bool operator==(const BasicModel&, const BasicModel&) = default;
};

using BaseModel = BasicModel<float>;

// Allocates a model with every tensor zeroed (also used as a gradient buffer).
template <class T>
BasicModel<T> zeros_like_config(const BaseModelConfig& config);

// Normal(0, 0.02) for embeddings and projections, ones for norms.
BaseModel init_base(const BaseModelConfig& config);

std::size_t parameter_count(const BaseModelConfig& config);

// FNV-1a over all tensor bytes in visiting order.
uint64_t checksum(const BaseModel& model);

template <class U, class T>
BasicModel<U> cast_model(const BasicModel<T>& model) {
  BasicModel<U> out = zeros_like_config<U>(model.config);
  out.frozen = model.frozen;
  std::vector<const Matrix<T>*> src;
  model.for_each_tensor([&](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, Matrix<U>& m) {
    const Matrix<T>& s = *src[i++];
    for (std::size_t j = 0; j < m.data.size(); ++j) m.data[j] = static_cast<U>(s.data[j]);
  });
  return out;
}

void save_base(const BaseModel& model, const std::string& path);
BaseModel load_base(const std::string& path);

}  // namespace moin
