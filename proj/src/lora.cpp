#include "moin/lora.hpp"

#include <algorithm>
#include <iostream>

#include "moin/common.hpp"

namespace moin {

namespace {
constexpr std::string_view kMagic = "MOIN-LRA";
constexpr uint32_t kVersion = 1;
constexpr double kInitStd = 0.02;
}  // namespace

LoraAdapter init_adapter(const BaseModel& base, uint64_t topic_id, int rank, uint64_t seed) {
  const auto& c = base.config;
  if (rank < 1) throw Error("init_adapter: rank must be >= 1");
  LoraAdapter adapter;
  adapter.topic_id = topic_id;
  adapter.rank = rank;
  adapter.meta.seed = seed;
  Rng rng(seed);
  bool warned = false;
  for (int b = 0; b < c.n_layers; ++b) {
    for (int s = 0; s < kLinearsPerBlock; ++s) {
      const auto slot = static_cast<LinearSlot>(s);
      const auto shape = linear_shape(c, slot);
      const int limit = std::min(shape.in_dim, shape.out_dim);
      if (rank > limit) {
        throw Error("init_adapter: rank " + std::to_string(rank) + " exceeds min(d, k) = " + std::to_string(limit) +
                    " for " + linear_name(b, slot));
      }
      if (!warned && rank * 4 > limit) {
        std::cerr << "warning: LoRA rank " << rank << " is above min(d, k)/4 for " << linear_name(b, slot) << '\n';
        warned = true;
      }
      LoraLayer<float> layer{linear_name(b, slot), Matrix<float>(rank, shape.in_dim),
                             Matrix<float>(shape.out_dim, rank)};
      for (auto& v : layer.a.data) v = static_cast<float>(rng.normal(0.0, kInitStd));
      adapter.layers.push_back(std::move(layer));
    }
  }
  return adapter;
}

template <class T>
BasicAdapter<T> zeros_like(const BasicAdapter<T>& adapter) {
  BasicAdapter<T> out;
  out.topic_id = adapter.topic_id;
  out.rank = adapter.rank;
  for (const auto& l : adapter.layers) {
    out.layers.push_back({l.name, Matrix<T>(l.a.rows, l.a.cols), Matrix<T>(l.b.rows, l.b.cols)});
  }
  return out;
}

template BasicAdapter<float> zeros_like(const BasicAdapter<float>&);
template BasicAdapter<double> zeros_like(const BasicAdapter<double>&);

template <class T>
std::vector<T> apply(const Matrix<T>& w, const Matrix<T>& wa, const Matrix<T>& wb, std::span<const T> x) {
  const int d = w.cols;
  const int k = w.rows;
  const int r = wa.rows;
  if (static_cast<int>(x.size()) != d || wa.cols != d || wb.rows != k || wb.cols != r) {
    throw Error("lora apply: shape mismatch");
  }
  std::vector<T> u(static_cast<std::size_t>(r), T{});
  for (int i = 0; i < r; ++i) {
    T s{};
    for (int j = 0; j < d; ++j) s += wa(i, j) * x[static_cast<std::size_t>(j)];
    u[static_cast<std::size_t>(i)] = s;
  }
  std::vector<T> y(static_cast<std::size_t>(k), T{});
  for (int i = 0; i < k; ++i) {
    T s{};
    for (int j = 0; j < d; ++j) s += w(i, j) * x[static_cast<std::size_t>(j)];
    T t{};
    for (int j = 0; j < r; ++j) t += wb(i, j) * u[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = s + t;
  }
  return y;
}

template std::vector<float> apply(const Matrix<float>&, const Matrix<float>&, const Matrix<float>&,
                                  std::span<const float>);
template std::vector<double> apply(const Matrix<double>&, const Matrix<double>&, const Matrix<double>&,
                                   std::span<const double>);

void validate_adapter(const LoraAdapter& adapter, const BaseModelConfig& config) {
  const std::size_t expected = static_cast<std::size_t>(config.n_layers) * kLinearsPerBlock;
  if (adapter.layers.size() != expected) {
    throw Error("adapter for topic " + std::to_string(adapter.topic_id) + " has " +
                std::to_string(adapter.layers.size()) + " layers, base expects " + std::to_string(expected));
  }
  for (int b = 0; b < config.n_layers; ++b) {
    for (int s = 0; s < kLinearsPerBlock; ++s) {
      const auto slot = static_cast<LinearSlot>(s);
      const auto& l = adapter.layer(b, slot);
      const auto shape = linear_shape(config, slot);
      if (l.name != linear_name(b, slot)) throw Error("adapter layer " + l.name + " does not exist in the base model");
      if (l.a.rows != adapter.rank || l.a.cols != shape.in_dim || l.b.rows != shape.out_dim ||
          l.b.cols != adapter.rank) {
        throw Error("adapter layer " + l.name + " shape does not match the base model");
      }
    }
  }
}

std::size_t added_parameters(const LoraAdapter& adapter) {
  std::size_t n = 0;
  for (const auto& l : adapter.layers) n += l.a.size() + l.b.size();
  return n;
}

std::size_t added_parameters(const BaseModelConfig& config, int rank) {
  std::size_t n = 0;
  for (int s = 0; s < kLinearsPerBlock; ++s) {
    const auto shape = linear_shape(config, static_cast<LinearSlot>(s));
    n += static_cast<std::size_t>(rank) * static_cast<std::size_t>(shape.in_dim + shape.out_dim);
  }
  return n * static_cast<std::size_t>(config.n_layers);
}

BaseModel merge_adapter(const BaseModel& base, const LoraAdapter& adapter) {
  validate_adapter(adapter, base.config);
  BaseModel out = base;
  for (int b = 0; b < base.config.n_layers; ++b) {
    for (int s = 0; s < kLinearsPerBlock; ++s) {
      const auto slot = static_cast<LinearSlot>(s);
      auto& w = out.blocks[static_cast<std::size_t>(b)].at(slot);
      const auto& l = adapter.layer(b, slot);
      for (int i = 0; i < w.rows; ++i) {
        for (int j = 0; j < w.cols; ++j) {
          double acc = 0.0;
          for (int q = 0; q < adapter.rank; ++q) acc += static_cast<double>(l.b(i, q)) * l.a(q, j);
          w(i, j) = static_cast<float>(static_cast<double>(w(i, j)) + acc);
        }
      }
    }
  }
  return out;
}

uint64_t checksum(const LoraAdapter& adapter) {
  uint64_t h = kFnvOffset;
  for (const auto& l : adapter.layers) {
    h = fnv1a64(l.name, h);
    h = fnv1a64_bytes(l.a.data.data(), l.a.size() * sizeof(float), h);
    h = fnv1a64_bytes(l.b.data.data(), l.b.size() * sizeof(float), h);
  }
  return h;
}

void save_adapter(const LoraAdapter& adapter, const std::string& path) {
  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u64(adapter.topic_id);
  w.u32(static_cast<uint32_t>(adapter.rank));
  w.u32(static_cast<uint32_t>(adapter.layers.size()));
  for (const auto& l : adapter.layers) {
    w.str(l.name);
    w.u32(static_cast<uint32_t>(l.a.cols));
    w.u32(static_cast<uint32_t>(l.b.rows));
    w.f32s(l.a.data);
    w.f32s(l.b.data);
  }
  w.u64(adapter.meta.tokens_seen);
  w.f32(adapter.meta.final_loss);
  w.u64(adapter.meta.seed);
  w.close();
}

LoraAdapter load_adapter(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kMagic);
  if (const uint32_t version = r.u32("version"); version != kVersion) {
    throw Error(path + ": unsupported adapter version " + std::to_string(version));
  }
  LoraAdapter a;
  a.topic_id = r.u64("topic_id");
  a.rank = static_cast<int>(r.u32("rank"));
  const uint32_t count = r.u32("layer count");
  for (uint32_t i = 0; i < count; ++i) {
    LoraLayer<float> l;
    l.name = r.str("layer name");
    const int d = static_cast<int>(r.u32(l.name + " d"));
    const int k = static_cast<int>(r.u32(l.name + " k"));
    l.a = Matrix<float>(a.rank, d);
    l.b = Matrix<float>(k, a.rank);
    r.f32s(l.a.data, "tensor " + l.name + ".a");
    r.f32s(l.b.data, "tensor " + l.name + ".b");
    a.layers.push_back(std::move(l));
  }
  a.meta.tokens_seen = r.u64("metadata");
  a.meta.final_loss = r.f32("metadata");
  a.meta.seed = r.u64("metadata");
  return a;
}

}  // namespace moin
