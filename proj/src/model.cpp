#include "moin/model.hpp"

#include <bit>

#include "moin/common.hpp"

namespace moin {

namespace {
constexpr std::string_view kMagic = "MOIN-BSE";
constexpr uint32_t kVersion = 1;
constexpr double kInitStd = 0.02;
}  // namespace

void BaseModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || context_len < 1 || mlp_hidden < 1) {
    throw Error("model config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
  if (!(rms_norm_eps > 0)) throw Error("model config: rms_norm_eps must be positive");
}

LinearLayerShape linear_shape(const BaseModelConfig& config, LinearSlot slot) {
  switch (slot) {
    case LinearSlot::gate:
    case LinearSlot::up:
      return {config.d_model, config.mlp_hidden};
    case LinearSlot::down:
      return {config.mlp_hidden, config.d_model};
    default:
      return {config.d_model, config.d_model};
  }
}

std::string linear_name(int block, LinearSlot slot) {
  return "blocks." + std::to_string(block) + "." + std::string(kSlotNames[static_cast<std::size_t>(slot)]);
}

template <class T>
BasicModel<T> zeros_like_config(const BaseModelConfig& config) {
  config.validate();
  BasicModel<T> m;
  m.config = config;
  m.tok_emb = Matrix<T>(config.vocab_size, config.d_model);
  m.pos_emb = Matrix<T>(config.context_len, config.d_model);
  m.blocks.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& b : m.blocks) {
    b.attn_norm = Matrix<T>(1, config.d_model);
    b.mlp_norm = Matrix<T>(1, config.d_model);
    for (int s = 0; s < kLinearsPerBlock; ++s) {
      const auto shape = linear_shape(config, static_cast<LinearSlot>(s));
      b.linear[static_cast<std::size_t>(s)] = Matrix<T>(shape.out_dim, shape.in_dim);
    }
  }
  m.final_norm = Matrix<T>(1, config.d_model);
  m.head = Matrix<T>(config.vocab_size, config.d_model);
  return m;
}

template BasicModel<float> zeros_like_config<float>(const BaseModelConfig&);
template BasicModel<double> zeros_like_config<double>(const BaseModelConfig&);

BaseModel init_base(const BaseModelConfig& config) {
  BaseModel m = zeros_like_config<float>(config);
  Rng rng(config.init_seed);
  m.for_each_tensor([&](const std::string& name, Matrix<float>& t) {
    const bool is_norm = name.ends_with("norm");
    for (auto& v : t.data) v = is_norm ? 1.0f : static_cast<float>(rng.normal(0.0, kInitStd));
  });
  return m;
}

std::size_t parameter_count(const BaseModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto h = static_cast<std::size_t>(c.mlp_hidden);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const std::size_t per_block = 4 * d * d + 3 * d * h + 2 * d;
  return v * d + static_cast<std::size_t>(c.context_len) * d + static_cast<std::size_t>(c.n_layers) * per_block + d +
         v * d;
}

uint64_t checksum(const BaseModel& model) {
  uint64_t h = kFnvOffset;
  model.for_each_tensor([&](const std::string&, const Matrix<float>& t) {
    h = fnv1a64_bytes(t.data.data(), t.data.size() * sizeof(float), h);
  });
  return h;
}

void save_base(const BaseModel& model, const std::string& path) {
  const auto& c = model.config;
  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(c.vocab_size));
  w.u32(static_cast<uint32_t>(c.d_model));
  w.u32(static_cast<uint32_t>(c.n_layers));
  w.u32(static_cast<uint32_t>(c.n_heads));
  w.u32(static_cast<uint32_t>(c.context_len));
  w.u32(static_cast<uint32_t>(c.mlp_hidden));
  w.u64(std::bit_cast<uint64_t>(c.rms_norm_eps));
  w.u64(c.init_seed);
  w.u8(model.frozen ? 1 : 0);
  uint32_t count = 0;
  model.for_each_tensor([&](const std::string&, const Matrix<float>&) { ++count; });
  w.u32(count);
  model.for_each_tensor([&](const std::string& name, const Matrix<float>& t) {
    w.str(name);
    w.u32(2);
    w.u32(static_cast<uint32_t>(t.rows));
    w.u32(static_cast<uint32_t>(t.cols));
    w.f32s(t.data);
  });
  w.close();
}

BaseModel load_base(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kMagic);
  if (const uint32_t version = r.u32("version"); version != kVersion) {
    throw Error(path + ": unsupported base checkpoint version " + std::to_string(version));
  }
  BaseModelConfig c;
  c.vocab_size = static_cast<int>(r.u32("vocab_size"));
  c.d_model = static_cast<int>(r.u32("d_model"));
  c.n_layers = static_cast<int>(r.u32("n_layers"));
  c.n_heads = static_cast<int>(r.u32("n_heads"));
  c.context_len = static_cast<int>(r.u32("context_len"));
  c.mlp_hidden = static_cast<int>(r.u32("mlp_hidden"));
  c.rms_norm_eps = std::bit_cast<double>(r.u64("rms_norm_eps"));
  c.init_seed = r.u64("init_seed");
  const bool frozen = r.u8("frozen") != 0;
  BaseModel m = zeros_like_config<float>(c);
  m.frozen = frozen;
  const uint32_t count = r.u32("tensor count");
  uint32_t seen = 0;
  m.for_each_tensor([&](const std::string& name, Matrix<float>& t) {
    if (seen++ >= count) throw Error(path + ": missing tensor " + name);
    const std::string got = r.str("tensor name");
    if (got != name) throw Error(path + ": expected tensor " + name + ", found " + got);
    const uint32_t ndims = r.u32(name);
    if (ndims != 2) throw Error(path + ": tensor " + name + " has unexpected rank");
    const uint32_t rows = r.u32(name);
    const uint32_t cols = r.u32(name);
    if (static_cast<int>(rows) != t.rows || static_cast<int>(cols) != t.cols) {
      throw Error(path + ": tensor " + name + " has unexpected shape");
    }
    r.f32s(t.data, name);
  });
  if (seen != count) throw Error(path + ": unexpected extra tensors");
  return m;
}

}  // namespace moin
