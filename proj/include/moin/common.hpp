#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moin {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a with the published offset basis and prime.
constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr uint64_t fnv1a64(std::string_view bytes, uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

uint64_t fnv1a64_bytes(const void* data, std::size_t size, uint64_t h = kFnvOffset);

constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a stream index.
constexpr uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x5851f42d4c957f2dULL));
}

// Seeded generator whose outputs do not depend on the standard library's
// distribution implementations (mt19937_64 itself is fully specified).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  uint64_t below(uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Little-endian binary writer/reader for the on-disk formats.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> v);
  void str(std::string_view s);
  void bytes(const void* data, std::size_t n);
  void close();

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);
  void expect_magic(std::string_view m);
  uint8_t u8(std::string_view what);
  uint32_t u32(std::string_view what);
  uint64_t u64(std::string_view what);
  float f32(std::string_view what);
  void f32s(std::span<float> out, std::string_view what);
  std::string str(std::string_view what);
  bool at_end();

 private:
  void read(void* data, std::size_t n, std::string_view what);
  std::string path_;
  std::ifstream in_;
};

// Runs fn(i) for i in [0, n) on up to `threads` threads. Work items must be
// independent; callers reduce results in index order for determinism.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

int default_threads();

std::vector<std::string> split_words(std::string_view text);
std::string to_lower_ascii(std::string_view text);

}  // namespace moin
