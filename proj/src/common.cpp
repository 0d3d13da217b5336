#include "moin/common.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

namespace moin {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are written with native little-endian stores");

uint64_t fnv1a64_bytes(const void* data, std::size_t size, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw Error("Rng::below: empty range");
  // Rejection sampling keeps the result unbiased.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(theta);
  has_spare_ = true;
  return radius * std::cos(theta);
}

BinaryWriter::BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
  if (!out_) throw Error("cannot open " + path + " for writing");
}

void BinaryWriter::u32(uint32_t v) { bytes(&v, sizeof v); }
void BinaryWriter::u64(uint64_t v) { bytes(&v, sizeof v); }
void BinaryWriter::f32(float v) { bytes(&v, sizeof v); }
void BinaryWriter::f32s(std::span<const float> v) { bytes(v.data(), v.size_bytes()); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw Error("write failed: " + path_);
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw Error("close failed: " + path_);
}

BinaryReader::BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw Error("cannot open " + path);
}

void BinaryReader::read(void* data, std::size_t n, std::string_view what) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw Error(path_ + ": truncated file while reading " + std::string(what));
  }
}

void BinaryReader::expect_magic(std::string_view m) {
  std::string got(m.size(), '\0');
  in_.read(got.data(), static_cast<std::streamsize>(m.size()));
  if (static_cast<std::size_t>(in_.gcount()) != m.size() || got != m) {
    throw Error(path_ + ": bad magic, expected " + std::string(m));
  }
}

uint8_t BinaryReader::u8(std::string_view what) {
  uint8_t v;
  read(&v, 1, what);
  return v;
}
uint32_t BinaryReader::u32(std::string_view what) {
  uint32_t v;
  read(&v, sizeof v, what);
  return v;
}
uint64_t BinaryReader::u64(std::string_view what) {
  uint64_t v;
  read(&v, sizeof v, what);
  return v;
}
float BinaryReader::f32(std::string_view what) {
  float v;
  read(&v, sizeof v, what);
  return v;
}
void BinaryReader::f32s(std::span<float> out, std::string_view what) {
  read(out.data(), out.size_bytes(), what);
}

std::string BinaryReader::str(std::string_view what) {
  const uint32_t n = u32(what);
  std::string s(n, '\0');
  read(s.data(), n, what);
  return s;
}

bool BinaryReader::at_end() { return in_.peek() == std::ifstream::traits_type::eof(); }

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string to_lower_ascii(std::string_view text) {
  std::string out(text);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) words.push_back(to_lower_ascii(text.substr(i, j - i)));
    i = j;
  }
  return words;
}

}  // namespace moin
