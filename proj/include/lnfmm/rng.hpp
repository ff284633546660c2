#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "lnfmm/tensor.hpp"

namespace lnfmm {

// Seeded pseudo-random stream. Identical seeds give identical draws within a
// build; independent streams are derived with `split`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double scale = 1.0);

  // Deterministic child stream keyed by `stream`.
  static Rng split(std::uint64_t seed, std::uint64_t stream);

  std::string state() const;
  void restore(const std::string& state);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace lnfmm
