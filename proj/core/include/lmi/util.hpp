#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmi {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// Shortest string that round-trips to the same double ("nan"/"inf" for
// non-finite values). Used everywhere a number is written to CSV/JSON so that
// output bytes depend only on the value.
std::string format_double(double value);

// Child seed for a named sub-stream, e.g. derive_seed(manifest_seed, "train/pos").
std::uint64_t derive_seed(std::uint64_t base, std::string_view name);

// Deterministic RNG. The engine sequence is fixed by the standard; the
// distributions are implemented here because std:: distributions are
// implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n); n > 0.
  std::uint64_t index(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Spearman rank correlation with average ranks for ties. Returns 0 when
// either input is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// Compensated (Kahan-Babuska) accumulator.
class KahanSum {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace lmi
