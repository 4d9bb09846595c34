#pragma once

// Parameter-space arithmetic over checkpoints: the three interpolation
// parametrizations, (alpha, beta) grid sweeps and scaled weight-difference
// norms.
//
//   g1(a)    = a * plus + (1 - a) * minus
//   g2(a')   = base + a' * (plus - minus)
//   g3(a, b) = base + a * (plus - base) + b * (minus - base)
//
// g3 with a + b = 1 reduces to g1; with a + b = 0 it reduces to g2.

#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmi/tensorstore.hpp"

namespace lmi {

class IncompatibleCheckpoints : public std::invalid_argument {
 public:
  explicit IncompatibleCheckpoints(CompatReport report);
  const CompatReport& report() const { return report_; }

 private:
  CompatReport report_;
};

enum class InterpMode { G1, G2, G3 };

const char* mode_name(InterpMode mode);
InterpMode parse_mode(const std::string& name);

// All arithmetic runs in double and is rounded once into the operands' dtype.
// Coefficients that select an operand exactly (g1 at 0 or 1, g2 at 0, g3 at
// (0,0), (1,0), (0,1)) return a bitwise copy of that operand.
Checkpoint interp_g1(const Checkpoint& theta_minus, const Checkpoint& theta_plus, double alpha);
Checkpoint interp_g2(const Checkpoint& theta0, const Checkpoint& theta_minus,
                     const Checkpoint& theta_plus, double alpha_prime);
Checkpoint interp_g3(const Checkpoint& theta0, const Checkpoint& theta_minus,
                     const Checkpoint& theta_plus, double alpha, double beta);

struct Operands {
  const Checkpoint* theta0 = nullptr;  // required by G2 and G3
  const Checkpoint* theta_minus = nullptr;
  const Checkpoint* theta_plus = nullptr;
};

struct InterpRequest {
  InterpMode mode = InterpMode::G1;
  double alpha = 0.0;
  std::optional<double> beta;  // required iff mode == G3
  Operands operands;

  // Throws std::invalid_argument on missing operands, missing/extra beta or
  // non-finite coefficients.
  void validate() const;
};

Checkpoint interpolate(const InterpRequest& request);

// Keys written into a merged checkpoint's metadata.
namespace merge_meta {
inline constexpr const char* kProvenance = "provenance";
inline constexpr const char* kMode = "merge.mode";
inline constexpr const char* kAlpha = "merge.alpha";
inline constexpr const char* kBeta = "merge.beta";
inline constexpr const char* kTheta0 = "merge.theta0";
inline constexpr const char* kThetaMinus = "merge.theta_minus";
inline constexpr const char* kThetaPlus = "merge.theta_plus";
}  // namespace merge_meta

// --- sweeps -----------------------------------------------------------------

struct AxisRange {
  double min = -4.0;
  double max = 4.0;
  int points = 21;

  double at(int k) const;
  std::vector<double> values() const;
};

struct SweepSpec {
  InterpMode mode = InterpMode::G3;  // G1: alpha axis only, G3: both axes
  AxisRange alpha;
  AxisRange beta;

  void validate() const;
  std::size_t size() const;
};

struct MetricsRecord {
  double perplexity = std::numeric_limits<double>::quiet_NaN();
  double positive_score = std::numeric_limits<double>::quiet_NaN();
  double grammar_rate = std::numeric_limits<double>::quiet_NaN();
  double nll_pos = std::numeric_limits<double>::quiet_NaN();
  double nll_neg = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // empty when the evaluator succeeded

  bool operator==(const MetricsRecord& other) const;
};

struct SweepPoint {
  double alpha = 0.0;
  double beta = 0.0;  // 0 for G1 sweeps
  MetricsRecord metrics;
};

using SweepResult = std::vector<SweepPoint>;
using Evaluator = std::function<MetricsRecord(const Checkpoint&)>;

// Row-major over (alpha, beta): alpha is the outer index. An exception thrown
// by the evaluator is caught and stored in that point's error field.
SweepResult sweep(const SweepSpec& spec, const InterpRequest& request_template,
                  const Evaluator& evaluator);

void write_sweep_csv(const SweepResult& result, std::ostream& out);

// --- weight-difference norms --------------------------------------------------

enum class TensorKind { Bias1D, Matrix2D, Other };

const char* kind_name(TensorKind kind);

struct DiffEntry {
  std::string name;
  std::string layer;  // decimal layer index or "global"
  TensorKind kind = TensorKind::Other;
  double delta = 0.0;
};

struct DiffReport {
  std::vector<DiffEntry> entries;
  const DiffEntry* find(const std::string& name) const;
};

// delta = ||a - b||_2 / sqrt(numel) for every shared tensor.
DiffReport diff_norms(const Checkpoint& a, const Checkpoint& b);

void write_diff_csv(const DiffReport& report, std::ostream& out);

// Layer index from names of the form "layer{i}.<...>", else "global".
std::string layer_of(const std::string& tensor_name);

// Flat inner product over every tensor of two compatible checkpoints,
// compensated summation in double.
double dot(const Checkpoint& a, const Checkpoint& b);
double l2_norm(const Checkpoint& a);

// Elementwise a + scale * b, double accumulation, stored in a's dtype.
// Metadata is copied from a.
Checkpoint axpy(const Checkpoint& a, double scale, const Checkpoint& b);
// Elementwise a - b.
Checkpoint subtract(const Checkpoint& a, const Checkpoint& b);

}  // namespace lmi
