#pragma once

// Output-space steering with an expert / anti-expert pair,
// z = z0 + alpha * (z_plus - z_minus), and its comparison against the
// weight-space counterpart g2(alpha).

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "lmi/evaluation.hpp"
#include "lmi/tinylm.hpp"

namespace lmi {

std::vector<double> dexperts_logits(std::span<const double> z0, std::span<const double> z_plus,
                                    std::span<const double> z_minus, double alpha);

struct EnsembleSpec {
  double alpha = 0.0;
  const Checkpoint* base = nullptr;
  const Checkpoint* expert = nullptr;
  const Checkpoint* anti_expert = nullptr;

  // Throws IncompatibleCheckpoints or std::invalid_argument.
  void validate() const;
};

// Combined final-position logits. The spec's checkpoints must outlive it.
LogitsFn ensemble_logits(const EnsembleSpec& spec);

TokenSeq ensemble_sample(const EnsembleSpec& spec, std::span<const int> prompt, const GenConfig& gen,
                         SampleTrace* trace = nullptr);

// Mean over teacher-forced prompt positions of max_v |a[t][v] - b[t][v]|.
double mean_max_abs_deviation(const LogitsMatrix& a, const LogitsMatrix& b);

struct ComparisonRow {
  double alpha = 0.0;
  std::string arm;  // "weight" (g2 merge) or "output" (logit combination)
  TextMetrics metrics;
  double logit_dev = 0.0;  // same value on both arms of an alpha
};

struct CompareInputs {
  const Checkpoint* theta0 = nullptr;
  const Checkpoint* theta_minus = nullptr;
  const Checkpoint* theta_plus = nullptr;
  const Checkpoint* scorer = nullptr;  // optional, for perplexity
  const Language* language = nullptr;
};

// Per alpha: weight-space g2 merge and the logit combination, both sampled
// with identical seeds, plus the teacher-forced logit deviation on the
// prompts.
std::vector<ComparisonRow> compare_weight_vs_output(const CompareInputs& in, const std::vector<double>& alphas,
                                                    const GenerationPlan& plan);

// Teacher-forced deviation only (no sampling).
double weight_output_deviation(const Checkpoint& theta0, const Checkpoint& theta_minus,
                               const Checkpoint& theta_plus, double alpha,
                               const std::vector<TokenSeq>& prompts);

void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out);

}  // namespace lmi
