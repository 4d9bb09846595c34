#pragma once

// First-order (lazy-training) diagnostics around a base checkpoint theta0:
// the next-token polarity proxy f and its gradient, directional constants
// C+ = <grad f(theta0), theta_plus - theta0> and C- likewise, and the error
// of the linearized model h(theta0) + Dh(theta0) d.

#include <string>
#include <vector>

#include "lmi/corpus.hpp"
#include "lmi/tinylm.hpp"

namespace lmi {

// Token ids of the positive and negative lexicon words.
struct PolarityIds {
  std::vector<int> pos;
  std::vector<int> neg;

  static PolarityIds from(const Lexicon& lex, const Vocabulary& vocab);
  PolarityIds swapped() const { return {neg, pos}; }
};

// f = mean over prompts of (sum_{POS} p(w | prompt) - sum_{NEG} p(w | prompt)).
double attribute_proxy_f(const Checkpoint& ckpt, const std::vector<TokenSeq>& prompts, const PolarityIds& ids);

// Exact gradient of attribute_proxy_f, same layout and dtype as ckpt.
Checkpoint grad_f(const Checkpoint& ckpt, const std::vector<TokenSeq>& prompts, const PolarityIds& ids);

// Flat inner product <g, a - b> in double with compensated summation.
double dot_difference(const Checkpoint& g, const Checkpoint& a, const Checkpoint& b);

struct DirectionalReport {
  double c_plus = 0.0;
  double c_minus = 0.0;
  double grad_norm = 0.0;
  double norm_plus = 0.0;   // ||theta_plus - theta0||
  double norm_minus = 0.0;  // ||theta_minus - theta0||
  double f_theta0 = 0.0;
  double f_plus = 0.0;
  double f_minus = 0.0;
  std::string prompts_digest;

  std::string to_json() const;
};

DirectionalReport directional_constants(const Checkpoint& theta0, const Checkpoint& theta_plus,
                                        const Checkpoint& theta_minus, const std::vector<TokenSeq>& prompts,
                                        const PolarityIds& ids);

// Final-position logits of h(theta0) + scale * Dh(theta0) direction. The JVP
// is a central difference in double with step 1e-3 / ||direction||.
std::vector<double> linearized_logits(const Checkpoint& theta0, const Checkpoint& direction, double scale,
                                      std::span<const int> prompt);

// Mean over prompts of max_v |h(theta)[v] - linearized(theta0, theta - theta0, 1)[v]|
// at the final position.
double linearization_error(const Checkpoint& theta0, const Checkpoint& theta, const std::vector<TokenSeq>& prompts);

std::string prompts_digest(const std::vector<TokenSeq>& prompts);

}  // namespace lmi
