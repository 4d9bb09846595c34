#include "lmi/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "lmi/paramspace.hpp"
#include "lmi/util.hpp"

namespace lmi {

std::vector<double> dexperts_logits(std::span<const double> z0, std::span<const double> z_plus,
                                    std::span<const double> z_minus, double alpha) {
  if (z0.size() != z_plus.size() || z0.size() != z_minus.size()) {
    throw std::invalid_argument("logit rows differ in length");
  }
  std::vector<double> z(z0.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = z0[i] + alpha * (z_plus[i] - z_minus[i]);
  return z;
}

void EnsembleSpec::validate() const {
  if (!base || !expert || !anti_expert) throw std::invalid_argument("ensemble needs three checkpoints");
  if (!std::isfinite(alpha)) throw std::invalid_argument("ensemble alpha must be finite");
  for (const Checkpoint* other : {expert, anti_expert}) {
    auto report = validate_compat(*base, *other);
    if (!report.compatible()) throw IncompatibleCheckpoints(std::move(report));
    if (config_of(*base) != config_of(*other)) {
      throw std::invalid_argument("ensemble members have different model configs");
    }
  }
}

LogitsFn ensemble_logits(const EnsembleSpec& spec) {
  spec.validate();
  return [spec](std::span<const int> ctx) {
    const auto a = forward(*spec.base, ctx);
    const auto p = forward(*spec.expert, ctx);
    const auto m = forward(*spec.anti_expert, ctx);
    const std::size_t last = a.rows - 1;
    return dexperts_logits(a.row(last), p.row(last), m.row(last), spec.alpha);
  };
}

TokenSeq ensemble_sample(const EnsembleSpec& spec, std::span<const int> prompt, const GenConfig& gen,
                         SampleTrace* trace) {
  const auto fn = ensemble_logits(spec);
  return sample_with(fn, prompt, gen, config_of(*spec.base).context_len, trace);
}

double mean_max_abs_deviation(const LogitsMatrix& a, const LogitsMatrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("logit matrices differ in shape");
  if (a.rows == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < a.rows; ++r) {
    double worst = 0.0;
    const auto ra = a.row(r), rb = b.row(r);
    for (std::size_t c = 0; c < a.cols; ++c) worst = std::max(worst, std::abs(ra[c] - rb[c]));
    total += worst;
  }
  return total / static_cast<double>(a.rows);
}

double weight_output_deviation(const Checkpoint& theta0, const Checkpoint& theta_minus,
                               const Checkpoint& theta_plus, double alpha,
                               const std::vector<TokenSeq>& prompts) {
  if (prompts.empty()) throw std::invalid_argument("no prompts for deviation");
  const Checkpoint merged = interp_g2(theta0, theta_minus, theta_plus, alpha);
  double total = 0.0;
  for (const auto& prompt : prompts) {
    const auto zw = forward(merged, prompt);
    const auto z0 = forward(theta0, prompt);
    const auto zp = forward(theta_plus, prompt);
    const auto zm = forward(theta_minus, prompt);
    LogitsMatrix zo{z0.rows, z0.cols, {}};
    zo.data.reserve(z0.data.size());
    for (std::size_t r = 0; r < z0.rows; ++r) {
      const auto row = dexperts_logits(z0.row(r), zp.row(r), zm.row(r), alpha);
      zo.data.insert(zo.data.end(), row.begin(), row.end());
    }
    total += mean_max_abs_deviation(zw, zo);
  }
  return total / static_cast<double>(prompts.size());
}

std::vector<ComparisonRow> compare_weight_vs_output(const CompareInputs& in, const std::vector<double>& alphas,
                                                    const GenerationPlan& plan) {
  if (!in.theta0 || !in.theta_minus || !in.theta_plus || !in.language) {
    throw std::invalid_argument("comparison needs theta0, theta_minus, theta_plus and a language");
  }
  const int context_len = config_of(*in.theta0).context_len;
  std::vector<ComparisonRow> rows;
  for (double alpha : alphas) {
    const double dev = weight_output_deviation(*in.theta0, *in.theta_minus, *in.theta_plus, alpha, plan.prompts);

    const Checkpoint merged = interp_g2(*in.theta0, *in.theta_minus, *in.theta_plus, alpha);
    const auto weight_gens = generate(model_logits(merged), context_len, plan, in.language->vocab);
    rows.push_back({alpha, "weight", score_generations(weight_gens, *in.language, in.scorer), dev});

    const EnsembleSpec spec{alpha, in.theta0, in.theta_plus, in.theta_minus};
    const auto output_gens = generate(ensemble_logits(spec), context_len, plan, in.language->vocab);
    rows.push_back({alpha, "output", score_generations(output_gens, *in.language, in.scorer), dev});
  }
  return rows;
}

void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out) {
  out << "alpha,arm,positive_score,perplexity,logit_dev\n";
  for (const auto& r : rows) {
    out << format_double(r.alpha) << ',' << r.arm << ',' << format_double(r.metrics.positive_score) << ','
        << format_double(r.metrics.perplexity) << ',' << format_double(r.logit_dev) << '\n';
  }
}

}  // namespace lmi
