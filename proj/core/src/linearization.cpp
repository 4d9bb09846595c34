#include "lmi/linearization.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "lmi/paramspace.hpp"
#include "lmi/util.hpp"

namespace lmi {

namespace {

void require_prompts(const std::vector<TokenSeq>& prompts) {
  if (prompts.empty()) throw std::invalid_argument("empty prompt set");
}

void require_compatible(const Checkpoint& a, const Checkpoint& b) {
  auto report = validate_compat(a, b);
  if (!report.same_layout()) throw IncompatibleCheckpoints(std::move(report));
}

// +1 for POS ids, -1 for NEG ids, 0 otherwise.
std::vector<double> polarity_weights(const PolarityIds& ids, std::size_t vocab) {
  std::vector<double> c(vocab, 0.0);
  for (int i : ids.pos) c.at(static_cast<std::size_t>(i)) += 1.0;
  for (int i : ids.neg) c.at(static_cast<std::size_t>(i)) -= 1.0;
  return c;
}

}  // namespace

PolarityIds PolarityIds::from(const Lexicon& lex, const Vocabulary& vocab) {
  PolarityIds ids;
  for (const auto& w : lex.pos_words) ids.pos.push_back(vocab.id(w));
  for (const auto& w : lex.neg_words) ids.neg.push_back(vocab.id(w));
  return ids;
}

double attribute_proxy_f(const Checkpoint& ckpt, const std::vector<TokenSeq>& prompts, const PolarityIds& ids) {
  require_prompts(prompts);
  KahanSum total;
  for (const auto& prompt : prompts) {
    const auto p = next_token_distribution(ckpt, prompt);
    const auto c = polarity_weights(ids, p.size());
    double f = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) f += c[j] * p[j];
    total.add(f);
  }
  return total.value() / static_cast<double>(prompts.size());
}

Checkpoint grad_f(const Checkpoint& ckpt, const std::vector<TokenSeq>& prompts, const PolarityIds& ids) {
  require_prompts(prompts);
  const Checkpoint ckpt64 = ckpt.dtype() == DType::F64 ? ckpt : ckpt.cast(DType::F64);
  Checkpoint acc = ckpt64.zeros_like();
  const double inv_n = 1.0 / static_cast<double>(prompts.size());
  for (const auto& prompt : prompts) {
    const auto logits = forward(ckpt64, prompt);
    const std::size_t last = logits.rows - 1;
    const auto p = softmax(logits.row(last));
    const auto c = polarity_weights(ids, p.size());
    double mean_c = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) mean_c += c[j] * p[j];
    // df/dz_j = p_j (c_j - sum_k c_k p_k)
    LogitsMatrix upstream{logits.rows, logits.cols, std::vector<double>(logits.data.size(), 0.0)};
    auto row = upstream.row(last);
    for (std::size_t j = 0; j < p.size(); ++j) row[j] = inv_n * p[j] * (c[j] - mean_c);
    const Checkpoint g = backward_from_logits(ckpt64, prompt, upstream);
    acc = axpy(acc, 1.0, g);
  }
  if (ckpt.dtype() == DType::F64) return acc;
  return acc.cast(ckpt.dtype());
}

double dot_difference(const Checkpoint& g, const Checkpoint& a, const Checkpoint& b) {
  require_compatible(g, a);
  require_compatible(a, b);
  KahanSum sum;
  for (const auto& [name, tg] : g.tensors()) {
    const Tensor& ta = a.at(name);
    const Tensor& tb = b.at(name);
    for (std::size_t i = 0; i < tg.numel(); ++i) sum.add(tg.get(i) * (ta.get(i) - tb.get(i)));
  }
  return sum.value();
}

namespace {

double diff_norm(const Checkpoint& a, const Checkpoint& b) {
  KahanSum sum;
  for (const auto& [name, ta] : a.tensors()) {
    const Tensor& tb = b.at(name);
    for (std::size_t i = 0; i < ta.numel(); ++i) {
      const double d = ta.get(i) - tb.get(i);
      sum.add(d * d);
    }
  }
  return std::sqrt(sum.value());
}

}  // namespace

DirectionalReport directional_constants(const Checkpoint& theta0, const Checkpoint& theta_plus,
                                        const Checkpoint& theta_minus, const std::vector<TokenSeq>& prompts,
                                        const PolarityIds& ids) {
  require_compatible(theta0, theta_plus);
  require_compatible(theta0, theta_minus);
  const Checkpoint g = grad_f(theta0, prompts, ids);
  DirectionalReport r;
  r.c_plus = dot_difference(g, theta_plus, theta0);
  r.c_minus = dot_difference(g, theta_minus, theta0);
  r.grad_norm = l2_norm(g);
  r.norm_plus = diff_norm(theta_plus, theta0);
  r.norm_minus = diff_norm(theta_minus, theta0);
  r.f_theta0 = attribute_proxy_f(theta0, prompts, ids);
  r.f_plus = attribute_proxy_f(theta_plus, prompts, ids);
  r.f_minus = attribute_proxy_f(theta_minus, prompts, ids);
  r.prompts_digest = prompts_digest(prompts);
  return r;
}

std::string DirectionalReport::to_json() const {
  nlohmann::ordered_json j;
  j["c_plus"] = format_double(c_plus);
  j["c_minus"] = format_double(c_minus);
  j["grad_norm"] = format_double(grad_norm);
  j["direction_norms"] = {format_double(norm_plus), format_double(norm_minus)};
  j["f_theta0"] = format_double(f_theta0);
  j["f_plus"] = format_double(f_plus);
  j["f_minus"] = format_double(f_minus);
  j["prompts_digest"] = prompts_digest;
  return j.dump(2);
}

std::vector<double> linearized_logits(const Checkpoint& theta0, const Checkpoint& direction, double scale,
                                      std::span<const int> prompt) {
  require_compatible(theta0, direction);
  const auto h0 = forward(theta0, prompt);
  const auto base = h0.row(h0.rows - 1);
  std::vector<double> out(base.begin(), base.end());
  if (scale == 0.0) return out;
  const Checkpoint t64 = theta0.cast(DType::F64);
  const Checkpoint d64 = direction.cast(DType::F64);
  const double norm = l2_norm(d64);
  if (norm == 0.0) return out;
  const double eps = 1e-3 / norm;
  const auto hp = forward(axpy(t64, eps, d64), prompt);
  const auto hm = forward(axpy(t64, -eps, d64), prompt);
  const auto rp = hp.row(hp.rows - 1);
  const auto rm = hm.row(hm.rows - 1);
  for (std::size_t v = 0; v < out.size(); ++v) {
    out[v] += scale * (rp[v] - rm[v]) / (2.0 * eps);
    if (!std::isfinite(out[v])) throw std::runtime_error("non-finite linearized logits");
  }
  return out;
}

double linearization_error(const Checkpoint& theta0, const Checkpoint& theta, const std::vector<TokenSeq>& prompts) {
  require_prompts(prompts);
  require_compatible(theta0, theta);
  const Checkpoint d = subtract(theta.cast(DType::F64), theta0.cast(DType::F64));
  double total = 0.0;
  for (const auto& prompt : prompts) {
    const auto lin = linearized_logits(theta0, d, 1.0, prompt);
    const auto h = forward(theta, prompt);
    const auto row = h.row(h.rows - 1);
    double worst = 0.0;
    for (std::size_t v = 0; v < lin.size(); ++v) worst = std::max(worst, std::abs(row[v] - lin[v]));
    total += worst;
  }
  return total / static_cast<double>(prompts.size());
}

std::string prompts_digest(const std::vector<TokenSeq>& prompts) {
  std::string text;
  for (const auto& p : prompts) {
    for (int t : p) text += std::to_string(t) + ',';
    text += ';';
  }
  return sha256_hex(text);
}

}  // namespace lmi
