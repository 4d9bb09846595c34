#include "lmi/paramspace.hpp"

#include <cmath>
#include <ostream>

#include "lmi/util.hpp"

namespace lmi {

IncompatibleCheckpoints::IncompatibleCheckpoints(CompatReport report)
    : std::invalid_argument("incompatible checkpoints: " + report.describe()),
      report_(std::move(report)) {}

const char* mode_name(InterpMode mode) {
  switch (mode) {
    case InterpMode::G1:
      return "g1";
    case InterpMode::G2:
      return "g2";
    case InterpMode::G3:
      return "g3";
  }
  return "?";
}

InterpMode parse_mode(const std::string& name) {
  if (name == "g1" || name == "G1") return InterpMode::G1;
  if (name == "g2" || name == "G2") return InterpMode::G2;
  if (name == "g3" || name == "G3") return InterpMode::G3;
  throw std::invalid_argument("unknown interpolation mode: " + name);
}

namespace {

void require_compatible(const Checkpoint& a, const Checkpoint& b) {
  auto report = validate_compat(a, b);
  if (!report.compatible()) throw IncompatibleCheckpoints(std::move(report));
}

// out[i] = c0 * x0[i] + c1 * x1[i] + c2 * x2[i], accumulated in double.
// Unused operands are passed as nullptr with a zero coefficient.
template <typename T>
void combine_tensor(std::span<T> out, double c0, std::span<const T> x0, double c1,
                    std::span<const T> x1, double c2, std::span<const T> x2) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = c0 * static_cast<double>(x0[i]);
    if (!x1.empty()) acc += c1 * static_cast<double>(x1[i]);
    if (!x2.empty()) acc += c2 * static_cast<double>(x2[i]);
    out[i] = static_cast<T>(acc);
  }
}

// Generic affine combination sum_k c_k * ckpt_k with the first operand acting
// as the layout template.
Checkpoint combine(const std::vector<std::pair<double, const Checkpoint*>>& terms) {
  const Checkpoint& first = *terms.front().second;
  Checkpoint out;
  for (const auto& [name, t0] : first.tensors()) {
    Tensor t = Tensor::zeros(t0.dims(), t0.dtype());
    auto run = [&](auto tag) {
      using T = decltype(tag);
      std::span<const T> x[3];
      double c[3] = {0.0, 0.0, 0.0};
      for (std::size_t k = 0; k < terms.size(); ++k) {
        c[k] = terms[k].first;
        x[k] = terms[k].second->at(name).template data<T>();
      }
      combine_tensor<T>(t.template data<T>(), c[0], x[0], c[1], x[1], c[2], x[2]);
    };
    if (t0.dtype() == DType::F32) {
      run(float{});
    } else {
      run(double{});
    }
    out.add(name, std::move(t));
  }
  return out;
}

Checkpoint copy_tensors(const Checkpoint& src) {
  Checkpoint out;
  for (const auto& [name, t] : src.tensors()) out.add(name, t);
  return out;
}

void stamp_provenance(Checkpoint& out, const InterpRequest& req) {
  const Operands& ops = req.operands;
  const Checkpoint& layout = ops.theta_plus ? *ops.theta_plus : *ops.theta_minus;
  if (auto cfg = layout.meta_or("config"); !cfg.empty()) out.meta()["config"] = cfg;
  std::string seeds;
  for (const Checkpoint* c : {ops.theta0, ops.theta_minus, ops.theta_plus}) {
    if (!c) continue;
    if (!seeds.empty()) seeds += ",";
    seeds += c->meta_or("seed", "?");
  }
  out.meta()["seed"] = "merge(" + seeds + ")";
  out.meta()[merge_meta::kProvenance] = "merged";
  out.meta()[merge_meta::kMode] = mode_name(req.mode);
  out.meta()[merge_meta::kAlpha] = format_double(req.alpha);
  if (req.beta) out.meta()[merge_meta::kBeta] = format_double(*req.beta);
  if (ops.theta0) out.meta()[merge_meta::kTheta0] = tensor_digest(*ops.theta0);
  if (ops.theta_minus) out.meta()[merge_meta::kThetaMinus] = tensor_digest(*ops.theta_minus);
  if (ops.theta_plus) out.meta()[merge_meta::kThetaPlus] = tensor_digest(*ops.theta_plus);
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " must be finite");
}

}  // namespace

void InterpRequest::validate() const {
  require_finite(alpha, "alpha");
  if (mode == InterpMode::G3) {
    if (!beta) throw std::invalid_argument("g3 requires beta");
    require_finite(*beta, "beta");
  } else if (beta) {
    throw std::invalid_argument(std::string(mode_name(mode)) + " takes no beta");
  }
  if (!operands.theta_minus || !operands.theta_plus) {
    throw std::invalid_argument("theta_minus and theta_plus are required");
  }
  if (mode != InterpMode::G1 && !operands.theta0) {
    throw std::invalid_argument(std::string(mode_name(mode)) + " requires theta0");
  }
  if (mode == InterpMode::G1 && operands.theta0) {
    throw std::invalid_argument("g1 takes exactly two operands");
  }
}

Checkpoint interpolate(const InterpRequest& req) {
  req.validate();
  const Operands& ops = req.operands;
  require_compatible(*ops.theta_plus, *ops.theta_minus);
  if (ops.theta0) require_compatible(*ops.theta0, *ops.theta_plus);

  Checkpoint out;
  switch (req.mode) {
    case InterpMode::G1:
      if (req.alpha == 0.0) {
        out = copy_tensors(*ops.theta_minus);
      } else if (req.alpha == 1.0) {
        out = copy_tensors(*ops.theta_plus);
      } else {
        out = combine({{req.alpha, ops.theta_plus}, {1.0 - req.alpha, ops.theta_minus}});
      }
      break;
    case InterpMode::G2:
      if (req.alpha == 0.0) {
        out = copy_tensors(*ops.theta0);
      } else {
        // theta0 + a'(plus - minus)
        out = combine({{1.0, ops.theta0}, {req.alpha, ops.theta_plus}, {-req.alpha, ops.theta_minus}});
      }
      break;
    case InterpMode::G3: {
      const double a = req.alpha;
      const double b = *req.beta;
      if (a == 0.0 && b == 0.0) {
        out = copy_tensors(*ops.theta0);
      } else if (a == 1.0 && b == 0.0) {
        out = copy_tensors(*ops.theta_plus);
      } else if (a == 0.0 && b == 1.0) {
        out = copy_tensors(*ops.theta_minus);
      } else {
        // theta0 + a(plus - theta0) + b(minus - theta0)
        out = combine({{1.0 - a - b, ops.theta0}, {a, ops.theta_plus}, {b, ops.theta_minus}});
      }
      break;
    }
  }
  stamp_provenance(out, req);
  return out;
}

Checkpoint interp_g1(const Checkpoint& theta_minus, const Checkpoint& theta_plus, double alpha) {
  return interpolate({InterpMode::G1, alpha, std::nullopt, {nullptr, &theta_minus, &theta_plus}});
}

Checkpoint interp_g2(const Checkpoint& theta0, const Checkpoint& theta_minus,
                     const Checkpoint& theta_plus, double alpha_prime) {
  return interpolate({InterpMode::G2, alpha_prime, std::nullopt, {&theta0, &theta_minus, &theta_plus}});
}

Checkpoint interp_g3(const Checkpoint& theta0, const Checkpoint& theta_minus,
                     const Checkpoint& theta_plus, double alpha, double beta) {
  return interpolate({InterpMode::G3, alpha, beta, {&theta0, &theta_minus, &theta_plus}});
}

// --- sweeps -------------------------------------------------------------------

double AxisRange::at(int k) const {
  if (k == 0) return min;
  if (k == points - 1) return max;
  return min + static_cast<double>(k) * (max - min) / static_cast<double>(points - 1);
}

std::vector<double> AxisRange::values() const {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k) v.push_back(at(k));
  return v;
}

void SweepSpec::validate() const {
  auto check = [](const AxisRange& r, const char* axis) {
    if (r.points < 2) throw std::invalid_argument(std::string(axis) + " axis needs >= 2 points");
    if (!std::isfinite(r.min) || !std::isfinite(r.max) || !(r.min < r.max)) {
      throw std::invalid_argument(std::string(axis) + " axis needs finite min < max");
    }
  };
  if (mode == InterpMode::G2) throw std::invalid_argument("sweeps support g1 and g3 only");
  check(alpha, "alpha");
  if (mode == InterpMode::G3) check(beta, "beta");
}

std::size_t SweepSpec::size() const {
  const auto na = static_cast<std::size_t>(alpha.points);
  return mode == InterpMode::G3 ? na * static_cast<std::size_t>(beta.points) : na;
}

bool MetricsRecord::operator==(const MetricsRecord& o) const {
  auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  return same(perplexity, o.perplexity) && same(positive_score, o.positive_score) &&
         same(grammar_rate, o.grammar_rate) && same(nll_pos, o.nll_pos) &&
         same(nll_neg, o.nll_neg) && error == o.error;
}

SweepResult sweep(const SweepSpec& spec, const InterpRequest& request_template,
                  const Evaluator& evaluator) {
  spec.validate();
  if (request_template.mode != spec.mode) {
    throw std::invalid_argument("sweep mode does not match request template");
  }
  const auto alphas = spec.alpha.values();
  const std::vector<double> betas =
      spec.mode == InterpMode::G3 ? spec.beta.values() : std::vector<double>{0.0};

  SweepResult result;
  result.reserve(spec.size());
  for (double a : alphas) {
    for (double b : betas) {
      InterpRequest req = request_template;
      req.alpha = a;
      req.beta = spec.mode == InterpMode::G3 ? std::optional<double>(b) : std::nullopt;
      SweepPoint point{a, b, {}};
      try {
        point.metrics = evaluator(interpolate(req));
      } catch (const std::exception& e) {
        point.metrics = MetricsRecord{};
        point.metrics.error = e.what();
        if (point.metrics.error.empty()) point.metrics.error = "evaluator failed";
      }
      result.push_back(std::move(point));
    }
  }
  return result;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c == '\n' ? ' ' : c;
  }
  return q + "\"";
}

}  // namespace

void write_sweep_csv(const SweepResult& result, std::ostream& out) {
  out << "alpha,beta,perplexity,positive_score,grammar_rate,nll_pos,nll_neg,error\n";
  for (const auto& p : result) {
    const auto& m = p.metrics;
    out << format_double(p.alpha) << ',' << format_double(p.beta) << ','
        << format_double(m.perplexity) << ',' << format_double(m.positive_score) << ','
        << format_double(m.grammar_rate) << ',' << format_double(m.nll_pos) << ','
        << format_double(m.nll_neg) << ',' << csv_field(m.error) << '\n';
  }
}

// --- norms --------------------------------------------------------------------

const char* kind_name(TensorKind kind) {
  switch (kind) {
    case TensorKind::Bias1D:
      return "bias-1d";
    case TensorKind::Matrix2D:
      return "matrix-2d";
    case TensorKind::Other:
      return "other";
  }
  return "?";
}

std::string layer_of(const std::string& name) {
  constexpr std::string_view kPrefix = "layer";
  if (name.rfind(kPrefix, 0) != 0) return "global";
  std::size_t i = kPrefix.size();
  std::size_t j = i;
  while (j < name.size() && name[j] >= '0' && name[j] <= '9') ++j;
  if (j == i || j >= name.size() || name[j] != '.') return "global";
  return name.substr(i, j - i);
}

const DiffEntry* DiffReport::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

DiffReport diff_norms(const Checkpoint& a, const Checkpoint& b) {
  require_compatible(a, b);
  DiffReport report;
  for (const auto& [name, ta] : a.tensors()) {
    const Tensor& tb = b.at(name);
    KahanSum sum;
    for (std::size_t i = 0; i < ta.numel(); ++i) {
      const double d = ta.get(i) - tb.get(i);
      sum.add(d * d);
    }
    DiffEntry e;
    e.name = name;
    e.layer = layer_of(name);
    e.kind = ta.rank() == 1 ? TensorKind::Bias1D
             : ta.rank() == 2 ? TensorKind::Matrix2D
                              : TensorKind::Other;
    e.delta = std::sqrt(sum.value()) / std::sqrt(static_cast<double>(ta.numel()));
    report.entries.push_back(std::move(e));
  }
  return report;
}

void write_diff_csv(const DiffReport& report, std::ostream& out) {
  out << "name,layer,kind,delta\n";
  for (const auto& e : report.entries) {
    out << csv_field(e.name) << ',' << e.layer << ',' << kind_name(e.kind) << ','
        << format_double(e.delta) << '\n';
  }
}

double dot(const Checkpoint& a, const Checkpoint& b) {
  require_compatible(a, b);
  KahanSum sum;
  for (const auto& [name, ta] : a.tensors()) {
    const Tensor& tb = b.at(name);
    for (std::size_t i = 0; i < ta.numel(); ++i) sum.add(ta.get(i) * tb.get(i));
  }
  return sum.value();
}

double l2_norm(const Checkpoint& a) {
  KahanSum sum;
  for (const auto& [name, t] : a.tensors()) {
    for (std::size_t i = 0; i < t.numel(); ++i) sum.add(t.get(i) * t.get(i));
  }
  return std::sqrt(sum.value());
}

Checkpoint axpy(const Checkpoint& a, double scale, const Checkpoint& b) {
  require_compatible(a, b);
  Checkpoint out = combine({{1.0, &a}, {scale, &b}});
  out.meta() = a.meta();
  return out;
}

Checkpoint subtract(const Checkpoint& a, const Checkpoint& b) { return axpy(a, -1.0, b); }

}  // namespace lmi
