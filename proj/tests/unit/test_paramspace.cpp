#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lmi/paramspace.hpp"
#include "lmi/util.hpp"

using namespace lmi;

namespace {

Checkpoint random_ckpt(std::uint64_t seed, DType dtype = DType::F32) {
  Rng rng(seed);
  Checkpoint c;
  for (const auto& [name, dims] : std::vector<std::pair<std::string, Tensor::Dims>>{
           {"embed.tok", {6, 4}}, {"layer0.attn.qkv.weight", {4, 12}}, {"layer0.ln1.bias", {4}}, {"head.weight", {4, 6}}}) {
    Tensor t = Tensor::zeros(dims, dtype);
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
    c.add(name, std::move(t));
  }
  c.meta()["config"] = "cfg";
  c.meta()["seed"] = std::to_string(seed);
  return c;
}

// Scalar oracle: per element, in double, rounded once.
Checkpoint oracle(const Checkpoint& t0, const Checkpoint& tm, const Checkpoint& tp, double c0, double cm, double cp) {
  Checkpoint out = t0.zeros_like();
  for (auto& [name, t] : out.tensors()) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      t.set(i, c0 * t0.at(name).get(i) + cm * tm.at(name).get(i) + cp * tp.at(name).get(i));
    }
  }
  return out;
}

double max_rel_diff(const Checkpoint& a, const Checkpoint& b) {
  double worst = 0.0;
  for (const auto& [name, ta] : a.tensors()) {
    const Tensor& tb = b.at(name);
    for (std::size_t i = 0; i < ta.numel(); ++i) {
      const double x = ta.get(i), y = tb.get(i);
      worst = std::max(worst, std::abs(x - y) / std::max(1.0, std::max(std::abs(x), std::abs(y))));
    }
  }
  return worst;
}

}  // namespace

TEST(Interp, G1EndpointsAreBitwiseCopies) {
  const auto m = random_ckpt(1), p = random_ckpt(2);
  EXPECT_TRUE(interp_g1(m, p, 0.0).tensors_bitwise_equal(m));
  EXPECT_TRUE(interp_g1(m, p, 1.0).tensors_bitwise_equal(p));
}

TEST(Interp, G1MatchesScalarOracle) {
  const auto m = random_ckpt(1), p = random_ckpt(2);
  for (double a : {0.5, -1.0, 2.0, 0.3}) {
    const auto got = interp_g1(m, p, a);
    const auto want = oracle(m, m, p, 0.0, 1.0 - a, a);
    EXPECT_TRUE(got.tensors_bitwise_equal(want)) << "alpha=" << a;
  }
}

TEST(Interp, G2AndExtrapolation) {
  const auto o = random_ckpt(3), m = random_ckpt(1), p = random_ckpt(2);
  EXPECT_TRUE(interp_g2(o, m, p, 0.0).tensors_bitwise_equal(o));
  const auto got = interp_g2(o, m, p, 1.5);
  EXPECT_LT(max_rel_diff(got, oracle(o, m, p, 1.0, -1.5, 1.5)), 1e-6);
}

TEST(Interp, G3EndpointsAndReductions) {
  const auto o = random_ckpt(3), m = random_ckpt(1), p = random_ckpt(2);
  EXPECT_TRUE(interp_g3(o, m, p, 0, 0).tensors_bitwise_equal(o));
  EXPECT_TRUE(interp_g3(o, m, p, 1, 0).tensors_bitwise_equal(p));
  EXPECT_TRUE(interp_g3(o, m, p, 0, 1).tensors_bitwise_equal(m));
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const double a = -4.0 + 8.0 * rng.uniform();
    EXPECT_LT(max_rel_diff(interp_g3(o, m, p, a, 1.0 - a), interp_g1(m, p, a)), 1e-6);
    EXPECT_LT(max_rel_diff(interp_g3(o, m, p, a, -a), interp_g2(o, m, p, a)), 1e-6);
  }
}

TEST(Interp, AffineInCoefficient) {
  const auto m = random_ckpt(1, DType::F64), p = random_ckpt(2, DType::F64);
  const double a = 0.37, b = 1.91;
  const auto mid = interp_g1(m, p, 0.5 * (a + b));
  const auto avg = interp_g1(interp_g1(m, p, a), interp_g1(m, p, b), 0.5);
  EXPECT_LT(max_rel_diff(mid, avg), 1e-12);
}

TEST(Interp, ProvenanceMetadata) {
  const auto o = random_ckpt(3), m = random_ckpt(1), p = random_ckpt(2);
  const auto out = interp_g3(o, m, p, 0.25, -0.5);
  EXPECT_EQ(out.meta_or("provenance"), "merged");
  EXPECT_EQ(out.meta_or("merge.mode"), "g3");
  EXPECT_EQ(out.meta_or("merge.alpha"), "0.25");
  EXPECT_EQ(out.meta_or("merge.beta"), "-0.5");
  EXPECT_EQ(out.meta_or("merge.theta0"), tensor_digest(o));
  EXPECT_EQ(out.meta_or("merge.theta_plus"), tensor_digest(p));
  EXPECT_EQ(out.meta_or("config"), "cfg");
}

TEST(Interp, RequestValidation) {
  const auto o = random_ckpt(3), m = random_ckpt(1), p = random_ckpt(2);
  EXPECT_THROW(interpolate({InterpMode::G1, 0.5, 0.1, {nullptr, &m, &p}}), std::invalid_argument);
  EXPECT_THROW(interpolate({InterpMode::G1, 0.5, std::nullopt, {&o, &m, &p}}), std::invalid_argument);
  EXPECT_THROW(interpolate({InterpMode::G2, 0.5, std::nullopt, {nullptr, &m, &p}}), std::invalid_argument);
  EXPECT_THROW(interpolate({InterpMode::G3, 0.5, std::nullopt, {&o, &m, &p}}), std::invalid_argument);
  EXPECT_THROW(interp_g1(m, p, std::nan("")), std::invalid_argument);
  EXPECT_THROW(interp_g1(m, p, INFINITY), std::invalid_argument);
  EXPECT_THROW(parse_mode("g4"), std::invalid_argument);
  EXPECT_EQ(parse_mode("g2"), InterpMode::G2);
}

TEST(Interp, IncompatibleOperandsCarryReport) {
  const auto m = random_ckpt(1);
  auto p = random_ckpt(2);
  p.add("bias2", Tensor::zeros({3}, DType::F32));
  try {
    interp_g1(m, p, 0.5);
    FAIL();
  } catch (const IncompatibleCheckpoints& e) {
    EXPECT_EQ(e.report().missing.size() + e.report().extra.size(), 1u);
    EXPECT_NE(std::string(e.what()).find("bias2"), std::string::npos);
  }
  EXPECT_THROW(interp_g1(m, random_ckpt(2, DType::F64), 0.5), IncompatibleCheckpoints);
}

TEST(Axis, EndpointsExactAndCount) {
  const AxisRange r{};
  const auto v = r.values();
  ASSERT_EQ(v.size(), 21u);
  EXPECT_EQ(v.front(), -4.0);
  EXPECT_EQ(v.back(), 4.0);
  EXPECT_EQ(v[10], 0.0);
}

TEST(Sweep, RowMajorFullGrid) {
  const auto o = random_ckpt(3), m = random_ckpt(1), p = random_ckpt(2);
  const SweepSpec spec{};
  InterpRequest req{InterpMode::G3, 0.0, 0.0, {&o, &m, &p}};
  int calls = 0;
  const auto res = sweep(spec, req, [&](const Checkpoint&) {
    ++calls;
    MetricsRecord r;
    r.perplexity = calls;
    return r;
  });
  ASSERT_EQ(res.size(), 441u);
  EXPECT_EQ(calls, 441);
  EXPECT_EQ(res[0].alpha, -4.0);
  EXPECT_EQ(res[0].beta, -4.0);
  EXPECT_EQ(res[1].alpha, -4.0);
  EXPECT_EQ(res[21].alpha, spec.alpha.at(1));
  EXPECT_EQ(res[21].beta, -4.0);
  EXPECT_EQ(res[440].alpha, 4.0);
  EXPECT_EQ(res[440].beta, 4.0);
}

TEST(Sweep, EvaluatorErrorsAreRecorded) {
  const auto m = random_ckpt(1), p = random_ckpt(2);
  SweepSpec spec{InterpMode::G1, {0.0, 1.0, 3}, {}};
  InterpRequest req{InterpMode::G1, 0.0, std::nullopt, {nullptr, &m, &p}};
  const auto res = sweep(spec, req, [](const Checkpoint& c) -> MetricsRecord {
    if (c.meta_or("merge.alpha") == "0.5") throw std::runtime_error("boom, at midpoint");
    return MetricsRecord{};
  });
  ASSERT_EQ(res.size(), 3u);
  EXPECT_TRUE(res[0].metrics.error.empty());
  EXPECT_EQ(res[1].metrics.error, "boom, at midpoint");
  std::ostringstream csv;
  write_sweep_csv(res, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
            "alpha,beta,perplexity,positive_score,grammar_rate,nll_pos,nll_neg,error");
  EXPECT_NE(csv.str().find("\"boom, at midpoint\""), std::string::npos);
}

TEST(Sweep, SpecValidation) {
  EXPECT_THROW((SweepSpec{InterpMode::G2, {}, {}}.validate()), std::invalid_argument);
  EXPECT_THROW((SweepSpec{InterpMode::G1, {1.0, 1.0, 5}, {}}.validate()), std::invalid_argument);
  EXPECT_THROW((SweepSpec{InterpMode::G1, {0.0, 1.0, 1}, {}}.validate()), std::invalid_argument);
}

TEST(DiffNorms, ScaledNormOracle) {
  const auto a = random_ckpt(1);
  auto b = a;
  for (auto& [name, t] : b.tensors()) {
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, t.get(i) + 0.5);
  }
  const auto rep = diff_norms(a, b);
  ASSERT_EQ(rep.entries.size(), 4u);
  for (const auto& e : rep.entries) EXPECT_NEAR(e.delta, 0.5, 1e-6) << e.name;
  EXPECT_EQ(diff_norms(a, a).entries[0].delta, 0.0);
  const auto* bias = rep.find("layer0.ln1.bias");
  ASSERT_NE(bias, nullptr);
  EXPECT_EQ(bias->layer, "0");
  EXPECT_EQ(bias->kind, TensorKind::Bias1D);
  EXPECT_EQ(rep.find("head.weight")->layer, "global");
  EXPECT_EQ(rep.find("head.weight")->kind, TensorKind::Matrix2D);
  std::ostringstream csv;
  write_diff_csv(rep, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "name,layer,kind,delta");
}

TEST(DiffNorms, Symmetric) {
  const auto a = random_ckpt(1), b = random_ckpt(2);
  const auto ab = diff_norms(a, b), ba = diff_norms(b, a);
  for (std::size_t i = 0; i < ab.entries.size(); ++i) EXPECT_EQ(ab.entries[i].delta, ba.entries[i].delta);
}

TEST(LayerOf, Parsing) {
  EXPECT_EQ(layer_of("layer12.mlp.fc.weight"), "12");
  EXPECT_EQ(layer_of("layer.x"), "global");
  EXPECT_EQ(layer_of("layer3"), "global");
  EXPECT_EQ(layer_of("embed.tok"), "global");
}

TEST(FlatOps, DotNormAxpy) {
  const auto a = random_ckpt(1, DType::F64), b = random_ckpt(2, DType::F64);
  double want = 0.0;
  for (const auto& [name, t] : a.tensors()) {
    for (std::size_t i = 0; i < t.numel(); ++i) want += t.get(i) * b.at(name).get(i);
  }
  EXPECT_NEAR(dot(a, b), want, 1e-10);
  EXPECT_NEAR(l2_norm(a) * l2_norm(a), dot(a, a), 1e-9);
  const auto d = subtract(a, b);
  EXPECT_TRUE(axpy(b, 1.0, d).tensors_bitwise_equal(a) || max_rel_diff(axpy(b, 1.0, d), a) < 1e-15);
  EXPECT_EQ(axpy(a, 2.0, b).meta(), a.meta());
}
