#include <gtest/gtest.h>

#include <sstream>

#include "lmi/ensemble.hpp"
#include "lmi/paramspace.hpp"
#include "lmi/util.hpp"

using namespace lmi;

namespace {

ModelConfig tiny(Architecture arch) {
  ModelConfig c;
  c.arch = arch;
  c.vocab_size = 32;
  c.context_len = 12;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  return c;
}

Checkpoint noisy(const ModelConfig& cfg, std::uint64_t seed) {
  Checkpoint c = init_model(cfg, seed);
  Rng rng(seed * 7 + 1);
  for (auto& [name, t] : c.tensors()) {
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, t.get(i) + rng.normal(0.0, 0.5));
  }
  return c;
}

}  // namespace

TEST(Dexperts, Examples) {
  const std::vector<double> z0{0, 0}, zp{1, 0}, zm{0, 1};
  EXPECT_EQ(dexperts_logits(z0, zp, zm, 1.0), (std::vector<double>{1, -1}));
  EXPECT_EQ(dexperts_logits(std::vector<double>{0.3, -2}, zp, zm, 0.0), (std::vector<double>{0.3, -2}));
  EXPECT_THROW(dexperts_logits(z0, std::vector<double>{1}, zm, 1.0), std::invalid_argument);
}

TEST(Dexperts, MatchesScalarLoopAndIsAffineInAlpha) {
  Rng rng(1);
  std::vector<double> z0(50), zp(50), zm(50);
  for (std::size_t i = 0; i < 50; ++i) {
    z0[i] = rng.normal();
    zp[i] = rng.normal();
    zm[i] = rng.normal();
  }
  const auto z = dexperts_logits(z0, zp, zm, 0.7);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_DOUBLE_EQ(z[i], z0[i] + 0.7 * (zp[i] - zm[i]));
  const auto a = dexperts_logits(z0, zp, zm, -1.0), b = dexperts_logits(z0, zp, zm, 3.0),
             mid = dexperts_logits(z0, zp, zm, 1.0);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(mid[i], 0.5 * (a[i] + b[i]), 1e-12);
}

TEST(Ensemble, AlphaZeroFollowsBaseSamplePath) {
  const auto cfg = tiny(Architecture::Transformer);
  const auto base = noisy(cfg, 1), plus = noisy(cfg, 2), minus = noisy(cfg, 3);
  GenConfig g;
  g.seed = 17;
  SampleTrace ta, tb;
  const TokenSeq prompt{1, 3, 8};
  const auto a = ensemble_sample({0.0, &base, &plus, &minus}, prompt, g, &ta);
  const auto b = sample(base, prompt, g, &tb);
  EXPECT_EQ(a, b);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].nucleus, tb[i].nucleus);
}

TEST(Ensemble, IdenticalExpertsCancel) {
  const auto cfg = tiny(Architecture::Transformer);
  const auto base = noisy(cfg, 1), expert = noisy(cfg, 2);
  const TokenSeq prompt{1, 5};
  const auto z0 = model_logits(base)(prompt);
  for (double alpha : {-2.0, 0.5, 3.0}) {
    EXPECT_EQ(ensemble_logits({alpha, &base, &expert, &expert})(prompt), z0);
  }
}

TEST(Ensemble, RejectsIncompatibleMembers) {
  const auto a = noisy(tiny(Architecture::Transformer), 1);
  const auto b = noisy(tiny(Architecture::Affine), 2);
  EXPECT_THROW(ensemble_logits({1.0, &a, &a, &b}), IncompatibleCheckpoints);
  EXPECT_THROW(ensemble_logits({1.0, &a, nullptr, &a}), std::invalid_argument);
}

TEST(Compare, AffineModelDeviationVanishes) {
  const auto cfg = tiny(Architecture::Affine);
  const auto t0 = noisy(cfg, 1), tm = noisy(cfg, 2), tp = noisy(cfg, 3);
  const std::vector<TokenSeq> prompts{{1, 3, 4}, {1, 9, 10, 11}};
  for (double alpha : {-1.0, 0.0, 0.25, 0.5, 1.0, 2.0}) {
    EXPECT_LE(weight_output_deviation(t0, tm, tp, alpha, prompts), 1e-5) << alpha;
  }
  // The transformer is not linear in its parameters.
  const auto cfg2 = tiny(Architecture::Transformer);
  EXPECT_GT(weight_output_deviation(noisy(cfg2, 1), noisy(cfg2, 2), noisy(cfg2, 3), 0.5, prompts), 1e-3);
}

TEST(Compare, AlphaZeroArmsAreIdentical) {
  const auto cfg = tiny(Architecture::Transformer);
  const auto t0 = noisy(cfg, 1), tm = noisy(cfg, 2), tp = noisy(cfg, 3);
  const Language lang = Language::defaults();
  GenerationPlan plan;
  plan.prompts = encode_prompts(lang.vocab, {split_words("the movie was"), split_words("a film is")});
  plan.per_prompt = 3;
  plan.gen.max_new_tokens = 6;
  plan.seed = 5;
  const auto rows = compare_weight_vs_output({&t0, &tm, &tp, &t0, &lang}, {0.0, 0.5}, plan);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].arm, "weight");
  EXPECT_EQ(rows[1].arm, "output");
  EXPECT_EQ(rows[0].metrics.positive_score, rows[1].metrics.positive_score);
  EXPECT_EQ(rows[0].metrics.perplexity, rows[1].metrics.perplexity);
  EXPECT_EQ(rows[0].logit_dev, 0.0);
  std::ostringstream csv;
  write_comparison_csv(rows, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "alpha,arm,positive_score,perplexity,logit_dev");
}
