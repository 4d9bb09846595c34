#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "lmi/util.hpp"

using namespace lmi;

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(std::string_view("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex(std::string_view("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(FormatDouble, RoundTripsAndIsShortest) {
  EXPECT_EQ(format_double(0.5), "0.5");
  EXPECT_EQ(format_double(-4.0), "-4");
  EXPECT_EQ(format_double(std::numeric_limits<double>::quiet_NaN()), "nan");
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(format_double(-std::numeric_limits<double>::infinity()), "-inf");
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal(0.0, 1e3) * std::pow(10.0, static_cast<double>(rng.index(20)) - 10.0);
    EXPECT_EQ(std::stod(format_double(x)), x);
  }
}

TEST(DeriveSeed, DistinctNamesGiveDistinctSeeds) {
  std::set<std::uint64_t> seen;
  for (const char* name : {"train/pos", "train/neg", "gen/0", "gen/1", "init/theta0"}) {
    EXPECT_TRUE(seen.insert(derive_seed(42, name)).second);
  }
  EXPECT_EQ(derive_seed(42, "train/pos"), derive_seed(42, "train/pos"));
  EXPECT_NE(derive_seed(42, "train/pos"), derive_seed(43, "train/pos"));
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng r(11);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.index(7), 7u);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(5);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal(1.0, 2.0);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 1.0, 0.02);
  EXPECT_NEAR(var, 4.0, 0.05);
}

TEST(Rng, ShuffleIsAPermutation) {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  Rng r(9);
  r.shuffle(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
  EXPECT_NE(v, sorted);
}

TEST(Spearman, MatchesRankOracle) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{10, 20, 30, 40, 50}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  // Nonlinear but monotone.
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{1, 8, 27, 64, 125}), 1.0);
  // Ties use average ranks: y ranks {1.5, 1.5, 3, 4, 5}; Pearson on ranks.
  const std::vector<double> y{2, 2, 3, 4, 5};
  const std::vector<double> rx{1, 2, 3, 4, 5}, ry{1.5, 1.5, 3, 4, 5};
  auto pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / b.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
  };
  EXPECT_NEAR(spearman(x, y), pearson(rx, ry), 1e-12);
  EXPECT_EQ(spearman(x, std::vector<double>{3, 3, 3, 3, 3}), 0.0);
}

TEST(KahanSum, BeatsNaiveSummation) {
  KahanSum k;
  double naive = 0.0;
  k.add(1.0);
  naive += 1.0;
  for (int i = 0; i < 1000000; ++i) {
    k.add(1e-16);
    naive += 1e-16;
  }
  EXPECT_EQ(naive, 1.0);
  EXPECT_NEAR(k.value(), 1.0 + 1e-10, 1e-20);
}
