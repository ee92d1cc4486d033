#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <random>

#include "deemd/common.hpp"
#include "deemd/efficacy.hpp"
#include "test_support.hpp"

using namespace deemd;
using deemd::testing::TempDir;

namespace {

std::uint64_t choose(int n, int k) {
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
  return r;
}

// Exact coverage as a dyadic rational, then one rounding to double.
double oracle_coverage(int n, int d) {
  std::uint64_t tail = 0;
  for (int i = 0; i < d; ++i) tail += choose(n, i);
  const std::uint64_t total = std::uint64_t{1} << n;
  return static_cast<double>(total - 2 * tail) / static_cast<double>(total);
}

// Same tail by enumerating every sign pattern.
double enumerated_coverage(int n, int d) {
  std::uint64_t tail = 0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask)
    if (std::popcount(mask) <= d - 1) ++tail;
  const std::uint64_t total = std::uint64_t{1} << n;
  return static_cast<double>(total - 2 * tail) / static_cast<double>(total);
}

std::pair<int, double> oracle_d(int n, double level) {
  int best = 0;
  for (int d = 1; 2 * d <= n + 1; ++d)
    if (oracle_coverage(n, d) >= level) best = d;
  return best == 0 ? std::pair{1, oracle_coverage(n, 1)} : std::pair{best, oracle_coverage(n, best)};
}

}  // namespace

TEST(SignTest, CoverageMatchesEnumeration) {
  for (int n = 1; n <= 16; ++n)
    for (int d = 1; 2 * d <= n + 1; ++d) EXPECT_EQ(sign_test_coverage(n, d), enumerated_coverage(n, d));
  for (int n = 1; n <= 30; ++n)
    for (int d = 1; 2 * d <= n + 1; ++d) EXPECT_EQ(sign_test_coverage(n, d), oracle_coverage(n, d));
}

TEST(SignTest, OrderStatisticChoiceMatchesOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (double level : {0.90, 0.95, 0.99}) {
    for (int n = 1; n <= 30; ++n) {
      std::vector<double> v(n);
      for (auto& x : v) x = u(rng);
      const auto ci = sign_test_median_ci(v, level);
      const auto [d, cov] = oracle_d(n, level);
      EXPECT_EQ(ci.d, d) << n << " @ " << level;
      EXPECT_EQ(ci.coverage, cov) << n << " @ " << level;
      EXPECT_EQ(ci.insufficient, cov < level);
      auto sorted = v;
      std::sort(sorted.begin(), sorted.end());
      EXPECT_EQ(ci.lower, sorted[d - 1]);
      EXPECT_EQ(ci.upper, sorted[n - d]);
    }
  }
}

TEST(SignTest, SixReplicates) {
  const std::vector<double> v{0.3, 0.1, 0.9, 0.2, 0.4, 0.2};
  const auto ci = sign_test_median_ci(v, 0.95);
  EXPECT_EQ(ci.d, 1);
  EXPECT_EQ(ci.coverage, 0.96875);
  EXPECT_EQ(ci.lower, 0.1);
  EXPECT_EQ(ci.upper, 0.9);
  EXPECT_FALSE(ci.insufficient);
}

TEST(SignTest, SingleValueInsufficient) {
  const std::vector<double> v{0.42};
  const auto ci = sign_test_median_ci(v, 0.95);
  EXPECT_EQ(ci.lower, 0.42);
  EXPECT_EQ(ci.upper, 0.42);
  EXPECT_EQ(ci.coverage, 0.0);
  EXPECT_TRUE(ci.insufficient);
}

TEST(SignTest, EmptyInput) {
  try {
    sign_test_median_ci(std::vector<double>{}, 0.95);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyInput);
  }
}

TEST(SignTest, NestingAndMembership) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int n = 1; n <= 40; ++n) {
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    double prev_lo = 2, prev_hi = -1;
    for (double level : {0.5, 0.8, 0.9, 0.95, 0.99, 0.999}) {
      const auto ci = sign_test_median_ci(v, level);
      EXPECT_NE(std::find(v.begin(), v.end(), ci.lower), v.end());
      EXPECT_NE(std::find(v.begin(), v.end(), ci.upper), v.end());
      EXPECT_LE(ci.lower, median(v));
      EXPECT_GE(ci.upper, median(v));
      if (prev_hi >= 0) {
        EXPECT_LE(ci.lower, prev_lo);
        EXPECT_GE(ci.upper, prev_hi);
      }
      prev_lo = ci.lower;
      prev_hi = ci.upper;
    }
  }
}

TEST(DoseEfficacy, Examples) {
  EXPECT_EQ(dose_efficacy(std::vector<double>(6, 0.0), 0.95), 1.0);
  EXPECT_EQ(dose_efficacy(std::vector<double>(6, 1.0), 0.95), 0.0);
  EXPECT_NEAR(dose_efficacy(std::vector<double>{0.1, 0.2, 0.2, 0.3, 0.4, 0.9}, 0.95), 0.1, 1e-15);
  const auto g = evaluate_dose_group("T", 1.0, {0.1, 0.2, 0.2, 0.3, 0.4, 0.9}, 0.95);
  EXPECT_DOUBLE_EQ(g.beta, 0.25);
  EXPECT_LE(g.ci.lower, g.beta);
  EXPECT_GE(g.ci.upper, g.beta);
  EXPECT_DOUBLE_EQ(g.efficacy, 1.0 - g.ci.upper);
}

TEST(DoseEfficacy, Antitone) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> v(1 + trial % 12);
    for (auto& x : v) x = u(rng);
    const double e = dose_efficacy(v, 0.95);
    auto raised = v;
    raised[trial % raised.size()] = std::min(1.0, raised[trial % raised.size()] + u(rng));
    EXPECT_LE(dose_efficacy(raised, 0.95), e);
  }
}

TEST(TreatmentEfficacy, Examples) {
  auto a = treatment_efficacy("A", {{0.1, 0.2}, {1, 0.6}, {10, 0.7}}, 0.5);
  EXPECT_DOUBLE_EQ(a.score, 0.65);
  EXPECT_TRUE(a.effective);
  auto b = treatment_efficacy("B", {{0.1, 0.1}, {1, 0.2}, {10, 0.3}}, 0.5);
  EXPECT_DOUBLE_EQ(b.score, 0.2);
  EXPECT_FALSE(b.effective);
  auto c = treatment_efficacy("C", {{1, 0.6}}, 0.5);
  EXPECT_DOUBLE_EQ(c.score, 0.6);
  EXPECT_TRUE(c.effective);
}

TEST(TreatmentEfficacy, EffectiveIffSomeDoseReachesZeta) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::map<double, double> doses;
    for (int i = 0; i <= trial % 5; ++i) doses[i + 1.0] = u(rng);
    const auto t = treatment_efficacy("T", doses, 0.5);
    const bool any = std::any_of(doses.begin(), doses.end(), [](auto& kv) { return kv.second >= 0.5; });
    EXPECT_EQ(t.effective, any);
    EXPECT_EQ(t.effective, t.score >= 0.5);
    auto more = doses;
    more[100.0] = 0.5 + 0.5 * u(rng);
    if (t.effective) EXPECT_TRUE(treatment_efficacy("T", more, 0.5).effective);
  }
}

TEST(Ranking, Examples) {
  std::vector<TreatmentScore> s{{"A", {}, 0.9, true}, {"B", {}, 0.4, false}, {"C", {}, 0.7, true}};
  const auto r = rank_treatments(s);
  ASSERT_EQ(r.ordered.size(), 3u);
  EXPECT_EQ(r.ordered[0].treatment, "A");
  EXPECT_EQ(r.ordered[1].treatment, "C");
  EXPECT_EQ(r.ordered[2].treatment, "B");
  EXPECT_EQ(r.effective, (std::vector<std::string>{"A", "C"}));

  EXPECT_TRUE(rank_treatments({}).ordered.empty());
  EXPECT_TRUE(rank_treatments({}).effective.empty());

  const auto tie = rank_treatments({{"B", {}, 0.6, true}, {"A", {}, 0.6, true}});
  EXPECT_EQ(tie.ordered[0].treatment, "A");
  EXPECT_EQ(tie.ordered[1].treatment, "B");
}

TEST(Logistic, RecoversGeneratingCurve) {
  std::vector<double> x, y;
  for (int i = 0; i < 6; ++i) {
    x.push_back(-1.0 + 0.5 * i);
    y.push_back(1.0 / (1.0 + std::exp(-2.0 * (x.back() - 0.5))));
  }
  const auto fit = fit_logistic(x, y);
  EXPECT_NEAR(fit.midpoint, 0.5, 1e-4);
  EXPECT_NEAR(fit.slope, 2.0, 1e-4);
  EXPECT_LT(fit.rmse, 1e-6);
}

TEST(Logistic, DegenerateInputs) {
  for (auto [x, y] : {std::pair{std::vector<double>{0, 1, 2}, std::vector<double>{0.5, 0.5, 0.5}},
                      std::pair{std::vector<double>{0, 1, 0, 1}, std::vector<double>{0.1, 0.9, 0.2, 0.8}}}) {
    try {
      fit_logistic(x, y);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::DegenerateData);
    }
  }
}

TEST(EfficacyCsv, Headers) {
  TempDir dir;
  std::vector<DoseGroup> groups{evaluate_dose_group("T", 0.5, {0.1, 0.2, 0.3}, 0.95)};
  write_doses_csv(groups, dir / "doses.csv");
  const auto doses = deemd::testing::read_text(dir / "doses.csv");
  EXPECT_EQ(doses.substr(0, doses.find('\n')), "treatment,concentration,n,beta,ci_lo,ci_hi,coverage,e,flag");
  EXPECT_NE(doses.find("insufficient"), std::string::npos);
  write_treatments_csv(rank_treatments({{"T", {}, 0.7, true}}), dir / "t.csv");
  EXPECT_EQ(deemd::testing::read_text(dir / "t.csv").substr(0, 27), "treatment,e_t,effective,ran");
}
