#include "deemd/efficacy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>

#include "deemd/common.hpp"

namespace deemd {

double sign_test_coverage(int n, int d) {
  if (n < 1 || d < 1 || d > n) fail(ErrorKind::DomainError, "coverage needs 1 <= d <= n");
  if (n <= 62) {
    // Pascal row n with exact 64-bit integers; tail S = sum_{i < d} C(n, i).
    std::vector<std::uint64_t> row(static_cast<std::size_t>(n) + 1, 0);
    row[0] = 1;
    for (int m = 1; m <= n; ++m)
      for (int i = m; i >= 1; --i) row[i] += row[i - 1];
    std::uint64_t tail = 0;
    for (int i = 0; i < d; ++i) tail += row[i];
    const std::uint64_t total = std::uint64_t{1} << n;
    if (2 * tail >= total) return 0.0;
    return std::ldexp(static_cast<double>(total - 2 * tail), -n);
  }
  long double tail = 0.0L;
  for (int i = 0; i < d; ++i) {
    tail += std::exp(std::lgamma(n + 1.0L) - std::lgamma(i + 1.0L) - std::lgamma(n - i + 1.0L) -
                     n * std::log(2.0L));
  }
  return std::max(0.0, static_cast<double>(1.0L - 2.0L * tail));
}

MedianInterval sign_test_median_ci(std::span<const double> values, double level) {
  if (values.empty()) fail(ErrorKind::EmptyInput, "confidence interval of empty sample");
  if (!(level > 0.0 && level < 1.0)) fail(ErrorKind::DomainError, "level must lie in (0,1)");
  std::vector<double> x(values.begin(), values.end());
  std::sort(x.begin(), x.end());
  const int n = static_cast<int>(x.size());

  MedianInterval ci;
  ci.d = 1;
  ci.coverage = sign_test_coverage(n, 1);
  ci.insufficient = ci.coverage < level;
  if (!ci.insufficient) {
    for (int d = 2; d <= n + 1 - d; ++d) {
      const double cov = sign_test_coverage(n, d);
      if (cov < level) break;
      ci.d = d;
      ci.coverage = cov;
    }
  }
  ci.lower = x[ci.d - 1];
  ci.upper = x[n - ci.d];
  return ci;
}

double dose_efficacy(std::span<const double> replicates, double level) {
  return 1.0 - sign_test_median_ci(replicates, level).upper;
}

DoseGroup evaluate_dose_group(std::string treatment, double concentration,
                              std::vector<double> replicates, double level) {
  DoseGroup g;
  g.treatment = std::move(treatment);
  g.concentration = concentration;
  g.ci = sign_test_median_ci(replicates, level);
  g.beta = median(replicates);
  g.efficacy = 1.0 - g.ci.upper;
  g.replicates = std::move(replicates);
  return g;
}

TreatmentScore treatment_efficacy(std::string treatment,
                                  const std::map<double, double>& dose_scores, double zeta) {
  if (dose_scores.empty()) fail(ErrorKind::EmptyInput, "treatment without doses: " + treatment);
  std::vector<double> all, passing;
  for (const auto& [conc, e] : dose_scores) {
    all.push_back(e);
    if (e >= zeta) passing.push_back(e);
  }
  TreatmentScore t;
  t.treatment = std::move(treatment);
  t.dose_scores = dose_scores;
  t.score = median(passing.empty() ? all : passing);
  t.effective = t.score >= zeta;
  return t;
}

Ranking rank_treatments(std::vector<TreatmentScore> scores) {
  std::sort(scores.begin(), scores.end(), [](const TreatmentScore& a, const TreatmentScore& b) {
    return a.score > b.score || (a.score == b.score && a.treatment < b.treatment);
  });
  Ranking r;
  for (const auto& s : scores)
    if (s.effective) r.effective.push_back(s.treatment);
  r.ordered = std::move(scores);
  return r;
}

namespace {

double logistic(double x, double m, double s) { return 1.0 / (1.0 + std::exp(-s * (x - m))); }

double sse(std::span<const double> x, std::span<const double> y, double m, double s) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = logistic(x[i], m, s) - y[i];
    total += r * r;
  }
  return total;
}

std::pair<double, double> levenberg_marquardt(std::span<const double> x, std::span<const double> y,
                                              double m, double s) {
  double lambda = 1e-3;
  double current = sse(x, y, m, s);
  for (int iter = 0; iter < 500; ++iter) {
    double a11 = 0, a12 = 0, a22 = 0, g1 = 0, g2 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double f = logistic(x[i], m, s);
      const double r = f - y[i];
      const double df = f * (1.0 - f);
      const double jm = -s * df, js = (x[i] - m) * df;
      a11 += jm * jm;
      a12 += jm * js;
      a22 += js * js;
      g1 += jm * r;
      g2 += js * r;
    }
    bool accepted = false;
    for (int tries = 0; tries < 30 && !accepted; ++tries) {
      const double b11 = a11 * (1.0 + lambda) + 1e-300, b22 = a22 * (1.0 + lambda) + 1e-300;
      const double det = b11 * b22 - a12 * a12;
      if (!(std::abs(det) > 0.0)) {
        lambda *= 10.0;
        continue;
      }
      const double dm = -(b22 * g1 - a12 * g2) / det;
      const double ds = -(b11 * g2 - a12 * g1) / det;
      const double candidate = sse(x, y, m + dm, s + ds);
      if (std::isfinite(candidate) && candidate <= current) {
        const double improvement = current - candidate;
        m += dm;
        s += ds;
        current = candidate;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (improvement <= 1e-30 || (std::abs(dm) < 1e-14 && std::abs(ds) < 1e-14))
          return {m, s};
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  return {m, s};
}

}  // namespace

LogisticFit fit_logistic(std::span<const double> log_doses, std::span<const double> scores) {
  if (log_doses.size() != scores.size()) fail(ErrorKind::ShapeMismatch, "doses/scores length");
  const std::set<double> levels(log_doses.begin(), log_doses.end());
  if (levels.size() < 3) fail(ErrorKind::DegenerateData, "logistic fit needs >= 3 dose levels");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  if (*lo == *hi) fail(ErrorKind::DegenerateData, "constant scores leave the midpoint unidentified");

  const double xmin = *levels.begin(), xmax = *levels.rbegin();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    mx += log_doses[i];
    my += scores[i];
  }
  mx /= static_cast<double>(scores.size());
  my /= static_cast<double>(scores.size());
  double cov = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) cov += (log_doses[i] - mx) * (scores[i] - my);
  const double s0 = (cov < 0 ? -4.0 : 4.0) / (xmax - xmin);

  LogisticFit best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 5; ++i) {
    const double m0 = xmin + (xmax - xmin) * i / 4.0;
    const auto [m, s] = levenberg_marquardt(log_doses, scores, m0, s0);
    const double e = sse(log_doses, scores, m, s);
    if (e < best_sse) {
      best_sse = e;
      best.midpoint = m;
      best.slope = s;
    }
  }
  best.rmse = std::sqrt(best_sse / static_cast<double>(scores.size()));
  return best;
}

void write_doses_csv(std::span<const DoseGroup> groups, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << "treatment,concentration,n,beta,ci_lo,ci_hi,coverage,e,flag\n" << std::setprecision(10);
  for (const auto& g : groups) {
    out << g.treatment << ',' << g.concentration << ',' << g.replicates.size() << ',' << g.beta
        << ',' << g.ci.lower << ',' << g.ci.upper << ',' << g.ci.coverage << ',' << g.efficacy
        << ',' << (g.ci.insufficient ? "insufficient" : "ok") << '\n';
  }
}

void write_treatments_csv(const Ranking& ranking, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << "treatment,e_t,effective,rank\n" << std::setprecision(10);
  for (std::size_t i = 0; i < ranking.ordered.size(); ++i) {
    const auto& t = ranking.ordered[i];
    out << t.treatment << ',' << t.score << ',' << (t.effective ? 1 : 0) << ',' << i + 1 << '\n';
  }
}

}  // namespace deemd
