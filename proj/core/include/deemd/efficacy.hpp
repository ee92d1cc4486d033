#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace deemd {

/// 1 - 2 * P[B <= d - 1] for B ~ Binomial(n, 1/2): the coverage of the
/// order-statistic interval (x_(d), x_(n+1-d)) for the median.
double sign_test_coverage(int n, int d);

struct MedianInterval {
  double lower = 0.0;
  double upper = 0.0;
  double coverage = 0.0;
  int d = 1;
  bool insufficient = false;  // even d = 1 misses the requested level
};

/// Exact distribution-free (sign test) confidence interval for the median.
/// Throws EmptyInput.
MedianInterval sign_test_median_ci(std::span<const double> values, double level);

struct DoseGroup {
  std::string treatment;
  double concentration = 0.0;
  std::vector<double> replicates;  // z values
  double beta = 0.0;               // median point estimate
  MedianInterval ci;
  double efficacy = 0.0;           // 1 - ci.upper
};

/// e = 1 - upper sign-test bound on the replicate median. Throws EmptyInput.
double dose_efficacy(std::span<const double> replicates, double level);
DoseGroup evaluate_dose_group(std::string treatment, double concentration,
                              std::vector<double> replicates, double level);

struct TreatmentScore {
  std::string treatment;
  std::map<double, double> dose_scores;  // concentration -> e
  double score = 0.0;
  bool effective = false;
};

/// Median of the doses scoring >= zeta if any, else of all doses.
TreatmentScore treatment_efficacy(std::string treatment,
                                  const std::map<double, double>& dose_scores, double zeta);

struct Ranking {
  std::vector<TreatmentScore> ordered;  // descending score, then name
  std::vector<std::string> effective;   // in ranked order
};

Ranking rank_treatments(std::vector<TreatmentScore> scores);

struct LogisticFit {
  double midpoint = 0.0;
  double slope = 0.0;
  double rmse = 0.0;
};

/// Least-squares f(x) = 1 / (1 + exp(-s (x - m))) on log10 doses; display
/// only. Throws DegenerateData for < 3 dose levels or constant scores.
LogisticFit fit_logistic(std::span<const double> log_doses, std::span<const double> scores);

void write_doses_csv(std::span<const DoseGroup> groups, const std::filesystem::path& path);
void write_treatments_csv(const Ranking& ranking, const std::filesystem::path& path);

}  // namespace deemd
