#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deemd/imaging.hpp"
#include "deemd/scorer.hpp"

namespace deemd {

/// Indices of the k largest scores; ties broken by ascending patch index.
/// Returned in rank order. Throws RankOutOfRange unless 1 <= k <= |scores|.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k);

/// Patch probabilities M_i of one sample with its top-k bookkeeping.
struct PatchScoreSet {
  std::string sample_id;
  std::vector<double> scores;
  std::size_t k = 1;
  std::vector<std::size_t> top_k;

  static PatchScoreSet from_scores(std::string sample_id, std::vector<double> scores,
                                   std::size_t k);
  /// m(M_i, k): the k-th greatest patch probability.
  double bag_score() const;
  std::vector<double> top_k_scores() const;
};

/// 1 iff the k-th greatest probability reaches eta.
int predict_bag(const PatchScoreSet& scores, double eta);

/// Median of the top-k probabilities (z_i).
double sample_infection_probability(const PatchScoreSet& scores);

struct PrecisionRecallPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct AveragePrecision {
  double value = 0.0;
  std::vector<PrecisionRecallPoint> curve;  // descending threshold
};

/// Step-interpolated AP: sum over distinct thresholds of
/// (R_t - R_prev) * P_t. Throws DegenerateLabels without both classes.
AveragePrecision evaluate_ap(std::span<const double> scores, std::span<const int> labels);

/// Mann-Whitney ROC AUC with ties counted one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// A normalized sample image with its bag label.
struct Bag {
  std::string sample_id;
  Image image;
  int label = 0;
};

struct TrainConfig {
  std::size_t k = 2;
  int epochs = 150;
  std::size_t batch_size = 128;
  double peak_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double warmup_fraction = 0.3;
  double floor_divisor = 25.0;
  int patience = 10;
  double eta = 0.5;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ap = 0.0;  // NaN without a usable validation set
  double lr = 0.0;      // learning rate at the epoch's last step
  double val_loss = 0.0;  // top-k weighted BCE on validation; tie-break for early stopping
};

struct TrainResult {
  ScorerModel model;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_ap = 0.0;
  bool stopped_early = false;
};

/// Exhaustive inference over all grid patches of one image.
PatchScoreSet score_bag(const ScorerModel& model, const Bag& bag, const GridConfig& grid,
                        std::size_t k);
std::vector<PatchScoreSet> score_bags(const ScorerModel& model, std::span<const Bag> bags,
                                      const GridConfig& grid, std::size_t k, int jobs = 1);

/// Dataset loss: mean over bags of the per-bag top-k weighted BCE, with the
/// top-k chosen by the same model. k = N gives the all-patch loss.
double dataset_loss(const ScorerModel& model, std::span<const Bag> bags, const GridConfig& grid,
                    std::size_t k, const LossConfig& loss, int jobs = 1);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Top-k MIL training: per epoch, exhaustive inference with frozen weights,
/// top-k selection, then Adam steps on the selected patches under a one-cycle
/// cosine schedule; early stopping on validation AP with best-model restore.
TrainResult train(std::span<const Bag> train_bags, std::span<const Bag> validation_bags,
                  const GridConfig& grid, ScorerModel model, const TrainConfig& cfg,
                  const LossConfig& loss, const EpochCallback& on_epoch = {});

void write_training_log(std::span<const EpochLog> log, const std::filesystem::path& path);

struct KCandidate {
  std::size_t k = 1;
  const ScorerModel* model = nullptr;
};

struct KReportRow {
  std::size_t k = 1;
  double mean_infected_fraction = 0.0;
  double average_precision = 0.0;
  double distance = 0.0;  // |mean fraction - target|
  bool flagged = false;
};

struct KReportOptions {
  double moi = 0.4;
  double eta = 0.5;
  double alpha = 0.2;
  double sigma = 60.0;
  double near_tie = 0.02;
  int jobs = 1;
};

/// Flags the row nearest `target`; among rows within `near_tie` of the
/// nearest distance, the highest AP wins (then the smaller k). Returns the
/// flagged index.
std::size_t flag_candidate(std::vector<KReportRow>& rows, double target, double near_tie);

/// Per candidate k: mean infected-pixel fraction of the infection maps of
/// positive validation samples, and validation AP.
std::vector<KReportRow> candidate_k_report(std::span<const KCandidate> candidates,
                                           std::span<const Bag> validation,
                                           const GridConfig& grid, const KReportOptions& options);

}  // namespace deemd
