#include "deemd/mil.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "deemd/common.hpp"
#include "deemd/infmap.hpp"
#include "deemd/optim.hpp"
#include "deemd/parallel.hpp"

namespace deemd {

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size())
    fail(ErrorKind::RankOutOfRange,
         "k = " + std::to_string(k) + " with " + std::to_string(scores.size()) + " patches");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

PatchScoreSet PatchScoreSet::from_scores(std::string sample_id, std::vector<double> scores,
                                         std::size_t k) {
  PatchScoreSet s;
  s.sample_id = std::move(sample_id);
  s.top_k = select_top_k(scores, k);
  s.scores = std::move(scores);
  s.k = k;
  return s;
}

double PatchScoreSet::bag_score() const { return kth_greatest(scores, k); }

std::vector<double> PatchScoreSet::top_k_scores() const {
  std::vector<double> out;
  out.reserve(top_k.size());
  for (auto j : top_k) out.push_back(scores[j]);
  return out;
}

int predict_bag(const PatchScoreSet& scores, double eta) {
  return scores.bag_score() >= eta ? 1 : 0;
}

double sample_infection_probability(const PatchScoreSet& scores) {
  return median(scores.top_k_scores());
}

AveragePrecision evaluate_ap(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::ShapeMismatch, "scores/labels length");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0 || positives == labels.size())
    fail(ErrorKind::DegenerateLabels, "average precision needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  AveragePrecision ap;
  std::size_t tp = 0, taken = 0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == t; ++i) {
      tp += labels[order[i]] == 1 ? 1 : 0;
      ++taken;
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(taken);
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    ap.value += (recall - prev_recall) * precision;
    prev_recall = recall;
    ap.curve.push_back({t, precision, recall});
  }
  return ap;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::ShapeMismatch, "scores/labels length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t m = i; m < j; ++m) {
      if (labels[order[m]] == 1) {
        rank_sum += avg_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) fail(ErrorKind::DegenerateLabels, "ROC AUC needs both classes");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

PatchScoreSet score_bag(const ScorerModel& model, const Bag& bag, const GridConfig& grid,
                        std::size_t k) {
  grid.validate(bag.image.height(), bag.image.width());
  const int n = grid.patch_count(bag.image.height(), bag.image.width());
  std::vector<double> scores(n);
  for (int j = 0; j < n; ++j) scores[j] = model.score(extract_patch(bag.image, grid, j));
  return PatchScoreSet::from_scores(bag.sample_id, std::move(scores), k);
}

std::vector<PatchScoreSet> score_bags(const ScorerModel& model, std::span<const Bag> bags,
                                      const GridConfig& grid, std::size_t k, int jobs) {
  std::vector<PatchScoreSet> out(bags.size());
  parallel_for(bags.size(), jobs, [&](std::size_t i) { out[i] = score_bag(model, bags[i], grid, k); });
  return out;
}

double dataset_loss(const ScorerModel& model, std::span<const Bag> bags, const GridConfig& grid,
                    std::size_t k, const LossConfig& loss, int jobs) {
  if (bags.empty()) fail(ErrorKind::EmptyInput, "dataset loss over no bags");
  const auto sets = score_bags(model, bags, grid, k, jobs);
  double total = 0.0;
  for (std::size_t i = 0; i < bags.size(); ++i)
    total += bag_loss(sets[i].top_k_scores(), bags[i].label, loss);
  return total / static_cast<double>(bags.size());
}

namespace {

struct ValidationScore {
  double ap = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
};

ValidationScore validate_epoch(const ScorerModel& model, std::span<const Bag> bags,
                               const GridConfig& grid, std::size_t k, const LossConfig& loss,
                               int jobs) {
  ValidationScore v;
  if (bags.empty()) return v;
  std::vector<int> labels;
  for (const auto& b : bags) labels.push_back(b.label);
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) return v;
  const auto sets = score_bags(model, bags, grid, k, jobs);
  std::vector<double> scores;
  double total = 0.0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    scores.push_back(sets[i].bag_score());
    total += bag_loss(sets[i].top_k_scores(), labels[i], loss);
  }
  v.ap = evaluate_ap(scores, labels).value;
  v.loss = total / static_cast<double>(sets.size());
  return v;
}

struct Instance {
  std::size_t bag = 0;
  int patch = 0;
};

}  // namespace

TrainResult train(std::span<const Bag> train_bags, std::span<const Bag> validation_bags,
                  const GridConfig& grid, ScorerModel model, const TrainConfig& cfg,
                  const LossConfig& loss, const EpochCallback& on_epoch) {
  if (train_bags.empty()) fail(ErrorKind::EmptyInput, "no training bags");
  if (!(cfg.eta > 0.0 && cfg.eta < 1.0)) fail(ErrorKind::InvalidConfig, "eta must lie in (0,1)");
  if (cfg.batch_size == 0) fail(ErrorKind::InvalidConfig, "batch_size must be positive");
  for (const auto& b : train_bags) {
    grid.validate(b.image.height(), b.image.width());
    model.check_shape(extract_patch(b.image, grid, 0));
  }
  for (const auto& b : validation_bags) grid.validate(b.image.height(), b.image.width());
  const std::size_t patches = static_cast<std::size_t>(
      grid.patch_count(train_bags[0].image.height(), train_bags[0].image.width()));
  if (cfg.k < 1 || cfg.k > patches)
    fail(ErrorKind::RankOutOfRange, "k = " + std::to_string(cfg.k) + " with N = " + std::to_string(patches));

  TrainResult result{model, {}, 0, std::numeric_limits<double>::quiet_NaN(), false};
  if (cfg.epochs <= 0) return result;

  const std::size_t instances = train_bags.size() * cfg.k;
  const std::size_t steps_per_epoch = (instances + cfg.batch_size - 1) / cfg.batch_size;
  const OneCycleCosine schedule(cfg.peak_lr, steps_per_epoch * static_cast<std::size_t>(cfg.epochs),
                                cfg.warmup_fraction, cfg.floor_divisor);
  Adam adam(model.parameter_count(), cfg.beta1, cfg.beta2);
  std::mt19937_64 rng(cfg.seed);

  ScorerModel best = model;
  double best_ap = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::size_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Exhaustive inference with the weights frozen at epoch start.
    const auto sets = score_bags(model, train_bags, grid, cfg.k, cfg.jobs);
    std::vector<Instance> pool;
    pool.reserve(instances);
    for (std::size_t i = 0; i < sets.size(); ++i)
      for (auto j : sets[i].top_k) pool.push_back({i, static_cast<int>(j)});
    std::shuffle(pool.begin(), pool.end(), rng);

    double loss_sum = 0.0;
    double lr = schedule.at(step);
    for (std::size_t start = 0; start < pool.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(pool.size(), start + cfg.batch_size);
      std::vector<Image> patches;
      patches.reserve(end - start);
      std::vector<LabeledPatch> batch;
      for (std::size_t i = start; i < end; ++i)
        patches.push_back(extract_patch(train_bags[pool[i].bag].image, grid, pool[i].patch));
      for (std::size_t i = start; i < end; ++i)
        batch.push_back({&patches[i - start], train_bags[pool[i].bag].label});
      const auto lg = loss_and_gradient(model, batch, loss);
      lr = schedule.at(step++);
      adam.step(model.parameters(), lg.gradient, lr);
      loss_sum += lg.loss * static_cast<double>(end - start);
    }

    const auto val = validate_epoch(model, validation_bags, grid, cfg.k, loss, cfg.jobs);
    EpochLog entry{epoch, loss_sum / static_cast<double>(pool.size()), val.ap, lr, val.loss};
    result.log.push_back(entry);
    spdlog::debug("epoch {} loss {:.6f} val_ap {:.4f} lr {:.3g}", epoch, entry.train_loss,
                  entry.val_ap, entry.lr);
    if (on_epoch) on_epoch(entry);

    if (std::isnan(entry.val_ap)) {
      best = model;
      result.best_epoch = epoch;
      continue;
    }
    if (entry.val_ap > best_ap || (entry.val_ap == best_ap && entry.val_loss < best_loss)) {
      best_ap = entry.val_ap;
      best_loss = entry.val_loss;
      best = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  result.model = best;
  result.best_val_ap = best_ap < 0.0 ? std::numeric_limits<double>::quiet_NaN() : best_ap;
  return result;
}

void write_training_log(std::span<const EpochLog> log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << "epoch,train_loss,val_ap,lr\n" << std::setprecision(10);
  for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_ap << ',' << e.lr << '\n';
}

std::size_t flag_candidate(std::vector<KReportRow>& rows, double target, double near_tie) {
  if (rows.empty()) fail(ErrorKind::EmptyInput, "no candidate k");
  double best_distance = std::numeric_limits<double>::infinity();
  for (auto& r : rows) {
    r.distance = std::abs(r.mean_infected_fraction - target);
    r.flagged = false;
    best_distance = std::min(best_distance, r.distance);
  }
  std::size_t chosen = rows.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].distance > best_distance + near_tie) continue;
    if (chosen == rows.size() || rows[i].average_precision > rows[chosen].average_precision ||
        (rows[i].average_precision == rows[chosen].average_precision && rows[i].k < rows[chosen].k))
      chosen = i;
  }
  rows[chosen].flagged = true;
  return chosen;
}

std::vector<KReportRow> candidate_k_report(std::span<const KCandidate> candidates,
                                           std::span<const Bag> validation,
                                           const GridConfig& grid, const KReportOptions& options) {
  if (candidates.empty()) fail(ErrorKind::EmptyInput, "no candidate k");
  if (options.moi < 0.0) fail(ErrorKind::NegativeMoi, "moi must be >= 0");
  std::vector<int> labels;
  for (const auto& b : validation) labels.push_back(b.label);

  std::vector<KReportRow> rows;
  for (const auto& c : candidates) {
    const auto sets = score_bags(*c.model, validation, grid, c.k, options.jobs);
    std::vector<double> fractions(sets.size(), 0.0);
    parallel_for(sets.size(), options.jobs, [&](std::size_t i) {
      if (validation[i].label != 1) return;
      const auto map = build_infection_map(sets[i], grid, validation[i].image.height(),
                                           validation[i].image.width(), options.alpha, options.sigma);
      fractions[i] = infected_fraction(map, options.eta);
    });
    KReportRow row;
    row.k = c.k;
    double sum = 0.0;
    std::size_t positives = 0;
    std::vector<double> bag_scores;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      bag_scores.push_back(sets[i].bag_score());
      if (validation[i].label == 1) {
        sum += fractions[i];
        ++positives;
      }
    }
    if (positives == 0) fail(ErrorKind::DegenerateLabels, "no positive validation samples");
    row.mean_infected_fraction = sum / static_cast<double>(positives);
    row.average_precision = evaluate_ap(bag_scores, labels).value;
    rows.push_back(row);
  }
  flag_candidate(rows, 1.0 - std::exp(-options.moi), options.near_tie);
  return rows;
}

}  // namespace deemd
