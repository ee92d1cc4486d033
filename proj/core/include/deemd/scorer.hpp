#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deemd/imaging.hpp"

namespace deemd {

/// Probabilities are clamped to [kProbabilityClamp, 1 - kProbabilityClamp].
inline constexpr double kProbabilityClamp = 1e-7;

/// conv blocks (3x3, stride 2, pad 1, ReLU) -> global average pool -> affine -> sigmoid
struct Architecture {
  int in_channels = 5;
  int patch_size = 256;
  std::vector<int> conv_channels = {8, 16, 32};
  int kernel = 3;
  int stride = 2;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ParameterSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Per-layer intermediate values from one forward pass.
struct ForwardTrace {
  std::vector<std::vector<double>> pre_activation;  // per conv layer
  std::vector<std::vector<double>> activation;      // ReLU output per conv layer
  std::vector<int> side;                            // spatial size per conv layer
  std::vector<double> pooled;
  double logit = 0.0;
  double raw_probability = 0.5;  // sigmoid(logit) before clamping
  double probability = 0.5;
};

class ScorerModel {
 public:
  /// Fan-in scaled uniform initialization from `seed`.
  ScorerModel(Architecture arch, std::uint64_t seed);
  ScorerModel(Architecture arch, std::vector<double> parameters);

  const Architecture& architecture() const { return arch_; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::size_t parameter_count() const { return params_.size(); }
  const std::vector<ParameterSlice>& slices() const { return slices_; }

  /// Zeroes the affine head so every patch scores sigmoid(0) = 0.5.
  void zero_head();

  /// Infection probability mu of a normalized patch. Throws ShapeMismatch.
  double score(const Image& patch) const;
  ForwardTrace forward(const Image& patch) const;

  /// Adds d(loss)/d(theta) for one patch, given d(loss)/d(logit), into `grad`.
  void backward(const Image& patch, const ForwardTrace& trace, double dlogit,
                std::span<double> grad) const;

  void check_shape(const Image& patch) const;

  friend bool operator==(const ScorerModel& a, const ScorerModel& b) {
    return a.arch_ == b.arch_ && a.params_ == b.params_;
  }

 private:
  void build_layout();

  Architecture arch_;
  std::vector<ParameterSlice> slices_;
  std::vector<double> params_;
};

struct LossConfig {
  double w_plus = 1.0;
  double w_minus = 1.0;
};

/// Inverse class frequency, normalized so the sample-weighted mean is 1.
LossConfig class_balanced_weights(std::size_t positives, std::size_t negatives);

/// -[w+ y log mu + w- (1-y) log(1-mu)]. Throws DomainError unless mu in (0,1).
double weighted_bce(double mu, int y, const LossConfig& cfg);

/// Mean weighted BCE over the selected patches of one bag (the per-sample loss).
double bag_loss(std::span<const double> mus, int y, const LossConfig& cfg);

/// d(weighted_bce)/d(logit) with the clamp's zero derivative outside range.
double dloss_dlogit(const ForwardTrace& trace, int y, const LossConfig& cfg);

struct LabeledPatch {
  const Image* patch = nullptr;
  int label = 0;
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// Mean weighted BCE over the batch and its gradient. Throws EmptyInput or
/// ShapeMismatch.
LossAndGradient loss_and_gradient(const ScorerModel& model, std::span<const LabeledPatch> batch,
                                  const LossConfig& cfg);
std::vector<double> gradient(const ScorerModel& model, std::span<const LabeledPatch> batch,
                             const LossConfig& cfg);
double batch_loss(const ScorerModel& model, std::span<const LabeledPatch> batch,
                  const LossConfig& cfg);

using GradientFn =
    std::function<std::vector<double>(const ScorerModel&, std::span<const LabeledPatch>)>;

struct GradientCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

struct GradientCheckOptions {
  double step = 1e-4;
  std::size_t min_parameters = 128;
  std::uint64_t seed = 7;
  LossConfig loss;
  GradientFn analytic;  // defaults to `gradient`
};

/// Compares the analytic gradient against central differences on a
/// stratified subsample of parameters (every layer represented).
GradientCheckReport check_gradients(const ScorerModel& model, const LabeledPatch& probe,
                                    double tolerance, const GradientCheckOptions& options = {});

void save_checkpoint(const ScorerModel& model, const std::filesystem::path& path,
                     const std::string& config_hash);

struct Checkpoint {
  ScorerModel model;
  std::string config_hash;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deemd
