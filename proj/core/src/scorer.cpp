#include "deemd/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include <json.hpp>

#include "deemd/common.hpp"

namespace deemd {
namespace {

int output_side(int in, int kernel, int stride) {
  const int pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

// Range of output columns whose tap (ox * stride + offset) lands inside [0, in).
std::pair<int, int> valid_range(int offset, int stride, int in, int out) {
  int lo = 0;
  while (lo < out && lo * stride + offset < 0) ++lo;
  int hi = out - 1;
  while (hi >= lo && hi * stride + offset >= in) --hi;
  return {lo, hi};
}

void conv_forward(const double* in, int cin, int side_in, const double* w, const double* b,
                  int cout, int k, int stride, int side_out, double* out) {
  const int pad = k / 2;
  const std::size_t in_plane = static_cast<std::size_t>(side_in) * side_in;
  const std::size_t out_plane = static_cast<std::size_t>(side_out) * side_out;
  for (int oc = 0; oc < cout; ++oc) {
    double* oplane = out + oc * out_plane;
    std::fill(oplane, oplane + out_plane, b[oc]);
    for (int ic = 0; ic < cin; ++ic) {
      const double* iplane = in + ic * in_plane;
      for (int ky = 0; ky < k; ++ky) {
        const auto [oy0, oy1] = valid_range(ky - pad, stride, side_in, side_out);
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w[((oc * cin + ic) * k + ky) * k + kx];
          const auto [ox0, ox1] = valid_range(kx - pad, stride, side_in, side_out);
          for (int oy = oy0; oy <= oy1; ++oy) {
            const double* irow = iplane + static_cast<std::size_t>(oy * stride + ky - pad) * side_in + (kx - pad);
            double* orow = oplane + static_cast<std::size_t>(oy) * side_out;
            for (int ox = ox0; ox <= ox1; ++ox) orow[ox] += wv * irow[ox * stride];
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients and (optionally) the input gradient.
void conv_backward(const double* in, int cin, int side_in, const double* w, int cout, int k,
                   int stride, int side_out, const double* dout, double* dw, double* db,
                   double* din) {
  const int pad = k / 2;
  const std::size_t in_plane = static_cast<std::size_t>(side_in) * side_in;
  const std::size_t out_plane = static_cast<std::size_t>(side_out) * side_out;
  for (int oc = 0; oc < cout; ++oc) {
    const double* dplane = dout + oc * out_plane;
    double bsum = 0.0;
    for (std::size_t i = 0; i < out_plane; ++i) bsum += dplane[i];
    db[oc] += bsum;
    for (int ic = 0; ic < cin; ++ic) {
      const double* iplane = in + ic * in_plane;
      double* diplane = din ? din + ic * in_plane : nullptr;
      for (int ky = 0; ky < k; ++ky) {
        const auto [oy0, oy1] = valid_range(ky - pad, stride, side_in, side_out);
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t widx = static_cast<std::size_t>(((oc * cin + ic) * k + ky) * k + kx);
          const double wv = w[widx];
          const auto [ox0, ox1] = valid_range(kx - pad, stride, side_in, side_out);
          double acc = 0.0;
          for (int oy = oy0; oy <= oy1; ++oy) {
            const std::size_t irow = static_cast<std::size_t>(oy * stride + ky - pad) * side_in + (kx - pad);
            const double* drow = dplane + static_cast<std::size_t>(oy) * side_out;
            for (int ox = ox0; ox <= ox1; ++ox) {
              acc += drow[ox] * iplane[irow + ox * stride];
              if (diplane) diplane[irow + ox * stride] += drow[ox] * wv;
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

ScorerModel::ScorerModel(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  build_layout();
  std::mt19937_64 rng(seed);
  auto fill_uniform = [&](const ParameterSlice& s, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < s.size; ++i) params_[s.offset + i] = dist(rng);
  };
  int cin = arch_.in_channels;
  for (std::size_t l = 0; l < arch_.conv_channels.size(); ++l) {
    fill_uniform(slices_[2 * l], std::sqrt(6.0 / (cin * arch_.kernel * arch_.kernel)));
    cin = arch_.conv_channels[l];
  }
  fill_uniform(slices_[2 * arch_.conv_channels.size()], 1.0 / std::sqrt(static_cast<double>(cin)));
}

ScorerModel::ScorerModel(Architecture arch, std::vector<double> parameters)
    : arch_(std::move(arch)) {
  build_layout();
  if (parameters.size() != params_.size())
    fail(ErrorKind::CheckpointMismatch, "parameter count " + std::to_string(parameters.size()) +
                                            " does not match architecture (" +
                                            std::to_string(params_.size()) + ")");
  params_ = std::move(parameters);
}

void ScorerModel::build_layout() {
  if (arch_.in_channels <= 0 || arch_.patch_size <= 0 || arch_.conv_channels.empty() ||
      arch_.kernel <= 0 || arch_.stride <= 0 || arch_.conv_channels.size() > 9)
    fail(ErrorKind::InvalidConfig, "invalid scorer architecture");
  slices_.clear();
  std::size_t offset = 0;
  int cin = arch_.in_channels;
  for (std::size_t l = 0; l < arch_.conv_channels.size(); ++l) {
    const int cout = arch_.conv_channels[l];
    const std::size_t wsize = static_cast<std::size_t>(cout) * cin * arch_.kernel * arch_.kernel;
    slices_.push_back({"conv" + std::to_string(l) + ".weight", offset, wsize});
    offset += wsize;
    slices_.push_back({"conv" + std::to_string(l) + ".bias", offset, static_cast<std::size_t>(cout)});
    offset += cout;
    cin = cout;
  }
  slices_.push_back({"head.weight", offset, static_cast<std::size_t>(cin)});
  offset += cin;
  slices_.push_back({"head.bias", offset, 1});
  offset += 1;
  params_.assign(offset, 0.0);
}

void ScorerModel::zero_head() {
  for (const auto& s : slices_) {
    if (s.name.starts_with("head."))
      std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size, 0.0);
  }
}

void ScorerModel::check_shape(const Image& patch) const {
  if (patch.channels() != arch_.in_channels || patch.height() != arch_.patch_size ||
      patch.width() != arch_.patch_size) {
    fail(ErrorKind::ShapeMismatch,
         "patch " + std::to_string(patch.channels()) + "x" + std::to_string(patch.height()) + "x" +
             std::to_string(patch.width()) + " vs expected " + std::to_string(arch_.in_channels) +
             "x" + std::to_string(arch_.patch_size) + "x" + std::to_string(arch_.patch_size));
  }
}

ForwardTrace ScorerModel::forward(const Image& patch) const {
  check_shape(patch);
  ForwardTrace t;
  const std::size_t layers = arch_.conv_channels.size();
  t.pre_activation.resize(layers);
  t.activation.resize(layers);
  const double* in = patch.data().data();
  int cin = arch_.in_channels;
  int side = arch_.patch_size;
  for (std::size_t l = 0; l < layers; ++l) {
    const int cout = arch_.conv_channels[l];
    const int out_side = output_side(side, arch_.kernel, arch_.stride);
    const auto& ws = slices_[2 * l];
    const auto& bs = slices_[2 * l + 1];
    auto& z = t.pre_activation[l];
    z.assign(static_cast<std::size_t>(cout) * out_side * out_side, 0.0);
    conv_forward(in, cin, side, params_.data() + ws.offset, params_.data() + bs.offset, cout,
                 arch_.kernel, arch_.stride, out_side, z.data());
    auto& a = t.activation[l];
    a.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
    t.side.push_back(out_side);
    in = a.data();
    cin = cout;
    side = out_side;
  }
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  t.pooled.assign(cin, 0.0);
  const auto& last = t.activation.back();
  for (int c = 0; c < cin; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += last[c * plane + i];
    t.pooled[c] = s / static_cast<double>(plane);
  }
  const auto& hw = slices_[2 * layers];
  const auto& hb = slices_[2 * layers + 1];
  double logit = params_[hb.offset];
  for (int c = 0; c < cin; ++c) logit += params_[hw.offset + c] * t.pooled[c];
  t.logit = logit;
  t.raw_probability = sigmoid(logit);
  t.probability = std::clamp(t.raw_probability, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return t;
}

double ScorerModel::score(const Image& patch) const { return forward(patch).probability; }

void ScorerModel::backward(const Image& patch, const ForwardTrace& t, double dlogit,
                           std::span<double> grad) const {
  const std::size_t layers = arch_.conv_channels.size();
  const int clast = arch_.conv_channels.back();
  const int side_last = t.side.back();
  const std::size_t plane = static_cast<std::size_t>(side_last) * side_last;
  const auto& hw = slices_[2 * layers];
  const auto& hb = slices_[2 * layers + 1];
  grad[hb.offset] += dlogit;
  std::vector<double> da(static_cast<std::size_t>(clast) * plane);
  for (int c = 0; c < clast; ++c) {
    grad[hw.offset + c] += dlogit * t.pooled[c];
    const double g = dlogit * params_[hw.offset + c] / static_cast<double>(plane);
    std::fill_n(da.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, g);
  }
  for (std::size_t li = layers; li-- > 0;) {
    const auto& z = t.pre_activation[li];
    for (std::size_t i = 0; i < da.size(); ++i)
      if (z[i] <= 0.0) da[i] = 0.0;
    const int cin = li == 0 ? arch_.in_channels : arch_.conv_channels[li - 1];
    const int side_in = li == 0 ? arch_.patch_size : t.side[li - 1];
    const double* in = li == 0 ? patch.data().data() : t.activation[li - 1].data();
    const auto& ws = slices_[2 * li];
    const auto& bs = slices_[2 * li + 1];
    std::vector<double> din;
    if (li > 0) din.assign(static_cast<std::size_t>(cin) * side_in * side_in, 0.0);
    conv_backward(in, cin, side_in, params_.data() + ws.offset, arch_.conv_channels[li],
                  arch_.kernel, arch_.stride, t.side[li], da.data(), grad.data() + ws.offset,
                  grad.data() + bs.offset, li > 0 ? din.data() : nullptr);
    da = std::move(din);
  }
}

LossConfig class_balanced_weights(std::size_t positives, std::size_t negatives) {
  if (positives == 0 || negatives == 0)
    fail(ErrorKind::DegenerateLabels, "class weights need both classes");
  const double n = static_cast<double>(positives + negatives);
  return {n / (2.0 * static_cast<double>(positives)), n / (2.0 * static_cast<double>(negatives))};
}

double weighted_bce(double mu, int y, const LossConfig& cfg) {
  if (!(mu > 0.0 && mu < 1.0)) fail(ErrorKind::DomainError, "probability outside (0,1)");
  if (y != 0 && y != 1) fail(ErrorKind::DomainError, "label must be 0 or 1");
  return -(cfg.w_plus * y * std::log(mu) + cfg.w_minus * (1 - y) * std::log1p(-mu));
}

double bag_loss(std::span<const double> mus, int y, const LossConfig& cfg) {
  if (mus.empty()) fail(ErrorKind::EmptyInput, "bag loss over no patches");
  double s = 0.0;
  for (double mu : mus) s += weighted_bce(mu, y, cfg);
  return s / static_cast<double>(mus.size());
}

double dloss_dlogit(const ForwardTrace& t, int y, const LossConfig& cfg) {
  if (t.raw_probability < kProbabilityClamp || t.raw_probability > 1.0 - kProbabilityClamp)
    return 0.0;
  const double mu = t.raw_probability;
  return y == 1 ? -cfg.w_plus * (1.0 - mu) : cfg.w_minus * mu;
}

LossAndGradient loss_and_gradient(const ScorerModel& model, std::span<const LabeledPatch> batch,
                                  const LossConfig& cfg) {
  if (batch.empty()) fail(ErrorKind::EmptyInput, "empty batch");
  LossAndGradient out;
  out.gradient.assign(model.parameter_count(), 0.0);
  for (const auto& item : batch) {
    const ForwardTrace t = model.forward(*item.patch);
    out.loss += weighted_bce(t.probability, item.label, cfg);
    model.backward(*item.patch, t, dloss_dlogit(t, item.label, cfg), out.gradient);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (double& g : out.gradient) g *= inv;
  return out;
}

std::vector<double> gradient(const ScorerModel& model, std::span<const LabeledPatch> batch,
                             const LossConfig& cfg) {
  return loss_and_gradient(model, batch, cfg).gradient;
}

double batch_loss(const ScorerModel& model, std::span<const LabeledPatch> batch,
                  const LossConfig& cfg) {
  if (batch.empty()) fail(ErrorKind::EmptyInput, "empty batch");
  double s = 0.0;
  for (const auto& item : batch) s += weighted_bce(model.score(*item.patch), item.label, cfg);
  return s / static_cast<double>(batch.size());
}

namespace {

bool same_masks(const ForwardTrace& a, const ForwardTrace& b) {
  for (std::size_t l = 0; l < a.pre_activation.size(); ++l) {
    const auto& za = a.pre_activation[l];
    const auto& zb = b.pre_activation[l];
    for (std::size_t i = 0; i < za.size(); ++i)
      if ((za[i] > 0.0) != (zb[i] > 0.0)) return false;
  }
  return true;
}

bool clamped(const ForwardTrace& t) {
  return t.raw_probability < kProbabilityClamp || t.raw_probability > 1.0 - kProbabilityClamp;
}

}  // namespace

GradientCheckReport check_gradients(const ScorerModel& model, const LabeledPatch& probe,
                                    double tolerance, const GradientCheckOptions& options) {
  if (!(tolerance > 0.0)) fail(ErrorKind::DomainError, "tolerance must be positive");
  const std::span<const LabeledPatch> batch(&probe, 1);
  const std::vector<double> analytic = options.analytic
                                           ? options.analytic(model, batch)
                                           : gradient(model, batch, options.loss);
  const ForwardTrace base = model.forward(*probe.patch);

  // Stratified draw: every slice contributes, remaining budget filled
  // uniformly; candidates in random order so kink skips can be replaced.
  std::mt19937_64 rng(options.seed);
  const auto& slices = model.slices();
  const std::size_t quota =
      std::max<std::size_t>(1, (options.min_parameters + slices.size() - 1) / slices.size());
  std::vector<std::vector<std::size_t>> pools;
  for (const auto& s : slices) {
    std::vector<std::size_t> idx(s.size);
    for (std::size_t i = 0; i < s.size; ++i) idx[i] = s.offset + i;
    std::shuffle(idx.begin(), idx.end(), rng);
    pools.push_back(std::move(idx));
  }

  ScorerModel probe_model = model;
  GradientCheckReport report;
  std::set<std::size_t> done;
  auto try_param = [&](std::size_t p) -> bool {
    if (!done.insert(p).second) return false;
    auto params = probe_model.parameters();
    const double original = params[p];
    params[p] = original + options.step;
    const ForwardTrace plus = probe_model.forward(*probe.patch);
    params[p] = original - options.step;
    const ForwardTrace minus = probe_model.forward(*probe.patch);
    params[p] = original;
    if (!same_masks(base, plus) || !same_masks(base, minus) || clamped(plus) || clamped(minus)) {
      ++report.skipped_kinks;
      return false;
    }
    const double lp = weighted_bce(plus.probability, probe.label, options.loss);
    const double lm = weighted_bce(minus.probability, probe.label, options.loss);
    const double numeric = (lp - lm) / (2.0 * options.step);
    const double a = analytic[p];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    report.max_rel_err = std::max(report.max_rel_err, std::abs(a - numeric) / denom);
    ++report.checked;
    return true;
  };

  for (auto& pool : pools) {
    std::size_t taken = 0;
    for (std::size_t i = 0; i < pool.size() && taken < quota; ++i)
      if (try_param(pool[i])) ++taken;
  }
  const std::size_t target = std::min(options.min_parameters, model.parameter_count());
  if (report.checked < target) {
    std::vector<std::size_t> all(model.parameter_count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t i = 0; i < all.size() && report.checked < target; ++i) try_param(all[i]);
  }
  report.pass = report.checked > 0 && report.max_rel_err <= tolerance;
  return report;
}

void save_checkpoint(const ScorerModel& model, const std::filesystem::path& path,
                     const std::string& config_hash) {
  const auto& a = model.architecture();
  nlohmann::json j;
  j["format"] = "deemd-scorer-checkpoint";
  j["version"] = 1;
  j["architecture"] = {{"in_channels", a.in_channels},   {"patch_size", a.patch_size},
                       {"conv_channels", a.conv_channels}, {"kernel", a.kernel},
                       {"stride", a.stride}};
  j["config_hash"] = config_hash;
  j["parameters"] = std::vector<double>(model.parameters().begin(), model.parameters().end());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write checkpoint " + path.string());
  out << j.dump(1) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("format") != "deemd-scorer-checkpoint" || j.at("version") != 1)
      fail(ErrorKind::CheckpointMismatch, "unknown checkpoint format in " + path.string());
    Architecture a;
    const auto& ja = j.at("architecture");
    a.in_channels = ja.at("in_channels");
    a.patch_size = ja.at("patch_size");
    a.conv_channels = ja.at("conv_channels").get<std::vector<int>>();
    a.kernel = ja.at("kernel");
    a.stride = ja.at("stride");
    return {ScorerModel(a, j.at("parameters").get<std::vector<double>>()),
            j.at("config_hash").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CheckpointMismatch, std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace deemd
