#include "deemd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "deemd/common.hpp"

namespace deemd {

OneCycleCosine::OneCycleCosine(double peak_lr, std::size_t total_steps, double warmup_fraction,
                               double floor_divisor)
    : peak_(peak_lr), floor_(peak_lr / floor_divisor), total_(total_steps) {
  if (!(peak_lr > 0.0) || !(floor_divisor >= 1.0) || warmup_fraction < 0.0 || warmup_fraction > 1.0)
    fail(ErrorKind::InvalidConfig, "invalid one-cycle schedule parameters");
  warmup_ = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_)));
}

double OneCycleCosine::at(std::size_t step) const {
  if (total_ == 0) return peak_;
  step = std::min(step, total_ - 1);
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step < warmup_) {
    return cosine(floor_, peak_, static_cast<double>(step) / static_cast<double>(warmup_));
  }
  const std::size_t anneal = total_ - warmup_;
  if (anneal <= 1) return peak_;
  return cosine(peak_, floor_,
                static_cast<double>(step - warmup_) / static_cast<double>(anneal - 1));
}

Adam::Adam(std::size_t parameters, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), eps_(epsilon), m_(parameters, 0.0), v_(parameters, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    fail(ErrorKind::ShapeMismatch, "Adam state size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

}  // namespace deemd
