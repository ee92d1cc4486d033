#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace deemd {

/// One-cycle policy with cosine annealing: rises from peak/divisor to peak
/// over the warmup fraction of steps, then anneals back to peak/divisor.
class OneCycleCosine {
 public:
  OneCycleCosine(double peak_lr, std::size_t total_steps, double warmup_fraction = 0.3,
                 double floor_divisor = 25.0);

  double at(std::size_t step) const;
  double peak() const { return peak_; }
  double floor() const { return floor_; }
  std::size_t total_steps() const { return total_; }

 private:
  double peak_;
  double floor_;
  std::size_t total_;
  std::size_t warmup_;
};

class Adam {
 public:
  explicit Adam(std::size_t parameters, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);

  void step(std::span<double> params, std::span<const double> grad, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace deemd
