#pragma once

#include <span>
#include <vector>

#include "sinkdoor/tensor.hpp"

namespace sinkdoor {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Bias-corrected Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::span<const Tensor> params, AdamWConfig config);

  // Consumes the current gradients; does not clear them.
  void step();
  void zero_grad();

  long step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWConfig config_;
  long step_ = 0;
};

}  // namespace sinkdoor
