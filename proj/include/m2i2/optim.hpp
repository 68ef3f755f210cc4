#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "m2i2/model.hpp"

namespace m2i2 {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled-weight-decay Adam with per-parameter moments keyed by name.
// Parameters without a gradient this step (unreached by the loss) are left
// untouched, moments included.
class AdamW {
 public:
  struct Moments {
    std::vector<double> m1;
    std::vector<double> m2;
  };

  void step(std::span<NamedTensor> params, const AdamWOptions& opt);

  std::uint64_t steps() const { return t_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::uint64_t t, std::map<std::string, Moments> moments);

 private:
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// lr_final + (lr_init - lr_final) * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init,
                 double lr_final);

// Global L2 norm over all present gradients.
double global_grad_norm(std::span<const NamedTensor> params);
// Rescales gradients so the global norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<NamedTensor> params, double max_norm);

}  // namespace m2i2
