#include "m2i2/optim.hpp"

#include <cmath>
#include <numbers>

#include "m2i2/error.hpp"

namespace m2i2 {

void AdamW::step(std::span<NamedTensor> params, const AdamWOptions& opt) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("AdamW: non-finite gradient in " + p.name);
      }
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t_));
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_data();
    const auto g = p.tensor.grad();
    auto& mo = moments_[p.name];
    if (mo.m1.size() != w.size()) {
      mo.m1.assign(w.size(), 0.0);
      mo.m2.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= opt.lr * opt.weight_decay * w[i];
      mo.m1[i] = opt.beta1 * mo.m1[i] + (1.0 - opt.beta1) * g[i];
      mo.m2[i] = opt.beta2 * mo.m2[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = mo.m1[i] / bc1;
      const double vhat = mo.m2[i] / bc2;
      w[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

void AdamW::restore(std::uint64_t t, std::map<std::string, Moments> moments) {
  t_ = t;
  moments_ = std::move(moments);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init,
                 double lr_final) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " beyond " +
                        std::to_string(total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_final + (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

double global_grad_norm(std::span<const NamedTensor> params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(std::span<NamedTensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.grad_buffer()) g *= f;
    }
  }
  return norm;
}

}  // namespace m2i2
