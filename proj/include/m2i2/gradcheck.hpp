#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "m2i2/tensor.hpp"

namespace m2i2 {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  double tolerance = 0.0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
// turning roundoff into large ratios.
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Compares tape gradients of `loss` w.r.t. `wrt` against central finite
// differences, perturbing the probed entries of `wrt` in place (restored
// afterwards). An empty probe list checks every entry.
GradCheckResult check_gradient(std::string name,
                               const std::function<Tensor()>& loss,
                               Tensor wrt, double tolerance,
                               std::span<const std::size_t> probes = {},
                               double eps = 1e-5);

// Same, for several tensors at once (gradients from a single backward pass).
GradCheckResult check_gradients(std::string name,
                                const std::function<Tensor()>& loss,
                                std::vector<Tensor> wrt, double tolerance,
                                std::vector<std::vector<std::size_t>> probes,
                                double eps = 1e-5);

// Op-level suite: every differentiable op on random inputs in [-2, 2].
std::vector<GradCheckResult> op_gradcheck_suite(std::uint64_t seed,
                                                double tolerance = 1e-4);

}  // namespace m2i2
