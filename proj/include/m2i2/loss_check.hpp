#pragma once

#include <cstdint>
#include <vector>

#include "m2i2/gradcheck.hpp"

namespace m2i2 {

// Finite-difference checks of each full loss (MIM, MLM, ITM, ITC, their sum
// and the answer-decoder LM loss) through a small random model, on `probes`
// randomly chosen parameter entries per loss.
std::vector<GradCheckResult> loss_gradcheck_suite(std::uint64_t seed,
                                                  double tolerance = 1e-3,
                                                  std::size_t probes = 32);

}  // namespace m2i2
