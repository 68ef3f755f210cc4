#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "m2i2/model.hpp"
#include "m2i2/momentum.hpp"
#include "m2i2/rng.hpp"
#include "m2i2/tensor.hpp"
#include "m2i2/text.hpp"

namespace m2i2 {

// Mean squared error over all masked-patch pixels. n = 0 gives a constant 0.
Tensor mim_loss(const Tensor& pred, const Tensor& targets);

// Cross-entropy of MLM-head logits at masked positions. m = 0 gives 0.
Tensor mlm_loss(const Tensor& logits, std::span<const TokenId> labels);

namespace itm_label {
inline constexpr std::size_t no_match = 0;
inline constexpr std::size_t match = 1;
}  // namespace itm_label

// Binary head on fused CLS rows followed by 2-class cross-entropy.
Tensor itm_loss(const Tensor& joint_cls, std::span<const std::size_t> labels,
                const LinearWeights& head);

enum class NegativeStrategy { uniform, hard };

NegativeStrategy parse_negative_strategy(const std::string& name);

// One negative (image i, caption j != i) per image. `sims` is the [b, b]
// image-to-text similarity matrix, required for the hard strategy, where j is
// drawn with probability proportional to exp(sims(i, j) / temperature).
std::vector<std::pair<std::size_t, std::size_t>> pair_negatives(
    std::size_t b, NegativeStrategy strategy, const Tensor& sims,
    double temperature, Rng& rng);

// Symmetric InfoNCE. Row i of the image-to-text logits is
// [img_i . txt_m_i, img_i . queue_txt_k ...] / temperature with target 0;
// text-to-image is analogous against the image queue. Returns the mean of
// both directions. All projections must be unit-norm.
Tensor itc_loss(const Tensor& img_proj, const Tensor& txt_proj,
                const Tensor& img_proj_m, const Tensor& txt_proj_m,
                const Tensor& queue_img, const Tensor& queue_txt,
                const Tensor& temperature);
Tensor itc_loss(const Tensor& img_proj, const Tensor& txt_proj,
                const Tensor& img_proj_m, const Tensor& txt_proj_m,
                const FeatureQueue& queue, const Tensor& temperature);

struct ObjectiveFlags {
  bool mim = true;
  bool mlm = true;
  bool itm = true;
  bool itc = true;

  bool any() const { return mim || mlm || itm || itc; }
};

struct PretrainLossReport {
  double mim = 0.0;
  double mlm = 0.0;
  double itm = 0.0;
  double itc = 0.0;
  double total = 0.0;
  ObjectiveFlags enabled;
};

// Component losses of one batch; an undefined tensor means not computed.
struct LossTerms {
  Tensor mim, mlm, itm, itc;
};

struct CombinedLoss {
  Tensor total;
  PretrainLossReport report;
};

// Weighted sum of the enabled components (all weights 1 by default, in the
// order mim, mlm, itm, itc). Disabled or missing components contribute 0.
CombinedLoss combined_loss(const LossTerms& terms, const ObjectiveFlags& flags,
                           const std::array<double, 4>& weights = {1, 1, 1, 1});

// Mean over answer positions of -log softmax(logits_j)[target_j].
Tensor cond_lm_loss(const Tensor& answer_logits,
                    std::span<const TokenId> answer_ids);

}  // namespace m2i2
