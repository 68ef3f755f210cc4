#include "m2i2/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "m2i2/error.hpp"
#include "m2i2/ops.hpp"

namespace m2i2 {

namespace {

void require_unit_rows(const Tensor& x, const char* name) {
  if (x.rank() != 2) {
    throw ContractError(std::string("itc_loss: ") + name + " must be 2-D, got " +
                        shape_str(x.shape()));
  }
  const auto d = x.cols();
  const auto v = x.data();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[i * d + j] * v[i * d + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw ContractError(std::string("itc_loss: ") + name + " row " +
                          std::to_string(i) + " is not unit-norm");
    }
  }
}

Tensor info_nce(const Tensor& anchors, const Tensor& positives,
                const Tensor& queue, const Tensor& temperature) {
  std::vector<Tensor> cols{ops::row_sum(ops::mul(anchors, positives))};
  if (queue.defined() && queue.rows() > 0) {
    cols.push_back(ops::matmul(anchors, ops::transpose(queue)));
  }
  const Tensor logits = ops::div_scalar(ops::concat_cols(cols), temperature);
  const std::vector<std::size_t> targets(anchors.rows(), 0);
  return ops::cross_entropy(logits, targets);
}

}  // namespace

Tensor mim_loss(const Tensor& pred, const Tensor& targets) {
  if (pred.shape() != targets.shape() || pred.rank() != 2) {
    throw ContractError("mim_loss: prediction " + shape_str(pred.shape()) +
                        " does not match targets " + shape_str(targets.shape()));
  }
  if (pred.numel() == 0) return Tensor::scalar(0.0);
  return ops::mse(pred, targets);
}

Tensor mlm_loss(const Tensor& logits, std::span<const TokenId> labels) {
  if (labels.empty()) return Tensor::scalar(0.0);
  return ops::cross_entropy(logits, labels);
}

Tensor itm_loss(const Tensor& joint_cls, std::span<const std::size_t> labels,
                const LinearWeights& head) {
  if (joint_cls.rank() != 2 || joint_cls.rows() == 0) {
    throw ContractError("itm_loss: empty batch");
  }
  for (auto l : labels) {
    if (l > itm_label::match) {
      throw ContractError("itm_loss: label " + std::to_string(l) + " is not binary");
    }
  }
  return ops::cross_entropy(ops::linear(joint_cls, head.w, head.b), labels);
}

NegativeStrategy parse_negative_strategy(const std::string& name) {
  if (name == "uniform") return NegativeStrategy::uniform;
  if (name == "hard") return NegativeStrategy::hard;
  throw ConfigError("unknown negative strategy '" + name + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> pair_negatives(
    std::size_t b, NegativeStrategy strategy, const Tensor& sims,
    double temperature, Rng& rng) {
  if (b < 2) throw ContractError("pair_negatives: batch of " + std::to_string(b) +
                                 " has no negatives");
  if (strategy == NegativeStrategy::hard) {
    if (!sims.defined() || sims.rank() != 2 || sims.rows() != b || sims.cols() != b) {
      throw ContractError("pair_negatives: hard strategy needs a [b, b] similarity matrix");
    }
    if (!(temperature > 0.0)) {
      throw ContractError("pair_negatives: temperature must be positive");
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t j = 0;
    if (strategy == NegativeStrategy::uniform) {
      j = rng.below(b - 1);
      if (j >= i) ++j;
    } else {
      double mx = -HUGE_VAL;
      for (std::size_t k = 0; k < b; ++k)
        if (k != i) mx = std::max(mx, sims.at(i, k) / temperature);
      std::vector<double> w(b, 0.0);
      double z = 0.0;
      for (std::size_t k = 0; k < b; ++k) {
        if (k == i) continue;
        w[k] = std::exp(sims.at(i, k) / temperature - mx);
        z += w[k];
      }
      double u = rng.uniform() * z;
      j = i == 0 ? 1 : 0;
      for (std::size_t k = 0; k < b; ++k) {
        if (k == i) continue;
        j = k;
        if (u < w[k]) break;
        u -= w[k];
      }
    }
    out.emplace_back(i, j);
  }
  return out;
}

Tensor itc_loss(const Tensor& img_proj, const Tensor& txt_proj,
                const Tensor& img_proj_m, const Tensor& txt_proj_m,
                const Tensor& queue_img, const Tensor& queue_txt,
                const Tensor& temperature) {
  require_unit_rows(img_proj, "image projection");
  require_unit_rows(txt_proj, "text projection");
  require_unit_rows(img_proj_m, "momentum image projection");
  require_unit_rows(txt_proj_m, "momentum text projection");
  if (img_proj.shape() != txt_proj.shape() || img_proj.shape() != img_proj_m.shape() ||
      img_proj.shape() != txt_proj_m.shape()) {
    throw ContractError("itc_loss: projection shapes disagree");
  }
  const bool has_queue = queue_img.defined() && queue_img.rows() > 0;
  if (has_queue && (queue_img.shape() != queue_txt.shape() ||
                    queue_img.cols() != img_proj.cols())) {
    throw ContractError("itc_loss: queue " + shape_str(queue_img.shape()) +
                        " incompatible with projections " +
                        shape_str(img_proj.shape()));
  }
  const Tensor i2t = info_nce(img_proj, txt_proj_m, queue_txt, temperature);
  const Tensor t2i = info_nce(txt_proj, img_proj_m, queue_img, temperature);
  return ops::scale(ops::add(i2t, t2i), 0.5);
}

Tensor itc_loss(const Tensor& img_proj, const Tensor& txt_proj,
                const Tensor& img_proj_m, const Tensor& txt_proj_m,
                const FeatureQueue& queue, const Tensor& temperature) {
  return itc_loss(img_proj, txt_proj, img_proj_m, txt_proj_m, queue.image_view(),
                  queue.text_view(), temperature);
}

CombinedLoss combined_loss(const LossTerms& terms, const ObjectiveFlags& flags,
                           const std::array<double, 4>& weights) {
  if (!flags.any()) throw ConfigError("combined_loss: every objective is disabled");
  CombinedLoss out;
  out.report.enabled = flags;
  const std::array<std::pair<bool, const Tensor*>, 4> parts{{
      {flags.mim, &terms.mim},
      {flags.mlm, &terms.mlm},
      {flags.itm, &terms.itm},
      {flags.itc, &terms.itc},
  }};
  std::array<double*, 4> slots{&out.report.mim, &out.report.mlm, &out.report.itm,
                               &out.report.itc};
  Tensor total;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto [on, t] = parts[k];
    if (!on || !t->defined()) continue;
    *slots[k] = t->item();
    out.report.total += weights[k] * t->item();
    const Tensor term = weights[k] == 1.0 ? *t : ops::scale(*t, weights[k]);
    total = total.defined() ? ops::add(total, term) : term;
  }
  out.total = total.defined() ? total : Tensor::scalar(0.0);
  return out;
}

Tensor cond_lm_loss(const Tensor& answer_logits,
                    std::span<const TokenId> answer_ids) {
  if (answer_ids.empty()) throw ContractError("cond_lm_loss: empty answer");
  return ops::cross_entropy(answer_logits, answer_ids);
}

}  // namespace m2i2
