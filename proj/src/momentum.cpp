#include "m2i2/momentum.hpp"

#include <cmath>

#include "m2i2/error.hpp"

namespace m2i2 {

namespace {

void check_unit_rows(const std::vector<double>& data, std::size_t rows,
                     std::size_t dim, const char* who) {
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += data[i * dim + j] * data[i * dim + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw ContractError(std::string(who) + ": row " + std::to_string(i) +
                          " is not unit-norm");
    }
  }
}

}  // namespace

FeatureQueue::FeatureQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity),
      dim_(dim),
      img_(capacity * dim, 0.0),
      txt_(capacity * dim, 0.0) {
  if (capacity == 0 || dim == 0) {
    throw ConfigError("FeatureQueue: capacity and dim must be positive");
  }
}

void FeatureQueue::enqueue(const Tensor& images, const Tensor& texts) {
  if (images.shape() != texts.shape() || images.rank() != 2 ||
      images.cols() != dim_) {
    throw ContractError("FeatureQueue::enqueue: batches " +
                        shape_str(images.shape()) + " and " +
                        shape_str(texts.shape()) + " do not match dim " +
                        std::to_string(dim_));
  }
  const auto b = images.rows();
  if (b > capacity_) {
    throw ContractError("FeatureQueue::enqueue: batch of " + std::to_string(b) +
                        " exceeds capacity " + std::to_string(capacity_));
  }
  check_unit_rows(images.values(), b, dim_, "FeatureQueue::enqueue");
  check_unit_rows(texts.values(), b, dim_, "FeatureQueue::enqueue");
  const auto& iv = images.values();
  const auto& tv = texts.values();
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(iv.data() + i * dim_, dim_, img_.data() + write_ptr_ * dim_);
    std::copy_n(tv.data() + i * dim_, dim_, txt_.data() + write_ptr_ * dim_);
    write_ptr_ = (write_ptr_ + 1) % capacity_;
  }
  filled_ = std::min(capacity_, filled_ + b);
}

Tensor FeatureQueue::view(const std::vector<double>& slots) const {
  // Slots fill from 0 upwards before wrapping, so the populated region is
  // always the prefix [0, filled).
  return Tensor({filled_, dim_},
                std::vector<double>(slots.begin(),
                                    slots.begin() + static_cast<std::ptrdiff_t>(filled_ * dim_)));
}

Tensor FeatureQueue::image_view() const { return view(img_); }
Tensor FeatureQueue::text_view() const { return view(txt_); }

std::vector<std::vector<double>> FeatureQueue::in_order(
    const std::vector<double>& slots) const {
  std::vector<std::vector<double>> out;
  const std::size_t start = filled_ < capacity_ ? 0 : write_ptr_;
  for (std::size_t i = 0; i < filled_; ++i) {
    const auto slot = (start + i) % capacity_;
    out.emplace_back(slots.begin() + static_cast<std::ptrdiff_t>(slot * dim_),
                     slots.begin() + static_cast<std::ptrdiff_t>((slot + 1) * dim_));
  }
  return out;
}

std::vector<std::vector<double>> FeatureQueue::images_in_push_order() const {
  return in_order(img_);
}

std::vector<std::vector<double>> FeatureQueue::texts_in_push_order() const {
  return in_order(txt_);
}

void FeatureQueue::restore(std::size_t capacity, std::size_t dim,
                           std::size_t write_ptr, std::size_t filled,
                           std::vector<double> images, std::vector<double> texts) {
  if (capacity == 0 || dim == 0 || write_ptr >= capacity || filled > capacity ||
      images.size() != capacity * dim || texts.size() != capacity * dim ||
      (filled < capacity && write_ptr != filled)) {
    throw FormatError("FeatureQueue::restore: inconsistent queue state");
  }
  check_unit_rows(images, filled, dim, "FeatureQueue::restore");
  check_unit_rows(texts, filled, dim, "FeatureQueue::restore");
  capacity_ = capacity;
  dim_ = dim;
  write_ptr_ = write_ptr;
  filled_ = filled;
  img_ = std::move(images);
  txt_ = std::move(texts);
}

void momentum_update(std::span<Tensor> targets, std::span<const Tensor> sources,
                     double m) {
  if (targets.size() != sources.size()) {
    throw ContractError("momentum_update: " + std::to_string(targets.size()) +
                        " momentum tensors for " + std::to_string(sources.size()) +
                        " sources");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i].shape() != sources[i].shape()) {
      throw ContractError("momentum_update: shape drift " +
                          shape_str(targets[i].shape()) + " vs " +
                          shape_str(sources[i].shape()));
    }
    auto t = targets[i].mutable_data();
    const auto s = sources[i].data();
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = m * t[j] + (1.0 - m) * s[j];
  }
}

void momentum_update(MomentumParams& momentum, ModelParams& params, double m) {
  std::vector<Tensor> targets, sources;
  visit_momentum(momentum, [&](const std::string&, Tensor& t) { targets.push_back(t); });
  MomentumParams online;
  online.image_encoder = params.image_encoder;
  online.text_encoder = params.text_encoder;
  online.itc_image = params.itc_image;
  online.itc_text = params.itc_text;
  visit_momentum(online, [&](const std::string&, Tensor& t) { sources.push_back(t); });
  momentum_update(targets, sources, m);
}

}  // namespace m2i2
