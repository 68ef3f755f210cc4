#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "m2i2/model.hpp"
#include "m2i2/tensor.hpp"

namespace m2i2 {

// Fixed-capacity ring buffer of paired, unit-norm image/text projections
// used as contrastive negatives.
class FeatureQueue {
 public:
  FeatureQueue() = default;
  FeatureQueue(std::size_t capacity, std::size_t dim);

  // Writes b paired rows at the write pointer with wraparound.
  void enqueue(const Tensor& images, const Tensor& texts);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t filled() const { return filled_; }
  std::size_t write_ptr() const { return write_ptr_; }

  // Populated slots [filled, dim] in slot order, detached from any tape.
  Tensor image_view() const;
  Tensor text_view() const;
  // Populated rows oldest first.
  std::vector<std::vector<double>> images_in_push_order() const;
  std::vector<std::vector<double>> texts_in_push_order() const;

  const std::vector<double>& image_slots() const { return img_; }
  const std::vector<double>& text_slots() const { return txt_; }
  // Restores a serialized state; validates sizes and norms.
  void restore(std::size_t capacity, std::size_t dim, std::size_t write_ptr,
               std::size_t filled, std::vector<double> images,
               std::vector<double> texts);

 private:
  Tensor view(const std::vector<double>& slots) const;
  std::vector<std::vector<double>> in_order(const std::vector<double>& slots) const;

  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::size_t write_ptr_ = 0;
  std::size_t filled_ = 0;
  std::vector<double> img_;
  std::vector<double> txt_;
};

// theta_m <- m * theta_m + (1 - m) * theta, elementwise.
void momentum_update(std::span<Tensor> targets, std::span<const Tensor> sources,
                     double m);
void momentum_update(MomentumParams& momentum, ModelParams& params, double m);

}  // namespace m2i2
