#include "m2i2/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "m2i2/error.hpp"

namespace m2i2 {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DimensionError("Tensor::matrix: no rows");
  const auto cols = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("Tensor::matrix: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("Tensor::dim: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return values().size(); }

std::span<const double> Tensor::data() const { return values(); }

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  return impl_->data;
}

const std::vector<double>& Tensor::values() const {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("Tensor::item: shape " + shape_str(shape()) +
                         " is not a scalar");
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2 || i >= rows() || j >= cols()) {
    throw IndexError("Tensor::at: (" + std::to_string(i) + ", " +
                     std::to_string(j) + ") outside " + shape_str(shape()));
  }
  return impl_->data[i * cols() + j];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  impl_->requires_grad = on;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<double>& Tensor::grad_buffer() const {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

std::optional<std::size_t> Tensor::node_id() const {
  if (!impl_) return std::nullopt;
  return impl_->node;
}

void Tensor::set_node_id(std::size_t id) { impl_->node = id; }

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

Tensor Tensor::clone() const {
  return Tensor(shape(), values(), requires_grad());
}

std::size_t Tape::record(std::string op, std::vector<Tensor> inputs,
                         Tensor output, BackwardFn backward) {
  const std::size_t id = entries_.size();
  output.set_node_id(id);
  entries_.push_back(
      {std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  return id;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("Tape::backward: root must be a scalar, got " +
                        (root.defined() ? shape_str(root.shape())
                                        : std::string("undefined")));
  }
  const auto id = root.node_id();
  if (!id || *id >= entries_.size() ||
      !entries_[*id].output.same_storage(root)) {
    throw ContractError("Tape::backward: root is not recorded on this tape");
  }
  Tensor seed = root;
  seed.grad_buffer().assign(1, 1.0);
  for (std::size_t i = *id + 1; i-- > 0;) {
    auto& e = entries_[i];
    if (!e.output.has_grad()) continue;
    e.backward();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) {
  g_active_tape = nullptr;
}

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

}  // namespace m2i2
