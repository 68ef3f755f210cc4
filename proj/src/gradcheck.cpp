#include "m2i2/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "m2i2/error.hpp"
#include "m2i2/ops.hpp"
#include "m2i2/rng.hpp"

namespace m2i2 {

double relative_error(double analytic, double numeric, double floor) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradient(std::string name,
                               const std::function<Tensor()>& loss,
                               Tensor wrt, double tolerance,
                               std::span<const std::size_t> probes,
                               double eps) {
  return check_gradients(std::move(name), loss, {std::move(wrt)}, tolerance,
                         {std::vector<std::size_t>(probes.begin(), probes.end())},
                         eps);
}

GradCheckResult check_gradients(std::string name,
                                const std::function<Tensor()>& loss,
                                std::vector<Tensor> wrt, double tolerance,
                                std::vector<std::vector<std::size_t>> probes,
                                double eps) {
  if (probes.size() != wrt.size()) probes.resize(wrt.size());
  std::vector<bool> saved_rg;
  for (auto& t : wrt) {
    saved_rg.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor l = loss();
    tape.backward(l);
  }
  for (auto& t : wrt) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(),
                                                             t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));
  }

  GradCheckResult res;
  res.name = std::move(name);
  res.tolerance = tolerance;
  NoGradScope no_grad;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto& t = wrt[k];
    std::vector<std::size_t> idx = probes[k];
    if (idx.empty()) {
      idx.resize(t.numel());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    auto data = t.mutable_data();
    for (auto i : idx) {
      if (i >= data.size()) throw IndexError("check_gradient: probe out of range");
      const double orig = data[i];
      data[i] = orig + eps;
      const double fp = loss().item();
      data[i] = orig - eps;
      const double fm = loss().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      res.max_rel_error =
          std::max(res.max_rel_error, relative_error(analytic[k][i], numeric));
      ++res.probes;
    }
  }
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    wrt[k].zero_grad();
    wrt[k].set_requires_grad(saved_rg[k]);
  }
  res.passed = res.max_rel_error < tolerance;
  return res;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Fixed random weights turning any tensor into a scalar with a nontrivial
// gradient everywhere.
Tensor weighted_sum(const Tensor& y, const Tensor& w) {
  return ops::sum(ops::mul(y, w));
}

}  // namespace

std::vector<GradCheckResult> op_gradcheck_suite(std::uint64_t seed,
                                                double tolerance) {
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  auto check1 = [&](const std::string& name, Tensor x, auto f) {
    Tensor w;
    {
      NoGradScope ng;
      w = random_tensor(f(x).shape(), rng);
    }
    out.push_back(check_gradient(
        name, [&]() { return weighted_sum(f(x), w); }, x, tolerance));
  };
  auto check2 = [&](const std::string& name, Tensor a, Tensor b, auto f) {
    Tensor w;
    {
      NoGradScope ng;
      w = random_tensor(f(a, b).shape(), rng);
    }
    out.push_back(check_gradients(
        name, [&]() { return weighted_sum(f(a, b), w); }, {a, b}, tolerance,
        {}));
  };

  check2("matmul", random_tensor({3, 4}, rng), random_tensor({4, 2}, rng),
         [](const Tensor& a, const Tensor& b) { return ops::matmul(a, b); });
  check1("transpose", random_tensor({3, 2}, rng),
         [](const Tensor& a) { return ops::transpose(a); });
  {
    Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng),
           b = random_tensor({5}, rng);
    Tensor wt = random_tensor({3, 5}, rng);
    out.push_back(check_gradients(
        "linear", [&]() { return weighted_sum(ops::linear(x, w, b), wt); },
        {x, w, b}, tolerance, {}));
  }
  check2("add", random_tensor({2, 3}, rng), random_tensor({2, 3}, rng),
         [](const Tensor& a, const Tensor& b) { return ops::add(a, b); });
  check2("sub", random_tensor({2, 3}, rng), random_tensor({2, 3}, rng),
         [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); });
  check2("mul", random_tensor({2, 3}, rng), random_tensor({2, 3}, rng),
         [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); });
  check2("add_row", random_tensor({3, 4}, rng), random_tensor({4}, rng),
         [](const Tensor& a, const Tensor& b) { return ops::add_row(a, b); });
  check1("scale", random_tensor({2, 3}, rng),
         [](const Tensor& a) { return ops::scale(a, -1.7); });
  check2("div_scalar", random_tensor({2, 3}, rng),
         random_tensor({1}, rng, 0.5, 2.0),
         [](const Tensor& a, const Tensor& s) { return ops::div_scalar(a, s); });
  check1("gelu", random_tensor({3, 4}, rng),
         [](const Tensor& a) { return ops::gelu(a); });
  check1("softmax", random_tensor({3, 5}, rng),
         [](const Tensor& a) { return ops::softmax(a); });
  check1("softmax_axis0", random_tensor({2, 3, 4}, rng),
         [](const Tensor& a) { return ops::softmax(a, 1); });
  {
    std::vector<std::uint8_t> keep = {1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 0};
    check1("masked_softmax", random_tensor({3, 4}, rng),
           [keep](const Tensor& a) { return ops::masked_softmax(a, keep); });
  }
  {
    Tensor x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng),
           b = random_tensor({6}, rng);
    Tensor wt = random_tensor({3, 6}, rng);
    out.push_back(check_gradients(
        "layer_norm",
        [&]() { return weighted_sum(ops::layer_norm(x, g, b), wt); },
        {x, g, b}, tolerance, {}));
  }
  {
    Tensor logits = random_tensor({4, 5}, rng);
    std::vector<std::size_t> tgt = {0, 3, 4, 1};
    out.push_back(check_gradient(
        "cross_entropy", [&]() { return ops::cross_entropy(logits, tgt); },
        logits, tolerance));
  }
  check2("mse", random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
         [](const Tensor& a, const Tensor& b) {
           return ops::reshape(ops::mse(a, b), {1, 1});
         });
  check1("l2_normalize_rows", random_tensor({3, 4}, rng),
         [](const Tensor& a) { return ops::l2_normalize_rows(a); });
  check1("row_sum", random_tensor({3, 4}, rng),
         [](const Tensor& a) { return ops::row_sum(a); });
  check1("mean", random_tensor({3, 4}, rng),
         [](const Tensor& a) { return ops::mean(a); });
  check2("concat_rows", random_tensor({2, 3}, rng), random_tensor({1, 3}, rng),
         [](const Tensor& a, const Tensor& b) {
           std::vector<Tensor> p = {a, b};
           return ops::concat_rows(p);
         });
  check2("concat_cols", random_tensor({2, 3}, rng), random_tensor({2, 2}, rng),
         [](const Tensor& a, const Tensor& b) {
           std::vector<Tensor> p = {a, b};
           return ops::concat_cols(p);
         });
  {
    std::vector<std::size_t> idx = {2, 0, 2, 1};
    check1("gather_rows", random_tensor({3, 4}, rng),
           [idx](const Tensor& a) { return ops::gather_rows(a, idx); });
  }
  {
    std::vector<std::size_t> idx = {3, 0};
    check2("scatter_rows", random_tensor({4, 3}, rng), random_tensor({2, 3}, rng),
           [idx](const Tensor& a, const Tensor& b) {
             return ops::scatter_rows(a, b, idx);
           });
  }
  check1("slice_cols", random_tensor({3, 5}, rng),
         [](const Tensor& a) { return ops::slice_cols(a, 1, 3); });
  check1("reshape", random_tensor({3, 4}, rng),
         [](const Tensor& a) { return ops::reshape(a, {4, 3}); });
  {
    Tensor x = random_tensor({3, 4}, rng);
    out.push_back(check_gradient(
        "sum", [&]() { return ops::sum(ops::mul(x, x)); }, x, tolerance));
  }
  // The same seed on every evaluation keeps the dropout mask fixed.
  check1("dropout", random_tensor({3, 4}, rng), [](const Tensor& a) {
    Rng mask_rng(99);
    return ops::dropout(a, 0.4, mask_rng);
  });
  return out;
}

}  // namespace m2i2
