#include "m2i2/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "m2i2/error.hpp"

namespace m2i2::ops {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(std::span<const double> d, std::size_t r, std::size_t c) {
  return CMap(d.data(), static_cast<Eigen::Index>(r),
              static_cast<Eigen::Index>(c));
}

MMap mmap(std::vector<double>& d, std::size_t r, std::size_t c) {
  return MMap(d.data(), static_cast<Eigen::Index>(r),
              static_cast<Eigen::Index>(c));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool tracking(std::span<const Tensor> inputs) {
  if (!active_tape()) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

Tensor finish(const char* op, Shape shape, std::vector<double> data,
              bool track) {
  check_finite(data, op);
  return Tensor(std::move(shape), std::move(data), track);
}

void record(const char* op, std::vector<Tensor> inputs, const Tensor& out,
            Tape::BackwardFn fn) {
  active_tape()->record(op, std::move(inputs), out, std::move(fn));
}

// Gradient of the output (the tape only runs a rule once it exists).
const std::vector<double>& gout(const Tensor& out) { return out.grad_buffer(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  mmap(out, m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), k, n);
  const bool track = tracking({&a, &b});
  Tensor y = finish("matmul", {m, n}, std::move(out), track);
  if (track) {
    record("matmul", {a, b}, y, [a, b, y, m, k, n]() mutable {
      const auto& g = gout(y);
      auto G = cmap(g, m, n);
      if (a.requires_grad())
        mmap(a.grad_buffer(), m, k).noalias() +=
            G * cmap(b.data(), k, n).transpose();
      if (b.requires_grad())
        mmap(b.grad_buffer(), k, n).noalias() +=
            cmap(a.data(), m, k).transpose() * G;
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  mmap(out, n, m) = cmap(a.data(), m, n).transpose();
  const bool track = tracking({&a});
  Tensor y = finish("transpose", {n, m}, std::move(out), track);
  if (track) {
    record("transpose", {a}, y, [a, y, m, n]() mutable {
      mmap(a.grad_buffer(), m, n) += cmap(gout(y), n, m).transpose();
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  if (x.cols() != w.rows()) {
    throw DimensionError("linear: input " + shape_str(x.shape()) +
                         " incompatible with weight " + shape_str(w.shape()));
  }
  const auto n = x.rows(), in = x.cols(), outd = w.cols();
  if (b.defined() && b.numel() != outd) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) +
                         " incompatible with weight " + shape_str(w.shape()));
  }
  std::vector<double> out(n * outd);
  auto Y = mmap(out, n, outd);
  Y.noalias() = cmap(x.data(), n, in) * cmap(w.data(), in, outd);
  if (b.defined()) Y.rowwise() += cmap(b.data(), 1, outd).row(0);
  const bool track = tracking({&x, &w, &b});
  Tensor y = finish("linear", {n, outd}, std::move(out), track);
  if (track) {
    record("linear", {x, w, b}, y, [x, w, b, y, n, in, outd]() mutable {
      auto G = cmap(gout(y), n, outd);
      if (x.requires_grad())
        mmap(x.grad_buffer(), n, in).noalias() +=
            G * cmap(w.data(), in, outd).transpose();
      if (w.requires_grad())
        mmap(w.grad_buffer(), in, outd).noalias() +=
            cmap(x.data(), n, in).transpose() * G;
      if (b.defined() && b.requires_grad())
        mmap(b.grad_buffer(), 1, outd) += G.colwise().sum();
    });
  }
  return y;
}

namespace {

template <typename F, typename GA, typename GB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, GA ga,
              GB gb) {
  require_same(a, b, op);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  const bool track = tracking({&a, &b});
  Tensor y = finish(op, a.shape(), std::move(out), track);
  if (track) {
    record(op, {a, b}, y, [a, b, y, ga, gb]() mutable {
      const auto& g = gout(y);
      const auto& av = a.values();
      const auto& bv = b.values();
      if (a.requires_grad()) {
        auto& ag = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += ga(g[i], av[i], bv[i]);
      }
      if (b.requires_grad()) {
        auto& bg = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += gb(g[i], av[i], bv[i]);
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_rank(x, 2, "add_row");
  const auto n = x.rows(), d = x.cols();
  if (row.numel() != d) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) +
                         " incompatible with " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values());
  const auto& r = row.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += r[j];
  const bool track = tracking({&x, &row});
  Tensor y = finish("add_row", x.shape(), std::move(out), track);
  if (track) {
    record("add_row", {x, row}, y, [x, row, y, n, d]() mutable {
      const auto& g = gout(y);
      if (x.requires_grad()) {
        auto& xg = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
      }
      if (row.requires_grad()) {
        auto& rg = row.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) rg[j] += g[i * d + j];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.values());
  for (auto& v : out) v *= s;
  const bool track = tracking({&x});
  Tensor y = finish("scale", x.shape(), std::move(out), track);
  if (track) {
    record("scale", {x}, y, [x, y, s]() mutable {
      const auto& g = gout(y);
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * s;
    });
  }
  return y;
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw DimensionError("div_scalar: divisor " + shape_str(s.shape()) +
                         " is not a scalar");
  }
  const double sv = s.values()[0];
  std::vector<double> out(x.values());
  for (auto& v : out) v /= sv;
  const bool track = tracking({&x, &s});
  Tensor y = finish("div_scalar", x.shape(), std::move(out), track);
  if (track) {
    record("div_scalar", {x, s}, y, [x, s, y, sv]() mutable {
      const auto& g = gout(y);
      const auto& xv = x.values();
      if (x.requires_grad()) {
        auto& xg = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] / sv;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        s.grad_buffer()[0] += -acc / (sv * sv);
      }
    });
  }
  return y;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.values());
  for (auto& v : out) v = gelu_value(v);
  const bool track = tracking({&x});
  Tensor y = finish("gelu", x.shape(), std::move(out), track);
  if (track) {
    record("gelu", {x}, y, [x, y]() mutable {
      const auto& g = gout(y);
      const auto& xv = x.values();
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        xg[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return y;
}

namespace {

// Softmax backward for one group of n entries strided by `stride`.
void softmax_group_backward(const double* p, const double* g, double* xg,
                            std::size_t n, std::size_t stride) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += g[j * stride] * p[j * stride];
  for (std::size_t j = 0; j < n; ++j)
    xg[j * stride] += p[j * stride] * (g[j * stride] - dot);
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  const int rank = static_cast<int>(s.size());
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(s));
  }
  const std::size_t n = s[static_cast<std::size_t>(ax)];
  if (n == 0) throw DimensionError("softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < rank; ++i) inner *= s[static_cast<std::size_t>(i)];
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  const bool track = tracking({&x});
  Tensor y = finish("softmax", s, std::move(out), track);
  if (track) {
    record("softmax", {x}, y, [x, y, outer, inner, n]() mutable {
      const auto& g = gout(y);
      const auto& p = y.values();
      auto& xg = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          softmax_group_backward(p.data() + base, g.data() + base,
                                 xg.data() + base, n, inner);
        }
    });
  }
  return y;
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_rank(x, 2, "masked_softmax");
  const auto r = x.rows(), c = x.cols();
  if (c == 0) throw DimensionError("masked_softmax: empty axis");
  if (!keep.empty() && keep.size() != r * c) {
    throw DimensionError("masked_softmax: mask has " +
                         std::to_string(keep.size()) + " entries for shape " +
                         shape_str(x.shape()));
  }
  const auto& xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j)
      if (keep.empty() || keep[i * c + j]) mx = std::max(mx, row[j]);
    if (mx == -INFINITY) {
      throw ContractError("masked_softmax: row " + std::to_string(i) +
                          " has every entry masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (keep.empty() || keep[i * c + j]) {
        out[i * c + j] = std::exp(row[j] - mx);
        z += out[i * c + j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  const bool track = tracking({&x});
  Tensor y = finish("masked_softmax", x.shape(), std::move(out), track);
  if (track) {
    // Masked entries have p = 0, so the plain softmax rule yields 0 there.
    record("masked_softmax", {x}, y, [x, y, r, c]() mutable {
      const auto& g = gout(y);
      const auto& p = y.values();
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        softmax_group_backward(p.data() + i * c, g.data() + i * c,
                               xg.data() + i * c, c, 1);
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
  }
  const std::size_t n = x.numel() / d;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> xhat(xv.size()), rstd(n), out(xv.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  Tensor y = finish("layer_norm", x.shape(), std::move(out), track);
  if (track) {
    record("layer_norm", {x, gain, bias}, y,
           [x, gain, bias, y, xhat = std::move(xhat), rstd = std::move(rstd),
            n, d]() mutable {
             const auto& g = gout(y);
             const auto& gv = gain.values();
             if (gain.requires_grad()) {
               auto& gg = gain.grad_buffer();
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t j = 0; j < d; ++j)
                   gg[j] += g[i * d + j] * xhat[i * d + j];
             }
             if (bias.requires_grad()) {
               auto& bg = bias.grad_buffer();
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t j = 0; j < d; ++j) bg[j] += g[i * d + j];
             }
             if (x.requires_grad()) {
               auto& xg = x.grad_buffer();
               const double inv_d = 1.0 / static_cast<double>(d);
               for (std::size_t i = 0; i < n; ++i) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dy = g[i * d + j] * gv[j];
                   m1 += dy;
                   m2 += dy * xhat[i * d + j];
                 }
                 m1 *= inv_d;
                 m2 *= inv_d;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dy = g[i * d + j] * gv[j];
                   xg[i * d + j] += rstd[i] * (dy - m1 - xhat[i * d + j] * m2);
                 }
               }
             }
           });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits,
                     std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const auto b = logits.rows(), n = logits.cols();
  if (targets.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  if (b == 0 || n == 0) {
    throw DimensionError("cross_entropy: empty logits " +
                         shape_str(logits.shape()));
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] >= n) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range [0, " + std::to_string(n) + ")");
    }
  }
  const auto& lv = logits.values();
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = lv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double logz = mx + std::log(z);
    loss += logz - row[targets[i]];
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - logz);
  }
  loss /= static_cast<double>(b);
  const bool track = tracking({&logits});
  Tensor y = finish("cross_entropy", {1}, {loss}, track);
  if (track) {
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    record("cross_entropy", {logits}, y,
           [logits, y, probs = std::move(probs), tgt = std::move(tgt), b,
            n]() mutable {
             const double g = gout(y)[0] / static_cast<double>(b);
             auto& lg = logits.grad_buffer();
             for (std::size_t i = 0; i < b; ++i) {
               for (std::size_t j = 0; j < n; ++j)
                 lg[i * n + j] += g * probs[i * n + j];
               lg[i * n + tgt[i]] -= g;
             }
           });
  }
  return y;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "mse");
  const auto& pv = pred.values();
  const auto& tv = target.values();
  if (pv.empty()) throw DimensionError("mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i)
    acc += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const double cnt = static_cast<double>(pv.size());
  const bool track = tracking({&pred, &target});
  Tensor y = finish("mse", {1}, {acc / cnt}, track);
  if (track) {
    record("mse", {pred, target}, y, [pred, target, y, cnt]() mutable {
      const double g = gout(y)[0] * 2.0 / cnt;
      const auto& pv = pred.values();
      const auto& tv = target.values();
      if (pred.requires_grad()) {
        auto& pg = pred.grad_buffer();
        for (std::size_t i = 0; i < pv.size(); ++i) pg[i] += g * (pv[i] - tv[i]);
      }
      if (target.requires_grad()) {
        auto& tg = target.grad_buffer();
        for (std::size_t i = 0; i < pv.size(); ++i) tg[i] -= g * (pv[i] - tv[i]);
      }
    });
  }
  return y;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const auto n = x.rows(), d = x.cols();
  const auto& xv = x.values();
  std::vector<double> out(xv.size()), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norms[i];
  }
  const bool track = tracking({&x});
  Tensor y = finish("l2_normalize_rows", x.shape(), std::move(out), track);
  if (track) {
    record("l2_normalize_rows", {x}, y,
           [x, y, norms = std::move(norms), n, d]() mutable {
             const auto& g = gout(y);
             const auto& yv = y.values();
             auto& xg = x.grad_buffer();
             for (std::size_t i = 0; i < n; ++i) {
               double dot = 0.0;
               for (std::size_t j = 0; j < d; ++j)
                 dot += g[i * d + j] * yv[i * d + j];
               for (std::size_t j = 0; j < d; ++j)
                 xg[i * d + j] +=
                     (g[i * d + j] - yv[i * d + j] * dot) / norms[i];
             }
           });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const bool track = tracking({&x});
  Tensor y = finish("sum", {1}, {acc}, track);
  if (track) {
    record("sum", {x}, y, [x, y]() mutable {
      const double g = gout(y)[0];
      for (auto& v : x.grad_buffer()) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty input");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor row_sum(const Tensor& x) {
  require_rank(x, 2, "row_sum");
  const auto n = x.rows(), d = x.cols();
  const auto& xv = x.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += xv[i * d + j];
  const bool track = tracking({&x});
  Tensor y = finish("row_sum", {n, 1}, std::move(out), track);
  if (track) {
    record("row_sum", {x}, y, [x, y, n, d]() mutable {
      const auto& g = gout(y);
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) xg[i * d + j] += g[i];
    });
  }
  return y;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const auto d = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.cols() != d) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  const bool track = tracking(parts);
  Tensor y = finish("concat_rows", {n, d}, std::move(out), track);
  if (track) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    record("concat_rows", ins, y, [ins, y]() mutable {
      const auto& g = gout(y);
      std::size_t off = 0;
      for (auto& p : ins) {
        const auto cnt = p.numel();
        if (p.requires_grad()) {
          auto& pg = p.grad_buffer();
          for (std::size_t i = 0; i < cnt; ++i) pg[i] += g[off + i];
        }
        off += cnt;
      }
    });
  }
  return y;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const auto n = parts.front().rows();
  std::size_t d = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.rows() != n) {
      throw DimensionError("concat_cols: row mismatch " +
                           shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    d += p.cols();
  }
  std::vector<double> out(n * d);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto pc = p.cols();
    const auto& pv = p.values();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(pv.data() + i * pc, pc, out.data() + i * d + off);
    off += pc;
  }
  const bool track = tracking(parts);
  Tensor y = finish("concat_cols", {n, d}, std::move(out), track);
  if (track) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    record("concat_cols", ins, y, [ins, y, n, d]() mutable {
      const auto& g = gout(y);
      std::size_t off = 0;
      for (auto& p : ins) {
        const auto pc = p.cols();
        if (p.requires_grad()) {
          auto& pg = p.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              pg[i * pc + j] += g[i * d + off + j];
        }
        off += pc;
      }
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  require_rank(x, 2, "gather_rows");
  const auto n = x.rows(), d = x.cols();
  std::vector<double> out(idx.size() * d);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      throw IndexError("gather_rows: row " + std::to_string(idx[i]) +
                       " outside " + shape_str(x.shape()));
    }
    std::copy_n(xv.data() + idx[i] * d, d, out.data() + i * d);
  }
  const bool track = tracking({&x});
  Tensor y = finish("gather_rows", {idx.size(), d}, std::move(out), track);
  if (track) {
    Index ids(idx.begin(), idx.end());
    record("gather_rows", {x}, y, [x, y, ids = std::move(ids), d]() mutable {
      const auto& g = gout(y);
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) xg[ids[i] * d + j] += g[i * d + j];
    });
  }
  return y;
}

Tensor scatter_rows(const Tensor& base, const Tensor& rows,
                    std::span<const std::size_t> idx) {
  require_rank(base, 2, "scatter_rows");
  require_rank(rows, 2, "scatter_rows");
  const auto n = base.rows(), d = base.cols();
  if (rows.cols() != d || rows.rows() != idx.size()) {
    throw DimensionError("scatter_rows: rows " + shape_str(rows.shape()) +
                         " incompatible with base " + shape_str(base.shape()) +
                         " and " + std::to_string(idx.size()) + " indices");
  }
  std::vector<std::uint8_t> replaced(n, 0);
  std::vector<double> out(base.values());
  const auto& rv = rows.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      throw IndexError("scatter_rows: row " + std::to_string(idx[i]) +
                       " outside " + shape_str(base.shape()));
    }
    if (replaced[idx[i]]) {
      throw ContractError("scatter_rows: duplicate index " +
                          std::to_string(idx[i]));
    }
    replaced[idx[i]] = 1;
    std::copy_n(rv.data() + i * d, d, out.data() + idx[i] * d);
  }
  const bool track = tracking({&base, &rows});
  Tensor y = finish("scatter_rows", base.shape(), std::move(out), track);
  if (track) {
    Index ids(idx.begin(), idx.end());
    record("scatter_rows", {base, rows}, y,
           [base, rows, y, ids = std::move(ids), replaced = std::move(replaced),
            n, d]() mutable {
             const auto& g = gout(y);
             if (base.requires_grad()) {
               auto& bg = base.grad_buffer();
               for (std::size_t i = 0; i < n; ++i)
                 if (!replaced[i])
                   for (std::size_t j = 0; j < d; ++j) bg[i * d + j] += g[i * d + j];
             }
             if (rows.requires_grad()) {
               auto& rg = rows.grad_buffer();
               for (std::size_t i = 0; i < ids.size(); ++i)
                 for (std::size_t j = 0; j < d; ++j)
                   rg[i * d + j] += g[ids[i] * d + j];
             }
           });
  }
  return y;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  require_rank(x, 2, "slice_cols");
  const auto n = x.rows(), d = x.cols();
  if (start + len > d) {
    throw IndexError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(n * len);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(xv.data() + i * d + start, len, out.data() + i * len);
  const bool track = tracking({&x});
  Tensor y = finish("slice_cols", {n, len}, std::move(out), track);
  if (track) {
    record("slice_cols", {x}, y, [x, y, n, d, start, len]() mutable {
      const auto& g = gout(y);
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j)
          xg[i * d + start + j] += g[i * len + j];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  const bool track = tracking({&x});
  Tensor y = finish("reshape", std::move(shape), x.values(), track);
  if (track) {
    record("reshape", {x}, y, [x, y]() mutable {
      const auto& g = gout(y);
      auto& xg = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
    });
  }
  return y;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace m2i2::ops
