#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "m2i2/config.hpp"
#include "m2i2/model.hpp"
#include "m2i2/rng.hpp"
#include "m2i2/tensor.hpp"

namespace m2i2::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Rows scaled to unit length.
inline Tensor unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      v[i * d + j] = rng.normal();
      s += v[i * d + j] * v[i * d + j];
    }
    s = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= s;
  }
  return Tensor({n, d}, std::move(v));
}

inline Model small_model(std::uint64_t seed, std::size_t vocab_size = 40) {
  TrainConfig cfg = make_preset("test");
  Model m;
  for (std::size_t i = m.vocab.size(); i < vocab_size; ++i) m.vocab.add("w" + std::to_string(i));
  m.config = model_config(cfg, m.vocab.size());
  Rng rng(seed);
  m.params = init_params(m.config, rng);
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("m2i2_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace m2i2::testing
