#include <gtest/gtest.h>

#include <cmath>
#include <deque>

#include "helpers.hpp"
#include "m2i2/error.hpp"
#include "m2i2/momentum.hpp"

using namespace m2i2;
using m2i2::testing::random_tensor;
using m2i2::testing::small_model;
using m2i2::testing::unit_rows;

namespace {

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < t.rows(); ++i)
    out.emplace_back(t.values().begin() + i * t.cols(), t.values().begin() + (i + 1) * t.cols());
  return out;
}

}  // namespace

TEST(Ema, SingleUpdateArithmetic) {
  std::vector<Tensor> target{Tensor::full({1}, 1.0)};
  const std::vector<Tensor> source{Tensor::full({1}, 0.0)};
  momentum_update(target, source, 0.995);
  EXPECT_DOUBLE_EQ(target[0].item(), 0.995);
}

TEST(Ema, ClosedFormOverFiftyUpdates) {
  Rng rng(1);
  const double m = 0.9;
  Tensor tm = random_tensor({3, 4}, rng);
  const auto initial = tm.values();
  std::vector<std::vector<double>> history;
  std::vector<Tensor> targets{tm};
  for (int t = 0; t < 50; ++t) {
    const Tensor src = random_tensor({3, 4}, rng);
    history.push_back(src.values());
    const std::vector<Tensor> sources{src};
    momentum_update(targets, sources, m);
  }
  // theta_m(n) = m^n theta_m(0) + sum_t (1 - m) m^(n - 1 - t) theta(t)
  for (std::size_t k = 0; k < initial.size(); ++k) {
    double expect = std::pow(m, 50) * initial[k];
    for (int t = 0; t < 50; ++t) expect += (1 - m) * std::pow(m, 49 - t) * history[t][k];
    EXPECT_NEAR(tm.values()[k], expect, 1e-9);
  }
}

TEST(Ema, ShapeOrCountDriftRejected) {
  std::vector<Tensor> targets{Tensor::zeros({2})};
  const std::vector<Tensor> wrong_shape{Tensor::zeros({3})};
  const std::vector<Tensor> wrong_count{Tensor::zeros({2}), Tensor::zeros({2})};
  EXPECT_THROW(momentum_update(targets, wrong_shape, 0.9), ContractError);
  EXPECT_THROW(momentum_update(targets, wrong_count, 0.9), ContractError);
}

TEST(Ema, ModelUpdateTouchesOnlyMomentumSubset) {
  auto m = small_model(2);
  auto mom = make_momentum(m.params);
  for (auto& nt : named_params(m.params))
    for (auto& v : nt.tensor.mutable_data()) v += 1.0;
  const auto before = named_params(m.params);
  std::vector<std::vector<double>> snapshot;
  for (const auto& nt : before) snapshot.push_back(nt.tensor.values());
  const auto mom_before = named_momentum(mom)[0].tensor.values();
  momentum_update(mom, m.params, 0.5);
  const auto after = named_params(m.params);
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i].tensor.values(), snapshot[i]);
  const auto first = named_momentum(mom)[0];
  const auto src = std::find_if(before.begin(), before.end(),
                                [&](const NamedTensor& n) { return n.name == first.name; });
  for (std::size_t k = 0; k < mom_before.size(); ++k)
    EXPECT_NEAR(first.tensor.values()[k], 0.5 * mom_before[k] + 0.5 * src->tensor.values()[k], 1e-15);
}

TEST(Queue, FifoOverwrite) {
  Rng rng(3);
  FeatureQueue q(16, 4);
  EXPECT_EQ(q.filled(), 0u);
  EXPECT_EQ(q.image_view().rows(), 0u);
  std::vector<Tensor> batches;
  for (int i = 0; i < 3; ++i) {
    batches.push_back(unit_rows(8, 4, rng));
    q.enqueue(batches.back(), batches.back());
  }
  EXPECT_EQ(q.filled(), 16u);
  EXPECT_EQ(q.write_ptr(), 8u);
  auto expect = rows_of(batches[1]);
  const auto last = rows_of(batches[2]);
  expect.insert(expect.end(), last.begin(), last.end());
  EXPECT_EQ(q.images_in_push_order(), expect);
}

TEST(Queue, MatchesListOracleOverRandomSequences) {
  Rng rng(4);
  for (int seq = 0; seq < 1000; ++seq) {
    const std::size_t cap = 1 + rng.below(12), dim = 1 + rng.below(4);
    FeatureQueue q(cap, dim);
    std::deque<std::vector<double>> oracle_img, oracle_txt;
    const std::size_t pushes = rng.below(8);
    for (std::size_t p = 0; p < pushes; ++p) {
      const std::size_t b = 1 + rng.below(cap);
      const Tensor img = unit_rows(b, dim, rng), txt = unit_rows(b, dim, rng);
      q.enqueue(img, txt);
      for (auto& r : rows_of(img)) oracle_img.push_back(r);
      for (auto& r : rows_of(txt)) oracle_txt.push_back(r);
      while (oracle_img.size() > cap) {
        oracle_img.pop_front();
        oracle_txt.pop_front();
      }
    }
    ASSERT_EQ(q.filled(), oracle_img.size());
    const std::vector<std::vector<double>> oi(oracle_img.begin(), oracle_img.end());
    const std::vector<std::vector<double>> ot(oracle_txt.begin(), oracle_txt.end());
    ASSERT_EQ(q.images_in_push_order(), oi) << "sequence " << seq;
    ASSERT_EQ(q.texts_in_push_order(), ot) << "sequence " << seq;
  }
}

TEST(Queue, RejectsBadBatches) {
  Rng rng(5);
  FeatureQueue q(4, 3);
  EXPECT_THROW(q.enqueue(unit_rows(2, 3, rng), unit_rows(3, 3, rng)), ContractError);
  EXPECT_THROW(q.enqueue(unit_rows(5, 3, rng), unit_rows(5, 3, rng)), ContractError);
  EXPECT_THROW(q.enqueue(unit_rows(2, 2, rng), unit_rows(2, 2, rng)), ContractError);
  EXPECT_THROW(q.enqueue(random_tensor({2, 3}, rng, 1, 2), unit_rows(2, 3, rng)), ContractError);
}

TEST(Queue, RestoreValidates) {
  Rng rng(6);
  FeatureQueue q(4, 2);
  q.enqueue(unit_rows(3, 2, rng), unit_rows(3, 2, rng));
  FeatureQueue r;
  r.restore(4, 2, q.write_ptr(), q.filled(), q.image_slots(), q.text_slots());
  EXPECT_EQ(r.images_in_push_order(), q.images_in_push_order());
  EXPECT_THROW(r.restore(4, 2, 5, 3, q.image_slots(), q.text_slots()), FormatError);
  EXPECT_THROW(r.restore(4, 2, 3, 3, {1.0}, q.text_slots()), FormatError);
}
