#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"
#include "m2i2/error.hpp"
#include "m2i2/eval.hpp"
#include "m2i2/trainer.hpp"

using namespace m2i2;
using m2i2::testing::small_model;
using m2i2::testing::TempDir;

namespace {

Prediction pred(std::string type, bool correct, std::string form = "freeform") {
  Prediction p;
  p.answer_type = std::move(type);
  p.correct = correct;
  p.question_form = std::move(form);
  return p;
}

Image test_image(const Model& m, std::uint64_t seed) {
  Rng rng(seed);
  Image img(m.config.image_size, m.config.image_size, m.config.channels);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

}  // namespace

TEST(Report, ThreeOfFour) {
  const auto r = make_report({pred("closed", true), pred("closed", true), pred("open", true),
                              pred("open", false)});
  EXPECT_DOUBLE_EQ(r.overall_acc, 0.75);
  EXPECT_DOUBLE_EQ(r.closed_acc, 1.0);
  EXPECT_DOUBLE_EQ(r.open_acc, 0.5);
}

TEST(Report, MatchesBruteForceRecount) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Prediction> ps;
    const std::size_t n = rng.below(30);
    for (std::size_t i = 0; i < n; ++i)
      ps.push_back(pred(rng.bernoulli(0.4) ? "closed" : "open", rng.bernoulli(0.6)));
    std::size_t cc = 0, cn = 0, oc = 0, on = 0;
    for (const auto& p : ps) {
      if (p.answer_type == "closed") {
        ++cn;
        cc += p.correct;
      } else {
        ++on;
        oc += p.correct;
      }
    }
    const auto r = make_report(ps);
    EXPECT_EQ(r.closed_correct, cc);
    EXPECT_EQ(r.closed_n, cn);
    EXPECT_EQ(r.open_correct, oc);
    EXPECT_EQ(r.open_n, on);
    EXPECT_DOUBLE_EQ(r.closed_acc, cn ? double(cc) / cn : 0.0);
    EXPECT_DOUBLE_EQ(r.open_acc, on ? double(oc) / on : 0.0);
    EXPECT_DOUBLE_EQ(r.overall_acc, n ? double(cc + oc) / n : 0.0);
  }
}

TEST(Report, EmptyTypeHasZeroAccuracy) {
  const auto r = make_report({pred("open", true)});
  EXPECT_EQ(r.closed_acc, 0.0);
  EXPECT_EQ(r.open_acc, 1.0);
}

TEST(Normalize, TrailingPunctuationAndCase) {
  EXPECT_EQ(normalize_answer("  Upper   Left. "), "upper left");
  EXPECT_EQ(normalize_answer("Yes!?"), "yes");
  EXPECT_EQ(normalize_answer("no"), "no");
}

TEST(FormFilter, Parsing) {
  EXPECT_EQ(parse_form_filter("freeform"), FormFilter::freeform);
  EXPECT_EQ(parse_form_filter("free+para"), FormFilter::all);
  EXPECT_THROW(parse_form_filter("para"), ConfigError);
}

TEST(Generate, GreedyStopsWithinLimit) {
  auto m = small_model(2);
  const auto img = test_image(m, 3);
  const std::vector<TokenId> q{token::cls, 8, 9};
  const auto a = generate_answer(m, img, q, 5);
  EXPECT_LE(a.size(), 5u);
  EXPECT_EQ(a, generate_answer(m, img, q, 5));
  const auto eos = std::find(a.begin(), a.end(), token::eos);
  if (eos != a.end()) {
    EXPECT_EQ(eos + 1, a.end());
  }
}

TEST(Evaluate, EmptyFilteredSetRejected) {
  TempDir dir("eval_empty");
  write_image(Image(32, 32, 3, 0.2), dir.path() / "a.ppm");
  VqaDataset ds;
  ds.root = dir.path();
  ds.samples.push_back({"p", "a.ppm", "what?", "x", "open", "paraphrased"});
  auto m = small_model(4);
  EXPECT_THROW(evaluate(m, ds, FormFilter::freeform), ConfigError);
  const auto r = evaluate(m, ds, FormFilter::all);
  EXPECT_EQ(r.predictions.size(), 1u);
  write_predictions(r, dir.path() / "p.jsonl");
  std::ifstream in(dir.path() / "p.jsonl");
  std::string line;
  std::getline(in, line);
  EXPECT_NE(line.find("\"correct\""), std::string::npos);
  EXPECT_NE(format_report(r, FormFilter::all).find("Overall"), std::string::npos);
}

TEST(Attention, ShapeRangeAndCapturedRow) {
  auto m = small_model(5);
  const auto img = test_image(m, 6);
  const std::vector<TokenId> q{token::cls, 8, 9, 10};
  const auto map = attention_map(m, img, q, std::nullopt, false);
  EXPECT_EQ(map.grid, m.config.grid());
  ASSERT_EQ(map.values.size(), m.config.grid().count());
  for (double v : map.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }

  // Independent recomputation from a captured forward.
  AttentionCapture cap;
  ForwardContext ctx{false, nullptr, &cap};
  encode_vqa_context(m, img, q, ctx);
  const auto& heads = cap.layers.back();
  const std::size_t n = m.config.grid().count();
  std::vector<double> avg(n, 0.0);
  for (const auto& h : heads)
    for (std::size_t j = 0; j < n; ++j) avg[j] += h.at(0, 1 + j) / heads.size();
  const double lo = *std::min_element(avg.begin(), avg.end());
  const double hi = *std::max_element(avg.begin(), avg.end());
  for (std::size_t j = 0; j < n; ++j)
    EXPECT_NEAR(map.values[j], hi > lo ? (avg[j] - lo) / (hi - lo) : 0.0, 1e-9);
}

TEST(Attention, GradWeightedAndLayerChecks) {
  auto m = small_model(7);
  const auto img = test_image(m, 8);
  const std::vector<TokenId> q{token::cls, 8, 9};
  const auto map = attention_map(m, img, q, 0, true);
  for (double v : map.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (const auto& nt : named_params(m.params))
    if (nt.tensor.has_grad()) {
      for (double g : nt.tensor.grad()) ASSERT_EQ(g, 0.0) << nt.name;
    }
  EXPECT_THROW(attention_map(m, img, q, 7, false), IndexError);
}

TEST(Attention, HeatmapUpsamplesCells) {
  AttentionMap map;
  map.grid = {2, 2};
  map.values = {0.0, 0.25, 0.5, 1.0};
  const Image h = heatmap_image(map, 3);
  EXPECT_EQ(h.height, 6u);
  EXPECT_EQ(h.at(0, 5, 0), 0.25);
  EXPECT_EQ(h.at(5, 5, 0), 1.0);
}
