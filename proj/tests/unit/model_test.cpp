#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"
#include "m2i2/error.hpp"
#include "m2i2/model.hpp"
#include "m2i2/ops.hpp"

using namespace m2i2;
using m2i2::testing::random_tensor;
using m2i2::testing::small_model;

namespace {

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<TokenId> some_ids(std::size_t vocab, std::size_t len, std::size_t pad) {
  std::vector<TokenId> ids{token::cls};
  for (std::size_t i = 1; i < len; ++i) ids.push_back(i + pad < len ? 7 + (i * 5) % (vocab - 7) : token::pad);
  return ids;
}

}  // namespace

TEST(Model, ParameterNamesAreUnique) {
  auto m = small_model(1);
  const auto named = named_params(m.params);
  std::set<std::string> names;
  for (const auto& n : named) EXPECT_TRUE(names.insert(n.name).second) << n.name;
  EXPECT_TRUE(names.count("temperature"));
  EXPECT_TRUE(names.count("image_decoder.pixel_head.w"));
}

TEST(Model, MomentumCopyMirrorsSubsetShapes) {
  auto m = small_model(2);
  auto mom = make_momentum(m.params);
  const auto online = named_params(m.params);
  for (const auto& t : named_momentum(mom)) {
    auto it = std::find_if(online.begin(), online.end(),
                           [&](const NamedTensor& o) { return o.name == t.name; });
    ASSERT_NE(it, online.end()) << t.name;
    EXPECT_EQ(it->tensor.shape(), t.tensor.shape());
    EXPECT_EQ(it->tensor.values(), t.tensor.values());
    EXPECT_FALSE(t.tensor.requires_grad());
    EXPECT_FALSE(t.tensor.same_storage(it->tensor));
  }
}

TEST(Model, InitIsTruncatedAtTwoStd) {
  auto m = small_model(3);
  const double limit = 2.0 * m.config.init_std;
  for (double v : m.params.fusion.stack.blocks[0].fc1.w.values()) EXPECT_LE(std::abs(v), limit);
}

TEST(Model, EncoderShapes) {
  auto m = small_model(4);
  const auto& c = m.config;
  Rng rng(5);
  ForwardContext ctx;
  const std::size_t n = c.grid().count();
  const Tensor patches = random_tensor({n, c.patch_dim()}, rng, 0, 1);
  const Tensor img = encode_image(m.params.image_encoder, c, patches, iota(n), ctx);
  EXPECT_EQ(img.shape(), (Shape{1 + n, c.image_encoder.dim}));

  const std::vector<std::size_t> visible{0, 2, 3};
  const Tensor part = ops::gather_rows(patches, visible);
  const Tensor enc = encode_image(m.params.image_encoder, c, part, visible, ctx);
  EXPECT_EQ(enc.rows(), 4u);
  const std::vector<std::size_t> masked{1};
  EXPECT_EQ(decode_image(m.params.image_decoder, c, enc, visible, masked, ctx).shape(),
            (Shape{1, c.patch_dim()}));

  const auto ids = some_ids(c.vocab_size, c.text_len, 3);
  const Tensor txt = encode_text(m.params.text_encoder, c, ids, ctx);
  EXPECT_EQ(txt.shape(), (Shape{c.text_len, c.text_encoder.dim}));
  const Tensor fused = fuse(m.params.fusion, c, txt, text_key_valid(ids), img, ctx);
  EXPECT_EQ(fused.shape(), txt.shape());

  const std::vector<TokenId> prefix{token::bos, 9, 10};
  const Tensor logits = decode_answer_sequence(m.params.answer_decoder, c, fused,
                                               text_key_valid(ids), prefix, ctx);
  EXPECT_EQ(logits.shape(), (Shape{3, c.vocab_size}));
}

TEST(Model, ContractViolations) {
  auto m = small_model(6);
  const auto& c = m.config;
  ForwardContext ctx;
  std::vector<TokenId> too_long(c.text_len + 1, 8);
  EXPECT_THROW(encode_text(m.params.text_encoder, c, too_long, ctx), DimensionError);
  std::vector<TokenId> bad_id{token::cls, c.vocab_size};
  EXPECT_THROW(encode_text(m.params.text_encoder, c, bad_id, ctx), IndexError);
  const Tensor fused = Tensor::zeros({2, c.fusion.dim});
  const std::vector<std::uint8_t> valid{1, 1};
  const std::vector<TokenId> no_bos{9};
  EXPECT_THROW(decode_answer(m.params.answer_decoder, c, fused, valid, no_bos, ctx), ContractError);
}

TEST(Model, SameInputTwiceIsBitwiseIdentical) {
  auto m = small_model(7);
  const auto& c = m.config;
  Rng rng(8);
  ForwardContext ctx;
  const std::size_t n = c.grid().count();
  const Tensor patches = random_tensor({n, c.patch_dim()}, rng, 0, 1);
  const Tensor a = encode_image(m.params.image_encoder, c, patches, iota(n), ctx);
  const Tensor b = encode_image(m.params.image_encoder, c, patches, iota(n), ctx);
  EXPECT_EQ(a.values(), b.values());
}

TEST(Model, PaddingDoesNotLeakIntoValidRows) {
  auto m = small_model(9);
  const auto& c = m.config;
  ForwardContext ctx;
  auto ids = some_ids(c.vocab_size, c.text_len, 6);
  const Tensor a = encode_text(m.params.text_encoder, c, ids, ctx);
  std::vector<TokenId> shorter(ids.begin(), ids.begin() + (c.text_len - 6));
  const Tensor b = encode_text(m.params.text_encoder, c, shorter, ctx);
  for (std::size_t i = 0; i < shorter.size(); ++i)
    for (std::size_t j = 0; j < c.text_encoder.dim; ++j) EXPECT_NEAR(a.at(i, j), b.at(i, j), 1e-12);
}

TEST(Model, CausalDecoderIgnoresFutureTokens) {
  auto m = small_model(10);
  const auto& c = m.config;
  Rng rng(11);
  ForwardContext ctx;
  const Tensor fused = random_tensor({4, c.fusion.dim}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 1};
  const std::vector<TokenId> p1{token::bos, 9, 10}, p2{token::bos, 9, 20};
  const Tensor a = decode_answer_sequence(m.params.answer_decoder, c, fused, valid, p1, ctx);
  const Tensor b = decode_answer_sequence(m.params.answer_decoder, c, fused, valid, p2, ctx);
  for (std::size_t j = 0; j < c.vocab_size; ++j) {
    EXPECT_EQ(a.at(0, j), b.at(0, j));
    EXPECT_EQ(a.at(1, j), b.at(1, j));
  }
}

TEST(Model, ZeroCrossOutputDegeneratesToTextOnlyStack) {
  auto m = small_model(12);
  const auto& c = m.config;
  ForwardContext ctx;
  auto& fusion = m.params.fusion;
  StackWeights text_only = fusion.stack;
  for (auto& blk : fusion.stack.blocks) {
    std::fill(blk.cross.o.w.mutable_data().begin(), blk.cross.o.w.mutable_data().end(), 0.0);
    std::fill(blk.cross.o.b.mutable_data().begin(), blk.cross.o.b.mutable_data().end(), 0.0);
  }
  for (auto& blk : text_only.blocks) blk.has_cross = false;
  const auto ids = some_ids(c.vocab_size, c.text_len, 2);
  const Tensor txt = encode_text(m.params.text_encoder, c, ids, ctx);
  const Tensor img = Tensor::zeros({1 + c.grid().count(), c.fusion.dim});
  const Tensor fused = fuse(fusion, c, txt, text_key_valid(ids), img, ctx);
  const auto keep = key_padding_mask(ids.size(), text_key_valid(ids));
  const Tensor plain = run_stack(text_only, c.fusion, txt, keep, Tensor(), {}, ctx);
  for (std::size_t i = 0; i < fused.numel(); ++i)
    EXPECT_NEAR(fused.values()[i], plain.values()[i], 1e-12);
}

TEST(Model, DepthZeroStackIsIdentity) {
  TransformerConfig t;
  t.dim = 8;
  t.depth = 0;
  StackWeights w;
  w.ln_final = {Tensor::full({8}, 1.0), Tensor::zeros({8})};
  Rng rng(13);
  const Tensor x = random_tensor({3, 8}, rng);
  ForwardContext ctx;
  const Tensor y = run_stack(w, t, x, {}, Tensor(), {}, ctx);
  EXPECT_EQ(y.shape(), x.shape());
}

TEST(Interpolation, IdentityOnEqualGrid) {
  Rng rng(14);
  const Tensor pos = random_tensor({17, 6}, rng);
  EXPECT_EQ(interpolate_positional(pos, {4, 4}, {4, 4}).values(), pos.values());
}

TEST(Interpolation, PreservesConstantsAndClsRow) {
  Rng rng(15);
  Tensor pos = Tensor::full({1 + 16 * 16, 5}, 0.375);
  for (std::size_t k = 0; k < 5; ++k) pos.mutable_data()[k] = static_cast<double>(k);
  const Tensor out = interpolate_positional(pos, {16, 16}, {24, 24});
  EXPECT_EQ(out.rows(), 577u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(out.at(0, k), static_cast<double>(k));
  for (std::size_t i = 1; i < out.rows(); ++i)
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(out.at(i, k), 0.375, 1e-15);
}

TEST(Interpolation, ReproducesLinearFieldInTheInterior) {
  // Bilinear resampling is exact for affine fields wherever no clamping occurs.
  const std::size_t g = 6, h = 9;
  Tensor pos = Tensor::zeros({1 + g * g, 1});
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c)
      pos.mutable_data()[1 + r * g + c] = 2.0 * r - 0.5 * c + 1.0;
  const Tensor out = interpolate_positional(pos, {g, g}, {h, h});
  const double s = static_cast<double>(g) / static_cast<double>(h);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < h; ++c) {
      const double fy = (r + 0.5) * s - 0.5, fx = (c + 0.5) * s - 0.5;
      if (fy < 0 || fx < 0 || fy > g - 1 || fx > g - 1) continue;
      EXPECT_NEAR(out.at(1 + r * h + c, 0), 2.0 * fy - 0.5 * fx + 1.0, 1e-12);
    }
}

TEST(Interpolation, ResizeModelToDoubleResolution) {
  auto m = small_model(16);
  const auto old = m.config.grid();
  resize_image_positional(m.params, m.config, m.config.image_size * 2);
  EXPECT_EQ(m.config.grid().count(), old.count() * 4);
  EXPECT_EQ(m.params.image_encoder.pos.rows(), 1 + old.count() * 4);
  ForwardContext ctx;
  Rng rng(17);
  const std::size_t n = m.config.grid().count();
  const Tensor patches = random_tensor({n, m.config.patch_dim()}, rng, 0, 1);
  EXPECT_EQ(encode_image(m.params.image_encoder, m.config, patches, iota(n), ctx).rows(), 1 + n);
  EXPECT_THROW(resize_image_positional(m.params, m.config, 33), ConfigError);
}
