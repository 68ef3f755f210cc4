#include <gtest/gtest.h>

#include <set>

#include "m2i2/error.hpp"
#include "m2i2/text.hpp"

using namespace m2i2;

namespace {

Vocab caption_vocab() {
  return build_vocab({"a small bright circle in the upper left",
                      "a large dim square in the lower right",
                      "a small dim cross in the upper right"},
                     120, 1, kAsciiAlphabet);
}

}  // namespace

TEST(Text, NormalizeCollapsesAndLowercases) {
  EXPECT_EQ(normalize_text("  Is THERE\ta\n\nlesion? "), "is there a lesion?");
  EXPECT_EQ(normalize_text(""), "");
}

TEST(Vocab, ReservedIdsAreFixed) {
  Vocab v;
  EXPECT_EQ(v.size(), token::reserved_count);
  EXPECT_EQ(v.token(token::pad), "[PAD]");
  EXPECT_EQ(v.token(token::eos), "[EOS]");
  EXPECT_THROW(v.token(99), IndexError);
  EXPECT_THROW(Vocab::from_tokens({"x", "y"}), FormatError);
}

TEST(Vocab, BuildIsDeterministicAndBounded) {
  const Vocab a = caption_vocab();
  const Vocab b = caption_vocab();
  EXPECT_EQ(a, b);
  EXPECT_LE(a.size(), 120u);
  EXPECT_THROW(build_vocab({"x"}, 3), ConfigError);
  EXPECT_THROW(build_vocab({}, 50), ConfigError);
}

TEST(Tokenize, ClsPrefixTruncationAndPadding) {
  const Vocab v = caption_vocab();
  const auto ids = tokenize("a small circle", v, 24);
  ASSERT_EQ(ids.size(), 24u);
  EXPECT_EQ(ids.front(), token::cls);
  EXPECT_EQ(ids.back(), token::pad);
  const auto short_ids = tokenize("a small bright circle in the upper left", v, 3);
  EXPECT_EQ(short_ids.size(), 3u);
  EXPECT_NE(short_ids[2], token::pad);
  EXPECT_THROW(tokenize("a", v, 1), ContractError);
}

TEST(Tokenize, UnknownCharacterMapsToUnk) {
  Vocab v = build_vocab({"ab"}, 20);
  const auto pieces = encode_pieces("a~", v);
  EXPECT_NE(std::find(pieces.begin(), pieces.end(), token::unk), pieces.end());
}

TEST(Tokenize, DetokenizeRoundTrip) {
  const Vocab v = caption_vocab();
  for (const char* s : {"a large dim square in the lower right", "the circle is bright",
                        "upper-left: 42"}) {
    EXPECT_EQ(detokenize(tokenize(s, v, 40), v), normalize_text(s));
  }
}

TEST(TokenMasking, ForcedPositionWhenNothingDrawn) {
  const Vocab v = caption_vocab();
  const auto ids = tokenize("a circle", v, 8);
  Rng rng(1);
  const auto m = mask_tokens(ids, v, 1e-9, rng);
  EXPECT_EQ(m.mask_positions.size(), 1u);
  EXPECT_EQ(m.ids[m.mask_positions[0]], token::mask);
}

TEST(TokenMasking, SpecialTokensNeverMasked) {
  const Vocab v = caption_vocab();
  const auto ids = tokenize("a small bright circle", v, 16);
  Rng rng(2);
  for (int r = 0; r < 200; ++r) {
    const auto m = mask_tokens(ids, v, 0.5, rng);
    for (auto p : m.mask_positions) EXPECT_FALSE(v.is_special(ids[p]));
    for (std::size_t i = 0; i < m.mask_positions.size(); ++i)
      EXPECT_EQ(m.mask_labels[i], ids[m.mask_positions[i]]);
  }
}

TEST(TokenMasking, DegenerateSequence) {
  const Vocab v = caption_vocab();
  const std::vector<TokenId> ids{token::cls, token::pad, token::pad};
  Rng rng(3);
  const auto m = mask_tokens(ids, v, 0.15, rng);
  EXPECT_TRUE(m.degenerate);
  EXPECT_TRUE(m.mask_positions.empty());
  EXPECT_EQ(m.attn_len, 1u);
}

TEST(TokenMasking, RateOutsideOpenIntervalRejected) {
  const Vocab v = caption_vocab();
  const auto ids = tokenize("a circle", v, 8);
  Rng rng(4);
  EXPECT_THROW(mask_tokens(ids, v, 0.0, rng), ContractError);
  EXPECT_THROW(mask_tokens(ids, v, 1.0, rng), ContractError);
}

TEST(TokenMasking, EmpiricalRateOverTenThousandPositions) {
  const Vocab v = caption_vocab();
  // 100 maskable pieces per sequence keeps the forced-position bias negligible.
  std::vector<TokenId> ids{token::cls};
  const auto piece = encode_pieces("a", v).front();
  ids.insert(ids.end(), 100, piece);
  Rng rng(5);
  std::size_t masked = 0, total = 0;
  for (int r = 0; r < 100; ++r) {
    masked += mask_tokens(ids, v, 0.15, rng).mask_positions.size();
    total += 100;
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(total);
  EXPECT_GE(rate, 0.13);
  EXPECT_LE(rate, 0.17);
}
