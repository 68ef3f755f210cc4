#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "m2i2/rng.hpp"

namespace m2i2 {

using TokenId = std::size_t;

namespace token {
inline constexpr TokenId pad = 0;
inline constexpr TokenId cls = 1;
inline constexpr TokenId sep = 2;
inline constexpr TokenId mask = 3;
inline constexpr TokenId unk = 4;
inline constexpr TokenId bos = 5;
inline constexpr TokenId eos = 6;
inline constexpr std::size_t reserved_count = 7;
}  // namespace token

// Prefix marking a word-internal subword piece.
inline constexpr std::string_view kContinuation = "##";

// Alphabet seeded into vocabularies built for training so that any
// lowercase ASCII question or answer stays representable without UNK.
inline constexpr std::string_view kAsciiAlphabet =
    "abcdefghijklmnopqrstuvwxyz0123456789?.,'-:;!()/<>=+%";

class Vocab {
 public:
  // Reserved tokens only.
  Vocab();
  // Validates that the reserved tokens occupy ids 0..6 and entries are unique.
  static Vocab from_tokens(std::vector<std::string> tokens);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(TokenId id) const { return id < token::reserved_count; }
  // Appends a token if absent; returns its id.
  TokenId add(std::string token);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Lowercases ASCII, collapses whitespace runs to one space and trims.
std::string normalize_text(std::string_view text);

// Greedy frequency-based subword vocabulary. Starts from the characters of
// the corpus (plus `seed_alphabet`) in word-initial and "##" continuation
// forms, then repeatedly merges the most frequent adjacent pair (ties broken
// lexicographically) until `max_size` entries or no pair reaches `min_freq`.
Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size,
                  std::size_t min_freq = 1, std::string_view seed_alphabet = {});

// Subword ids for normalized text, no CLS and no padding.
std::vector<TokenId> encode_pieces(std::string_view text, const Vocab& vocab);

// CLS + pieces, truncated to max_len and padded with PAD.
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab,
                              std::size_t max_len);

// Inverse of tokenize for in-vocabulary text. PAD, CLS, SEP, BOS are
// skipped; decoding stops at EOS.
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

struct MaskedText {
  std::vector<TokenId> ids;
  std::vector<std::size_t> mask_positions;
  std::vector<TokenId> mask_labels;
  std::size_t attn_len = 0;
  // Set when the sequence had no maskable position.
  bool degenerate = false;
};

// Masks each non-special position with probability `rate` (replacing it by
// MASK). If nothing was drawn, one maskable position is forced.
MaskedText mask_tokens(std::span<const TokenId> ids, const Vocab& vocab,
                       double rate, Rng& rng);

}  // namespace m2i2
