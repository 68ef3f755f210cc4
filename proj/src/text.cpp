#include "m2i2/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include "m2i2/error.hpp"

namespace m2i2 {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> names = {
      "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[BOS]", "[EOS]"};
  return names;
}

std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < normalized.size()) {
    const auto j = normalized.find(' ', i);
    const auto end = j == std::string_view::npos ? normalized.size() : j;
    if (end > i) words.emplace_back(normalized.substr(i, end - i));
    i = end + 1;
  }
  return words;
}

std::string strip_continuation(const std::string& piece) {
  if (piece.rfind(kContinuation, 0) == 0) return piece.substr(kContinuation.size());
  return piece;
}

}  // namespace

Vocab::Vocab() {
  for (const auto& t : reserved_tokens()) add(t);
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  const auto& reserved = reserved_tokens();
  if (tokens.size() < reserved.size() ||
      !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw FormatError("Vocab: reserved tokens must occupy ids 0..6");
  }
  Vocab v;
  for (std::size_t i = reserved.size(); i < tokens.size(); ++i) {
    if (v.find(tokens[i])) throw FormatError("Vocab: duplicate token '" + tokens[i] + "'");
    v.add(std::move(tokens[i]));
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw IndexError("Vocab: id " + std::to_string(id) + " outside [0, " +
                     std::to_string(tokens_.size()) + ")");
  }
  return tokens_[id];
}

TokenId Vocab::add(std::string token) {
  if (auto id = find(token)) return *id;
  const TokenId id = tokens_.size();
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
  return id;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size,
                  std::size_t min_freq, std::string_view seed_alphabet) {
  if (max_size < token::reserved_count) {
    throw ConfigError("build_vocab: max_size " + std::to_string(max_size) +
                      " is below the reserved token count");
  }
  if (corpus.empty()) throw ConfigError("build_vocab: empty corpus");

  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize_text(line))) ++word_freq[w];
  }

  // Base alphabet: initial and continuation forms, ordered by frequency
  // (descending) then lexicographically. Seeded characters come first.
  std::map<std::string, std::size_t> char_freq;
  for (const auto& [w, f] : word_freq) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      std::string piece = (i == 0 ? "" : std::string(kContinuation)) + w[i];
      char_freq[piece] += f;
    }
  }
  Vocab vocab;
  for (char c : normalize_text(seed_alphabet)) {
    if (c == ' ') continue;
    for (std::string piece : {std::string(1, c), std::string(kContinuation) + c}) {
      if (vocab.size() >= max_size) break;
      vocab.add(piece);
    }
  }
  std::vector<std::pair<std::string, std::size_t>> chars(char_freq.begin(),
                                                         char_freq.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;
  });
  for (const auto& [piece, f] : chars) {
    if (vocab.size() >= max_size) break;
    vocab.add(piece);
  }

  // Words as symbol sequences; symbols not in the vocabulary (alphabet
  // truncated by max_size) never take part in merges.
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [w, f] : word_freq) {
    std::vector<std::string> sym;
    for (std::size_t i = 0; i < w.size(); ++i)
      sym.push_back((i == 0 ? "" : std::string(kContinuation)) + w[i]);
    words.emplace_back(std::move(sym), f);
  }

  while (vocab.size() < max_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [sym, f] : words) {
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        if (!vocab.find(sym[i]) || !vocab.find(sym[i + 1])) continue;
        pairs[{sym[i], sym[i + 1]}] += f;
      }
    }
    if (pairs.empty()) break;
    // Highest frequency; ties to the lexicographically smallest merged
    // string, then the smallest pair.
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_f = 0;
    std::string best_merged;
    for (const auto& [p, f] : pairs) {
      std::string merged = p.first + strip_continuation(p.second);
      if (!best || f > best_f || (f == best_f && merged < best_merged)) {
        best = &p;
        best_f = f;
        best_merged = std::move(merged);
      }
    }
    if (best_f < min_freq) break;
    const auto left = best->first;
    const auto right = best->second;
    vocab.add(best_merged);
    for (auto& [sym, f] : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
          next.push_back(best_merged);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
  }
  return vocab;
}

std::vector<TokenId> encode_pieces(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& word : split_words(normalize_text(text))) {
    std::size_t pos = 0;
    while (pos < word.size()) {
      bool matched = false;
      for (std::size_t end = word.size(); end > pos; --end) {
        std::string cand = (pos == 0 ? "" : std::string(kContinuation)) +
                           word.substr(pos, end - pos);
        if (auto id = vocab.find(cand); id && !vocab.is_special(*id)) {
          ids.push_back(*id);
          pos = end;
          matched = true;
          break;
        }
      }
      if (!matched) {
        ids.push_back(token::unk);
        ++pos;
      }
    }
  }
  return ids;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab,
                              std::size_t max_len) {
  if (max_len < 2) throw ContractError("tokenize: max_len must be >= 2");
  std::vector<TokenId> ids;
  ids.reserve(max_len);
  ids.push_back(token::cls);
  for (auto id : encode_pieces(text, vocab)) {
    if (ids.size() == max_len) break;
    ids.push_back(id);
  }
  ids.resize(max_len, token::pad);
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == token::eos) break;
    if (id == token::pad || id == token::cls || id == token::sep ||
        id == token::bos)
      continue;
    const auto& t = vocab.token(id);
    if (t.rfind(kContinuation, 0) == 0 && !out.empty()) {
      out += t.substr(kContinuation.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += t;
    }
  }
  return out;
}

MaskedText mask_tokens(std::span<const TokenId> ids, const Vocab& vocab,
                       double rate, Rng& rng) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw ContractError("mask_tokens: rate must lie in (0, 1)");
  }
  MaskedText out;
  out.ids.assign(ids.begin(), ids.end());
  out.attn_len = static_cast<std::size_t>(
      std::find(ids.begin(), ids.end(), token::pad) - ids.begin());
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab.size()) {
      throw IndexError("mask_tokens: id " + std::to_string(ids[i]) +
                       " outside vocabulary");
    }
    if (!vocab.is_special(ids[i])) maskable.push_back(i);
  }
  if (maskable.empty()) {
    out.degenerate = true;
    return out;
  }
  for (auto i : maskable) {
    if (rng.bernoulli(rate)) out.mask_positions.push_back(i);
  }
  if (out.mask_positions.empty()) {
    out.mask_positions.push_back(maskable[rng.below(maskable.size())]);
  }
  for (auto p : out.mask_positions) {
    out.mask_labels.push_back(out.ids[p]);
    out.ids[p] = token::mask;
  }
  return out;
}

}  // namespace m2i2
