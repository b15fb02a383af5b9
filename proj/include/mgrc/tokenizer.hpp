#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "mgrc/vocab.hpp"

namespace mgrc {

/// A wordpiece with its byte range [begin, end) in the source text.
struct Piece {
  TokenId id = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

namespace detail {

inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace detail

/// Whitespace/punctuation split with lowercasing (uncased convention).
/// Non-ASCII bytes are treated as word characters.
struct Word {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<Word> basic_split(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (detail::is_space(c)) {
      ++i;
    } else if (detail::is_punct(c)) {
      words.push_back({std::string(1, static_cast<char>(c)), i, i + 1});
      ++i;
    } else {
      const std::size_t start = i;
      std::string w;
      while (i < text.size()) {
        const auto d = static_cast<unsigned char>(text[i]);
        if (detail::is_space(d) || detail::is_punct(d)) break;
        w.push_back(d < 0x80 ? static_cast<char>(std::tolower(d)) : static_cast<char>(d));
        ++i;
      }
      words.push_back({std::move(w), start, i});
    }
  }
  return words;
}

/// Greedy longest-prefix wordpiece tokenization with byte offsets.
/// Continuation pieces carry the "##" prefix; a word with no full cover
/// becomes a single [UNK].
inline std::vector<Piece> wordpiece_pieces(std::string_view text, const Vocab& vocab,
                                           std::size_t max_chars_per_word = 100) {
  std::vector<Piece> out;
  for (const Word& w : basic_split(text)) {
    if (w.text.size() > max_chars_per_word) {
      out.push_back({vocab.unk(), w.begin, w.end});
      continue;
    }
    std::vector<Piece> pieces;
    std::size_t start = 0;
    bool bad = false;
    while (start < w.text.size()) {
      std::size_t end = w.text.size();
      TokenId found = -1;
      while (start < end) {
        std::string sub = w.text.substr(start, end - start);
        if (start > 0) sub = "##" + sub;
        found = vocab.find(sub);
        if (found >= 0) break;
        --end;
      }
      if (found < 0) {
        bad = true;
        break;
      }
      pieces.push_back({found, w.begin + start, w.begin + end});
      start = end;
    }
    if (bad) {
      out.push_back({vocab.unk(), w.begin, w.end});
    } else {
      out.insert(out.end(), pieces.begin(), pieces.end());
    }
  }
  return out;
}

inline std::vector<TokenId> wordpiece_tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const Piece& p : wordpiece_pieces(text, vocab)) ids.push_back(p.id);
  return ids;
}

}  // namespace mgrc
