#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mgrc/tensor.hpp"

namespace mgrc {

using TokenId = std::int32_t;

/// Kinds of long-answer candidate blocks.
enum class CandidateKind : std::uint8_t { kParagraph = 0, kTable = 1, kList = 2 };

inline constexpr std::array<std::string_view, 3> kCandidateKindNames{"paragraph", "table", "list"};
inline constexpr std::array<std::string_view, 3> kMarkupPrefixes{"Paragraph", "Table", "List"};

/// Markup counters above this value share the cap's id.
inline constexpr int kMarkupCap = 49;

inline CandidateKind parse_candidate_kind(std::string_view s) {
  for (std::size_t i = 0; i < kCandidateKindNames.size(); ++i)
    if (kCandidateKindNames[i] == s) return static_cast<CandidateKind>(i);
  throw FormatError("unknown candidate kind '" + std::string(s) + "'");
}

inline std::string markup_token(CandidateKind kind, int n) {
  return "[" + std::string(kMarkupPrefixes[static_cast<std::size_t>(kind)]) + "=" + std::to_string(n) + "]";
}

/// Wordpiece vocabulary. Line number in the vocab file is the id.
class Vocab {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kSep = "[SEP]";

  /// Reserved entries every vocabulary starts with: the four specials, then
  /// the markup range for each candidate kind.
  static std::vector<std::string> reserved_entries() {
    std::vector<std::string> out{std::string(kPad), std::string(kUnk), std::string(kCls), std::string(kSep)};
    for (std::size_t k = 0; k < kMarkupPrefixes.size(); ++k)
      for (int n = 0; n <= kMarkupCap; ++n) out.push_back(markup_token(static_cast<CandidateKind>(k), n));
    return out;
  }

  /// Reserved entries followed by `pieces`.
  static Vocab with_reserved(const std::vector<std::string>& pieces) {
    std::vector<std::string> all = reserved_entries();
    all.insert(all.end(), pieces.begin(), pieces.end());
    return Vocab(std::move(all));
  }

  explicit Vocab(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      if (pieces_[i].empty()) throw FormatError("vocab line " + std::to_string(i) + " is empty");
      if (!index_.emplace(pieces_[i], static_cast<TokenId>(i)).second)
        throw FormatError("vocab entry '" + pieces_[i] + "' appears more than once");
    }
    pad_ = require(kPad);
    unk_ = require(kUnk);
    cls_ = require(kCls);
    sep_ = require(kSep);
    for (std::size_t k = 0; k < kMarkupPrefixes.size(); ++k)
      for (int n = 0; n <= kMarkupCap; ++n)
        markup_[k][static_cast<std::size_t>(n)] = require(markup_token(static_cast<CandidateKind>(k), n));
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocab file " + path);
    std::vector<std::string> pieces;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      pieces.push_back(line);
    }
    return Vocab(std::move(pieces));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write vocab file " + path);
    for (const auto& p : pieces_) out << p << '\n';
  }

  std::size_t size() const noexcept { return pieces_.size(); }
  const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& pieces() const noexcept { return pieces_; }

  /// -1 when absent.
  TokenId find(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    return it == index_.end() ? -1 : it->second;
  }

  TokenId pad() const noexcept { return pad_; }
  TokenId unk() const noexcept { return unk_; }
  TokenId cls() const noexcept { return cls_; }
  TokenId sep() const noexcept { return sep_; }

  TokenId markup(CandidateKind kind, int n) const {
    if (n < 0) throw ContractError("negative markup counter");
    return markup_[static_cast<std::size_t>(kind)][static_cast<std::size_t>(std::min(n, kMarkupCap))];
  }

 private:
  TokenId require(std::string_view piece) const {
    TokenId id = find(piece);
    if (id < 0) throw FormatError("vocab is missing required entry " + std::string(piece));
    return id;
  }

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0;
  std::array<std::array<TokenId, kMarkupCap + 1>, 3> markup_{};
};

}  // namespace mgrc
