#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "htr/ops.hpp"

namespace htr {

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kSosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kNumSpecials = 4;

/// sos-prefixed, eos-terminated id sequence; anything after eos is pad.
using TokenSeq = std::vector<TokenId>;

std::u32string utf8_to_u32(std::string_view s);
std::string u32_to_utf8(std::u32string_view s);

/// NFC composition, whitespace runs collapsed to one U+0020, ends trimmed.
std::string normalize_text(std::string_view s);

/// Character inventory. Ids 0-3 are pad/sos/eos/unk; characters follow in
/// code point order.
class Vocab {
 public:
  Vocab() = default;

  /// Unique characters of the normalized corpus, sorted by code point.
  static Vocab build(std::span<const std::string> corpus);
  static Vocab from_chars(std::vector<char32_t> chars);

  std::size_t size() const { return chars_.size() + kNumSpecials; }
  const std::vector<char32_t>& chars() const { return chars_; }
  TokenId id_of(char32_t c) const;
  std::optional<char32_t> char_of(TokenId id) const;

  /// UTF-8, one character per line; line i holds id i + 4.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return chars_ == other.chars_; }

 private:
  std::vector<char32_t> chars_;
  std::unordered_map<char32_t, TokenId> ids_;
};

/// [sos] + one id per character of normalize_text(s) (unk if unseen) + [eos].
TokenSeq encode(const Vocab& vocab, std::string_view s);

/// Characters between sos and the first eos; pad/sos dropped, unk shown as U+FFFD.
std::string decode(const Vocab& vocab, std::span<const TokenId> tokens);

/// Throws ContractError unless ids are in range and nothing but pad follows eos.
void validate_token_seq(std::span<const TokenId> tokens, std::size_t vocab_size);

}  // namespace htr
