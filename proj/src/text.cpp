#include "htr/text.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "htr/errors.hpp"

namespace htr {

std::u32string utf8_to_u32(std::string_view s) {
  const auto us = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), int32_t(s.size())));
  std::u32string out(static_cast<std::size_t>(us.countChar32()), U'\0');
  UErrorCode status = U_ZERO_ERROR;
  const int32_t n = us.toUTF32(reinterpret_cast<UChar32*>(out.data()), int32_t(out.size()), status);
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string u32_to_utf8(std::u32string_view s) {
  const auto us = icu::UnicodeString::fromUTF32(reinterpret_cast<const UChar32*>(s.data()),
                                                int32_t(s.size()));
  std::string out;
  us.toUTF8String(out);
  return out;
}

std::string normalize_text(std::string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  const auto composed =
      nfc->normalize(icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), int32_t(s.size()))),
                     status);
  if (U_FAILURE(status)) throw Error("NFC normalization failed");

  std::string utf8;
  composed.toUTF8String(utf8);
  std::u32string chars = utf8_to_u32(utf8);
  std::u32string out;
  out.reserve(chars.size());
  bool pending_space = false;
  for (char32_t c : chars) {
    if (u_isUWhiteSpace(UChar32(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(U' ');
    pending_space = false;
    out.push_back(c);
  }
  return u32_to_utf8(out);
}

Vocab Vocab::build(std::span<const std::string> corpus) {
  if (corpus.empty()) throw ContractError("build_vocab needs a non-empty corpus");
  std::set<char32_t> unique;
  for (const auto& line : corpus) {
    for (char32_t c : utf8_to_u32(normalize_text(line))) unique.insert(c);
  }
  return from_chars(std::vector<char32_t>(unique.begin(), unique.end()));
}

Vocab Vocab::from_chars(std::vector<char32_t> chars) {
  Vocab v;
  for (char32_t c : chars) {
    if (c == U'\n' || c == U'\r') throw ContractError("vocabulary cannot contain line breaks");
    if (!v.ids_.emplace(c, TokenId(v.chars_.size()) + kNumSpecials).second) {
      throw ContractError("duplicate vocabulary character U+" + std::to_string(std::uint32_t(c)));
    }
    v.chars_.push_back(c);
  }
  return v;
}

TokenId Vocab::id_of(char32_t c) const {
  auto it = ids_.find(c);
  return it == ids_.end() ? kUnkId : it->second;
}

std::optional<char32_t> Vocab::char_of(TokenId id) const {
  if (id < kNumSpecials || std::size_t(id) >= size()) return std::nullopt;
  return chars_[std::size_t(id - kNumSpecials)];
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (char32_t c : chars_) out << u32_to_utf8(std::u32string(1, c)) << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path.string());
  std::vector<char32_t> chars;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto cps = utf8_to_u32(line);
    if (cps.size() != 1) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": expected exactly one character per line");
    }
    chars.push_back(cps[0]);
  }
  return from_chars(std::move(chars));
}

TokenSeq encode(const Vocab& vocab, std::string_view s) {
  const auto chars = utf8_to_u32(normalize_text(s));
  TokenSeq out;
  out.reserve(chars.size() + 2);
  out.push_back(kSosId);
  for (char32_t c : chars) out.push_back(vocab.id_of(c));
  out.push_back(kEosId);
  return out;
}

std::string decode(const Vocab& vocab, std::span<const TokenId> tokens) {
  std::u32string out;
  for (TokenId id : tokens) {
    if (id == kEosId) break;
    if (id == kPadId || id == kSosId) continue;
    if (id == kUnkId) {
      out.push_back(U'�');
      continue;
    }
    auto c = vocab.char_of(id);
    out.push_back(c ? *c : U'�');
  }
  return u32_to_utf8(out);
}

void validate_token_seq(std::span<const TokenId> tokens, std::size_t vocab_size) {
  bool after_eos = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = tokens[i];
    if (id < 0 || std::size_t(id) >= vocab_size) {
      throw ContractError("token " + std::to_string(id) + " at position " + std::to_string(i) +
                          " out of range for vocabulary of " + std::to_string(vocab_size));
    }
    if (after_eos && id != kPadId) {
      throw ContractError("non-pad token after eos at position " + std::to_string(i));
    }
    if (id == kEosId) after_eos = true;
  }
}

}  // namespace htr
