#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace htr {

/// Unit-cost edit operations that turn the hypothesis into the reference.
struct EditOps {
  std::size_t ins = 0;
  std::size_t sub = 0;
  std::size_t del = 0;

  std::size_t total() const { return ins + sub + del; }
  bool operator==(const EditOps&) const = default;
};

/// Levenshtein alignment over arbitrary token sequences. Counts come from a
/// deterministic backtrace preferring substitution/match, then deletion, then
/// insertion.
template <typename Seq>
EditOps align(const Seq& reference, const Seq& hypothesis);

/// Character-level alignment of two UTF-8 strings after normalize_text.
EditOps levenshtein(std::string_view reference, std::string_view hypothesis);

/// Word-level alignment (whitespace-delimited after normalize_text).
EditOps word_levenshtein(std::string_view reference, std::string_view hypothesis);

std::vector<std::string> split_words(std::string_view normalized);

/// 100 * (ins + sub + del) / n with n the reference length in characters.
double cer(std::string_view reference, std::string_view hypothesis);

/// Same formula over words.
double wer(std::string_view reference, std::string_view hypothesis);

struct SampleScore {
  std::string reference;
  std::string hypothesis;
  EditOps chars;
  std::size_t n_chars = 0;
  double cer = 0;
  EditOps words;
  std::size_t n_words = 0;
  double wer = 0;
};

struct CerReport {
  std::vector<SampleScore> samples;
  double corpus_cer = 0;  // summed edits over summed reference lengths
  double corpus_wer = 0;
  double mean_cer = 0;  // mean of per-line values
  double mean_wer = 0;

  std::string to_json() const;
  std::string to_table() const;
};

struct ScoredPair {
  std::string reference;
  std::string hypothesis;
};

CerReport score_corpus(const std::vector<ScoredPair>& pairs);

}  // namespace htr
