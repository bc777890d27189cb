#include "htr/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "htr/errors.hpp"
#include "htr/text.hpp"
#include "json.hpp"

namespace htr {

template <typename Seq>
EditOps align(const Seq& reference, const Seq& hypothesis) {
  const std::size_t n = reference.size(), m = hypothesis.size();
  // dist[i][j]: edits between reference[:i] and hypothesis[:j].
  std::vector<std::size_t> dist((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dist[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }

  EditOps ops;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = reference[i - 1] == hypothesis[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        if (!same) ++ops.sub;
        --i;
        --j;
        continue;
      }
    }
    if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++ops.del;  // hypothesis symbol absent from the reference
      --j;
    } else {
      ++ops.ins;  // reference symbol missing from the hypothesis
      --i;
    }
  }
  return ops;
}

template EditOps align(const std::u32string&, const std::u32string&);
template EditOps align(const std::vector<std::string>&, const std::vector<std::string>&);

EditOps levenshtein(std::string_view reference, std::string_view hypothesis) {
  return align(utf8_to_u32(normalize_text(reference)), utf8_to_u32(normalize_text(hypothesis)));
}

std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::string current;
  for (char c : normalized) {
    if (c == ' ') {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

EditOps word_levenshtein(std::string_view reference, std::string_view hypothesis) {
  return align(split_words(normalize_text(reference)), split_words(normalize_text(hypothesis)));
}

double cer(std::string_view reference, std::string_view hypothesis) {
  const std::size_t n = utf8_to_u32(normalize_text(reference)).size();
  if (n == 0) throw ContractError("CER undefined for an empty reference");
  return 100.0 * double(levenshtein(reference, hypothesis).total()) / double(n);
}

double wer(std::string_view reference, std::string_view hypothesis) {
  const std::size_t n = split_words(normalize_text(reference)).size();
  if (n == 0) throw ContractError("WER undefined for a reference without words");
  return 100.0 * double(word_levenshtein(reference, hypothesis).total()) / double(n);
}

CerReport score_corpus(const std::vector<ScoredPair>& pairs) {
  CerReport report;
  std::size_t char_edits = 0, char_total = 0, word_edits = 0, word_total = 0;
  for (const auto& p : pairs) {
    SampleScore s;
    s.reference = normalize_text(p.reference);
    s.hypothesis = normalize_text(p.hypothesis);
    s.chars = levenshtein(s.reference, s.hypothesis);
    s.n_chars = utf8_to_u32(s.reference).size();
    s.cer = cer(s.reference, s.hypothesis);
    s.words = word_levenshtein(s.reference, s.hypothesis);
    s.n_words = split_words(s.reference).size();
    s.wer = wer(s.reference, s.hypothesis);
    char_edits += s.chars.total();
    char_total += s.n_chars;
    word_edits += s.words.total();
    word_total += s.n_words;
    report.mean_cer += s.cer;
    report.mean_wer += s.wer;
    report.samples.push_back(std::move(s));
  }
  if (!pairs.empty()) {
    report.corpus_cer = 100.0 * double(char_edits) / double(char_total);
    report.corpus_wer = 100.0 * double(word_edits) / double(word_total);
    report.mean_cer /= double(pairs.size());
    report.mean_wer /= double(pairs.size());
  }
  return report;
}

std::string CerReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : samples) {
    doc["samples"].push_back({{"reference", s.reference},
                              {"hypothesis", s.hypothesis},
                              {"ins", s.chars.ins},
                              {"sub", s.chars.sub},
                              {"del", s.chars.del},
                              {"n", s.n_chars},
                              {"cer", s.cer},
                              {"word_ins", s.words.ins},
                              {"word_sub", s.words.sub},
                              {"word_del", s.words.del},
                              {"n_words", s.n_words},
                              {"wer", s.wer}});
  }
  doc["corpus_cer"] = corpus_cer;
  doc["corpus_wer"] = corpus_wer;
  doc["mean_cer"] = mean_cer;
  doc["mean_wer"] = mean_wer;
  return doc.dump(2);
}

std::string CerReport::to_table() const {
  std::ostringstream os;
  char buf[128];
  os << "#\tins\tsub\tdel\tn\tCER%\tWER%\treference\thypothesis\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%zu\t%zu\t%zu\t%.2f\t%.2f\t", i, s.chars.ins,
                  s.chars.sub, s.chars.del, s.n_chars, s.cer, s.wer);
    os << buf << s.reference << '\t' << s.hypothesis << '\n';
  }
  std::snprintf(buf, sizeof buf, "corpus CER %.2f%%  WER %.2f%%  (line mean CER %.2f%%  WER %.2f%%)\n",
                corpus_cer, corpus_wer, mean_cer, mean_wer);
  os << buf;
  return os.str();
}

}  // namespace htr
