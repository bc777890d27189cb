#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "htr/image.hpp"
#include "htr/text.hpp"

namespace htr {

struct ManifestEntry {
  std::filesystem::path image_path;  // resolved against the manifest's directory
  std::string transcription;         // normalized
};

/// Two-column UTF-8 TSV (image path, transcription), no header, blank lines ignored.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
/// Writes paths relative to the manifest's directory where possible.
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct ImageSettings {
  std::size_t height = kCanonicalHeight;
  std::size_t max_width = kMaxWidth;
  bool binarize = false;
};

/// A normalized line image with its transcription.
struct LineExample {
  LineImage image;
  std::string text;
};

/// Loads, normalizes and (optionally) binarizes every manifest image.
LineExample load_example(const ManifestEntry& entry, const ImageSettings& settings);
std::vector<LineExample> load_examples(const std::vector<ManifestEntry>& entries,
                                       const ImageSettings& settings);

inline constexpr std::size_t kBucketWidth = 64;
inline constexpr float kBackground = 1.0f;

struct Batch {
  Tensor images;                         // [N,1,64,W], W a multiple of 32
  std::vector<std::size_t> widths;       // unpadded pixel width per image
  std::vector<TokenId> targets;          // [N, target_len] row-major, pad-tailed
  std::size_t target_len = 0;            // longest sos..eos sequence in the batch
  std::vector<std::size_t> target_lengths;
  std::vector<std::size_t> indices;      // positions in the example list

  std::size_t size() const { return widths.size(); }
  std::size_t width() const { return images.shape()[3]; }
  /// target[:, :-1] and target[:, 1:], each [N, target_len - 1].
  TokenSeq decoder_inputs() const;
  TokenSeq decoder_targets() const;
};

/// Width-bucketed batches: widths w and v share a bucket iff w/64 == v/64.
/// Examples are shuffled within buckets, chunked, and the batch order is
/// shuffled, all from `seed`. Images are padded with background to the
/// bucket's widest image rounded up to a multiple of 32.
std::vector<Batch> make_batches(std::span<const LineExample> examples, const Vocab& vocab,
                                std::size_t batch_size, std::uint64_t seed);

/// Seeded partition of [0, n) into (train, validation) index lists.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(std::size_t n,
                                                                             double val_fraction,
                                                                             std::uint64_t seed);

/// Ink bitmap for one character. `descent` rows sit below the baseline.
struct Glyph {
  std::size_t width = 0;
  std::size_t height = 0;
  int descent = 0;
  std::vector<float> ink;  // height*width, 1 = full ink
};

/// Character-to-bitmap table for synthetic lines. Text format:
///   spacing <min> <max>
///   space <width>
///   glyph U+XXXX <descent>
///   rows of '.' (paper) and '#' (ink)
///   end
class GlyphSet {
 public:
  int spacing_min = 1;
  int spacing_max = 4;
  std::size_t space_width = 10;

  static GlyphSet load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Stroke-like random glyphs, one per character, fully determined by (c, seed).
  static GlyphSet procedural(std::span<const char32_t> chars, std::uint64_t seed);

  void add(char32_t c, Glyph g);
  bool contains(char32_t c) const { return glyphs_.count(c) != 0; }
  const Glyph& at(char32_t c) const;
  const std::map<char32_t, Glyph>& glyphs() const { return glyphs_; }

 private:
  std::map<char32_t, Glyph> glyphs_;
};

struct SynthLine {
  LineImage image;
  std::string text;
};

/// Renders `text` right to left on a 64-high light canvas with seeded spacing
/// and baseline jitter, plus Gaussian noise of standard deviation `noise_level`.
/// Throws SynthesisError for a character without a glyph.
SynthLine synth_line(const std::string& text, const GlyphSet& glyphs, std::uint64_t seed,
                     double noise_level, std::size_t max_width = kMaxWidth);

/// Renders `count` lines cycling through a seeded shuffle of `lexicon`, writing
/// line_NNNNN.png files and manifest.tsv into `out_dir`.
std::vector<ManifestEntry> synthesize_corpus(const std::vector<std::string>& lexicon,
                                             const GlyphSet& glyphs, std::size_t count,
                                             std::uint64_t seed, double noise_level,
                                             const std::filesystem::path& out_dir);

/// Non-empty normalized lines of a UTF-8 text file.
std::vector<std::string> load_lexicon(const std::filesystem::path& path);

/// Mixes a base seed with a stream index (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace htr
