#include "htr/dataset.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "htr/errors.hpp"

namespace htr {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    const auto tabs = std::count(line.begin(), line.end(), '\t');
    if (tabs != 1) {
      throw ParseError(where + ": expected 2 tab-separated columns, found " + std::to_string(tabs + 1));
    }
    const auto tab = line.find('\t');
    ManifestEntry e;
    e.image_path = base / line.substr(0, tab);
    e.transcription = normalize_text(line.substr(tab + 1));
    if (line.substr(0, tab).empty()) throw ParseError(where + ": empty image path");
    if (e.transcription.empty()) throw ParseError(where + ": empty transcription");
    if (!std::filesystem::exists(e.image_path)) {
      throw IoError(where + ": image not found: " + e.image_path.string());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  for (const auto& e : entries) {
    if (e.transcription.find_first_of("\t\n\r") != std::string::npos) {
      throw ContractError("transcription contains a tab or line break");
    }
    auto rel = e.image_path.lexically_relative(base.empty() ? "." : base);
    if (rel.empty()) rel = e.image_path;
    out << rel.generic_string() << '\t' << e.transcription << '\n';
  }
  if (!out) throw IoError("failed writing manifest " + path.string());
}

LineExample load_example(const ManifestEntry& entry, const ImageSettings& settings) {
  auto img = normalize_image(load_image(entry.image_path), settings.height, settings.max_width);
  img.source_path = entry.image_path.string();
  if (settings.binarize) img = otsu_binarize(img);
  return {std::move(img), entry.transcription};
}

std::vector<LineExample> load_examples(const std::vector<ManifestEntry>& entries,
                                       const ImageSettings& settings) {
  std::vector<LineExample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(load_example(e, settings));
  return out;
}

TokenSeq Batch::decoder_inputs() const {
  TokenSeq out;
  for (std::size_t n = 0; n < size(); ++n) {
    out.insert(out.end(), targets.begin() + std::ptrdiff_t(n * target_len),
               targets.begin() + std::ptrdiff_t((n + 1) * target_len - 1));
  }
  return out;
}

TokenSeq Batch::decoder_targets() const {
  TokenSeq out;
  for (std::size_t n = 0; n < size(); ++n) {
    out.insert(out.end(), targets.begin() + std::ptrdiff_t(n * target_len + 1),
               targets.begin() + std::ptrdiff_t((n + 1) * target_len));
  }
  return out;
}

std::vector<Batch> make_batches(std::span<const LineExample> examples, const Vocab& vocab,
                                std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& img = examples[i].image;
    if (img.pixels.rank() != 3 || img.height() != kCanonicalHeight) {
      throw ContractError("example " + std::to_string(i) + " is not a normalized 64-high line image");
    }
    buckets[img.width() / kBucketWidth].push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::vector<Batch> batches;
  for (auto& [bucket, members] : buckets) {
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t widest = 0;
    for (auto i : members) widest = std::max(widest, examples[i].image.width());
    const std::size_t w = (widest + 31) / 32 * 32;
    for (std::size_t start = 0; start < members.size(); start += batch_size) {
      const std::size_t end = std::min(members.size(), start + batch_size);
      const std::size_t n = end - start;
      Batch b;
      std::vector<float> pixels(n * kCanonicalHeight * w, kBackground);
      std::vector<TokenSeq> seqs;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = members[start + k];
        const auto& img = examples[idx].image;
        const auto src = img.pixels.data();
        for (std::size_t y = 0; y < kCanonicalHeight; ++y) {
          std::copy(src.begin() + std::ptrdiff_t(y * img.width()),
                    src.begin() + std::ptrdiff_t((y + 1) * img.width()),
                    pixels.begin() + std::ptrdiff_t((k * kCanonicalHeight + y) * w));
        }
        b.widths.push_back(img.width());
        b.indices.push_back(idx);
        seqs.push_back(encode(vocab, examples[idx].text));
        b.target_lengths.push_back(seqs.back().size());
      }
      b.images = Tensor({n, 1, kCanonicalHeight, w}, std::move(pixels));
      b.target_len = *std::max_element(b.target_lengths.begin(), b.target_lengths.end());
      b.targets.assign(n * b.target_len, kPadId);
      for (std::size_t k = 0; k < n; ++k) {
        std::copy(seqs[k].begin(), seqs[k].end(), b.targets.begin() + std::ptrdiff_t(k * b.target_len));
      }
      batches.push_back(std::move(b));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(std::size_t n,
                                                                             double val_fraction,
                                                                             std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ContractError("val_fraction must be in [0,1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::size_t(std::llround(val_fraction * double(n)));
  std::vector<std::size_t> val(order.begin(), order.begin() + std::ptrdiff_t(n_val));
  std::vector<std::size_t> train(order.begin() + std::ptrdiff_t(n_val), order.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

void GlyphSet::add(char32_t c, Glyph g) {
  if (g.ink.size() != g.width * g.height || g.width == 0 || g.height == 0) {
    throw ContractError("glyph bitmap does not match its size");
  }
  if (g.height > 40) throw ContractError("glyph taller than 40 rows");
  glyphs_[c] = std::move(g);
}

const Glyph& GlyphSet::at(char32_t c) const {
  auto it = glyphs_.find(c);
  if (it == glyphs_.end()) {
    char code[16];
    std::snprintf(code, sizeof code, "U+%04" PRIX32, std::uint32_t(c));
    throw SynthesisError(std::string("no glyph for '") + u32_to_utf8(std::u32string(1, c)) + "' (" + code + ")");
  }
  return it->second;
}

GlyphSet GlyphSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read glyph file " + path.string());
  GlyphSet set;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    return ParseError(path.string() + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream words(line);
    std::string key;
    words >> key;
    if (key == "spacing") {
      if (!(words >> set.spacing_min >> set.spacing_max) || set.spacing_min < 0 ||
          set.spacing_max < set.spacing_min) {
        throw fail("spacing needs 0 <= min <= max");
      }
    } else if (key == "space") {
      if (!(words >> set.space_width)) throw fail("space needs a width");
    } else if (key == "glyph") {
      std::string code;
      Glyph g;
      if (!(words >> code >> g.descent) || code.size() < 3 || code.compare(0, 2, "U+") != 0) {
        throw fail("expected 'glyph U+XXXX <descent>'");
      }
      char32_t c;
      try {
        c = char32_t(std::stoul(code.substr(2), nullptr, 16));
      } catch (const std::exception&) {
        throw fail("bad code point " + code);
      }
      std::string row;
      bool closed = false;
      while (std::getline(in, row)) {
        ++lineno;
        if (!row.empty() && row.back() == '\r') row.pop_back();
        if (row == "end") {
          closed = true;
          break;
        }
        if (g.width == 0) g.width = row.size();
        if (row.size() != g.width || row.find_first_not_of(".#") != std::string::npos) {
          throw fail("glyph rows must be equal-length runs of '.' and '#'");
        }
        for (char ch : row) g.ink.push_back(ch == '#' ? 1.f : 0.f);
        ++g.height;
      }
      if (!closed) throw fail("glyph " + code + " is missing 'end'");
      try {
        set.add(c, std::move(g));
      } catch (const ContractError& e) {
        throw fail(e.what());
      }
    } else {
      throw fail("unknown directive '" + key + "'");
    }
  }
  return set;
}

void GlyphSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write glyph file " + path.string());
  out << "spacing " << spacing_min << ' ' << spacing_max << '\n';
  out << "space " << space_width << '\n';
  for (const auto& [c, g] : glyphs_) {
    char code[16];
    std::snprintf(code, sizeof code, "U+%04" PRIX32, std::uint32_t(c));
    out << "glyph " << code << ' ' << g.descent << '\n';
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) out << (g.ink[y * g.width + x] >= 0.5f ? '#' : '.');
      out << '\n';
    }
    out << "end\n";
  }
  if (!out) throw IoError("failed writing glyph file " + path.string());
}

GlyphSet GlyphSet::procedural(std::span<const char32_t> chars, std::uint64_t seed) {
  GlyphSet set;
  for (char32_t c : chars) {
    if (c == U' ' || set.contains(c)) continue;
    std::mt19937_64 rng(derive_seed(seed, c));
    std::uniform_int_distribution<int> w_dist(8, 16), h_dist(14, 26), desc_dist(0, 6);
    Glyph g;
    g.width = std::size_t(w_dist(rng));
    g.height = std::size_t(h_dist(rng));
    g.descent = std::min(desc_dist(rng), int(g.height) / 3);
    g.ink.assign(g.width * g.height, 0.f);
    // A few thick random-walk strokes.
    std::uniform_int_distribution<int> strokes(2, 4), steps(6, 14), dir(-1, 1);
    for (int s = 0, ns = strokes(rng); s < ns; ++s) {
      int x = std::uniform_int_distribution<int>(0, int(g.width) - 1)(rng);
      int y = std::uniform_int_distribution<int>(0, int(g.height) - 1)(rng);
      for (int k = 0, nk = steps(rng); k < nk; ++k) {
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int px = std::clamp(x + dx, 0, int(g.width) - 1);
            const int py = std::clamp(y + dy, 0, int(g.height) - 1);
            g.ink[std::size_t(py) * g.width + std::size_t(px)] = 1.f;
          }
        x = std::clamp(x + dir(rng), 0, int(g.width) - 1);
        y = std::clamp(y + dir(rng), 0, int(g.height) - 1);
      }
    }
    set.add(c, std::move(g));
  }
  return set;
}

SynthLine synth_line(const std::string& text, const GlyphSet& glyphs, std::uint64_t seed,
                     double noise_level, std::size_t max_width) {
  if (noise_level < 0) throw ContractError("noise_level must be non-negative");
  const auto chars = utf8_to_u32(text);
  for (char32_t c : chars) {
    if (c != U' ') glyphs.at(c);  // throws on a missing glyph before any drawing
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> gap(glyphs.spacing_min, glyphs.spacing_max), lift(-2, 2);
  std::uniform_real_distribution<double> darkness(0.75, 1.0);

  struct Placement {
    const Glyph* glyph;
    std::size_t advance;
    int gap;
    int lift;
    float darkness;
  };
  std::vector<Placement> layout;
  std::size_t total = 0;
  for (char32_t c : chars) {
    Placement p{nullptr, glyphs.space_width, gap(rng), 0, 0.f};
    if (c != U' ') {
      p.glyph = &glyphs.at(c);
      p.advance = p.glyph->width;
      p.lift = lift(rng);
      p.darkness = float(darkness(rng));
    }
    total += p.advance + std::size_t(p.gap);
    layout.push_back(p);
  }
  const std::size_t margin = 8;
  const std::size_t width = std::max<std::size_t>(32, total + 2 * margin);
  const std::size_t height = kCanonicalHeight;
  const int baseline = 44;

  std::vector<float> canvas(height * width, kBackground);
  // Right to left: the first character sits at the right margin.
  std::size_t right = width - margin;
  for (const auto& p : layout) {
    right -= std::size_t(p.gap);
    const std::size_t left = right - p.advance;
    if (p.glyph != nullptr) {
      const Glyph& g = *p.glyph;
      const int top = baseline + g.descent - int(g.height) + p.lift;
      for (std::size_t y = 0; y < g.height; ++y) {
        const int cy = top + int(y);
        if (cy < 0 || cy >= int(height)) continue;
        for (std::size_t x = 0; x < g.width; ++x) {
          float& px = canvas[std::size_t(cy) * width + left + x];
          px = std::min(px, 1.f - g.ink[y * g.width + x] * p.darkness);
        }
      }
    }
    right = left;
  }
  if (noise_level > 0) {
    std::normal_distribution<double> noise(0.0, noise_level);
    for (auto& px : canvas) px = float(std::clamp(double(px) + noise(rng), 0.0, 1.0));
  }

  LineImage img{Tensor({1, height, width}, std::move(canvas)), "", {height, width}};
  if (width > max_width) img = normalize_image(img, height, max_width);
  return {std::move(img), text};
}

std::vector<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read lexicon " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    auto norm = normalize_text(line);
    if (!norm.empty()) lines.push_back(std::move(norm));
  }
  if (lines.empty()) throw ParseError("lexicon " + path.string() + " has no lines");
  return lines;
}

std::vector<ManifestEntry> synthesize_corpus(const std::vector<std::string>& lexicon,
                                             const GlyphSet& glyphs, std::size_t count,
                                             std::uint64_t seed, double noise_level,
                                             const std::filesystem::path& out_dir) {
  if (lexicon.empty()) throw ContractError("empty lexicon");
  std::filesystem::create_directories(out_dir);
  std::vector<std::size_t> order(lexicon.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& text = lexicon[order[i % order.size()]];
    const auto line = synth_line(text, glyphs, derive_seed(seed, i), noise_level);
    char name[32];
    std::snprintf(name, sizeof name, "line_%05zu.png", i);
    save_png(out_dir / name, line.image);
    entries.push_back({out_dir / name, normalize_text(line.text)});
  }
  save_manifest(out_dir / "manifest.tsv", entries);
  return entries;
}

}  // namespace htr
