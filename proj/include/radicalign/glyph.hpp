#pragma once

// Procedural "printed" glyphs: radical bitmaps rasterized from strokes,
// recursive composition per radical tree, style distortion, text lines and
// on-disk datasets.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "radicalign/ids.hpp"

namespace radicalign::glyph {

inline constexpr int kRadicalSize = 16;
inline constexpr int kGlyphSize = 32;
inline constexpr int kLineHeight = 32;
inline constexpr int kLineWidth = 256;
inline constexpr int kMaxLineChars = 8;
inline constexpr int kLineJitter = 2;

/// Row-major grayscale image, values in [0,1], background 0.
struct Raster {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Raster() = default;
  Raster(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0f) {}

  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  /// Bilinear read; out-of-bounds samples are background.
  float sample(float y, float x) const;
  bool operator==(const Raster&) const = default;
};

struct GlyphImage {
  Raster pixels;  // 32x32
  int class_id = 0;
};

struct TextLineImage {
  Raster pixels;  // 32x256
  std::vector<int> label;
};

enum class Regime : std::uint8_t { Printed, Scribbled };
std::string_view regime_name(Regime r);
Regime parse_regime(std::string_view name);

struct StyleParams {
  float stroke_thickness = 1.0f;  // [0.6, 1.6]
  float rotation = 0.0f;          // radians, [-0.12, 0.12]
  float scale = 1.0f;             // [0.85, 1.15]
  float shear = 0.0f;             // [-0.1, 0.1]
  float noise_sigma = 0.0f;       // [0, 0.15]
  Regime regime = Regime::Printed;

  static StyleParams identity() { return {}; }
  /// Printed draws from the low-distortion half of every range, scribbled
  /// from the full range.
  static StyleParams sample(Regime regime, Rng& rng);
};

/// Anti-aliased 16x16 rasterization of a stroke list.
Raster rasterize_strokes(std::span<const ids::StrokeId> strokes);

/// Bitmaps for every radical of a lexicon, rendered from its stroke table.
class RadicalInventory {
 public:
  RadicalInventory() = default;
  explicit RadicalInventory(const ids::Lexicon& lex);

  int size() const noexcept { return static_cast<int>(bitmaps_.size()); }
  bool has(ids::RadicalId r) const noexcept { return r.value < bitmaps_.size() && !bitmaps_[r.value].pixels.empty(); }
  const Raster& bitmap(ids::RadicalId r) const;

 private:
  std::vector<Raster> bitmaps_;
};

/// Deterministic in (tree, style, seed). Throws MissingBitmap.
Raster compose_glyph(const ids::IdsTree& tree, const RadicalInventory& inventory,
                     const StyleParams& style, std::uint64_t seed);

/// One style per glyph drawn from `regime`; placement jitter from `seed`.
TextLineImage render_line(std::span<const int> class_ids, const ids::Lexicon& lex,
                          const RadicalInventory& inventory, Regime regime, std::uint64_t seed);
/// Same, with one fixed style for every glyph.
TextLineImage render_line(std::span<const int> class_ids, const ids::Lexicon& lex,
                          const RadicalInventory& inventory, const StyleParams& style,
                          std::uint64_t seed);

/// Class pairs whose identity-style, noise-free glyphs are pixel-identical.
std::vector<std::pair<int, int>> find_glyph_collisions(const ids::Lexicon& lex,
                                                       const RadicalInventory& inventory);

// ---------------------------------------------------------------------------
// Lexicon synthesis

struct LexiconBuildOptions {
  int radicals = 24;
  int classes = 300;
  int max_depth = 3;
  std::uint64_t seed = 1;
};

/// The shipped stroke table: `radicals` pairwise-distinct stroke sets.
std::vector<std::vector<ids::StrokeId>> default_stroke_table(int radicals);
std::vector<std::string> default_radical_names(int radicals);

/// Random lexicon with unique IDS and pixel-distinct glyphs.
ids::Lexicon build_lexicon(const LexiconBuildOptions& options);

// ---------------------------------------------------------------------------
// Datasets on disk: manifest.tsv, images/*.pgm, meta.tsv

void write_pgm(const std::filesystem::path& path, const Raster& r);
Raster read_pgm(const std::filesystem::path& path);

struct Dataset {
  std::vector<std::string> files;
  std::vector<Raster> images;
  std::vector<std::vector<int>> labels;
  std::uint64_t seed = 0;
  std::string kind;  // "glyph" or "line"

  std::size_t size() const noexcept { return images.size(); }
};

struct GlyphDatasetSpec {
  std::vector<int> classes;
  int samples_per_class = 1;
  Regime regime = Regime::Printed;
  std::uint64_t seed = 0;
};

struct LineDatasetSpec {
  std::vector<int> classes;  // label alphabet for random lines
  int lines = 1;
  int min_length = 1;
  int max_length = kMaxLineChars;
  Regime regime = Regime::Printed;
  std::uint64_t seed = 0;
};

/// Sample i of class c uses seed hash(seed, c, i); `threads` <= 0 reads
/// RADICALIGN_THREADS (default: hardware concurrency).
Dataset make_glyph_dataset(const ids::Lexicon& lex, const RadicalInventory& inventory,
                           const GlyphDatasetSpec& spec, int threads = 1);
Dataset make_line_dataset(const ids::Lexicon& lex, const RadicalInventory& inventory,
                          const LineDatasetSpec& spec, int threads = 1);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir, Regime regime,
                  std::uint64_t lexicon_hash);
Dataset load_dataset(const std::filesystem::path& dir);

int thread_cap_from_env();

}  // namespace radicalign::glyph
