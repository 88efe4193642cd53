#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "radicalign/glyph.hpp"
#include "support/checks.hpp"

using namespace radicalign;
using namespace radicalign::glyph;
using ids::IdsTree;
using ids::StructureOp;

namespace {

IdsTree L(int r) { return IdsTree::leaf(ids::RadicalId{static_cast<std::uint16_t>(r)}); }
IdsTree H2(IdsTree a, IdsTree b) {
  std::vector<IdsTree> ch;
  ch.push_back(std::move(a));
  ch.push_back(std::move(b));
  return IdsTree::node(StructureOp::H2, std::move(ch));
}

const ids::Lexicon& shared_lexicon() {
  static const ids::Lexicon lex = [] {
    LexiconBuildOptions o;
    o.classes = 40;
    o.seed = 3;
    return build_lexicon(o);
  }();
  return lex;
}

double ink(const Raster& r, int x0, int x1) {
  double s = 0;
  for (int y = 0; y < r.height; ++y) {
    for (int x = x0; x < x1; ++x) s += r.at(y, x);
  }
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("a leaf fills the canvas and H2 splits it into halves") {
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  const Raster leaf = compose_glyph(L(0), inv, StyleParams::identity(), 0);
  CHECK(leaf.height == kGlyphSize);
  CHECK(leaf.width == kGlyphSize);
  CHECK(ink(leaf, 0, kGlyphSize) > 0);

  // each half of H2(a, a) is the same picture
  const Raster aa = compose_glyph(H2(L(0), L(0)), inv, StyleParams::identity(), 0);
  for (int y = 0; y < kGlyphSize; ++y) {
    for (int x = 0; x < kGlyphSize / 2; ++x) CHECK(aa.at(y, x) == doctest::Approx(aa.at(y, x + kGlyphSize / 2)));
  }
  // the left half only depends on the left child
  const Raster ab = compose_glyph(H2(L(0), L(1)), inv, StyleParams::identity(), 0);
  const Raster ac = compose_glyph(H2(L(0), L(2)), inv, StyleParams::identity(), 0);
  for (int y = 0; y < kGlyphSize; ++y) {
    for (int x = 0; x < kGlyphSize / 2; ++x) CHECK(ab.at(y, x) == ac.at(y, x));
  }
  CHECK(ab != ac);
}

TEST_CASE("compose_glyph is deterministic and errors on unknown radicals") {
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  Rng rng(11);
  const StyleParams st = StyleParams::sample(Regime::Scribbled, rng);
  const auto& tree = lex.entry(5).tree;
  CHECK(compose_glyph(tree, inv, st, 42) == compose_glyph(tree, inv, st, 42));
  CHECK(compose_glyph(tree, inv, st, 42) != compose_glyph(tree, inv, st, 43));
  CHECK_THROWS_KIND(compose_glyph(L(200), inv, StyleParams::identity(), 0), ErrorKind::MissingBitmap);
}

TEST_CASE("style ranges per regime") {
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    const StyleParams s = StyleParams::sample(Regime::Scribbled, rng);
    CHECK(s.stroke_thickness >= 0.6f);
    CHECK(s.stroke_thickness <= 1.6f);
    CHECK(std::abs(s.rotation) <= 0.12f);
    CHECK(std::abs(s.shear) <= 0.1f);
    CHECK(s.scale >= 0.85f);
    CHECK(s.scale <= 1.15f);
    CHECK(s.noise_sigma >= 0.0f);
    CHECK(s.noise_sigma <= 0.15f);
    const StyleParams p = StyleParams::sample(Regime::Printed, rng);
    CHECK(std::abs(p.rotation) <= 0.06f);
    CHECK(p.noise_sigma <= 0.075f);
  }
}

TEST_CASE("pixels stay in [0, 1]") {
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  GlyphDatasetSpec spec;
  spec.classes = {0, 1, 2, 3};
  spec.samples_per_class = 5;
  spec.regime = Regime::Scribbled;
  const Dataset ds = make_glyph_dataset(lex, inv, spec);
  for (const auto& img : ds.images) {
    for (float p : img.pixels) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
  }
}

TEST_CASE("lines: glyph slots, jitter bounds and length limits") {
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  const std::vector<int> one{7};
  const TextLineImage line = render_line(one, lex, inv, StyleParams::identity(), 5);
  CHECK(line.pixels.height == kLineHeight);
  CHECK(line.pixels.width == kLineWidth);
  CHECK(line.label == one);
  // a single glyph never reaches past its slot plus the jitter
  CHECK(ink(line.pixels, kGlyphSize + kLineJitter, kLineWidth) == 0.0);

  const std::vector<int> three{1, 2, 3};
  const TextLineImage l3 = render_line(three, lex, inv, StyleParams::identity(), 5);
  CHECK(ink(l3.pixels, 3 * kGlyphSize + kLineJitter, kLineWidth) == 0.0);
  CHECK(ink(l3.pixels, 2 * kGlyphSize, 3 * kGlyphSize) > 0.0);

  CHECK_THROWS_KIND(render_line(std::vector<int>{}, lex, inv, Regime::Printed, 1), ErrorKind::LineTooLong);
  CHECK_THROWS_KIND(render_line(std::vector<int>(kMaxLineChars + 1, 0), lex, inv, Regime::Printed, 1),
                    ErrorKind::LineTooLong);
  CHECK_NOTHROW(render_line(std::vector<int>(kMaxLineChars, 0), lex, inv, Regime::Printed, 1));
}

TEST_CASE("built lexicon has distinct glyphs") {
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  CHECK(lex.size() == 40);
  CHECK(find_glyph_collisions(lex, inv).empty());
  CHECK(build_lexicon({24, 40, 3, 3}).hash() == lex.hash());
}

TEST_CASE("datasets: file count, regeneration and thread independence") {
  namespace fs = std::filesystem;
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  GlyphDatasetSpec spec;
  spec.classes = {4, 9};
  spec.samples_per_class = 3;
  spec.seed = 123;
  const fs::path root = fs::temp_directory_path() / "radicalign_glyph_test";
  fs::remove_all(root);

  const Dataset a = make_glyph_dataset(lex, inv, spec, 1);
  save_dataset(a, root / "a", spec.regime, lex.hash());
  const Dataset b = make_glyph_dataset(lex, inv, spec, 1);
  save_dataset(b, root / "b", spec.regime, lex.hash());
  const Dataset c = make_glyph_dataset(lex, inv, spec, 4);
  save_dataset(c, root / "c", spec.regime, lex.hash());

  int files = 0;
  for (const auto& e : fs::directory_iterator(root / "a" / "images")) {
    ++files;
    const auto name = e.path().filename();
    CHECK(slurp(e.path()) == slurp(root / "b" / "images" / name));
    CHECK(slurp(e.path()) == slurp(root / "c" / "images" / name));
  }
  CHECK(files == 6);
  CHECK(slurp(root / "a" / "manifest.tsv") == slurp(root / "c" / "manifest.tsv"));

  const Dataset back = load_dataset(root / "a");
  REQUIRE(back.size() == a.size());
  CHECK(back.labels == a.labels);
  CHECK(back.seed == 123);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(back.images[i] == a.images[i]);

  spec.seed = 124;
  CHECK(make_glyph_dataset(lex, inv, spec).images != a.images);
  fs::remove_all(root);
}

TEST_CASE("line datasets respect the label alphabet") {
  const auto& lex = shared_lexicon();
  const RadicalInventory inv(lex);
  LineDatasetSpec spec;
  spec.classes = {2, 3, 5};
  spec.lines = 30;
  spec.seed = 8;
  const Dataset ds = make_line_dataset(lex, inv, spec, 2);
  CHECK(ds.size() == 30);
  for (const auto& label : ds.labels) {
    CHECK(!label.empty());
    CHECK(label.size() <= static_cast<std::size_t>(kMaxLineChars));
    for (int c : label) CHECK((c == 2 || c == 3 || c == 5));
  }
  CHECK(make_line_dataset(lex, inv, spec, 1).images == ds.images);
  spec.classes.clear();
  CHECK_THROWS_KIND(make_line_dataset(lex, inv, spec), ErrorKind::EmptyDataset);
}
