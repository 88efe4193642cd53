#include "radicalign/glyph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace radicalign::glyph {

namespace {

using ids::IdsTree;
using ids::StrokeId;
using ids::StructureOp;

struct Point {
  float x, y;
};

// Polylines in 16x16 pixel-centre coordinates, indexed [category][instance].
const std::vector<Point>& stroke_path(StrokeId s) {
  static const std::array<std::array<std::vector<Point>, ids::kStrokeInstances>, ids::kStrokeCategories> paths = [] {
    std::array<std::array<std::vector<Point>, ids::kStrokeInstances>, ids::kStrokeCategories> p;
    const float rows[] = {2.5f, 6.0f, 9.5f, 13.0f};
    for (int i = 0; i < 4; ++i) {
      p[0][i] = {{2.0f, rows[i]}, {13.0f, rows[i]}};  // heng
      p[1][i] = {{rows[i], 2.0f}, {rows[i], 13.0f}};  // shu
    }
    p[2][0] = {{12.0f, 2.0f}, {3.0f, 13.0f}};  // pie
    p[2][1] = {{7.0f, 1.5f}, {2.0f, 7.0f}};
    p[2][2] = {{13.0f, 8.0f}, {8.0f, 13.5f}};
    p[2][3] = {{9.0f, 5.0f}, {4.0f, 12.0f}};
    for (int i = 0; i < 4; ++i) {  // na mirrors pie
      for (const auto& q : p[2][i]) p[3][i].push_back({15.0f - q.x, q.y});
    }
    p[4][0] = {{2.0f, 2.5f}, {13.0f, 2.5f}, {13.0f, 13.0f}};  // zhe
    p[4][1] = {{2.5f, 2.0f}, {2.5f, 13.0f}, {13.0f, 13.0f}};
    p[4][2] = {{3.0f, 8.0f}, {12.0f, 8.0f}, {12.0f, 13.5f}};
    p[4][3] = {{6.0f, 2.0f}, {6.0f, 8.0f}, {13.0f, 8.0f}};
    return p;
  }();
  return paths[static_cast<int>(ids::stroke_category(s))][ids::stroke_instance(s)];
}

float segment_distance(Point p, Point a, Point b) {
  const float dx = b.x - a.x, dy = b.y - a.y;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

struct Region {
  float x0, y0, w, h;
  bool contains_center(int y, int x) const {
    const float cx = static_cast<float>(x) + 0.5f, cy = static_cast<float>(y) + 0.5f;
    return cx >= x0 && cx < x0 + w && cy >= y0 && cy < y0 + h;
  }
};

constexpr float kEncInner = 0.6f;

float sample_clamped(const Raster& r, float y, float x) {
  y = std::clamp(y, 0.0f, static_cast<float>(r.height - 1));
  x = std::clamp(x, 0.0f, static_cast<float>(r.width - 1));
  return r.sample(y, x);
}

void draw_leaf(const Raster& bitmap, const Region& reg, Raster& canvas) {
  // 3x3 supersampling over each destination pixel footprint.
  const float sx = static_cast<float>(bitmap.width) / reg.w;
  const float sy = static_cast<float>(bitmap.height) / reg.h;
  for (int y = 0; y < canvas.height; ++y) {
    for (int x = 0; x < canvas.width; ++x) {
      if (!reg.contains_center(y, x)) continue;
      float acc = 0.0f;
      for (int j = 0; j < 3; ++j) {
        for (int i = 0; i < 3; ++i) {
          const float px = static_cast<float>(x) + (static_cast<float>(i) + 0.5f) / 3.0f;
          const float py = static_cast<float>(y) + (static_cast<float>(j) + 0.5f) / 3.0f;
          acc += sample_clamped(bitmap, (py - reg.y0) * sy - 0.5f, (px - reg.x0) * sx - 0.5f);
        }
      }
      float& dst = canvas.at(y, x);
      dst = std::max(dst, acc / 9.0f);
    }
  }
}

void draw_tree(const IdsTree& t, const RadicalInventory& inv, const Region& reg, Raster& canvas) {
  if (t.is_leaf()) {
    if (!inv.has(t.radical())) {
      throw Error(ErrorKind::MissingBitmap, "radical " + std::to_string(t.radical().value));
    }
    draw_leaf(inv.bitmap(t.radical()), reg, canvas);
    return;
  }
  const auto& ch = t.children();
  switch (t.op()) {
    case StructureOp::H2:
    case StructureOp::H3: {
      const float w = reg.w / static_cast<float>(ch.size());
      for (std::size_t i = 0; i < ch.size(); ++i) {
        draw_tree(ch[i], inv, {reg.x0 + w * static_cast<float>(i), reg.y0, w, reg.h}, canvas);
      }
      break;
    }
    case StructureOp::V2:
    case StructureOp::V3: {
      const float h = reg.h / static_cast<float>(ch.size());
      for (std::size_t i = 0; i < ch.size(); ++i) {
        draw_tree(ch[i], inv, {reg.x0, reg.y0 + h * static_cast<float>(i), reg.w, h}, canvas);
      }
      break;
    }
    case StructureOp::ENC: {
      const Region inner{reg.x0 + reg.w * (1.0f - kEncInner) / 2.0f, reg.y0 + reg.h * (1.0f - kEncInner) / 2.0f,
                         reg.w * kEncInner, reg.h * kEncInner};
      Raster outer(canvas.height, canvas.width);
      draw_tree(ch[0], inv, reg, outer);
      for (int y = 0; y < canvas.height; ++y) {
        for (int x = 0; x < canvas.width; ++x) {
          if (reg.contains_center(y, x) && !inner.contains_center(y, x)) {
            canvas.at(y, x) = std::max(canvas.at(y, x), outer.at(y, x));
          }
        }
      }
      draw_tree(ch[1], inv, inner, canvas);
      break;
    }
  }
}

Raster morph(const Raster& src, bool dilate) {
  Raster out(src.height, src.width);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      float v = dilate ? 0.0f : 1.0f;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const float s = (yy >= 0 && yy < src.height && xx >= 0 && xx < src.width) ? src.at(yy, xx) : 0.0f;
          v = dilate ? std::max(v, s) : std::min(v, s);
        }
      }
      out.at(y, x) = v;
    }
  }
  return out;
}

void apply_style(Raster& img, const StyleParams& st, std::uint64_t seed) {
  if (st.stroke_thickness != 1.0f) {
    const bool dilate = st.stroke_thickness > 1.0f;
    const Raster m = morph(img, dilate);
    const float t = std::min(1.0f, std::fabs(st.stroke_thickness - 1.0f) / 0.6f);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      img.pixels[i] = img.pixels[i] + t * (m.pixels[i] - img.pixels[i]);
    }
  }
  if (st.rotation != 0.0f || st.shear != 0.0f || st.scale != 1.0f) {
    // forward map A = R(rotation) * Shear(shear) * scale, about the centre
    const float c = std::cos(st.rotation), s = std::sin(st.rotation);
    const float a00 = st.scale * c, a01 = st.scale * (c * st.shear - s);
    const float a10 = st.scale * s, a11 = st.scale * (s * st.shear + c);
    const float det = a00 * a11 - a01 * a10;
    const float i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
    const float cy = (static_cast<float>(img.height) - 1.0f) / 2.0f;
    const float cx = (static_cast<float>(img.width) - 1.0f) / 2.0f;
    Raster out(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
        out.at(y, x) = img.sample(i10 * dx + i11 * dy + cy, i00 * dx + i01 * dy + cx);
      }
    }
    img = std::move(out);
  }
  if (st.noise_sigma > 0.0f) {
    Rng rng(derive_seed(seed, "noise"));
    for (float& p : img.pixels) p += st.noise_sigma * static_cast<float>(rng.normal());
  }
  for (float& p : img.pixels) p = std::clamp(p, 0.0f, 1.0f);
}

float quantize(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

void quantize(Raster& r) {
  for (float& p : r.pixels) p = quantize(p);
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 0) threads = thread_cap_from_env();
  threads = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(threads)) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::uint64_t raster_hash(const Raster& r) {
  std::uint64_t h = 0x1234;
  for (float p : r.pixels) {
    std::uint32_t bits;
    std::memcpy(&bits, &p, sizeof bits);
    h = hash_combine(h, bits);
  }
  return h;
}

}  // namespace

float Raster::sample(float y, float x) const {
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const float fx = x - static_cast<float>(x0), fy = y - static_cast<float>(y0);
  auto px = [&](int yy, int xx) -> float {
    return (yy >= 0 && yy < height && xx >= 0 && xx < width) ? at(yy, xx) : 0.0f;
  };
  const float top = px(y0, x0) * (1 - fx) + (fx > 0 ? px(y0, x0 + 1) * fx : 0.0f);
  if (fy == 0) return top;
  const float bot = px(y0 + 1, x0) * (1 - fx) + (fx > 0 ? px(y0 + 1, x0 + 1) * fx : 0.0f);
  return top * (1 - fy) + bot * fy;
}

std::string_view regime_name(Regime r) { return r == Regime::Printed ? "printed" : "scribbled"; }

Regime parse_regime(std::string_view name) {
  if (name == "printed") return Regime::Printed;
  if (name == "scribbled") return Regime::Scribbled;
  throw Error(ErrorKind::Config, "unknown regime '" + std::string(name) + "'");
}

StyleParams StyleParams::sample(Regime regime, Rng& rng) {
  // Half-width of each range around the identity value.
  const double k = regime == Regime::Printed ? 0.5 : 1.0;
  StyleParams s;
  s.regime = regime;
  s.stroke_thickness = static_cast<float>(rng.uniform(1.0 - 0.4 * k, 1.0 + 0.6 * k));
  s.rotation = static_cast<float>(rng.uniform(-0.12 * k, 0.12 * k));
  s.scale = static_cast<float>(rng.uniform(1.0 - 0.15 * k, 1.0 + 0.15 * k));
  s.shear = static_cast<float>(rng.uniform(-0.1 * k, 0.1 * k));
  s.noise_sigma = static_cast<float>(rng.uniform(0.0, 0.15 * k));
  return s;
}

Raster rasterize_strokes(std::span<const StrokeId> strokes) {
  Raster r(kRadicalSize, kRadicalSize);
  for (auto s : strokes) {
    const auto& path = stroke_path(s);
    for (int y = 0; y < kRadicalSize; ++y) {
      for (int x = 0; x < kRadicalSize; ++x) {
        const Point p{static_cast<float>(x), static_cast<float>(y)};
        float d = 1e9f;
        for (std::size_t k = 0; k + 1 < path.size(); ++k) d = std::min(d, segment_distance(p, path[k], path[k + 1]));
        r.at(y, x) = std::max(r.at(y, x), std::clamp(1.5f - d, 0.0f, 1.0f));
      }
    }
  }
  return r;
}

RadicalInventory::RadicalInventory(const ids::Lexicon& lex) {
  bitmaps_.resize(static_cast<std::size_t>(lex.radical_count()));
  for (int r = 0; r < lex.radical_count(); ++r) {
    const ids::RadicalId id{static_cast<std::uint16_t>(r)};
    if (lex.has_strokes(id)) bitmaps_[static_cast<std::size_t>(r)] = rasterize_strokes(lex.strokes_of(id));
  }
}

const Raster& RadicalInventory::bitmap(ids::RadicalId r) const {
  if (!has(r)) throw Error(ErrorKind::MissingBitmap, "radical " + std::to_string(r.value));
  return bitmaps_[r.value];
}

Raster compose_glyph(const IdsTree& tree, const RadicalInventory& inventory, const StyleParams& style,
                     std::uint64_t seed) {
  Raster canvas(kGlyphSize, kGlyphSize);
  draw_tree(tree, inventory, {0.0f, 0.0f, static_cast<float>(kGlyphSize), static_cast<float>(kGlyphSize)}, canvas);
  apply_style(canvas, style, seed);
  return canvas;
}

namespace {

TextLineImage render_line_impl(std::span<const int> class_ids, const ids::Lexicon& lex,
                               const RadicalInventory& inventory, const StyleParams* fixed, Regime regime,
                               std::uint64_t seed) {
  if (class_ids.empty() || class_ids.size() > static_cast<std::size_t>(kMaxLineChars)) {
    throw Error(ErrorKind::LineTooLong, "line length " + std::to_string(class_ids.size()) + " outside [1, " +
                                            std::to_string(kMaxLineChars) + "]");
  }
  TextLineImage line;
  line.pixels = Raster(kLineHeight, kLineWidth);
  line.label.assign(class_ids.begin(), class_ids.end());
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    Rng rng(hash_combine(seed, i));
    const StyleParams st = fixed ? *fixed : StyleParams::sample(regime, rng);
    const int jitter = static_cast<int>(rng.below(2 * kLineJitter + 1)) - kLineJitter;
    const Raster g = compose_glyph(lex.entry(class_ids[i]).tree, inventory, st, rng.next_u64());
    const int x0 = kGlyphSize * static_cast<int>(i) + jitter;
    for (int y = 0; y < kGlyphSize; ++y) {
      for (int x = 0; x < kGlyphSize; ++x) {
        const int xx = x0 + x;
        if (xx < 0 || xx >= kLineWidth) continue;
        float& dst = line.pixels.at(y, xx);
        dst = std::max(dst, g.at(y, x));
      }
    }
  }
  return line;
}

}  // namespace

TextLineImage render_line(std::span<const int> class_ids, const ids::Lexicon& lex, const RadicalInventory& inventory,
                          Regime regime, std::uint64_t seed) {
  return render_line_impl(class_ids, lex, inventory, nullptr, regime, seed);
}

TextLineImage render_line(std::span<const int> class_ids, const ids::Lexicon& lex, const RadicalInventory& inventory,
                          const StyleParams& style, std::uint64_t seed) {
  return render_line_impl(class_ids, lex, inventory, &style, style.regime, seed);
}

std::vector<std::pair<int, int>> find_glyph_collisions(const ids::Lexicon& lex, const RadicalInventory& inventory) {
  std::unordered_map<std::uint64_t, std::vector<std::pair<int, Raster>>> buckets;
  std::vector<std::pair<int, int>> out;
  for (const auto& e : lex.entries()) {
    Raster r = compose_glyph(e.tree, inventory, StyleParams::identity(), 0);
    auto& b = buckets[raster_hash(r)];
    for (const auto& [other, raster] : b) {
      if (raster == r) out.emplace_back(other, e.class_id);
    }
    b.emplace_back(e.class_id, std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<StrokeId>> default_stroke_table(int radicals) {
  Rng rng(0x5eed0f1d5ULL);
  std::vector<std::vector<StrokeId>> table;
  std::vector<std::set<int>> sets;
  int guard = 0;
  while (static_cast<int>(table.size()) < radicals) {
    if (++guard > 100000) throw Error(ErrorKind::LexiconFormat, "cannot build " + std::to_string(radicals) + " radicals");
    const int n = 2 + static_cast<int>(rng.below(3));
    std::set<int> s;
    while (static_cast<int>(s.size()) < n) s.insert(static_cast<int>(rng.below(ids::kStrokeInventorySize)));
    bool ok = true;
    for (const auto& other : sets) {
      int diff = 0;
      for (int v : s) diff += other.count(v) ? 0 : 1;
      for (int v : other) diff += s.count(v) ? 0 : 1;
      if (diff < 2) ok = false;
    }
    if (!ok) continue;
    sets.push_back(s);
    std::vector<StrokeId> strokes;
    for (int v : s) strokes.push_back(StrokeId{static_cast<std::uint16_t>(v)});
    table.push_back(std::move(strokes));
  }
  return table;
}

std::vector<std::string> default_radical_names(int radicals) {
  std::vector<std::string> names;
  for (int i = 0; i < radicals; ++i) {
    names.push_back(i < 26 ? std::string(1, static_cast<char>('a' + i)) : "rad" + std::to_string(i));
  }
  return names;
}

ids::Lexicon build_lexicon(const LexiconBuildOptions& o) {
  if (o.radicals < 1 || o.classes < 1 || o.max_depth < 1) throw Error(ErrorKind::Config, "bad lexicon build options");
  ids::Lexicon lex(default_radical_names(o.radicals), default_stroke_table(o.radicals), {});
  const RadicalInventory inv(lex);
  Rng rng(derive_seed(o.seed, "lexicon"));
  std::unordered_map<std::uint64_t, std::vector<Raster>> seen_glyphs;
  auto leaf = [&] { return IdsTree::leaf(ids::RadicalId{static_cast<std::uint16_t>(rng.below(o.radicals))}); };
  auto binary = [&](StructureOp op, IdsTree a, IdsTree b) {
    std::vector<IdsTree> ch;
    ch.push_back(std::move(a));
    ch.push_back(std::move(b));
    return IdsTree::node(op, std::move(ch));
  };
  int attempts = 0;
  while (lex.size() < o.classes) {
    if (++attempts > 200 * o.classes + 10000) {
      throw Error(ErrorKind::LexiconFormat, "lexicon space exhausted at " + std::to_string(lex.size()) + " classes");
    }
    const double u = rng.uniform();
    IdsTree t;
    if (u < 0.04 || o.max_depth == 1) {
      t = leaf();
    } else if (u < 0.34) {
      t = binary(StructureOp::H2, leaf(), leaf());
    } else if (u < 0.64) {
      t = binary(StructureOp::V2, leaf(), leaf());
    } else if (u < 0.74) {
      t = binary(StructureOp::ENC, leaf(), leaf());
    } else if (u < 0.86) {
      const auto op = rng.uniform() < 0.5 ? StructureOp::H3 : StructureOp::V3;
      std::vector<IdsTree> ch;
      for (int i = 0; i < 3; ++i) ch.push_back(leaf());
      t = IdsTree::node(op, std::move(ch));
    } else if (o.max_depth >= 3) {
      const auto outer = rng.uniform() < 0.5 ? StructureOp::H2 : StructureOp::V2;
      const auto inner = rng.uniform() < 0.5 ? StructureOp::H2 : StructureOp::V2;
      IdsTree sub = binary(inner, leaf(), leaf());
      t = rng.uniform() < 0.5 ? binary(outer, std::move(sub), leaf()) : binary(outer, leaf(), std::move(sub));
    } else {
      continue;
    }
    Raster r = compose_glyph(t, inv, StyleParams::identity(), 0);
    auto& bucket = seen_glyphs[raster_hash(r)];
    if (std::find(bucket.begin(), bucket.end(), r) != bucket.end()) continue;
    try {
      lex.add_class("g" + std::to_string(lex.size()), t);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::DuplicateIds) continue;
      throw;
    }
    bucket.push_back(std::move(r));
  }
  return lex;
}

// ---------------------------------------------------------------------------

int thread_cap_from_env() {
  if (const char* env = std::getenv("RADICALIGN_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void write_pgm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << "P5\n" << r.width << ' ' << r.height << "\n255\n";
  std::vector<unsigned char> bytes(r.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(r.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

Raster read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw Error(ErrorKind::Io, "not an 8-bit P5 graymap: " + path.string());
  f.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::Io, "truncated graymap: " + path.string());
  Raster r(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) r.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return r;
}

Dataset make_glyph_dataset(const ids::Lexicon& lex, const RadicalInventory& inventory, const GlyphDatasetSpec& spec,
                           int threads) {
  if (spec.classes.empty() || spec.samples_per_class < 1) throw Error(ErrorKind::EmptyDataset, "empty glyph split");
  const std::size_t per = static_cast<std::size_t>(spec.samples_per_class);
  const std::size_t n = spec.classes.size() * per;
  Dataset ds;
  ds.kind = "glyph";
  ds.seed = spec.seed;
  ds.images.resize(n);
  ds.labels.resize(n);
  ds.files.resize(n);
  for (int c : spec.classes) lex.entry(c);
  parallel_for(n, threads, [&](std::size_t idx) {
    const int c = spec.classes[idx / per];
    const auto i = static_cast<std::uint64_t>(idx % per);
    const std::uint64_t s = hash_combine(hash_combine(spec.seed, static_cast<std::uint64_t>(c)), i);
    Rng rng(s);
    const StyleParams st = StyleParams::sample(spec.regime, rng);
    Raster r = compose_glyph(lex.entry(c).tree, inventory, st, rng.next_u64());
    quantize(r);
    char name[64];
    std::snprintf(name, sizeof name, "c%05d_%04d.pgm", c, static_cast<int>(i));
    ds.images[idx] = std::move(r);
    ds.labels[idx] = {c};
    ds.files[idx] = name;
  });
  return ds;
}

Dataset make_line_dataset(const ids::Lexicon& lex, const RadicalInventory& inventory, const LineDatasetSpec& spec,
                          int threads) {
  if (spec.classes.empty() || spec.lines < 1) throw Error(ErrorKind::EmptyDataset, "empty line split");
  if (spec.min_length < 1 || spec.max_length > kMaxLineChars || spec.min_length > spec.max_length) {
    throw Error(ErrorKind::LineTooLong, "line length range");
  }
  const auto n = static_cast<std::size_t>(spec.lines);
  Dataset ds;
  ds.kind = "line";
  ds.seed = spec.seed;
  ds.images.resize(n);
  ds.labels.resize(n);
  ds.files.resize(n);
  parallel_for(n, threads, [&](std::size_t idx) {
    Rng rng(hash_combine(spec.seed, idx));
    const int len = spec.min_length + static_cast<int>(rng.below(static_cast<std::size_t>(spec.max_length - spec.min_length + 1)));
    std::vector<int> label;
    for (int k = 0; k < len; ++k) label.push_back(spec.classes[rng.below(spec.classes.size())]);
    TextLineImage line = render_line(label, lex, inventory, spec.regime, rng.next_u64());
    quantize(line.pixels);
    char name[64];
    std::snprintf(name, sizeof name, "line%06d.pgm", static_cast<int>(idx));
    ds.images[idx] = std::move(line.pixels);
    ds.labels[idx] = std::move(label);
    ds.files[idx] = name;
  });
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir, Regime regime, std::uint64_t lexicon_hash) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw Error(ErrorKind::Io, "cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_pgm(dir / "images" / ds.files[i], ds.images[i]);
    manifest << ds.files[i] << '\t';
    for (std::size_t k = 0; k < ds.labels[i].size(); ++k) {
      if (k) manifest << ' ';
      manifest << ds.labels[i][k];
    }
    manifest << '\n';
  }
  std::ofstream meta(dir / "meta.tsv");
  meta << "seed\t" << ds.seed << "\nregime\t" << regime_name(regime) << "\nlexicon_hash\t" << hex64(lexicon_hash)
       << "\nkind\t" << ds.kind << '\n';
  if (!manifest || !meta) throw Error(ErrorKind::Io, "write failed in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw Error(ErrorKind::Io, "missing manifest.tsv in " + dir.string());
  Dataset ds;
  std::string line;
  int row = 0;
  while (std::getline(manifest, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(ErrorKind::Io, "manifest row " + std::to_string(row) + ": missing tab");
    ds.files.push_back(line.substr(0, tab));
    std::istringstream labels(line.substr(tab + 1));
    std::vector<int> label;
    int v;
    while (labels >> v) label.push_back(v);
    ds.labels.push_back(std::move(label));
    ds.images.push_back(read_pgm(dir / "images" / ds.files.back()));
  }
  std::ifstream meta(dir / "meta.tsv");
  while (std::getline(meta, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    const std::string key = line.substr(0, tab), value = line.substr(tab + 1);
    if (key == "seed") ds.seed = std::stoull(value);
    if (key == "kind") ds.kind = value;
  }
  if (ds.images.empty()) throw Error(ErrorKind::EmptyDataset, dir.string());
  return ds;
}

}  // namespace radicalign::glyph
