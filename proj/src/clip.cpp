#include "radicalign/clip.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/Dense>

#include "radicalign/config.hpp"

namespace radicalign::clip {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const Mat<T>>;

std::string format_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

Tensor image_batch(std::span<const glyph::Raster> images) {
  const int n = static_cast<int>(images.size());
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(n) * glyph::kGlyphSize * glyph::kGlyphSize);
  for (const auto& r : images) {
    if (r.height != glyph::kGlyphSize || r.width != glyph::kGlyphSize) {
      throw Error(ErrorKind::ShapeMismatch, "glyph must be 32x32, got " + std::to_string(r.height) + "x" + std::to_string(r.width));
    }
    data.insert(data.end(), r.pixels.begin(), r.pixels.end());
  }
  return Tensor::constant({n, 1, glyph::kGlyphSize, glyph::kGlyphSize}, std::move(data));
}

}  // namespace

// ---------------------------------------------------------------------------

std::string ClipConfig::to_text() const {
  std::ostringstream os;
  os << "clip.embed_dim = " << embed_dim << "\n"
     << "clip.image_widths = " << join_ints(image_widths) << "\n"
     << "clip.text_dim = " << text_dim << "\n"
     << "clip.text_layers = " << text_layers << "\n"
     << "clip.text_heads = " << text_heads << "\n"
     << "clip.text_ffn = " << text_ffn << "\n"
     << "clip.max_seq_len = " << max_seq_len << "\n"
     << "clip.level = " << ids::level_name(level) << "\n"
     << "clip.logit_scale = " << format_float(logit_scale) << "\n";
  return os.str();
}

ClipConfig ClipConfig::from_text(const std::string& text) {
  const auto kv = config::KeyValues::parse(text, "<clip config>");
  ClipConfig c;
  c.embed_dim = static_cast<int>(kv.get_int("clip.embed_dim", c.embed_dim));
  c.image_widths = kv.get_ints("clip.image_widths", c.image_widths);
  c.text_dim = static_cast<int>(kv.get_int("clip.text_dim", c.text_dim));
  c.text_layers = static_cast<int>(kv.get_int("clip.text_layers", c.text_layers));
  c.text_heads = static_cast<int>(kv.get_int("clip.text_heads", c.text_heads));
  c.text_ffn = static_cast<int>(kv.get_int("clip.text_ffn", c.text_ffn));
  c.max_seq_len = static_cast<int>(kv.get_int("clip.max_seq_len", c.max_seq_len));
  c.level = ids::parse_level(kv.get("clip.level", std::string(ids::level_name(c.level))));
  c.logit_scale = static_cast<float>(kv.get_double("clip.logit_scale", c.logit_scale));
  if (c.image_widths.empty()) throw Error(ErrorKind::Config, "clip.image_widths is empty");
  return c;
}

// ---------------------------------------------------------------------------

ImageEncoder::ImageEncoder(nn::ParamStore& ps, const ClipConfig& cfg, Rng& rng) {
  int in = 1;
  const int n = static_cast<int>(cfg.image_widths.size());
  for (int i = 0; i < n; ++i) {
    const int out = cfg.image_widths[static_cast<std::size_t>(i)];
    blocks_.emplace_back(ps, "image.block" + std::to_string(i), in, out, i + 1 < n, rng);
    in = out;
  }
  proj_ = ps.add("image.proj", {in, cfg.embed_dim}, in, rng);
}

Tensor ImageEncoder::operator()(const Tensor& images) const {
  Tensor x = images;
  for (const auto& b : blocks_) x = b(x);
  return tensor::l2_normalize(tensor::dense(tensor::global_avg_pool(x), proj_, Tensor{}));
}

TextEncoder::TextEncoder(nn::ParamStore& ps, const ClipConfig& cfg, const ids::Alphabet& alphabet, Rng& rng)
    : cfg_(cfg), alphabet_(alphabet) {
  tokens_ = ps.add("text.tokens", {alphabet.size(), cfg.text_dim}, cfg.text_dim, rng);
  positions_ = ps.add("text.positions", {cfg.max_seq_len, cfg.text_dim}, cfg.text_dim, rng);
  for (int i = 0; i < cfg.text_layers; ++i) {
    layers_.emplace_back(ps, "text.layer" + std::to_string(i), cfg.text_dim, cfg.text_heads, cfg.text_ffn, rng);
  }
  final_ln_ = nn::LayerNorm(ps, "text.final_ln", cfg.text_dim);
  proj_ = ps.add("text.proj", {cfg.text_dim, cfg.embed_dim}, cfg.text_dim, rng);
}

Tensor TextEncoder::operator()(const std::vector<ids::TokenSeq>& seqs) const {
  if (seqs.empty()) throw Error(ErrorKind::ShapeMismatch, "text encoder: empty batch");
  const int b = static_cast<int>(seqs.size());
  int len = 0;
  for (const auto& s : seqs) {
    if (s.empty() || s.back() != alphabet_.end()) throw Error(ErrorKind::MalformedIds, "token sequence must end with END");
    if (static_cast<int>(s.size()) > cfg_.max_seq_len) {
      throw Error(ErrorKind::SequenceTooLong, std::to_string(s.size()) + " tokens > " + std::to_string(cfg_.max_seq_len));
    }
    for (int t : s) alphabet_.kind(t);
    len = std::max(len, static_cast<int>(s.size()));
  }
  std::vector<int> flat(static_cast<std::size_t>(b) * len, alphabet_.pad());
  tensor::AttentionMask mask;
  std::vector<int> end_rows;
  for (int i = 0; i < b; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(i)];
    std::copy(s.begin(), s.end(), flat.begin() + static_cast<std::ptrdiff_t>(i) * len);
    mask.key_lengths.push_back(static_cast<int>(s.size()));
    end_rows.push_back(i * len + static_cast<int>(s.size()) - 1);
  }
  Tensor x = tensor::add_positional(tensor::embedding(tokens_, std::span<const int>(flat), {b, len}), positions_);
  for (const auto& layer : layers_) x = layer(x, mask);
  x = tensor::gather_rows(final_ln_(x), std::span<const int>(end_rows));
  return tensor::l2_normalize(tensor::dense(x, proj_, Tensor{}));
}

// ---------------------------------------------------------------------------

ClipModel::ClipModel(ClipConfig cfg, ids::Alphabet alphabet, std::uint64_t init_seed)
    : cfg_(std::move(cfg)), alphabet_(alphabet) {
  Rng rng(init_seed);
  image_ = ImageEncoder(params_, cfg_, rng);
  text_ = TextEncoder(params_, cfg_, alphabet_, rng);
}

Tensor ClipModel::encode_images(std::span<const glyph::Raster> images) const { return image_(image_batch(images)); }

Tensor ClipModel::encode_texts(const std::vector<ids::TokenSeq>& seqs) const { return text_(seqs); }

std::vector<float> ClipModel::encode_image(const glyph::Raster& img) const {
  tensor::NoGradGuard guard;
  const Tensor e = encode_images(std::span<const glyph::Raster>(&img, 1));
  return {e.values().begin(), e.values().end()};
}

std::vector<float> ClipModel::encode_text(const ids::TokenSeq& tokens) const {
  tensor::NoGradGuard guard;
  const Tensor e = encode_texts({tokens});
  return {e.values().begin(), e.values().end()};
}

void ClipModel::save(const std::filesystem::path& path, const std::string& extra_metadata) const {
  std::ostringstream meta;
  meta << "model = clip\n"
       << cfg_.to_text() << "alphabet.radicals = " << alphabet_.radical_count() << "\n"
       << "alphabet.strokes = " << alphabet_.stroke_count() << "\n"
       << "alphabet.classes = " << alphabet_.class_capacity() << "\n"
       << extra_metadata;
  nn::save_checkpoint(path, nn::snapshot(params_, meta.str()));
}

ClipModel ClipModel::load(const std::filesystem::path& path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  const auto kv = config::KeyValues::parse(ckpt.metadata, path.string());
  if (kv.get("model", "") != "clip") throw Error(ErrorKind::Checkpoint, path.string() + " is not a clip checkpoint");
  const ids::Alphabet alphabet(static_cast<int>(kv.get_int("alphabet.radicals", 0)),
                               static_cast<int>(kv.get_int("alphabet.classes", 0)),
                               static_cast<int>(kv.get_int("alphabet.strokes", ids::kStrokeInventorySize)));
  ClipModel m(ClipConfig::from_text(ckpt.metadata), alphabet, 0);
  nn::restore(m.params_, ckpt);
  return m;
}

// ---------------------------------------------------------------------------
// Losses. Both are fused: forward and the analytic gradient are computed in
// one pass and attached through fused_scalar.

template <typename T>
tensor::Var<T> loss_lt(const tensor::Var<T>& images, const tensor::Var<T>& texts, T scale) {
  if (images.rank() != 2 || texts.rank() != 2 || images.shape() != texts.shape() || images.dim(0) < 1) {
    throw Error(ErrorKind::ShapeMismatch, "loss_lt: " + tensor::shape_str(images.shape()) + " vs " + tensor::shape_str(texts.shape()));
  }
  const int n = images.dim(0), c = images.dim(1);
  CMap<T> I(images.values().data(), n, c), Tm(texts.values().data(), n, c);
  const Mat<T> S = scale * (I * Tm.transpose());

  Mat<T> row(n, n), col(n, n);
  T loss = 0;
  for (int j = 0; j < n; ++j) {
    const T mr = S.row(j).maxCoeff();
    const Eigen::Matrix<T, 1, Eigen::Dynamic> er = (S.row(j).array() - mr).exp();
    const T zr = er.sum();
    row.row(j) = er / zr;
    loss += -(S(j, j) - mr - std::log(zr));

    const T mc = S.col(j).maxCoeff();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> ec = (S.col(j).array() - mc).exp();
    const T zc = ec.sum();
    col.col(j) = ec / zc;
    loss += -(S(j, j) - mc - std::log(zc));
  }
  Mat<T> dS = row + col;
  dS.diagonal().array() -= T(2);
  const Mat<T> dI = scale * (dS * Tm);
  const Mat<T> dT = scale * (dS.transpose() * I);
  return tensor::fused_scalar<T>(loss, {images, texts},
                                 {std::vector<T>(dI.data(), dI.data() + dI.size()),
                                  std::vector<T>(dT.data(), dT.data() + dT.size())},
                                 "loss_lt");
}

template <typename T>
tensor::Var<T> loss_li(const tensor::Var<T>& images, std::span<const int> labels, T scale) {
  if (images.rank() != 2 || images.dim(0) != static_cast<int>(labels.size()) || labels.empty()) {
    throw Error(ErrorKind::ShapeMismatch, "loss_li: " + tensor::shape_str(images.shape()) + " with " + std::to_string(labels.size()) + " labels");
  }
  const int n = images.dim(0), c = images.dim(1);
  CMap<T> I(images.values().data(), n, c);
  const Mat<T> G = scale * (I * I.transpose());
  Mat<T> dG = Mat<T>::Zero(n, n);
  T loss = 0;
  for (int j = 0; j < n; ++j) {
    bool any = false;
    for (int k = 0; k < n; ++k) any = any || (k != j && labels[k] == labels[j]);
    if (!any) continue;
    const T m = G.row(j).maxCoeff();
    T z_all = 0, z_pos = 0;
    for (int k = 0; k < n; ++k) {
      const T e = std::exp(G(j, k) - m);
      z_all += e;
      if (k != j && labels[k] == labels[j]) z_pos += e;
    }
    loss += std::log(z_all) - std::log(z_pos);
    for (int k = 0; k < n; ++k) {
      const T e = std::exp(G(j, k) - m);
      dG(j, k) = e / z_all - ((k != j && labels[k] == labels[j]) ? e / z_pos : T(0));
    }
  }
  const Mat<T> dI = scale * ((dG + dG.transpose()) * I);
  return tensor::fused_scalar<T>(loss, {images}, {std::vector<T>(dI.data(), dI.data() + dI.size())}, "loss_li");
}

template tensor::Var<float> loss_lt(const tensor::Var<float>&, const tensor::Var<float>&, float);
template tensor::Var<double> loss_lt(const tensor::Var<double>&, const tensor::Var<double>&, double);
template tensor::Var<float> loss_li(const tensor::Var<float>&, std::span<const int>, float);
template tensor::Var<double> loss_li(const tensor::Var<double>&, std::span<const int>, double);

// ---------------------------------------------------------------------------

void TrainingLog::save_tsv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << "epoch\tL_T\tL_I\tL_pre\n";
  for (const auto& e : epochs) {
    f << e.epoch << '\t' << format_float(e.lt) << '\t' << format_float(e.li) << '\t' << format_float(e.pre) << '\n';
  }
}

TrainingLog pretrain(ClipModel& model, const PretrainConfig& cfg, const ids::Lexicon& lex, const glyph::Dataset& train,
                     const std::function<void(const EpochLog&)>& on_epoch) {
  if (train.size() == 0) throw Error(ErrorKind::EmptyDataset, "pretrain: empty training set");
  if (cfg.lambda < 0) throw Error(ErrorKind::Config, "lambda must be >= 0");
  if (cfg.batch_size < 2) throw Error(ErrorKind::Config, "batch_size must be >= 2");

  // class -> sample indices, in dataset order
  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i].size() != 1) throw Error(ErrorKind::ShapeMismatch, "pretrain expects single-character samples");
    by_class[train.labels[i][0]].push_back(static_cast<int>(i));
  }
  std::map<int, ids::TokenSeq> tokens;
  std::size_t max_per_class = 0;
  for (const auto& [cls, idx] : by_class) {
    lex.entry(cls);
    tokens[cls] = ids::tokens_for_level(cls, lex, model.config().level, model.alphabet());
    max_per_class = std::max(max_per_class, idx.size());
  }
  const int classes_per_batch = cfg.batch_size / 2;
  const int rounds = static_cast<int>(std::max<std::size_t>(1, max_per_class / 2));
  const float s = model.config().logit_scale;

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  nn::Adam adam(cfg.adam);
  TrainingLog log;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::map<int, std::vector<int>> order = by_class;
    for (auto& [cls, idx] : order) shuffle_rng.shuffle(idx);
    double sum_lt = 0, sum_li = 0, sum_pre = 0;
    int batches = 0;
    for (int r = 0; r < rounds; ++r) {
      // one pair per class per round; classes within a batch are distinct
      std::vector<int> classes;
      for (const auto& [cls, idx] : order) classes.push_back(cls);
      shuffle_rng.shuffle(classes);
      for (std::size_t start = 0; start < classes.size(); start += static_cast<std::size_t>(classes_per_batch)) {
        const std::size_t end = std::min(classes.size(), start + static_cast<std::size_t>(classes_per_batch));
        std::vector<glyph::Raster> imgs;
        std::vector<ids::TokenSeq> texts;
        std::vector<int> labels;
        for (std::size_t k = start; k < end; ++k) {
          const int cls = classes[k];
          const auto& idx = order[cls];
          const std::size_t a = (2 * static_cast<std::size_t>(r)) % idx.size();
          const std::size_t b = (2 * static_cast<std::size_t>(r) + 1) % idx.size();
          std::vector<std::size_t> picks{a};
          if (b != a) picks.push_back(b);
          for (std::size_t pick : picks) {
            imgs.push_back(train.images[static_cast<std::size_t>(idx[pick])]);
            texts.push_back(tokens[cls]);
            labels.push_back(cls);
          }
        }
        const Tensor I = model.encode_images(imgs);
        const Tensor T = model.encode_texts(texts);
        const Tensor lt = loss_lt<float>(I, T, s);
        const Tensor li = loss_li<float>(I, labels, s);
        const Tensor total = cfg.lambda == 0 ? lt : tensor::add(lt, tensor::scale(li, static_cast<float>(cfg.lambda)));
        tensor::backward(total);
        adam.step(model.params());
        sum_lt += lt.item();
        sum_li += li.item();
        sum_pre += total.item();
        ++batches;
      }
    }
    EpochLog e{epoch, sum_lt / batches, sum_li / batches, sum_pre / batches};
    log.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

// ---------------------------------------------------------------------------

int CandidateMatrix::index_of(int class_id) const {
  auto it = std::find(class_ids_.begin(), class_ids_.end(), class_id);
  return it == class_ids_.end() ? -1 : static_cast<int>(it - class_ids_.begin());
}

void CandidateMatrix::append(int class_id, std::span<const float> row) {
  if (dim_ == 0 && class_ids_.empty()) dim_ = static_cast<int>(row.size());
  if (static_cast<int>(row.size()) != dim_) {
    throw Error(ErrorKind::DimensionMismatch, "candidate row has " + std::to_string(row.size()) + " values, expected " + std::to_string(dim_));
  }
  if (index_of(class_id) >= 0) throw Error(ErrorKind::DuplicateClass, "class " + std::to_string(class_id) + " already present");
  class_ids_.push_back(class_id);
  data_.insert(data_.end(), row.begin(), row.end());
}

void CandidateMatrix::save_tsv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (int k = 0; k < size(); ++k) {
    f << class_ids_[static_cast<std::size_t>(k)];
    for (float v : row(k)) f << '\t' << format_float(v);
    f << '\n';
  }
  if (!f) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

CandidateMatrix CandidateMatrix::load_tsv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string());
  CandidateMatrix p;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(in, field, '\t')) fields.push_back(field);
    if (fields.size() < 2) throw Error(ErrorKind::Io, path.string() + ":" + std::to_string(lineno) + ": too few fields");
    std::vector<float> row;
    try {
      for (std::size_t i = 1; i < fields.size(); ++i) row.push_back(std::stof(fields[i]));
      p.append(std::stoi(fields[0]), row);
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::Io, path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return p;
}

CandidateMatrix export_candidates(const ClipModel& model, const ids::Lexicon& lex, std::span<const int> class_ids) {
  tensor::NoGradGuard guard;
  CandidateMatrix p(model.config().embed_dim);
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < class_ids.size(); start += kChunk) {
    const std::size_t end = std::min(class_ids.size(), start + kChunk);
    std::vector<ids::TokenSeq> seqs;
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(ids::tokens_for_level(class_ids[i], lex, model.config().level, model.alphabet()));
    }
    const Tensor e = model.encode_texts(seqs);
    const int d = e.dim(1);
    for (std::size_t i = start; i < end; ++i) {
      p.append(class_ids[i], e.values().subspan((i - start) * static_cast<std::size_t>(d), static_cast<std::size_t>(d)));
    }
  }
  return p;
}

int best_candidate(std::span<const float> embedding, const CandidateMatrix& p) {
  if (p.size() == 0) throw Error(ErrorKind::EmptyCandidates, "candidate matrix is empty");
  if (static_cast<int>(embedding.size()) != p.dim()) {
    throw Error(ErrorKind::DimensionMismatch, "embedding has " + std::to_string(embedding.size()) + " dims, candidates " + std::to_string(p.dim()));
  }
  int best = 0;
  float best_score = 0;
  for (int k = 0; k < p.size(); ++k) {
    const auto r = p.row(k);
    float s = 0;
    for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * embedding[i];
    if (k == 0 || s > best_score) {
      best = k;
      best_score = s;
    }
  }
  return best;
}

int ccr_recognize(const ClipModel& model, const glyph::Raster& img, const CandidateMatrix& p) {
  if (p.size() == 0) throw Error(ErrorKind::EmptyCandidates, "candidate matrix is empty");
  return p.class_ids()[static_cast<std::size_t>(best_candidate(model.encode_image(img), p))];
}

std::vector<int> ccr_recognize_batch(const ClipModel& model, std::span<const glyph::Raster> images, const CandidateMatrix& p,
                                     int batch) {
  if (p.size() == 0) throw Error(ErrorKind::EmptyCandidates, "candidate matrix is empty");
  tensor::NoGradGuard guard;
  std::vector<int> out;
  out.reserve(images.size());
  const auto step = static_cast<std::size_t>(std::max(batch, 1));
  for (std::size_t start = 0; start < images.size(); start += step) {
    const auto chunk = images.subspan(start, std::min(step, images.size() - start));
    const Tensor e = model.encode_images(chunk);
    const auto d = static_cast<std::size_t>(e.dim(1));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.push_back(p.class_ids()[static_cast<std::size_t>(best_candidate(e.values().subspan(i * d, d), p))]);
    }
  }
  return out;
}

}  // namespace radicalign::clip
