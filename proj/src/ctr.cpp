#include "radicalign/ctr.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "radicalign/config.hpp"

namespace radicalign::ctr {

namespace {

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

Tensor line_batch(std::span<const glyph::Raster> lines) {
  std::vector<float> data;
  data.reserve(lines.size() * glyph::kLineHeight * glyph::kLineWidth);
  for (const auto& r : lines) {
    if (r.height != glyph::kLineHeight || r.width != glyph::kLineWidth) {
      throw Error(ErrorKind::ShapeMismatch, "text line must be 32x256, got " + std::to_string(r.height) + "x" + std::to_string(r.width));
    }
    data.insert(data.end(), r.pixels.begin(), r.pixels.end());
  }
  return Tensor::constant({static_cast<int>(lines.size()), 1, glyph::kLineHeight, glyph::kLineWidth}, std::move(data));
}

constexpr int kBos = -1;
constexpr int kPad = -2;

}  // namespace

std::string_view head_mode_name(HeadMode m) { return m == HeadMode::Match ? "match" : "fc"; }

HeadMode parse_head_mode(std::string_view name) {
  if (name == "match") return HeadMode::Match;
  if (name == "fc") return HeadMode::Fc;
  throw Error(ErrorKind::Config, "unknown head mode '" + std::string(name) + "'");
}

std::string CtrConfig::to_text() const {
  std::ostringstream os;
  os << "ctr.beta = " << format_float(beta) << "\n"
     << "ctr.head_mode = " << head_mode_name(head_mode) << "\n"
     << "ctr.max_decode_len = " << max_decode_len << "\n"
     << "ctr.encoder_widths = " << join_ints(encoder_widths) << "\n"
     << "ctr.model_dim = " << model_dim << "\n"
     << "ctr.layers = " << layers << "\n"
     << "ctr.heads = " << heads << "\n"
     << "ctr.ffn = " << ffn << "\n"
     << "ctr.logit_scale = " << format_float(logit_scale) << "\n"
     << "ctr.init_from_pretrain = " << (init_from_pretrain ? "true" : "false") << "\n"
     << "ctr.lr = " << format_float(adam.lr) << "\n"
     << "ctr.beta1 = " << format_float(adam.beta1) << "\n"
     << "ctr.beta2 = " << format_float(adam.beta2) << "\n"
     << "ctr.epochs = " << epochs << "\n"
     << "ctr.batch_size = " << batch_size << "\n"
     << "ctr.seed = " << seed << "\n";
  return os.str();
}

CtrConfig CtrConfig::from_text(const std::string& text) {
  const auto kv = config::KeyValues::parse(text, "<ctr config>");
  CtrConfig c;
  c.beta = kv.get_double("ctr.beta", c.beta);
  c.head_mode = parse_head_mode(kv.get("ctr.head_mode", std::string(head_mode_name(c.head_mode))));
  c.max_decode_len = static_cast<int>(kv.get_int("ctr.max_decode_len", c.max_decode_len));
  c.encoder_widths = kv.get_ints("ctr.encoder_widths", c.encoder_widths);
  c.model_dim = static_cast<int>(kv.get_int("ctr.model_dim", c.model_dim));
  c.layers = static_cast<int>(kv.get_int("ctr.layers", c.layers));
  c.heads = static_cast<int>(kv.get_int("ctr.heads", c.heads));
  c.ffn = static_cast<int>(kv.get_int("ctr.ffn", c.ffn));
  c.logit_scale = static_cast<float>(kv.get_double("ctr.logit_scale", c.logit_scale));
  c.init_from_pretrain = kv.get_bool("ctr.init_from_pretrain", c.init_from_pretrain);
  c.adam.lr = kv.get_double("ctr.lr", c.adam.lr);
  c.adam.beta1 = kv.get_double("ctr.beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double("ctr.beta2", c.adam.beta2);
  c.epochs = static_cast<int>(kv.get_int("ctr.epochs", c.epochs));
  c.batch_size = static_cast<int>(kv.get_int("ctr.batch_size", c.batch_size));
  c.seed = kv.get_u64("ctr.seed", c.seed);
  if (c.beta < 0) throw Error(ErrorKind::Config, "ctr.beta must be >= 0");
  if (c.max_decode_len < 1) throw Error(ErrorKind::Config, "ctr.max_decode_len must be >= 1");
  if (c.encoder_widths.empty()) throw Error(ErrorKind::Config, "ctr.encoder_widths is empty");
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> match_probabilities(std::span<const T> f, std::span<const T> rows, int k, T scale) {
  const std::size_t d = f.size();
  if (k < 1 || rows.size() != static_cast<std::size_t>(k) * d) {
    throw Error(ErrorKind::DimensionMismatch, "matching head: " + std::to_string(rows.size()) + " values for " +
                                                  std::to_string(k) + " rows of dim " + std::to_string(d));
  }
  std::vector<T> out(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    T s = 0;
    const T* r = rows.data() + static_cast<std::size_t>(i) * d;
    for (std::size_t j = 0; j < d; ++j) s += r[j] * f[j];
    out[static_cast<std::size_t>(i)] = scale * s;
  }
  const T mx = *std::max_element(out.begin(), out.end());
  T z = 0;
  for (T& v : out) z += (v = std::exp(v - mx));
  for (T& v : out) v /= z;
  return out;
}

template std::vector<float> match_probabilities(std::span<const float>, std::span<const float>, int, float);
template std::vector<double> match_probabilities(std::span<const double>, std::span<const double>, int, double);

std::vector<double> matching_head(std::span<const float> f, const clip::CandidateMatrix& p, float scale) {
  if (static_cast<int>(f.size()) != p.dim()) {
    throw Error(ErrorKind::DimensionMismatch, "feature dim " + std::to_string(f.size()) + " vs candidates " + std::to_string(p.dim()));
  }
  const std::vector<double> fd(f.begin(), f.end());
  const std::vector<double> rows(p.data().begin(), p.data().end());
  return match_probabilities<double>(fd, rows, p.size(), scale);
}

template <typename T>
tensor::Var<T> ctr_loss(const tensor::Var<T>& f, std::span<const int> labels, const tensor::Var<T>& candidates, T beta,
                        T scale) {
  if (f.rank() != 2 || candidates.rank() != 2 || f.dim(1) != candidates.dim(1)) {
    throw Error(ErrorKind::DimensionMismatch, "ctr_loss: " + tensor::shape_str(f.shape()) + " vs " + tensor::shape_str(candidates.shape()));
  }
  if (f.dim(0) != static_cast<int>(labels.size())) throw Error(ErrorKind::ShapeMismatch, "ctr_loss: label count");
  const int steps = f.dim(0), d = f.dim(1), k = candidates.dim(0);
  const auto cand = candidates.values();
  std::vector<T> df(f.numel(), T(0)), dc(candidates.numel(), T(0));
  T loss = 0;
  int count = 0;
  for (int s = 0; s < steps; ++s) {
    const int y = labels[static_cast<std::size_t>(s)];
    if (y == -1) continue;
    if (y < 0 || y >= k) throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(y) + " with " + std::to_string(k) + " candidates");
    ++count;
    const auto fs = f.values().subspan(static_cast<std::size_t>(s) * d, static_cast<std::size_t>(d));
    const std::vector<T> prob = match_probabilities<T>(fs, cand, k, scale);
    const T* py = cand.data() + static_cast<std::size_t>(y) * d;
    T reg = 0;
    for (int j = 0; j < d; ++j) reg += (py[j] - fs[j]) * (py[j] - fs[j]);
    loss += -std::log(prob[static_cast<std::size_t>(y)]) + beta * reg;

    T* g = df.data() + static_cast<std::size_t>(s) * d;
    for (int i = 0; i < k; ++i) {
      const T w = prob[static_cast<std::size_t>(i)] - (i == y ? T(1) : T(0));
      const T* ci = cand.data() + static_cast<std::size_t>(i) * d;
      T* gi = dc.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < d; ++j) {
        g[j] += scale * w * ci[j];
        gi[j] += scale * w * fs[j];
      }
    }
    T* gy = dc.data() + static_cast<std::size_t>(y) * d;
    for (int j = 0; j < d; ++j) {
      g[j] += T(2) * beta * (fs[j] - py[j]);
      gy[j] += T(2) * beta * (py[j] - fs[j]);
    }
  }
  if (count > 0) {
    const T inv = T(1) / static_cast<T>(count);
    loss *= inv;
    for (T& v : df) v *= inv;
    for (T& v : dc) v *= inv;
  }
  return tensor::fused_scalar<T>(loss, {f, candidates}, {std::move(df), std::move(dc)}, "ctr_loss");
}

template tensor::Var<float> ctr_loss(const tensor::Var<float>&, std::span<const int>, const tensor::Var<float>&, float, float);
template tensor::Var<double> ctr_loss(const tensor::Var<double>&, std::span<const int>, const tensor::Var<double>&, double, double);

// ---------------------------------------------------------------------------

CtrModel::CtrModel(CtrConfig cfg, int embed_dim, std::vector<int> fc_classes, std::uint64_t init_seed)
    : cfg_(std::move(cfg)), embed_dim_(embed_dim), fc_classes_(std::move(fc_classes)) {
  if (cfg_.head_mode == HeadMode::Fc && fc_classes_.empty()) throw Error(ErrorKind::Config, "fc head needs a class list");
  Rng rng(init_seed);
  int in = 1;
  const int n = static_cast<int>(cfg_.encoder_widths.size());
  // the last block keeps full resolution
  for (int i = 0; i < n; ++i) {
    const int out = cfg_.encoder_widths[static_cast<std::size_t>(i)];
    blocks_.emplace_back(params_, "enc.block" + std::to_string(i), in, out, i + 1 < n, rng);
    in = out;
  }
  if (in != cfg_.model_dim) enc_proj_ = nn::Dense(params_, "enc.proj", in, cfg_.model_dim, rng);
  const int pools = n - 1;
  const int mem_len = (glyph::kLineHeight >> pools) * (glyph::kLineWidth >> pools);
  enc_positions_ = params_.add("enc.positions", {mem_len, cfg_.model_dim}, cfg_.model_dim, rng);

  const int specials = 3;
  if (cfg_.head_mode == HeadMode::Match) {
    in_proj_ = params_.add("dec.in_proj", {embed_dim_, cfg_.model_dim}, embed_dim_, rng);
    in_table_ = params_.add("dec.specials", {specials, cfg_.model_dim}, cfg_.model_dim, rng);
  } else {
    in_table_ = params_.add("dec.tokens", {static_cast<int>(fc_classes_.size()) + specials, cfg_.model_dim}, cfg_.model_dim, rng);
  }
  const int max_len = std::max(cfg_.max_decode_len, glyph::kMaxLineChars) + 1;
  dec_positions_ = params_.add("dec.positions", {max_len, cfg_.model_dim}, cfg_.model_dim, rng);
  for (int i = 0; i < cfg_.layers; ++i) {
    layers_.emplace_back(params_, "dec.layer" + std::to_string(i), cfg_.model_dim, cfg_.heads, cfg_.ffn, rng);
  }
  final_ln_ = nn::LayerNorm(params_, "dec.final_ln", cfg_.model_dim);
  if (cfg_.head_mode == HeadMode::Match) {
    out_ = nn::Dense(params_, "dec.out", cfg_.model_dim, embed_dim_, rng, false);
    end_row_ = params_.add("dec.end_row", {1, embed_dim_}, embed_dim_, rng);
  } else {
    out_ = nn::Dense(params_, "dec.fc", cfg_.model_dim, static_cast<int>(fc_classes_.size()) + 1, rng);
  }
}

int CtrModel::init_from(const clip::ClipModel& clip) { return params_.copy_matching(clip.params(), "image.block", "enc.block"); }

Tensor CtrModel::encode(std::span<const glyph::Raster> lines) const {
  Tensor x = line_batch(lines);
  for (const auto& b : blocks_) x = b(x);
  x = tensor::to_sequence(x);
  if (enc_proj_.w.defined()) x = enc_proj_(x);
  return tensor::add_positional(x, enc_positions_);
}

int CtrModel::fc_index(int class_id) const {
  auto it = std::find(fc_classes_.begin(), fc_classes_.end(), class_id);
  if (it == fc_classes_.end()) throw Error(ErrorKind::CandidateMissing, "class " + std::to_string(class_id) + " is not an FC output");
  return static_cast<int>(it - fc_classes_.begin());
}

int CtrModel::input_row(int token, const clip::CandidateMatrix& p) const {
  const int k = cfg_.head_mode == HeadMode::Match ? p.size() : static_cast<int>(fc_classes_.size());
  if (token == kBos) return k;
  if (token == kPad) return k + 2;
  if (cfg_.head_mode == HeadMode::Fc) return fc_index(token);
  const int row = p.index_of(token);
  if (row < 0) throw Error(ErrorKind::CandidateMissing, "class " + std::to_string(token) + " has no candidate row");
  return row;
}

Tensor CtrModel::candidates(const clip::CandidateMatrix& p) const {
  if (p.dim() != embed_dim_) throw Error(ErrorKind::DimensionMismatch, "candidate dim " + std::to_string(p.dim()) + " vs model " + std::to_string(embed_dim_));
  const Tensor rows = Tensor::constant({p.size(), p.dim()}, p.data());
  return tensor::concat_rows(rows, tensor::l2_normalize(end_row_));
}

Tensor CtrModel::decode(const Tensor& memory, const std::vector<std::vector<int>>& inputs, const clip::CandidateMatrix& p) const {
  const int b = static_cast<int>(inputs.size());
  const int len = static_cast<int>(inputs.front().size());
  std::vector<int> flat;
  flat.reserve(static_cast<std::size_t>(b) * len);
  for (const auto& row : inputs) {
    if (static_cast<int>(row.size()) != len) throw Error(ErrorKind::ShapeMismatch, "decoder inputs must be rectangular");
    for (int t : row) flat.push_back(input_row(t, p));
  }
  Tensor table = in_table_;
  if (cfg_.head_mode == HeadMode::Match) {
    if (p.dim() != embed_dim_) throw Error(ErrorKind::DimensionMismatch, "candidate dim mismatch");
    const Tensor rows = Tensor::constant({p.size(), p.dim()}, p.data());
    table = tensor::concat_rows(tensor::dense(rows, in_proj_, Tensor{}), in_table_);
  }
  Tensor x = tensor::add_positional(tensor::embedding(table, std::span<const int>(flat), {b, len}), dec_positions_);
  for (const auto& layer : layers_) x = layer(x, memory);
  x = tensor::reshape(final_ln_(x), {b * len, cfg_.model_dim});
  x = out_(x);
  return cfg_.head_mode == HeadMode::Match ? tensor::l2_normalize(x) : x;
}

Tensor CtrModel::loss(std::span<const glyph::Raster> lines, const std::vector<std::vector<int>>& labels,
                      const clip::CandidateMatrix& p) const {
  if (lines.size() != labels.size() || lines.empty()) throw Error(ErrorKind::ShapeMismatch, "ctr loss: batch size");
  std::size_t longest = 0;
  for (const auto& l : labels) longest = std::max(longest, l.size());
  const int len = static_cast<int>(longest) + 1;
  const int end = cfg_.head_mode == HeadMode::Match ? p.size() : static_cast<int>(fc_classes_.size());
  std::vector<std::vector<int>> inputs;
  std::vector<int> targets;
  for (const auto& l : labels) {
    // position t reads BOS + label[0..t) and predicts label[t], then END
    std::vector<int> in{kBos};
    for (int c : l) {
      in.push_back(c);
      targets.push_back(input_row(c, p));
    }
    targets.push_back(end);
    in.resize(static_cast<std::size_t>(len), kPad);
    targets.resize(static_cast<std::size_t>(len) * (inputs.size() + 1), -1);  // PAD steps
    inputs.push_back(std::move(in));
  }
  const Tensor out = decode(encode(lines), inputs, p);
  if (cfg_.head_mode == HeadMode::Fc) return tensor::cross_entropy(out, targets);
  return ctr_loss<float>(out, targets, candidates(p), static_cast<float>(cfg_.beta), cfg_.logit_scale);
}

std::vector<DecodeResult> CtrModel::greedy_decode(std::span<const glyph::Raster> lines, const clip::CandidateMatrix& p) const {
  tensor::NoGradGuard guard;
  std::vector<DecodeResult> results;
  results.reserve(lines.size());
  constexpr std::size_t kChunk = 64;
  const bool match = cfg_.head_mode == HeadMode::Match;
  if (match && p.size() == 0) throw Error(ErrorKind::EmptyCandidates, "candidate matrix is empty");
  const Tensor cand = match ? candidates(p) : Tensor{};
  const int k_out = match ? p.size() + 1 : static_cast<int>(fc_classes_.size()) + 1;
  for (std::size_t start = 0; start < lines.size(); start += kChunk) {
    const auto chunk = lines.subspan(start, std::min(kChunk, lines.size() - start));
    const int b = static_cast<int>(chunk.size());
    const Tensor memory = encode(chunk);
    std::vector<std::vector<int>> prefix(static_cast<std::size_t>(b), std::vector<int>{kBos});
    std::vector<DecodeResult> res(static_cast<std::size_t>(b));
    std::vector<bool> done(static_cast<std::size_t>(b), false);
    int remaining = b;
    for (int step = 0; step < cfg_.max_decode_len && remaining > 0; ++step) {
      const Tensor out = decode(memory, prefix, p);
      const int len = step + 1;
      const int width = out.dim(1);
      for (int i = 0; i < b; ++i) {
        const auto row = out.values().subspan(static_cast<std::size_t>(i * len + step) * width, static_cast<std::size_t>(width));
        int best = 0;
        float best_score = 0;
        for (int c = 0; c < k_out; ++c) {
          float s = 0;
          if (match) {
            const auto r = cand.values().subspan(static_cast<std::size_t>(c) * width, static_cast<std::size_t>(width));
            for (int j = 0; j < width; ++j) s += r[j] * row[j];
          } else {
            s = row[static_cast<std::size_t>(c)];
          }
          if (c == 0 || s > best_score) {
            best = c;
            best_score = s;
          }
        }
        auto& pr = prefix[static_cast<std::size_t>(i)];
        if (done[static_cast<std::size_t>(i)]) {
          pr.push_back(kPad);
          continue;
        }
        if (best == k_out - 1) {
          done[static_cast<std::size_t>(i)] = true;
          --remaining;
          pr.push_back(kPad);
          continue;
        }
        const int cls = match ? p.class_ids()[static_cast<std::size_t>(best)] : fc_classes_[static_cast<std::size_t>(best)];
        res[static_cast<std::size_t>(i)].classes.push_back(cls);
        pr.push_back(cls);
      }
    }
    for (int i = 0; i < b; ++i) {
      res[static_cast<std::size_t>(i)].truncated = !done[static_cast<std::size_t>(i)];
      results.push_back(std::move(res[static_cast<std::size_t>(i)]));
    }
  }
  return results;
}

DecodeResult CtrModel::greedy_decode(const glyph::Raster& line, const clip::CandidateMatrix& p) const {
  return greedy_decode(std::span<const glyph::Raster>(&line, 1), p).front();
}

void CtrModel::save(const std::filesystem::path& path, const std::string& extra_metadata) const {
  std::ostringstream meta;
  meta << "model = ctr\n"
       << cfg_.to_text() << "ctr.embed_dim = " << embed_dim_ << "\n"
       << "ctr.fc_classes = " << join_ints(fc_classes_) << "\n"
       << extra_metadata;
  nn::save_checkpoint(path, nn::snapshot(params_, meta.str()));
}

CtrModel CtrModel::load(const std::filesystem::path& path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  const auto kv = config::KeyValues::parse(ckpt.metadata, path.string());
  if (kv.get("model", "") != "ctr") throw Error(ErrorKind::Checkpoint, path.string() + " is not a ctr checkpoint");
  CtrModel m(CtrConfig::from_text(ckpt.metadata), static_cast<int>(kv.get_int("ctr.embed_dim", 0)),
             kv.get_ints("ctr.fc_classes", {}), 0);
  nn::restore(m.params_, ckpt);
  return m;
}

// ---------------------------------------------------------------------------

std::vector<CtrEpochLog> train_ctr(CtrModel& model, const clip::CandidateMatrix& p, const glyph::Dataset& lines,
                                   const std::function<void(const CtrEpochLog&)>& on_epoch) {
  if (lines.size() == 0) throw Error(ErrorKind::EmptyDataset, "train_ctr: no lines");
  const bool match = model.config().head_mode == HeadMode::Match;
  for (const auto& label : lines.labels) {
    for (int c : label) {
      const bool ok = match ? p.index_of(c) >= 0
                            : std::find(model.fc_classes().begin(), model.fc_classes().end(), c) != model.fc_classes().end();
      if (!ok) throw Error(ErrorKind::CandidateMissing, "training label " + std::to_string(c) + " has no candidate");
    }
  }
  const CtrConfig& cfg = model.config();
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  nn::Adam adam(cfg.adam);
  std::vector<int> order(lines.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  const auto bs = static_cast<std::size_t>(std::max(cfg.batch_size, 1));
  std::vector<CtrEpochLog> log;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<glyph::Raster> imgs;
      std::vector<std::vector<int>> labels;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
        imgs.push_back(lines.images[static_cast<std::size_t>(order[i])]);
        labels.push_back(lines.labels[static_cast<std::size_t>(order[i])]);
      }
      const Tensor l = model.loss(imgs, labels, p);
      tensor::backward(l);
      adam.step(model.params());
      sum += l.item();
      ++batches;
    }
    log.push_back({epoch, sum / batches});
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

void save_ctr_log(const std::filesystem::path& path, const std::vector<CtrEpochLog>& log) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << "epoch\tL_ctr\n";
  for (const auto& e : log) f << e.epoch << '\t' << format_float(e.loss) << '\n';
}

void add_candidate(clip::CandidateMatrix& p, int class_id, const ids::TokenSeq& tokens, const clip::ClipModel& model) {
  if (p.index_of(class_id) >= 0) throw Error(ErrorKind::DuplicateClass, "class " + std::to_string(class_id) + " already present");
  p.append(class_id, model.encode_text(tokens));
}

void save_predictions(const std::filesystem::path& path, const std::vector<std::string>& sample_ids,
                      const std::vector<DecodeResult>& results) {
  if (sample_ids.size() != results.size()) throw Error(ErrorKind::LengthMismatch, "predictions: id count");
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (std::size_t i = 0; i < results.size(); ++i) {
    f << sample_ids[i] << '\t';
    for (std::size_t k = 0; k < results[i].classes.size(); ++k) f << (k ? " " : "") << results[i].classes[k];
    f << '\t' << (results[i].truncated ? 1 : 0) << '\n';
  }
}

}  // namespace radicalign::ctr
