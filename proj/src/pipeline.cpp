#include "radicalign/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace radicalign::pipeline {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string RunConfig::to_text() const {
  config::KeyValues kv = config::KeyValues::parse(clip.to_text() + ctr.to_text());
  kv.set("seed", std::to_string(seed));
  kv.set("lexicon.radicals", std::to_string(lexicon.radicals));
  kv.set("lexicon.classes", std::to_string(lexicon.classes));
  kv.set("lexicon.max_depth", std::to_string(lexicon.max_depth));
  kv.set("lexicon.seed", std::to_string(lexicon.seed));
  kv.set("pretrain.lambda", fmt(pretrain.lambda));
  kv.set("pretrain.batch_size", std::to_string(pretrain.batch_size));
  kv.set("pretrain.lr", fmt(pretrain.adam.lr));
  kv.set("pretrain.beta1", fmt(pretrain.adam.beta1));
  kv.set("pretrain.beta2", fmt(pretrain.adam.beta2));
  kv.set("pretrain.epochs", std::to_string(pretrain.epochs));
  kv.set("pretrain.seed", std::to_string(pretrain.seed));
  kv.set("split", split.to_string());
  kv.set("data.regime", std::string(glyph::regime_name(regime)));
  kv.set("data.train_samples_per_class", std::to_string(train_samples_per_class));
  kv.set("data.test_samples_per_class", std::to_string(test_samples_per_class));
  kv.set("data.train_lines", std::to_string(train_lines));
  kv.set("data.test_lines", std::to_string(test_lines));
  return kv.to_text();
}

RunConfig RunConfig::from_kv(const config::KeyValues& kv) {
  RunConfig c;
  c.seed = kv.get_u64("seed", c.seed);
  c.apply_seed(c.seed);
  const std::string text = kv.to_text();
  c.clip = clip::ClipConfig::from_text(text);
  const std::uint64_t ctr_seed = c.ctr.seed;
  c.ctr = ctr::CtrConfig::from_text(text);
  if (!kv.has("ctr.seed")) c.ctr.seed = ctr_seed;
  c.lexicon.radicals = static_cast<int>(kv.get_int("lexicon.radicals", c.lexicon.radicals));
  c.lexicon.classes = static_cast<int>(kv.get_int("lexicon.classes", c.lexicon.classes));
  c.lexicon.max_depth = static_cast<int>(kv.get_int("lexicon.max_depth", c.lexicon.max_depth));
  c.lexicon.seed = kv.get_u64("lexicon.seed", c.lexicon.seed);
  c.pretrain.lambda = kv.get_double("pretrain.lambda", c.pretrain.lambda);
  c.pretrain.batch_size = static_cast<int>(kv.get_int("pretrain.batch_size", c.pretrain.batch_size));
  c.pretrain.adam.lr = kv.get_double("pretrain.lr", c.pretrain.adam.lr);
  c.pretrain.adam.beta1 = kv.get_double("pretrain.beta1", c.pretrain.adam.beta1);
  c.pretrain.adam.beta2 = kv.get_double("pretrain.beta2", c.pretrain.adam.beta2);
  c.pretrain.epochs = static_cast<int>(kv.get_int("pretrain.epochs", c.pretrain.epochs));
  c.pretrain.seed = kv.get_u64("pretrain.seed", c.pretrain.seed);
  if (kv.has("split")) c.split = eval::SplitSpec::parse(kv.get("split", ""));
  c.regime = glyph::parse_regime(kv.get("data.regime", std::string(glyph::regime_name(c.regime))));
  c.train_samples_per_class = static_cast<int>(kv.get_int("data.train_samples_per_class", c.train_samples_per_class));
  c.test_samples_per_class = static_cast<int>(kv.get_int("data.test_samples_per_class", c.test_samples_per_class));
  c.train_lines = static_cast<int>(kv.get_int("data.train_lines", c.train_lines));
  c.test_lines = static_cast<int>(kv.get_int("data.test_lines", c.test_lines));
  if (c.pretrain.lambda < 0) throw Error(ErrorKind::Config, "pretrain.lambda must be >= 0");
  return c;
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  const SubSeeds sub(s);
  lexicon.seed = sub.lexicon;
  pretrain.seed = sub.shuffle;
  ctr.seed = sub.ctr_shuffle;
}

SubSeeds::SubSeeds(std::uint64_t seed)
    : lexicon(derive_seed(seed, "lexicon")),
      data(derive_seed(seed, "data")),
      init(derive_seed(seed, "init")),
      shuffle(derive_seed(seed, "shuffle")),
      ctr_init(derive_seed(seed, "ctr_init")),
      ctr_shuffle(derive_seed(seed, "ctr_shuffle")) {}

// ---------------------------------------------------------------------------

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  std::filesystem::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw Error(ErrorKind::Io, "run directory " + dir.string() + " is locked by another process (" + path_.string() + ")");
  const std::string pid = std::to_string(::getpid()) + "\n";
  if (::write(fd, pid.data(), pid.size()) < 0) {
    ::close(fd);
    throw Error(ErrorKind::Io, "cannot write " + path_.string());
  }
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

void RunManifest::save(const std::filesystem::path& dir) const {
  std::ofstream f(dir / "manifest.txt");
  if (!f) throw Error(ErrorKind::Io, "cannot write manifest in " + dir.string());
  f << "command = " << command << "\n";
  f << "config_hash = " << hex64(config_hash) << "\n";
  f << "lexicon_hash = " << hex64(lexicon_hash) << "\n";
  auto list = [&](const char* key, const std::vector<std::filesystem::path>& paths) {
    for (std::size_t i = 0; i < paths.size(); ++i) {
      if (!std::filesystem::exists(paths[i])) throw Error(ErrorKind::Io, "manifest references missing file " + paths[i].string());
      f << key << "." << i << " = " << paths[i].string() << "\n";
    }
  };
  list("checkpoint", checkpoints);
  list("report", reports);
  f << "wall_clock_seconds = " << fmt(wall_clock_seconds) << "\n";
}

void save_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::ofstream f(dir / "config.cfg");
  if (!f) throw Error(ErrorKind::Io, "cannot write config in " + dir.string());
  f << cfg.to_text();
}

// ---------------------------------------------------------------------------

std::vector<int> all_classes(const ids::Lexicon& lex) {
  std::vector<int> out(static_cast<std::size_t>(lex.size()));
  for (int c = 0; c < lex.size(); ++c) out[static_cast<std::size_t>(c)] = c;
  return out;
}

std::set<int> unseen_classes(const eval::Split& split) {
  const std::set<int> train(split.train.begin(), split.train.end());
  std::set<int> out;
  for (int c : split.test) {
    if (!train.count(c)) out.insert(c);
  }
  return out;
}

RunData make_run_data(const RunConfig& cfg, unsigned parts, int threads) {
  RunData d;
  d.lexicon = glyph::build_lexicon(cfg.lexicon);
  d.split = eval::make_split(d.lexicon, cfg.split);
  const glyph::RadicalInventory inv(d.lexicon);
  const SubSeeds sub(cfg.seed);
  std::vector<int> both = d.split.train;
  for (int c : unseen_classes(d.split)) both.push_back(c);
  std::sort(both.begin(), both.end());

  if (parts & kGlyphData) {
    glyph::GlyphDatasetSpec g;
    g.classes = d.split.train;
    g.samples_per_class = cfg.train_samples_per_class;
    g.regime = cfg.regime;
    g.seed = derive_seed(sub.data, "train_glyphs");
    d.train_glyphs = glyph::make_glyph_dataset(d.lexicon, inv, g, threads);
    g.classes = both;
    g.samples_per_class = cfg.test_samples_per_class;
    g.seed = derive_seed(sub.data, "test_glyphs");
    d.test_glyphs = glyph::make_glyph_dataset(d.lexicon, inv, g, threads);
  }
  if (parts & kLineData) {
    glyph::LineDatasetSpec l;
    l.classes = d.split.train;
    l.lines = cfg.train_lines;
    l.regime = cfg.regime;
    l.seed = derive_seed(sub.data, "train_lines");
    d.train_lines = glyph::make_line_dataset(d.lexicon, inv, l, threads);
    l.classes = both;
    l.lines = cfg.test_lines;
    l.seed = derive_seed(sub.data, "test_lines");
    d.test_lines = glyph::make_line_dataset(d.lexicon, inv, l, threads);
  }
  return d;
}

clip::ClipModel run_pretrain(const RunConfig& cfg, const RunData& data, clip::TrainingLog* log,
                             const std::function<void(const clip::EpochLog&)>& on_epoch) {
  clip::ClipModel model(cfg.clip, data.lexicon.alphabet(), SubSeeds(cfg.seed).init);
  clip::TrainingLog l = clip::pretrain(model, cfg.pretrain, data.lexicon, data.train_glyphs, on_epoch);
  if (log) *log = std::move(l);
  return model;
}

CcrResult evaluate_ccr(const clip::ClipModel& model, const clip::CandidateMatrix& p, const glyph::Dataset& glyphs,
                       const std::set<int>& unseen) {
  CcrResult r;
  r.predictions = clip::ccr_recognize_batch(model, glyphs.images, p);
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    const int gt = glyphs.labels[i].at(0);
    eval::CharTally& t = unseen.count(gt) ? r.unseen : r.seen;
    ++t.total;
    if (r.predictions[i] == gt) ++t.correct;
  }
  return r;
}

ctr::CtrModel make_ctr_model(const RunConfig& cfg, const RunData& data, int embed_dim) {
  const std::vector<int> fc = cfg.ctr.head_mode == ctr::HeadMode::Fc ? data.split.train : std::vector<int>{};
  return ctr::CtrModel(cfg.ctr, embed_dim, fc, SubSeeds(cfg.seed).ctr_init);
}

CtrResult evaluate_ctr(const ctr::CtrModel& model, const clip::CandidateMatrix& p, const glyph::Dataset& lines,
                       const std::set<int>& unseen, const std::map<int, long>& train_counts) {
  CtrResult r;
  eval::Stopwatch sw;
  r.decoded = model.greedy_decode(lines.images, p);
  const double secs = sw.seconds();
  for (const auto& d : r.decoded) r.predictions.push_back(d.classes);
  std::set<int> seen;
  for (const auto& l : lines.labels) {
    for (int c : l) {
      if (!unseen.count(c)) seen.insert(c);
    }
  }
  r.seen = eval::char_accuracy(r.predictions, lines.labels, seen);
  r.unseen = eval::char_accuracy(r.predictions, lines.labels, unseen);
  eval::CharTally all;
  all.correct = r.seen.correct + r.unseen.correct;
  all.total = r.seen.total + r.unseen.total;
  r.report.cacc = all.accuracy();
  r.report.lacc = eval::lacc(r.predictions, lines.labels);
  r.report.ned = eval::ned(r.predictions, lines.labels);
  r.report.samples = static_cast<long>(lines.size());
  r.report.buckets = eval::few_shot_report(train_counts, r.predictions, lines.labels);
  const double batches = std::ceil(static_cast<double>(lines.size()) / 64.0);
  r.report.seconds_per_batch = batches > 0 ? secs / batches : 0.0;
  r.report.extra["seen_char_acc"] = r.seen.accuracy();
  r.report.extra["unseen_char_acc"] = r.unseen.accuracy();
  return r;
}

void save_lexicon(const std::filesystem::path& dir, const ids::Lexicon& lex) {
  lex.save(dir / "lexicon.tsv", dir / "strokes.tsv");
}

ids::Lexicon load_lexicon(const std::filesystem::path& dir) {
  return ids::Lexicon::load(dir / "lexicon.tsv", dir / "strokes.tsv");
}

}  // namespace radicalign::pipeline
