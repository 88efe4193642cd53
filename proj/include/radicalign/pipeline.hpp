#pragma once

// Run configuration, seeds, run-directory ownership and manifests shared by
// the command-line tool and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "radicalign/clip.hpp"
#include "radicalign/config.hpp"
#include "radicalign/ctr.hpp"
#include "radicalign/eval.hpp"
#include "radicalign/glyph.hpp"

namespace radicalign::pipeline {

struct RunConfig {
  std::uint64_t seed = 0;
  glyph::LexiconBuildOptions lexicon{};
  clip::ClipConfig clip{};
  clip::PretrainConfig pretrain{};
  ctr::CtrConfig ctr{};
  eval::SplitSpec split{eval::SplitKind::CharZeroShot, 240, 60, 0};
  glyph::Regime regime = glyph::Regime::Printed;
  int train_samples_per_class = 40;
  int test_samples_per_class = 10;
  int train_lines = 4000;
  int test_lines = 400;

  /// Every field as sorted `key = value` lines; from_text(to_text()) is the
  /// identity.
  std::string to_text() const;
  static RunConfig from_kv(const config::KeyValues& kv);
  static RunConfig from_text(const std::string& text) { return from_kv(config::KeyValues::parse(text)); }
  std::uint64_t hash() const { return fnv1a(to_text()); }

  /// Re-derives every component seed from `seed`.
  void apply_seed(std::uint64_t s);
};

/// Named sub-seeds; all randomness of a run flows from one --seed.
struct SubSeeds {
  std::uint64_t lexicon, data, init, shuffle, ctr_init, ctr_shuffle;
  explicit SubSeeds(std::uint64_t seed);
};

/// Exclusive ownership of a run directory via `DIR/.lock`.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct RunManifest {
  std::string command;
  std::uint64_t config_hash = 0;
  std::uint64_t lexicon_hash = 0;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::filesystem::path> reports;
  double wall_clock_seconds = 0;

  /// Writes DIR/manifest.txt; every referenced file must exist (Io otherwise).
  void save(const std::filesystem::path& dir) const;
};

/// Writes DIR/config.cfg with the resolved configuration.
void save_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Shared run steps

inline constexpr unsigned kGlyphData = 1;
inline constexpr unsigned kLineData = 2;

struct RunData {
  ids::Lexicon lexicon;
  eval::Split split;
  glyph::Dataset train_glyphs;  // split.train classes
  glyph::Dataset test_glyphs;   // split.train and split.test classes, fresh samples
  glyph::Dataset train_lines;   // over split.train
  glyph::Dataset test_lines;    // over split.train and split.test
};

/// Builds the lexicon, split and the requested datasets from `cfg` alone.
RunData make_run_data(const RunConfig& cfg, unsigned parts, int threads = 0);

std::vector<int> all_classes(const ids::Lexicon& lex);
/// Classes of split.test that are not in split.train.
std::set<int> unseen_classes(const eval::Split& split);

/// Fresh model from the init sub-seed, pre-trained on data.train_glyphs.
clip::ClipModel run_pretrain(const RunConfig& cfg, const RunData& data, clip::TrainingLog* log = nullptr,
                             const std::function<void(const clip::EpochLog&)>& on_epoch = {});

struct CcrResult {
  std::vector<int> predictions;  // one per test glyph
  eval::CharTally seen, unseen;
};
CcrResult evaluate_ccr(const clip::ClipModel& model, const clip::CandidateMatrix& p, const glyph::Dataset& glyphs,
                       const std::set<int>& unseen);

/// Fresh recognizer from the ctr_init sub-seed; FC mode uses split.train as
/// its vocabulary.
ctr::CtrModel make_ctr_model(const RunConfig& cfg, const RunData& data, int embed_dim);

struct CtrResult {
  std::vector<ctr::DecodeResult> decoded;
  std::vector<eval::Line> predictions;
  eval::MetricsReport report;
  eval::CharTally seen, unseen;
};
CtrResult evaluate_ctr(const ctr::CtrModel& model, const clip::CandidateMatrix& p, const glyph::Dataset& lines,
                       const std::set<int>& unseen, const std::map<int, long>& train_counts);

/// lexicon.tsv and strokes.tsv inside a run directory.
void save_lexicon(const std::filesystem::path& dir, const ids::Lexicon& lex);
ids::Lexicon load_lexicon(const std::filesystem::path& dir);

}  // namespace radicalign::pipeline
