// radicalign: command-line front end for lexicon building, synthesis,
// pre-training, recognizer training, evaluation and ablations.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "radicalign/pipeline.hpp"

using namespace radicalign;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool seed_required) {
  cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override, key=value (repeatable)");
  auto* s = cmd->add_option("--seed", c.seed, "root seed; every sub-seed derives from it");
  if (seed_required) s->required();
  cmd->add_option("--out", c.out, "run directory")->required();
}

pipeline::RunConfig resolve(const Common& c, const std::string& fallback_config = "") {
  config::KeyValues kv;
  if (!c.config.empty()) {
    kv = config::KeyValues::load(c.config);
  } else if (!fallback_config.empty() && fs::exists(fallback_config)) {
    kv = config::KeyValues::load(fallback_config);
  }
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Config, "--set expects key=value, got '" + o + "'");
    const auto merged = config::KeyValues::parse(o.substr(0, eq) + " = " + o.substr(eq + 1), "--set");
    for (const auto& [k, v] : merged.items()) kv.set(k, v);
  }
  if (c.seed) {
    // a new root seed re-derives every sub-seed
    config::KeyValues fresh;
    for (const auto& [k, v] : kv.items()) {
      if (k != "lexicon.seed" && k != "pretrain.seed" && k != "ctr.seed") fresh.set(k, v);
    }
    fresh.set("seed", std::to_string(*c.seed));
    kv = fresh;
  }
  return pipeline::RunConfig::from_kv(kv);
}

class Run {
 public:
  Run(std::string command, const fs::path& dir) : dir_(dir), lock_(dir) { manifest_.command = std::move(command); }
  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }
  void checkpoint(const std::string& name) { manifest_.checkpoints.push_back(path(name)); }
  void report(const std::string& name) { manifest_.reports.push_back(path(name)); }
  void finish(const pipeline::RunConfig& cfg, const ids::Lexicon& lex) {
    pipeline::save_resolved_config(dir_, cfg);
    manifest_.config_hash = cfg.hash();
    manifest_.lexicon_hash = lex.hash();
    manifest_.wall_clock_seconds = clock_.seconds();
    manifest_.save(dir_);
  }

 private:
  fs::path dir_;
  pipeline::RunLock lock_;
  pipeline::RunManifest manifest_;
  eval::Stopwatch clock_;
};

void say(const std::string& s) { std::cout << s << std::endl; }

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

void save_split(const fs::path& path, const eval::Split& s) {
  std::ofstream f(path);
  f << "class\tside\n";
  for (int c : s.train) f << c << "\ttrain\n";
  for (int c : s.test) f << c << "\ttest\n";
}

void save_counts(const fs::path& path, const std::map<int, long>& counts) {
  std::ofstream f(path);
  for (const auto& [c, n] : counts) f << c << '\t' << n << '\n';
}

std::map<int, long> load_counts(const fs::path& path) {
  std::map<int, long> out;
  std::ifstream f(path);
  int c;
  long n;
  while (f >> c >> n) out[c] = n;
  return out;
}

// ---------------------------------------------------------------------------

int cmd_lexicon_build(const Common& c) {
  const auto cfg = resolve(c);
  Run run("lexicon build", c.out);
  const auto lex = glyph::build_lexicon(cfg.lexicon);
  pipeline::save_lexicon(run.dir(), lex);
  run.report("lexicon.tsv");
  run.finish(cfg, lex);
  say("lexicon: " + std::to_string(lex.size()) + " classes, " + std::to_string(lex.radical_count()) +
      " radicals, hash " + hex64(lex.hash()));
  return 0;
}

int cmd_lexicon_lint(const std::string& dir) {
  const auto lex = pipeline::load_lexicon(dir);  // validates rows and IDS uniqueness
  const glyph::RadicalInventory inv(lex);
  const auto strokes = lex.stroke_collisions();
  const auto glyphs = glyph::find_glyph_collisions(lex, inv);
  for (const auto& g : strokes) {
    std::string line = "stroke collision:";
    for (int cls : g) line += " " + std::to_string(cls);
    say(line);
  }
  for (const auto& [a, b] : glyphs) std::cerr << "glyph collision: " << a << " " << b << "\n";
  say(std::to_string(lex.size()) + " classes, " + std::to_string(strokes.size()) + " stroke collision groups, " +
      std::to_string(glyphs.size()) + " glyph collisions");
  return glyphs.empty() ? 0 : 1;
}

int cmd_synth(const Common& c) {
  const auto cfg = resolve(c);
  Run run("synth", c.out);
  const auto data = pipeline::make_run_data(cfg, pipeline::kGlyphData | pipeline::kLineData);
  const auto h = data.lexicon.hash();
  glyph::save_dataset(data.train_glyphs, run.path("train_glyphs"), cfg.regime, h);
  glyph::save_dataset(data.test_glyphs, run.path("test_glyphs"), cfg.regime, h);
  glyph::save_dataset(data.train_lines, run.path("train_lines"), cfg.regime, h);
  glyph::save_dataset(data.test_lines, run.path("test_lines"), cfg.regime, h);
  pipeline::save_lexicon(run.dir(), data.lexicon);
  save_split(run.path("split.tsv"), data.split);
  for (const char* d : {"train_glyphs", "test_glyphs", "train_lines", "test_lines"}) run.report(std::string(d) + "/manifest.tsv");
  run.report("split.tsv");
  run.finish(cfg, data.lexicon);
  say("synth: " + std::to_string(data.train_glyphs.size()) + "/" + std::to_string(data.test_glyphs.size()) +
      " glyphs, " + std::to_string(data.train_lines.size()) + "/" + std::to_string(data.test_lines.size()) + " lines");
  return 0;
}

int cmd_pretrain(const Common& c) {
  const auto cfg = resolve(c);
  Run run("pretrain", c.out);
  const auto data = pipeline::make_run_data(cfg, pipeline::kGlyphData);
  clip::TrainingLog log;
  const auto model = pipeline::run_pretrain(cfg, data, &log, [](const clip::EpochLog& e) {
    std::fprintf(stderr, "epoch %d  L_T %.4f  L_I %.4f  L_pre %.4f\n", e.epoch, e.lt, e.li, e.pre);
  });
  model.save(run.path("clip.ckpt"));
  log.save_tsv(run.path("pretrain_log.tsv"));
  pipeline::save_lexicon(run.dir(), data.lexicon);
  run.checkpoint("clip.ckpt");
  run.report("pretrain_log.tsv");
  run.finish(cfg, data.lexicon);
  say("pretrain: " + std::to_string(log.epochs.size()) + " epochs, final L_pre " +
      std::to_string(log.epochs.empty() ? 0.0 : log.epochs.back().pre));
  return 0;
}

int cmd_export(const Common& c, const std::string& model_dir) {
  const auto cfg = resolve(c, model_dir + "/config.cfg");
  Run run("export-candidates", c.out);
  const auto model = clip::ClipModel::load(fs::path(model_dir) / "clip.ckpt");
  const auto lex = pipeline::load_lexicon(model_dir);
  const auto p = clip::export_candidates(model, lex, pipeline::all_classes(lex));
  p.save_tsv(run.path("candidates.tsv"));
  pipeline::save_lexicon(run.dir(), lex);
  run.report("candidates.tsv");
  run.finish(cfg, lex);
  say("candidates: " + std::to_string(p.size()) + " x " + std::to_string(p.dim()));
  return 0;
}

int cmd_train_ctr(const Common& c, const std::string& model_dir) {
  const auto cfg = resolve(c, model_dir + "/config.cfg");
  Run run("train-ctr", c.out);
  const auto clip_model = clip::ClipModel::load(fs::path(model_dir) / "clip.ckpt");
  const auto data = pipeline::make_run_data(cfg, pipeline::kLineData);
  if (data.lexicon.hash() != pipeline::load_lexicon(model_dir).hash()) {
    throw Error(ErrorKind::Config, "lexicon of " + model_dir + " differs from the configured lexicon");
  }
  const auto p = clip::export_candidates(clip_model, data.lexicon, pipeline::all_classes(data.lexicon));
  auto model = pipeline::make_ctr_model(cfg, data, p.dim());
  if (cfg.ctr.init_from_pretrain) say("copied " + std::to_string(model.init_from(clip_model)) + " encoder tensors");
  const auto log = ctr::train_ctr(model, p, data.train_lines, [](const ctr::CtrEpochLog& e) {
    std::fprintf(stderr, "epoch %d  loss %.4f\n", e.epoch, e.loss);
  });
  model.save(run.path("ctr.ckpt"));
  p.save_tsv(run.path("candidates.tsv"));
  ctr::save_ctr_log(run.path("ctr_log.tsv"), log);
  save_counts(run.path("train_counts.tsv"), eval::occurrence_counts(data.train_lines.labels));
  pipeline::save_lexicon(run.dir(), data.lexicon);
  run.checkpoint("ctr.ckpt");
  run.report("candidates.tsv");
  run.report("ctr_log.tsv");
  run.report("train_counts.tsv");
  run.finish(cfg, data.lexicon);
  say("train-ctr: " + std::to_string(log.size()) + " epochs, final loss " +
      std::to_string(log.empty() ? 0.0 : log.back().loss));
  return 0;
}

int cmd_eval(const Common& c, const std::string& model_dir, const std::string& dataset, const std::string& split_text,
             const std::string& candidates, const std::string& lexicon_dir) {
  const auto cfg = resolve(c, model_dir + "/config.cfg");
  Run run("eval", c.out);
  const auto lex = pipeline::load_lexicon(lexicon_dir.empty() ? model_dir : lexicon_dir);
  const auto split = eval::make_split(lex, eval::SplitSpec::parse(split_text));
  const auto unseen = pipeline::unseen_classes(split);
  const auto ds = glyph::load_dataset(dataset);
  std::vector<std::string> ids = ds.files;
  eval::MetricsReport report;

  const bool is_ctr = fs::exists(fs::path(model_dir) / "ctr.ckpt");
  if (!is_ctr && !fs::exists(fs::path(model_dir) / "clip.ckpt")) {
    throw Error(ErrorKind::Io, model_dir + " holds neither clip.ckpt nor ctr.ckpt");
  }
  if (is_ctr) {
    if (ds.kind != "line") throw Error(ErrorKind::Config, "a recognizer run needs a line dataset");
    const auto model = ctr::CtrModel::load(fs::path(model_dir) / "ctr.ckpt");
    const auto p = clip::CandidateMatrix::load_tsv(candidates.empty() ? fs::path(model_dir) / "candidates.tsv" : fs::path(candidates));
    const auto r = pipeline::evaluate_ctr(model, p, ds, unseen, load_counts(fs::path(model_dir) / "train_counts.tsv"));
    report = r.report;
    ctr::save_predictions(run.path("predictions.tsv"), ids, r.decoded);
    eval::save_per_sample_csv(run.path("per_sample.csv"), ids, r.predictions, ds.labels);
  } else {
    if (ds.kind != "glyph") throw Error(ErrorKind::Config, "a pre-trained model needs a glyph dataset");
    const auto model = clip::ClipModel::load(fs::path(model_dir) / "clip.ckpt");
    const auto p = candidates.empty() ? clip::export_candidates(model, lex, pipeline::all_classes(lex))
                                      : clip::CandidateMatrix::load_tsv(candidates);
    eval::Stopwatch sw;
    const auto r = pipeline::evaluate_ccr(model, p, ds, unseen);
    std::vector<int> gt;
    std::vector<eval::Line> preds, labels;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      gt.push_back(ds.labels[i].at(0));
      preds.push_back({r.predictions[i]});
      labels.push_back(ds.labels[i]);
    }
    report.cacc = eval::cacc(r.predictions, gt);
    report.lacc = report.cacc;
    report.ned = eval::ned(preds, labels);
    report.samples = static_cast<long>(ds.size());
    report.seconds_per_batch = sw.seconds() / std::max(1.0, std::ceil(static_cast<double>(ds.size()) / 128.0));
    report.extra["seen_cacc"] = r.seen.accuracy();
    report.extra["unseen_cacc"] = r.unseen.accuracy();
    eval::save_per_sample_csv(run.path("per_sample.csv"), ids, preds, labels);
  }
  report.save_tsv(run.path("metrics.tsv"));
  run.report("metrics.tsv");
  run.report("per_sample.csv");
  run.finish(cfg, lex);
  say(report.summary());
  return 0;
}

int cmd_ablate(const Common& c, const std::string& param_name, const std::vector<std::string>& values) {
  const auto base = resolve(c);
  Run run("ablate", c.out);
  const auto param = eval::parse_ablation_param(param_name);
  if (values.empty()) throw Error(ErrorKind::Config, "--values is empty");
  const bool lines = param != eval::AblationParam::Lambda;
  const auto data = pipeline::make_run_data(base, pipeline::kGlyphData | (lines ? pipeline::kLineData : 0u));
  const auto unseen = pipeline::unseen_classes(data.split);
  const auto all = pipeline::all_classes(data.lexicon);
  const auto counts = eval::occurrence_counts(data.train_lines.labels);

  std::optional<clip::ClipModel> shared;
  if (lines) shared.emplace(pipeline::run_pretrain(base, data));

  const auto rows = eval::ablation_sweep(param, values, [&](const std::string& v) {
    pipeline::RunConfig cfg = base;
    std::map<std::string, double> m;
    if (param == eval::AblationParam::Lambda) {
      cfg.pretrain.lambda = std::stod(v);
      const auto model = pipeline::run_pretrain(cfg, data);
      const auto r = pipeline::evaluate_ccr(model, clip::export_candidates(model, data.lexicon, all), data.test_glyphs, unseen);
      m["seen_cacc"] = r.seen.accuracy();
      m["unseen_cacc"] = r.unseen.accuracy();
    } else {
      if (param == eval::AblationParam::Beta) cfg.ctr.beta = std::stod(v);
      if (param == eval::AblationParam::HeadMode) cfg.ctr.head_mode = ctr::parse_head_mode(v);
      if (param == eval::AblationParam::RegTerm) {
        if (v != "on" && v != "off") throw Error(ErrorKind::Config, "reg_term values are on|off");
        if (v == "off") cfg.ctr.beta = 0.0;
      }
      const auto p = clip::export_candidates(*shared, data.lexicon, all);
      auto model = pipeline::make_ctr_model(cfg, data, p.dim());
      ctr::train_ctr(model, p, data.train_lines);
      const auto r = pipeline::evaluate_ctr(model, p, data.test_lines, unseen, counts);
      m["cacc"] = r.report.cacc;
      m["lacc"] = r.report.lacc;
      m["ned"] = r.report.ned;
      m["seen_char_acc"] = r.seen.accuracy();
      m["unseen_char_acc"] = r.unseen.accuracy();
    }
    std::string line = std::string(eval::ablation_param_name(param)) + "=" + v;
    for (const auto& [k, x] : m) line += "  " + k + " " + pct(x);
    say(line);
    return m;
  });
  eval::save_ablation_tsv(run.path("ablation.tsv"), param, rows);
  run.report("ablation.tsv");
  run.finish(base, data.lexicon);
  return 0;
}

int cmd_dump(const Common& c, const std::string& model_dir, const std::string& dataset) {
  const auto cfg = resolve(c, model_dir + "/config.cfg");
  Run run("dump-embeddings", c.out);
  const auto model = clip::ClipModel::load(fs::path(model_dir) / "clip.ckpt");
  const auto lex = pipeline::load_lexicon(model_dir);
  const auto p = clip::export_candidates(model, lex, pipeline::all_classes(lex));
  auto write_row = [](std::ofstream& f, int cls, const std::string& label, std::span<const float> v) {
    f << cls << '\t' << label;
    char buf[32];
    for (float x : v) {
      std::snprintf(buf, sizeof buf, "\t%.7g", static_cast<double>(x));
      f << buf;
    }
    f << '\n';
  };
  {
    std::ofstream f(run.path("embeddings.tsv"));
    for (int k = 0; k < p.size(); ++k) {
      const int cls = p.class_ids()[static_cast<std::size_t>(k)];
      write_row(f, cls, lex.entry(cls).name, p.row(k));
    }
  }
  run.report("embeddings.tsv");
  if (!dataset.empty()) {
    const auto ds = glyph::load_dataset(dataset);
    std::ofstream f(run.path("image_embeddings.tsv"));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const int cls = ds.labels[i].at(0);
      write_row(f, cls, ds.files[i], model.encode_image(ds.images[i]));
    }
    f.close();
    run.report("image_embeddings.tsv");
  }
  run.finish(cfg, lex);
  say("dumped " + std::to_string(p.size()) + " class embeddings");
  return 0;
}

int cmd_add_class(const Common& c, const std::string& model_dir, const std::string& candidates, const std::string& ids_text,
                  const std::string& name) {
  const auto cfg = resolve(c, model_dir + "/config.cfg");
  Run run("add-class", c.out);
  const auto model = clip::ClipModel::load(fs::path(model_dir) / "clip.ckpt");
  const fs::path lex_dir = fs::exists(fs::path(candidates).parent_path() / "lexicon.tsv") ? fs::path(candidates).parent_path()
                                                                                           : fs::path(model_dir);
  auto lex = pipeline::load_lexicon(lex_dir);
  auto p = clip::CandidateMatrix::load_tsv(candidates);
  const auto tree = ids::parse_ids(lex.tokens_from_text(ids_text, model.alphabet()), model.alphabet());
  const int cls = lex.add_class(name.empty() ? "new" + std::to_string(lex.size()) : name, tree);
  ctr::add_candidate(p, cls, ids::tokens_for_level(cls, lex, model.config().level, model.alphabet()), model);
  p.save_tsv(run.path("candidates.tsv"));
  pipeline::save_lexicon(run.dir(), lex);
  run.report("candidates.tsv");
  run.report("lexicon.tsv");
  run.finish(cfg, lex);
  say("added class " + std::to_string(cls) + "; candidates now " + std::to_string(p.size()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radicalign: radical-aligned zero-shot character and text-line recognition"};
  app.require_subcommand(1);

  Common c;
  std::string model, dataset, split = "full", candidates, lexicon_dir, ids_text, name, param;
  std::vector<std::string> values;

  auto* lexicon = app.add_subcommand("lexicon", "build or lint a lexicon");
  lexicon->require_subcommand(1);
  auto* build = lexicon->add_subcommand("build", "synthesize a lexicon");
  add_common(build, c, false);
  auto* lint = lexicon->add_subcommand("lint", "check a lexicon for collisions");
  lint->add_option("--lexicon", lexicon_dir, "directory with lexicon.tsv and strokes.tsv")->required();

  auto* synth = app.add_subcommand("synth", "render glyph and line datasets");
  add_common(synth, c, false);

  auto* pretrain = app.add_subcommand("pretrain", "contrastive pre-training");
  add_common(pretrain, c, true);

  auto* exportc = app.add_subcommand("export-candidates", "write the candidate matrix");
  add_common(exportc, c, false);
  exportc->add_option("--model", model, "pretrain run directory")->required();

  auto* train_ctr = app.add_subcommand("train-ctr", "train the text-line recognizer");
  add_common(train_ctr, c, true);
  train_ctr->add_option("--model", model, "pretrain run directory")->required();

  auto* evalc = app.add_subcommand("eval", "evaluate a run on a dataset");
  add_common(evalc, c, false);
  evalc->add_option("--model", model, "pretrain or train-ctr run directory")->required();
  evalc->add_option("--dataset", dataset, "dataset directory")->required();
  evalc->add_option("--split", split, "full | char_zero_shot:m=,k= | radical_zero_shot:n=");
  evalc->add_option("--candidates", candidates, "candidate matrix TSV (default: from the model)");
  evalc->add_option("--lexicon", lexicon_dir, "lexicon directory (default: the model run)");

  auto* ablate = app.add_subcommand("ablate", "one train+eval run per value");
  add_common(ablate, c, true);
  ablate->add_option("--param", param, "lambda | beta | head_mode | reg_term")->required();
  ablate->add_option("--values", values, "comma-separated values")->delimiter(',')->required();

  auto* dump = app.add_subcommand("dump-embeddings", "class (and optionally image) embeddings as TSV");
  add_common(dump, c, false);
  dump->add_option("--model", model, "pretrain run directory")->required();
  dump->add_option("--dataset", dataset, "glyph dataset for image embeddings");

  auto* add = app.add_subcommand("add-class", "append a class to a candidate matrix");
  add_common(add, c, false);
  add->add_option("--model", model, "pretrain run directory")->required();
  add->add_option("--candidates", candidates, "candidate matrix TSV")->required()->check(CLI::ExistingFile);
  add->add_option("--ids", ids_text, "IDS in prefix text form, e.g. \"H2 a c\"")->required();
  add->add_option("--name", name, "name of the new class");

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed()) return cmd_lexicon_build(c);
    if (lint->parsed()) return cmd_lexicon_lint(lexicon_dir);
    if (synth->parsed()) return cmd_synth(c);
    if (pretrain->parsed()) return cmd_pretrain(c);
    if (exportc->parsed()) return cmd_export(c, model);
    if (train_ctr->parsed()) return cmd_train_ctr(c, model);
    if (evalc->parsed()) return cmd_eval(c, model, dataset, split, candidates, lexicon_dir);
    if (ablate->parsed()) return cmd_ablate(c, param, values);
    if (dump->parsed()) return cmd_dump(c, model, dataset);
    if (add->parsed()) return cmd_add_class(c, model, candidates, ids_text, name);
  } catch (const Error& e) {
    std::cerr << "radicalign: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "radicalign: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
