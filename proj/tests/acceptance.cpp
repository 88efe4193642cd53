// Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any
// hard criterion fails. Usage: acceptance <path to the radicalign CLI> [workdir]

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <string>

#include "radicalign/pipeline.hpp"
#include "support/gradcheck.hpp"

using namespace radicalign;
namespace fs = std::filesystem;
namespace tz = radicalign::tensor;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s [%d] %s: %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void note(const std::string& s) {
  std::printf("      %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// Runs a criterion body, turning any exception into a FAIL line.
void guarded(int id, const std::string& what, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    verdict(id, false, what, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

void ids_round_trip() {
  eval::Stopwatch sw;
  const ids::Alphabet a(24, 0);
  Rng rng(1000);
  int ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const ids::IdsTree t = ids::random_tree(rng, 24, 3);
    ids::TokenSeq s = ids::serialize_ids(t, a);
    s.pop_back();  // END
    const ids::IdsTree back = ids::parse_ids(s, a);
    ids::TokenSeq again = ids::serialize_ids(back, a);
    again.pop_back();
    if (back == t && again == s && t.depth() <= 3) ++ok;
  }
  const double secs = sw.seconds();
  verdict(1, ok == 1000 && secs < 5.0, "IDS round trip", fmt("%.0f/1000 trees, %.3f s", ok, secs));
}

void gradients() {
  eval::Stopwatch sw;
  double worst = 0;
  std::string worst_name;
  int checked = 0;
  for (const auto& r : radicalign::testing::run_all_gradient_checks()) {
    checked += r.checked;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  const double secs = sw.seconds();
  verdict(2, worst <= 1e-4 && secs < 60.0, "gradient checks",
          fmt("%.0f elements, worst rel. error %.2e (", checked, worst) + worst_name + fmt("), %.2f s", secs));
}

void loss_oracles() {
  using DV = tz::Var<double>;
  auto m = [](int n, std::vector<double> v) { return DV::constant({n, 2}, std::move(v)); };
  const std::vector<int> distinct{0, 1, 2}, pair{4, 4};
  struct Case {
    const char* name;
    double got, want;
  };
  const std::vector<Case> cases{
      {"L_T N=1", clip::loss_lt<double>(m(1, {1, 0}), m(1, {0, 1})).item(), 0.0},
      {"L_T orthonormal", clip::loss_lt<double>(m(2, {1, 0, 0, 1}), m(2, {1, 0, 0, 1})).item(), 1.2530},
      {"L_T identical", clip::loss_lt<double>(m(2, {1, 0, 1, 0}), m(2, {1, 0, 1, 0})).item(), 2.7726},
      {"L_I distinct labels", clip::loss_li<double>(DV::constant({3, 2}, {1, 0, 0, 1, 0.6, 0.8}), distinct).item(), 0.0},
      {"L_I dot 1", clip::loss_li<double>(m(2, {1, 0, 1, 0}), pair).item(), 1.3863},
      {"L_I dot -1 per term", clip::loss_li<double>(m(2, {1, 0, -1, 0}), pair).item() / 2.0, 2.1269},
  };
  double worst = 0;
  for (const auto& c : cases) {
    worst = std::max(worst, std::abs(c.got - c.want));
    note(std::string(c.name) + fmt(": %.5f (expected %.4f)", c.got, c.want));
  }
  verdict(3, worst <= 1e-3, "loss oracles", fmt("%.0f cases, max abs deviation %.2e", static_cast<double>(cases.size()), worst));
}

void metric_oracle() {
  auto lev = [](const eval::Line& a, const eval::Line& b) {
    std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
      for (std::size_t j = 1; j <= b.size(); ++j) {
        d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
      }
    }
    return d[a.size()][b.size()];
  };
  Rng rng(4);
  std::vector<eval::Line> preds, labels;
  int exact_ned = 0;
  for (int i = 0; i < 500; ++i) {
    eval::Line a(rng.below(13)), b(1 + rng.below(12));
    for (int& x : a) x = static_cast<int>(rng.below(6));
    for (int& x : b) x = static_cast<int>(rng.below(6));
    if (i % 7 == 0) a = b;
    const double want = 1.0 - static_cast<double>(lev(a, b)) / static_cast<double>(std::max(a.size(), b.size()));
    if (eval::ned({a}, {b}) == want) ++exact_ned;
    preds.push_back(a);
    labels.push_back(b);
  }
  int same = 0;
  std::vector<int> p1, l1;
  int hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    same += preds[i] == labels[i];
    p1.push_back(preds[i].empty() ? -1 : preds[i][0]);
    l1.push_back(labels[i][0]);
    hits += p1.back() == l1.back();
  }
  const bool lacc_ok = eval::lacc(preds, labels) == static_cast<double>(same) / 500.0;
  const bool cacc_ok = eval::cacc(p1, l1) == static_cast<double>(hits) / 500.0;
  verdict(4, exact_ned == 500 && lacc_ok && cacc_ok, "metric oracle",
          fmt("ned exact on %.0f/500 pairs, lacc ", exact_ned) + (lacc_ok ? "match" : "MISMATCH") + ", cacc " +
              (cacc_ok ? "match" : "MISMATCH"));
}

// ---------------------------------------------------------------------------
// Desk-scale experiments

pipeline::RunConfig experiment_config() {
  pipeline::RunConfig cfg;
  cfg.apply_seed(20240611);
  cfg.lexicon.classes = 300;
  cfg.split = eval::SplitSpec{eval::SplitKind::CharZeroShot, 240, 60, 0};
  cfg.train_samples_per_class = 20;
  cfg.test_samples_per_class = 10;
  cfg.pretrain.epochs = 25;
  cfg.train_lines = 3000;
  cfg.test_lines = 300;
  cfg.ctr.epochs = 20;
  cfg.ctr.batch_size = 16;
  cfg.ctr.adam.lr = 3e-4;
  cfg.ctr.logit_scale = 10.0f;
  cfg.ctr.init_from_pretrain = true;
  return cfg;
}

struct Shared {
  pipeline::RunConfig cfg;
  pipeline::RunData data;
  std::set<int> unseen;
  std::optional<clip::ClipModel> clip;
  clip::CandidateMatrix p;
  pipeline::CcrResult ccr;
  std::optional<ctr::CtrModel> ctr;
  pipeline::CtrResult ctr_result;
};

void zero_shot_ccr(Shared& s) {
  eval::Stopwatch sw;
  s.clip.emplace(pipeline::run_pretrain(s.cfg, s.data, nullptr, [](const clip::EpochLog& e) {
    std::fprintf(stderr, "  pretrain epoch %d  L_pre %.3f\n", e.epoch, e.pre);
  }));
  s.p = clip::export_candidates(*s.clip, s.data.lexicon, pipeline::all_classes(s.data.lexicon));
  s.ccr = pipeline::evaluate_ccr(*s.clip, s.p, s.data.test_glyphs, s.unseen);
  const double secs = sw.seconds();
  const double u = s.ccr.unseen.accuracy(), seen = s.ccr.seen.accuracy();
  verdict(5, u >= 0.30 && seen >= 0.85 && secs <= 1800, "character zero-shot CCR",
          fmt("unseen CACC %.2f%% (%.0f glyphs), seen CACC %.2f%%, %.0f s", 100 * u, static_cast<double>(s.ccr.unseen.total),
              100 * seen, secs) + fmt(", %.0fx chance", u * 300));
}

// A class id that is new to the lexicon and pixel-distinct from every glyph.
std::optional<int> add_novel_class(ids::Lexicon& lex, const glyph::RadicalInventory& inv, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<ids::IdsTree> ch;
    ch.push_back(ids::IdsTree::leaf(ids::RadicalId{static_cast<std::uint16_t>(rng.below(24))}));
    ch.push_back(ids::IdsTree::leaf(ids::RadicalId{static_cast<std::uint16_t>(rng.below(24))}));
    const auto op = rng.uniform() < 0.5 ? ids::StructureOp::H2 : ids::StructureOp::V2;
    ids::IdsTree t = ids::IdsTree::node(op, std::move(ch));
    const auto img = glyph::compose_glyph(t, inv, glyph::StyleParams::identity(), 0);
    bool clash = false;
    for (const auto& e : lex.entries()) {
      if (glyph::compose_glyph(e.tree, inv, glyph::StyleParams::identity(), 0) == img) {
        clash = true;
        break;
      }
    }
    if (clash) continue;
    try {
      return lex.add_class("novel", std::move(t));
    } catch (const Error&) {
    }
  }
  return std::nullopt;
}

void zero_shot_ctr(Shared& s) {
  eval::Stopwatch sw;
  s.ctr.emplace(pipeline::make_ctr_model(s.cfg, s.data, s.p.dim()));
  if (s.cfg.ctr.init_from_pretrain) s.ctr->init_from(*s.clip);
  ctr::train_ctr(*s.ctr, s.p, s.data.train_lines, [](const ctr::CtrEpochLog& e) {
    std::fprintf(stderr, "  ctr epoch %d  loss %.4f\n", e.epoch, e.loss);
  });
  const clip::CandidateMatrix before = s.p;
  s.ctr_result = pipeline::evaluate_ctr(*s.ctr, s.p, s.data.test_lines, s.unseen, eval::occurrence_counts(s.data.train_lines.labels));
  const double u = s.ctr_result.unseen.accuracy();
  note(fmt("lines: seen char acc %.2f%%, unseen char acc %.2f%% (%.0f chars), LACC %.2f%%", 100 * s.ctr_result.seen.accuracy(),
           100 * u, static_cast<double>(s.ctr_result.unseen.total), 100 * s.ctr_result.report.lacc) +
       fmt(", NED %.3f, train %.0f s", s.ctr_result.report.ned, sw.seconds()));

  // add-class trials: a 301st class, recognised without touching any weight
  int successes = 0;
  const glyph::RadicalInventory inv(s.data.lexicon);
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(derive_seed(1000 + static_cast<std::uint64_t>(trial), "add_class"));
    ids::Lexicon lex = s.data.lexicon;
    clip::CandidateMatrix p = s.p;
    const auto cls = add_novel_class(lex, inv, rng);
    if (!cls) continue;
    ctr::add_candidate(p, *cls, ids::tokens_for_level(*cls, lex, s.clip->config().level, s.clip->alphabet()), *s.clip);
    const std::vector<int> label{static_cast<int>(rng.below(240)), *cls, static_cast<int>(rng.below(240))};
    const auto line = glyph::render_line(label, lex, inv, s.cfg.regime, rng.next_u64());
    const auto got = s.ctr->greedy_decode(line.pixels, p);
    const bool hit = eval::aligned_hits(got.classes, label)[1];
    successes += hit;
    std::string pred;
    for (int c : got.classes) pred += " " + std::to_string(c);
    note(fmt("add-class trial %.0f: class %.0f, label %.0f ", trial, *cls, label[0]) + std::to_string(*cls) + " " +
         std::to_string(label[2]) + " ->" + pred + (hit ? "  (recognised)" : ""));
  }
  verdict(6, u >= 0.20 && successes >= 1 && s.p == before, "zero-shot CTR without fine-tuning",
          fmt("unseen per-char accuracy %.2f%% (%.0fx chance), add-class %.0f/5, P unchanged", 100 * u, u * 300, successes));
}

void ablation(Shared& s) {
  // (a) lambda: same seed, lambda = 0
  pipeline::RunConfig c0 = s.cfg;
  c0.pretrain.lambda = 0.0;
  const auto m0 = pipeline::run_pretrain(c0, s.data);
  const auto r0 = pipeline::evaluate_ccr(m0, clip::export_candidates(m0, s.data.lexicon, pipeline::all_classes(s.data.lexicon)),
                                         s.data.test_glyphs, s.unseen);
  const double u1 = s.ccr.unseen.accuracy(), u0 = r0.unseen.accuracy();
  note(fmt("lambda=1 unseen CACC %.2f%%, lambda=0 unseen CACC %.2f%%", 100 * u1, 100 * u0));
  if (u1 < u0) note("WARNING soft gate: lambda=1 did not match or beat lambda=0 under this seed");

  // (b) FC head over the 240 seen classes
  pipeline::RunConfig cf = s.cfg;
  cf.ctr.head_mode = ctr::HeadMode::Fc;
  auto fc = pipeline::make_ctr_model(cf, s.data, s.p.dim());
  if (cf.ctr.init_from_pretrain) fc.init_from(*s.clip);
  ctr::train_ctr(fc, s.p, s.data.train_lines);
  const auto rf = pipeline::evaluate_ctr(fc, s.p, s.data.test_lines, s.unseen, {});
  const double match_u = s.ctr_result.unseen.accuracy(), fc_u = rf.unseen.accuracy();
  note(fmt("fc head: seen char acc %.2f%%, unseen char acc %.2f%%", 100 * rf.seen.accuracy(), 100 * fc_u));
  long emitted_unseen = 0;
  for (const auto& line : rf.predictions) {
    for (int c : line) emitted_unseen += s.unseen.count(c);
  }
  verdict(7, match_u > 0 && fc_u == 0.0 && emitted_unseen == 0, "ablation direction",
          fmt("match unseen %.2f%% > 0, fc unseen %.2f%% (emitted %.0f unseen ids); lambda soft gate ", 100 * match_u, 100 * fc_u,
              static_cast<double>(emitted_unseen)) +
              (u1 >= u0 ? "held" : "WARN"));
}

void causality_and_termination(const Shared& s) {
  const ctr::CtrModel& m = *s.ctr;
  Rng rng(88);
  int causal_ok = 0;
  for (int t = 0; t < 50; ++t) {
    glyph::Raster img(glyph::kLineHeight, glyph::kLineWidth);
    for (float& x : img.pixels) x = static_cast<float>(rng.uniform());
    const std::vector<glyph::Raster> one{img};
    const auto memory = m.encode(one);
    const int len = 2 + static_cast<int>(rng.below(7));
    const int cut = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(len - 1)));
    std::vector<int> a{-1}, b{-1};
    for (int i = 1; i < len; ++i) {
      const int c = static_cast<int>(rng.below(300));
      a.push_back(c);
      b.push_back(i >= cut ? static_cast<int>((c + 1 + rng.below(299)) % 300) : c);
    }
    const auto oa = m.decode(memory, {a}, s.p), ob = m.decode(memory, {b}, s.p);
    const std::size_t d = static_cast<std::size_t>(s.p.dim());
    bool same = true, moved = false;
    for (std::size_t i = 0; i < oa.numel(); ++i) {
      if (i < static_cast<std::size_t>(cut) * d) same &= oa.values()[i] == ob.values()[i];
      else moved |= oa.values()[i] != ob.values()[i];
    }
    causal_ok += same && moved;
  }

  std::vector<glyph::Raster> inputs;
  for (int t = 0; t < 1000; ++t) {
    glyph::Raster img(glyph::kLineHeight, glyph::kLineWidth);
    const double density = rng.uniform();
    for (float& x : img.pixels) x = rng.uniform() < density ? static_cast<float>(rng.uniform()) : 0.0f;
    inputs.push_back(std::move(img));
  }
  const int cap = s.cfg.ctr.max_decode_len;
  int terminated = 0, truncated = 0;
  for (const auto& r : m.greedy_decode(inputs, s.p)) {
    const bool ok = static_cast<int>(r.classes.size()) <= cap && (!r.truncated || static_cast<int>(r.classes.size()) == cap);
    terminated += ok;
    truncated += r.truncated;
  }
  verdict(8, causal_ok == 50 && terminated == 1000, "causality and termination",
          fmt("causal mask %.0f/50, terminated %.0f/1000 within %.0f steps (%.0f truncated)", causal_ok, terminated, cap, truncated));
}

void reproducibility(const Shared& s, const std::string& cli, const fs::path& work) {
  // two identical seeded CLI invocations
  const fs::path cfg = work / "repro.cfg";
  {
    std::ofstream f(cfg);
    f << "lexicon.classes = 40\nsplit = char_zero_shot:m=32,k=8\npretrain.epochs = 2\ndata.train_samples_per_class = 4\n";
  }
  // different directory name lengths shift the heap layout between the runs
  const char* second = "run2_in_a_directory_with_a_much_longer_name";
  bool runs_ok = true;
  for (const char* run : {"run1", second}) {
    fs::remove_all(work / run);
    const std::string cmd = "\"" + cli + "\" pretrain --config \"" + cfg.string() + "\" --seed 7 --out \"" + (work / run).string() + "\" 2>/dev/null >/dev/null";
    runs_ok &= std::system(cmd.c_str()) == 0;
  }
  const bool ckpt_same = runs_ok && slurp(work / "run1" / "clip.ckpt") == slurp(work / second / "clip.ckpt") &&
                         !slurp(work / "run1" / "clip.ckpt").empty();
  const bool log_same = runs_ok && slurp(work / "run1" / "pretrain_log.tsv") == slurp(work / second / "pretrain_log.tsv") &&
                        !slurp(work / "run1" / "pretrain_log.tsv").empty();

  // save -> load -> identical metrics
  s.clip->save(work / "clip.ckpt");
  s.ctr->save(work / "ctr.ckpt");
  const auto clip_back = clip::ClipModel::load(work / "clip.ckpt");
  const auto ctr_back = ctr::CtrModel::load(work / "ctr.ckpt");
  const auto p_back = clip::export_candidates(clip_back, s.data.lexicon, pipeline::all_classes(s.data.lexicon));
  const auto ccr_back = pipeline::evaluate_ccr(clip_back, p_back, s.data.test_glyphs, s.unseen);
  const auto ctr_res = pipeline::evaluate_ctr(ctr_back, p_back, s.data.test_lines, s.unseen, {});
  const bool ccr_same = ccr_back.predictions == s.ccr.predictions && p_back == s.p;
  const bool ctr_same = ctr_res.predictions == s.ctr_result.predictions && ctr_res.report.ned == s.ctr_result.report.ned;
  verdict(9, ckpt_same && log_same && ccr_same && ctr_same, "reproducibility",
          std::string("CLI checkpoints ") + (ckpt_same ? "identical" : "DIFFER") + ", logs " + (log_same ? "identical" : "DIFFER") +
              ", reloaded CCR " + (ccr_same ? "identical" : "DIFFERS") + ", reloaded CTR " + (ctr_same ? "identical" : "DIFFERS"));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <radicalign CLI> [workdir]\n");
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "radicalign_acceptance";
  fs::create_directories(work);
  eval::Stopwatch total;

  guarded(1, "IDS round trip", ids_round_trip);
  guarded(2, "gradient checks", gradients);
  guarded(3, "loss oracles", loss_oracles);
  guarded(4, "metric oracle", metric_oracle);

  Shared s;
  s.cfg = experiment_config();
  bool ready = false;
  guarded(5, "character zero-shot CCR", [&] {
    s.data = pipeline::make_run_data(s.cfg, pipeline::kGlyphData | pipeline::kLineData);
    s.unseen = pipeline::unseen_classes(s.data.split);
    zero_shot_ccr(s);
    ready = true;
  });
  bool have_ctr = false;
  if (ready) {
    guarded(6, "zero-shot CTR without fine-tuning", [&] {
      zero_shot_ctr(s);
      have_ctr = true;
    });
    guarded(7, "ablation direction", [&] { ablation(s); });
  } else {
    verdict(6, false, "zero-shot CTR without fine-tuning", "skipped: pre-training failed");
    verdict(7, false, "ablation direction", "skipped: pre-training failed");
  }
  if (have_ctr) {
    guarded(8, "causality and termination", [&] { causality_and_termination(s); });
    guarded(9, "reproducibility", [&] { reproducibility(s, cli, work); });
  } else {
    verdict(8, false, "causality and termination", "skipped: no recognizer");
    verdict(9, false, "reproducibility", "skipped: no recognizer");
  }
  std::printf("acceptance: %d failure(s), %.0f s\n", failures, total.seconds());
  return failures == 0 ? 0 : 1;
}
