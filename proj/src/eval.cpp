#include "radicalign/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace radicalign::eval {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void require_pairs(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw Error(ErrorKind::LengthMismatch, std::string(what) + ": " + std::to_string(a) + " predictions vs " + std::to_string(b) + " labels");
  if (a == 0) throw Error(ErrorKind::LengthMismatch, std::string(what) + ": empty input");
}

}  // namespace

SplitSpec SplitSpec::parse(const std::string& text) {
  SplitSpec s;
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (kind == "full") {
    s.kind = SplitKind::Full;
    return s;
  }
  if (kind == "char_zero_shot") s.kind = SplitKind::CharZeroShot;
  else if (kind == "radical_zero_shot") s.kind = SplitKind::RadicalZeroShot;
  else throw Error(ErrorKind::Config, "unknown split kind '" + kind + "'");
  if (colon == std::string::npos) throw Error(ErrorKind::Config, "split '" + text + "' needs parameters");
  std::istringstream in(text.substr(colon + 1));
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Config, "bad split parameter '" + item + "'");
    const std::string key = item.substr(0, eq);
    int value = 0;
    try {
      value = std::stoi(item.substr(eq + 1));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::Config, "bad split parameter '" + item + "'");
    }
    if (key == "m") s.m = value;
    else if (key == "k") s.k = value;
    else if (key == "n") s.n = value;
    else throw Error(ErrorKind::Config, "unknown split parameter '" + key + "'");
  }
  if (s.kind == SplitKind::CharZeroShot && (s.m < 1 || s.k < 1)) throw Error(ErrorKind::Config, "char_zero_shot needs m >= 1 and k >= 1");
  if (s.kind == SplitKind::RadicalZeroShot && s.n < 1) throw Error(ErrorKind::Config, "radical_zero_shot needs n >= 1");
  return s;
}

std::string SplitSpec::to_string() const {
  switch (kind) {
    case SplitKind::CharZeroShot: return "char_zero_shot:m=" + std::to_string(m) + ",k=" + std::to_string(k);
    case SplitKind::RadicalZeroShot: return "radical_zero_shot:n=" + std::to_string(n);
    case SplitKind::Full: break;
  }
  return "full";
}

Split make_char_zero_shot_split(const ids::Lexicon& lex, int m, int k) {
  const int total = lex.size();
  if (m < 1 || k < 1) throw Error(ErrorKind::Config, "m and k must be >= 1");
  if (m + k > total) {
    throw Error(ErrorKind::SplitOverflow, "m + k = " + std::to_string(m + k) + " exceeds " + std::to_string(total) + " classes");
  }
  Split s;
  for (int c = 0; c < m; ++c) s.train.push_back(c);
  for (int c = total - k; c < total; ++c) s.test.push_back(c);
  return s;
}

Split make_radical_zero_shot_split(const ids::Lexicon& lex, int n) {
  if (n < 1) throw Error(ErrorKind::Config, "n must be >= 1");
  std::vector<int> all(static_cast<std::size_t>(lex.size()));
  for (int c = 0; c < lex.size(); ++c) all[static_cast<std::size_t>(c)] = c;
  const auto freq = ids::radical_frequencies(lex, all);
  Split s;
  for (int c : all) {
    bool rare = false;
    for (ids::RadicalId r : lex.entry(c).tree.leaves()) rare = rare || freq.at(r) < n;
    (rare ? s.test : s.train).push_back(c);
  }
  if (s.train.empty() || s.test.empty()) {
    throw Error(ErrorKind::DegenerateSplit, "radical_zero_shot n=" + std::to_string(n) + " gives " + std::to_string(s.train.size()) +
                                                " train / " + std::to_string(s.test.size()) + " test classes");
  }
  return s;
}

Split make_split(const ids::Lexicon& lex, const SplitSpec& spec) {
  switch (spec.kind) {
    case SplitKind::CharZeroShot: return make_char_zero_shot_split(lex, spec.m, spec.k);
    case SplitKind::RadicalZeroShot: return make_radical_zero_shot_split(lex, spec.n);
    case SplitKind::Full: break;
  }
  Split s;
  for (int c = 0; c < lex.size(); ++c) {
    s.train.push_back(c);
    s.test.push_back(c);
  }
  return s;
}

// ---------------------------------------------------------------------------

double cacc(const std::vector<int>& preds, const std::vector<int>& labels) {
  require_pairs(preds.size(), labels.size(), "cacc");
  long hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double lacc(const std::vector<Line>& preds, const std::vector<Line>& labels) {
  require_pairs(preds.size(), labels.size(), "lacc");
  long hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

namespace {

std::vector<std::vector<int>> edit_table(const Line& a, const Line& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return d;
}

}  // namespace

int edit_distance(const Line& a, const Line& b) {
  // two-row Levenshtein
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double ned(const std::vector<Line>& preds, const std::vector<Line>& labels) {
  require_pairs(preds.size(), labels.size(), "ned");
  double err = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::size_t maxlen = std::max(preds[i].size(), labels[i].size());
    if (maxlen == 0) continue;
    err += static_cast<double>(edit_distance(preds[i], labels[i])) / static_cast<double>(maxlen);
  }
  return 1.0 - err / static_cast<double>(preds.size());
}

std::vector<bool> aligned_hits(const Line& pred, const Line& gt) {
  const auto d = edit_table(pred, gt);
  std::vector<bool> hit(gt.size(), false);
  std::size_t i = pred.size(), j = gt.size();
  // prefer the diagonal, then deletion of a predicted token, then insertion
  while (i > 0 && j > 0) {
    const int sub = pred[i - 1] == gt[j - 1] ? 0 : 1;
    if (d[i][j] == d[i - 1][j - 1] + sub) {
      hit[j - 1] = sub == 0;
      --i;
      --j;
    } else if (d[i][j] == d[i - 1][j] + 1) {
      --i;
    } else {
      --j;
    }
  }
  return hit;
}

std::map<int, CharTally> per_class_hits(const std::vector<Line>& preds, const std::vector<Line>& labels) {
  if (preds.size() != labels.size()) throw Error(ErrorKind::LengthMismatch, "per_class_hits: line counts differ");
  std::map<int, CharTally> out;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const auto hits = aligned_hits(preds[s], labels[s]);
    for (std::size_t j = 0; j < labels[s].size(); ++j) {
      auto& t = out[labels[s][j]];
      ++t.total;
      t.correct += hits[j];
    }
  }
  return out;
}

CharTally char_accuracy(const std::vector<Line>& preds, const std::vector<Line>& labels, const std::set<int>& classes) {
  CharTally pooled;
  for (const auto& [cls, t] : per_class_hits(preds, labels)) {
    if (!classes.count(cls)) continue;
    pooled.correct += t.correct;
    pooled.total += t.total;
  }
  return pooled;
}

std::map<int, long> occurrence_counts(const std::vector<Line>& labels) {
  std::map<int, long> counts;
  for (const auto& l : labels) {
    for (int c : l) ++counts[c];
  }
  return counts;
}

std::vector<Bucket> few_shot_report(const std::map<int, long>& train_counts, const std::vector<Line>& preds,
                                    const std::vector<Line>& labels) {
  std::vector<Bucket> buckets{{"0", {}, 0}, {"1-50", {}, 0}, {">50", {}, 0}};
  for (const auto& [cls, t] : per_class_hits(preds, labels)) {
    auto it = train_counts.find(cls);
    const long shots = it == train_counts.end() ? 0 : it->second;
    Bucket& b = buckets[shots == 0 ? 0 : (shots <= 50 ? 1 : 2)];
    b.tally.correct += t.correct;
    b.tally.total += t.total;
    ++b.classes;
  }
  return buckets;
}

// ---------------------------------------------------------------------------

void MetricsReport::save_tsv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << "metric\tvalue\n";
  f << "samples\t" << samples << "\n";
  f << "cacc\t" << fmt(cacc) << "\n";
  f << "lacc\t" << fmt(lacc) << "\n";
  f << "ned\t" << fmt(ned) << "\n";
  f << "seconds_per_batch\t" << fmt(seconds_per_batch) << "\n";
  for (const auto& b : buckets) {
    f << "bucket_" << b.name << "_acc\t" << fmt(b.tally.accuracy()) << "\n";
    f << "bucket_" << b.name << "_chars\t" << b.tally.total << "\n";
  }
  for (const auto& [k, v] : extra) f << k << '\t' << fmt(v) << "\n";
}

std::string MetricsReport::summary() const {
  std::ostringstream os;
  os << "samples " << samples << "  CACC " << fmt(cacc) << "  LACC " << fmt(lacc) << "  NED " << fmt(ned) << "\n";
  for (const auto& b : buckets) {
    os << "  " << b.name << " shots: " << b.tally.correct << "/" << b.tally.total << " (" << fmt(b.tally.accuracy())
       << ") over " << b.classes << " classes\n";
  }
  for (const auto& [k, v] : extra) os << "  " << k << " " << fmt(v) << "\n";
  os << "  " << fmt(seconds_per_batch) << " s/batch\n";
  return os.str();
}

void save_per_sample_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                         const std::vector<Line>& preds, const std::vector<Line>& labels) {
  if (ids.size() != preds.size() || preds.size() != labels.size()) throw Error(ErrorKind::LengthMismatch, "per-sample csv: counts differ");
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << "sample_id,ED,Maxlen,correct\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    f << ids[i] << ',' << edit_distance(preds[i], labels[i]) << ',' << std::max(preds[i].size(), labels[i].size()) << ','
      << (preds[i] == labels[i] ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------

std::string_view ablation_param_name(AblationParam p) {
  switch (p) {
    case AblationParam::Lambda: return "lambda";
    case AblationParam::Beta: return "beta";
    case AblationParam::HeadMode: return "head_mode";
    case AblationParam::RegTerm: return "reg_term";
  }
  return "?";
}

AblationParam parse_ablation_param(std::string_view name) {
  for (auto p : {AblationParam::Lambda, AblationParam::Beta, AblationParam::HeadMode, AblationParam::RegTerm}) {
    if (ablation_param_name(p) == name) return p;
  }
  throw Error(ErrorKind::Config, "unknown ablation parameter '" + std::string(name) + "'");
}

std::vector<AblationRow> ablation_sweep(AblationParam param, const std::vector<std::string>& values,
                                        const std::function<std::map<std::string, double>(const std::string&)>& run) {
  if (values.empty()) throw Error(ErrorKind::Config, "ablation over " + std::string(ablation_param_name(param)) + " needs values");
  std::vector<AblationRow> rows;
  for (const auto& v : values) rows.push_back({v, run(v)});
  return rows;
}

void save_ablation_tsv(const std::filesystem::path& path, AblationParam param, const std::vector<AblationRow>& rows) {
  std::set<std::string> keys;
  for (const auto& r : rows) {
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  }
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << ablation_param_name(param);
  for (const auto& k : keys) f << '\t' << k;
  f << '\n';
  for (const auto& r : rows) {
    f << r.value;
    for (const auto& k : keys) {
      auto it = r.metrics.find(k);
      f << '\t' << (it == r.metrics.end() ? std::string("NA") : fmt(it->second));
    }
    f << '\n';
  }
}

}  // namespace radicalign::eval
