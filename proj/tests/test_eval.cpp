#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>

#include "doctest.h"
#include "radicalign/eval.hpp"
#include "radicalign/glyph.hpp"
#include "support/checks.hpp"

using namespace radicalign;
using namespace radicalign::eval;

namespace {

// plain full-matrix Levenshtein used as the oracle
int levenshtein(const Line& a, const Line& b) {
  std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return d[a.size()][b.size()];
}

Line random_line(Rng& rng) {
  Line l(rng.below(13));
  for (int& c : l) c = static_cast<int>(rng.below(5));
  return l;
}

ids::IdsTree L(int r) { return ids::IdsTree::leaf(ids::RadicalId{static_cast<std::uint16_t>(r)}); }

}  // namespace

TEST_CASE("char zero-shot split") {
  glyph::LexiconBuildOptions o;
  o.classes = 4;
  const auto lex = glyph::build_lexicon(o);
  const Split s = make_char_zero_shot_split(lex, 2, 2);
  CHECK(s.train == std::vector<int>{0, 1});
  CHECK(s.test == std::vector<int>{2, 3});
  const Split s2 = make_char_zero_shot_split(lex, 1, 2);
  CHECK(s2.test == std::vector<int>{2, 3});
  CHECK_THROWS_KIND(make_char_zero_shot_split(lex, 3, 2), ErrorKind::SplitOverflow);
}

TEST_CASE("radical zero-shot split") {
  // radical 2 appears in one class only
  std::vector<std::string> names{"a", "b", "c"};
  std::vector<std::vector<ids::StrokeId>> strokes{{ids::StrokeId{1}}, {ids::StrokeId{2}}, {ids::StrokeId{3}}};
  std::vector<ids::LexiconEntry> e{{0, "x", L(0)},
                                   {1, "y", L(1)},
                                   {2, "z", ids::IdsTree::node(ids::StructureOp::H2, {L(0), L(1)})},
                                   {3, "w", ids::IdsTree::node(ids::StructureOp::V2, {L(2), L(1)})}};
  const ids::Lexicon lex(names, strokes, e);
  const Split s = make_radical_zero_shot_split(lex, 2);
  CHECK(s.test == std::vector<int>{3});
  CHECK(s.train == std::vector<int>{0, 1, 2});
  CHECK_THROWS_KIND(make_radical_zero_shot_split(lex, 1), ErrorKind::DegenerateSplit);

  glyph::LexiconBuildOptions o;
  o.classes = 30;
  o.seed = 12;
  const auto big = glyph::build_lexicon(o);
  std::vector<int> all;
  for (int c = 0; c < big.size(); ++c) all.push_back(c);
  const auto freq = ids::radical_frequencies(big, all);
  const int n = 3;
  std::vector<int> test, train;
  for (int c : all) {
    bool rare = false;
    std::function<void(const ids::IdsTree&)> walk = [&](const ids::IdsTree& t) {
      if (t.is_leaf()) {
        rare |= freq.at(t.radical()) < n;
        return;
      }
      for (const auto& ch : t.children()) walk(ch);
    };
    walk(big.entry(c).tree);
    (rare ? test : train).push_back(c);
  }
  if (test.empty() || train.empty()) {
    CHECK_THROWS_KIND(make_radical_zero_shot_split(big, n), ErrorKind::DegenerateSplit);
  } else {
    const Split r = make_radical_zero_shot_split(big, n);
    CHECK(r.test == test);
    CHECK(r.train == train);
  }
}

TEST_CASE("split spec text form") {
  CHECK(SplitSpec::parse("char_zero_shot:m=240,k=60").to_string() == "char_zero_shot:m=240,k=60");
  CHECK(SplitSpec::parse("radical_zero_shot:n=3").n == 3);
  CHECK(SplitSpec::parse("full").kind == SplitKind::Full);
  CHECK_THROWS_KIND(SplitSpec::parse("char_zero_shot:m=0,k=1"), ErrorKind::Config);
  CHECK_THROWS_KIND(SplitSpec::parse("nonsense"), ErrorKind::Config);
}

TEST_CASE("cacc and lacc") {
  CHECK(cacc({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(cacc({1, 0, 0, 0}, {1, 2, 3, 4}) == 0.25);
  CHECK_THROWS_KIND(cacc({}, {}), ErrorKind::LengthMismatch);
  CHECK_THROWS_KIND(cacc({1}, {1, 2}), ErrorKind::LengthMismatch);
  CHECK(lacc({{1, 2}, {3}}, {{1, 2}, {3}}) == 1.0);
  CHECK(lacc({{1, 2}, {3}}, {{1, 2}, {3, 4}}) == 0.5);
  CHECK(lacc({{1, 2, 3}}, {{1, 2}}) == 0.0);
}

TEST_CASE("ned examples and the DP oracle") {
  CHECK(ned({{1, 2, 3}}, {{1, 2, 3}}) == 1.0);
  CHECK(ned({{1, 2, 3}}, {{1, 2, 4}}) == doctest::Approx(2.0 / 3.0));
  CHECK(ned({{}}, {{1, 2}}) == 0.0);
  CHECK(ned({{}}, {{}}) == 1.0);
  CHECK_THROWS_KIND(ned({{1}}, {}), ErrorKind::LengthMismatch);

  Rng rng(31);
  for (int t = 0; t < 500; ++t) {
    const Line a = random_line(rng), b = random_line(rng);
    CHECK(edit_distance(a, b) == levenshtein(a, b));
    const double expected =
        a.empty() && b.empty() ? 1.0 : 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(std::max(a.size(), b.size()));
    CHECK(ned({a}, {b}) == expected);
    CHECK(ned({a}, {b}) >= 0.0);
    CHECK(ned({a}, {b}) <= 1.0);
  }
}

TEST_CASE("aligned hits follow the backtrace") {
  CHECK(aligned_hits({1, 2, 3}, {1, 2, 3}) == std::vector<bool>{true, true, true});
  CHECK(aligned_hits({1, 3}, {1, 2, 3}) == std::vector<bool>{true, false, true});
  CHECK(aligned_hits({}, {4, 5}) == std::vector<bool>{false, false});
  CHECK(aligned_hits({9, 1, 2}, {1, 2}) == std::vector<bool>{true, true});
}

TEST_CASE("few-shot buckets partition the test characters") {
  const std::vector<Line> labels{{1, 2, 3}, {3, 4}};
  const std::vector<Line> preds{{1, 2, 0}, {3, 4}};
  const std::map<int, long> train{{2, 7}, {3, 60}, {4, 50}};
  const auto buckets = few_shot_report(train, preds, labels);
  REQUIRE(buckets.size() == 3);
  CHECK(buckets[0].name == "0");
  CHECK(buckets[0].classes == 1);  // class 1
  CHECK(buckets[1].classes == 2);  // classes 2 and 4
  CHECK(buckets[2].classes == 1);  // class 3
  long total = 0;
  for (const auto& b : buckets) total += b.tally.total;
  CHECK(total == 5);
  CHECK(buckets[2].tally.correct == 1);
  CHECK(buckets[2].tally.total == 2);

  const auto counts = occurrence_counts(labels);
  CHECK(counts.at(3) == 2);
  CHECK(char_accuracy(preds, labels, {3}).accuracy() == 0.5);
}

TEST_CASE("ablation sweep writes one row per value") {
  const auto rows = ablation_sweep(AblationParam::Beta, {"0", "0.001"}, [](const std::string& v) {
    return std::map<std::string, double>{{"cacc", std::stod(v)}};
  });
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].metrics.at("cacc") == 0.001);
  const auto path = std::filesystem::temp_directory_path() / "radicalign_ablation.tsv";
  save_ablation_tsv(path, AblationParam::Beta, rows);
  std::ifstream f(path);
  std::string line;
  int n = 0;
  while (std::getline(f, line)) ++n;
  CHECK(n == 3);
  std::filesystem::remove(path);
  CHECK(parse_ablation_param("head_mode") == AblationParam::HeadMode);
  CHECK_THROWS_KIND(parse_ablation_param("gamma"), ErrorKind::Config);
}
