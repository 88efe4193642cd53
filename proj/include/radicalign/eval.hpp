#pragma once

// Zero-shot splits, recognition metrics, few-shot buckets and ablation tables.

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "radicalign/ids.hpp"

namespace radicalign::eval {

using Line = std::vector<int>;

enum class SplitKind : std::uint8_t { CharZeroShot, RadicalZeroShot, Full };

struct SplitSpec {
  SplitKind kind = SplitKind::Full;
  int m = 0, k = 0, n = 0;

  /// "full", "char_zero_shot:m=240,k=60", "radical_zero_shot:n=3"
  static SplitSpec parse(const std::string& text);
  std::string to_string() const;
};

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

/// train = [0, m), test = [K-k, K). Throws SplitOverflow when m + k > K.
Split make_char_zero_shot_split(const ids::Lexicon& lex, int m, int k);
/// test = classes holding a radical whose frequency over the whole lexicon
/// is below n. Throws DegenerateSplit when either side is empty.
Split make_radical_zero_shot_split(const ids::Lexicon& lex, int n);
Split make_split(const ids::Lexicon& lex, const SplitSpec& spec);

// ---------------------------------------------------------------------------

double cacc(const std::vector<int>& preds, const std::vector<int>& labels);
double lacc(const std::vector<Line>& preds, const std::vector<Line>& labels);
int edit_distance(const Line& a, const Line& b);
/// 1 - mean ED/Maxlen; a pair of empty lines contributes 0.
double ned(const std::vector<Line>& preds, const std::vector<Line>& labels);

/// For each ground-truth position, whether the edit-distance backtrace
/// aligns it to an identical predicted token.
std::vector<bool> aligned_hits(const Line& pred, const Line& gt);

struct CharTally {
  long correct = 0;
  long total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Per-class hit counts over all ground-truth characters.
std::map<int, CharTally> per_class_hits(const std::vector<Line>& preds, const std::vector<Line>& labels);
/// Pooled accuracy over ground-truth characters whose class is in `classes`.
CharTally char_accuracy(const std::vector<Line>& preds, const std::vector<Line>& labels, const std::set<int>& classes);

struct Bucket {
  std::string name;  // "0", "1-50", ">50"
  CharTally tally;
  int classes = 0;
};

/// Test characters grouped by their number of training occurrences.
std::vector<Bucket> few_shot_report(const std::map<int, long>& train_counts, const std::vector<Line>& preds,
                                    const std::vector<Line>& labels);
std::map<int, long> occurrence_counts(const std::vector<Line>& labels);

struct MetricsReport {
  double cacc = 0, lacc = 0, ned = 0;
  long samples = 0;
  std::vector<Bucket> buckets;
  double seconds_per_batch = 0;
  std::map<std::string, double> extra;

  void save_tsv(const std::filesystem::path& path) const;
  std::string summary() const;
};

/// `sample_id,ED,Maxlen,correct`
void save_per_sample_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                         const std::vector<Line>& preds, const std::vector<Line>& labels);

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------

enum class AblationParam : std::uint8_t { Lambda, Beta, HeadMode, RegTerm };
std::string_view ablation_param_name(AblationParam p);
AblationParam parse_ablation_param(std::string_view name);

struct AblationRow {
  std::string value;
  std::map<std::string, double> metrics;
};

/// One run per value; rows are written as TSV with the union of metric keys.
std::vector<AblationRow> ablation_sweep(AblationParam param, const std::vector<std::string>& values,
                                        const std::function<std::map<std::string, double>(const std::string&)>& run);
void save_ablation_tsv(const std::filesystem::path& path, AblationParam param, const std::vector<AblationRow>& rows);

}  // namespace radicalign::eval
