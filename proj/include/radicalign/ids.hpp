#pragma once

// Ideographic description sequences: radical trees, their prefix token form,
// stroke expansion and the class lexicon.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "radicalign/common.hpp"

namespace radicalign::ids {

/// Layout combinators. H2/V2: left-right / top-bottom, H3/V3: three-way,
/// ENC: full surround (outer, inner).
enum class StructureOp : std::uint8_t { H2, V2, H3, V3, ENC };
inline constexpr int kNumOps = 5;

constexpr int arity(StructureOp op) {
  return (op == StructureOp::H3 || op == StructureOp::V3) ? 3 : 2;
}
std::string_view op_name(StructureOp op);

struct RadicalId {
  std::uint16_t value = 0;
  auto operator<=>(const RadicalId&) const = default;
};

struct StrokeId {
  std::uint16_t value = 0;
  auto operator<=>(const StrokeId&) const = default;
};

/// Five stroke categories (horizontal, vertical, left-falling, right-falling,
/// turning), each with a fixed number of positional instances.
enum class StrokeCategory : std::uint8_t { Heng, Shu, Pie, Na, Zhe };
inline constexpr int kStrokeCategories = 5;
inline constexpr int kStrokeInstances = 4;
inline constexpr int kStrokeInventorySize = kStrokeCategories * kStrokeInstances;

inline StrokeCategory stroke_category(StrokeId s) {
  return static_cast<StrokeCategory>(s.value / kStrokeInstances);
}
inline int stroke_instance(StrokeId s) { return s.value % kStrokeInstances; }
std::string stroke_name(StrokeId s);

class IdsTree {
 public:
  static IdsTree leaf(RadicalId r);
  /// Throws MalformedIds when the child count does not match the arity.
  static IdsTree node(StructureOp op, std::vector<IdsTree> children);

  bool is_leaf() const noexcept { return leaf_; }
  RadicalId radical() const noexcept { return radical_; }
  StructureOp op() const noexcept { return op_; }
  const std::vector<IdsTree>& children() const noexcept { return children_; }

  /// A leaf has depth 1.
  int depth() const;
  int node_count() const;
  int leaf_count() const;
  /// Leaves in left-to-right (preorder) order.
  std::vector<RadicalId> leaves() const;

  bool operator==(const IdsTree&) const = default;

 private:
  bool leaf_ = true;
  RadicalId radical_{};
  StructureOp op_ = StructureOp::H2;
  std::vector<IdsTree> children_;
};

enum class TokenKind : std::uint8_t { Op, Radical, Stroke, Class, End, Pad, Bos };

/// Integer token layout shared by every sequence model:
///   [0, 5)                       structure operators
///   [5, 5+R)                     radicals
///   [5+R, 5+R+S)                 strokes
///   [5+R+S, 5+R+S+C)             class tokens (character level)
///   END, PAD, BOS                the last three ids
class Alphabet {
 public:
  Alphabet() = default;
  Alphabet(int radicals, int class_capacity, int strokes = kStrokeInventorySize);

  int radical_count() const noexcept { return radicals_; }
  int stroke_count() const noexcept { return strokes_; }
  int class_capacity() const noexcept { return classes_; }
  int size() const noexcept { return first_special() + 3; }

  int op_token(StructureOp op) const { return static_cast<int>(op); }
  int radical_token(RadicalId r) const;
  int stroke_token(StrokeId s) const;
  int class_token(int class_id) const;
  int end() const noexcept { return first_special(); }
  int pad() const noexcept { return first_special() + 1; }
  int bos() const noexcept { return first_special() + 2; }

  /// Throws UnknownToken for ids outside the alphabet.
  TokenKind kind(int token) const;
  StructureOp as_op(int token) const;
  RadicalId as_radical(int token) const;
  StrokeId as_stroke(int token) const;
  int as_class(int token) const;

  bool operator==(const Alphabet&) const = default;

 private:
  int first_special() const noexcept { return kNumOps + radicals_ + strokes_ + classes_; }
  int radicals_ = 0;
  int strokes_ = kStrokeInventorySize;
  int classes_ = 0;
};

using TokenSeq = std::vector<int>;

/// Prefix parse of an IDS without END. Throws MalformedIds on arity
/// underflow, trailing tokens, or tokens that are not operators/radicals.
IdsTree parse_ids(std::span<const int> tokens, const Alphabet& alphabet);

/// Preorder token list followed by END.
TokenSeq serialize_ids(const IdsTree& tree, const Alphabet& alphabet);

/// Uniform random tree over `radicals` leaves, depth <= max_depth.
IdsTree random_tree(Rng& rng, int radicals, int max_depth, double leaf_probability = 0.35);

enum class Level : std::uint8_t { Character, Radical, Stroke };
std::string_view level_name(Level level);
Level parse_level(std::string_view name);

struct LexiconEntry {
  int class_id = 0;
  std::string name;
  IdsTree tree;
};

class Lexicon {
 public:
  Lexicon() = default;
  /// Validates contiguity, tree well-formedness and IDS uniqueness.
  Lexicon(std::vector<std::string> radical_names,
          std::vector<std::vector<StrokeId>> radical_strokes,
          std::vector<LexiconEntry> entries);

  static Lexicon load(const std::filesystem::path& lexicon_tsv,
                      const std::filesystem::path& strokes_tsv);
  void save(const std::filesystem::path& lexicon_tsv,
            const std::filesystem::path& strokes_tsv) const;

  int size() const noexcept { return static_cast<int>(entries_.size()); }
  int radical_count() const noexcept { return static_cast<int>(radical_names_.size()); }
  const std::vector<LexiconEntry>& entries() const noexcept { return entries_; }
  const LexiconEntry& entry(int class_id) const;
  const std::vector<std::string>& radical_names() const noexcept { return radical_names_; }
  const std::vector<StrokeId>& strokes_of(RadicalId r) const;
  bool has_strokes(RadicalId r) const;

  /// Alphabet whose class capacity equals the current lexicon size.
  Alphabet alphabet() const { return Alphabet(radical_count(), size()); }

  /// Token text: operators "H2", radicals by name, strokes "h0".., classes
  /// "#12", specials "END"/"PAD"/"BOS".
  std::string token_name(int token, const Alphabet& alphabet) const;
  int token_from_name(std::string_view name, const Alphabet& alphabet) const;
  TokenSeq tokens_from_text(std::string_view text, const Alphabet& alphabet) const;
  std::string tokens_to_text(std::span<const int> tokens, const Alphabet& alphabet) const;

  /// Appends a class; throws DuplicateIds when its IDS already exists.
  int add_class(std::string name, IdsTree tree);

  /// Groups of class ids sharing one stroke sequence (size >= 2 each).
  std::vector<std::vector<int>> stroke_collisions() const;

  /// Content hash over radicals, strokes and entries.
  std::uint64_t hash() const;

 private:
  void validate() const;

  std::vector<std::string> radical_names_;
  std::vector<std::vector<StrokeId>> radical_strokes_;
  std::vector<LexiconEntry> entries_;
};

/// Concatenated leaf stroke lists; operators contribute nothing.
std::vector<StrokeId> expand_strokes(const IdsTree& tree, const Lexicon& lex);

/// character: [class, END]; radical: IDS + END; stroke: strokes + END.
TokenSeq tokens_for_level(int class_id, const Lexicon& lex, Level level,
                          const Alphabet& alphabet);

/// Number of classes in `class_subset` whose tree contains each radical
/// (presence, counted once per class).
std::map<RadicalId, int> radical_frequencies(const Lexicon& lex, std::span<const int> class_subset);

/// Lowest class id whose stroke sequence equals `strokes`, or -1.
int resolve_stroke_sequence(const Lexicon& lex, std::span<const StrokeId> strokes);

}  // namespace radicalign::ids
