#include "radicalign/ids.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace radicalign::ids {

namespace {

constexpr std::string_view kOpNames[] = {"H2", "V2", "H3", "V3", "ENC"};
constexpr char kStrokeLetters[] = {'h', 's', 'p', 'n', 'z'};

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

void strip_cr(std::string& line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
}

bool parse_int(std::string_view s, int& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

void serialize_into(const IdsTree& t, const Alphabet& a, TokenSeq& out) {
  if (t.is_leaf()) {
    out.push_back(a.radical_token(t.radical()));
    return;
  }
  out.push_back(a.op_token(t.op()));
  for (const auto& c : t.children()) serialize_into(c, a, out);
}

IdsTree parse_rec(std::span<const int> tokens, std::size_t& pos, const Alphabet& a) {
  if (pos >= tokens.size()) {
    throw Error(ErrorKind::MalformedIds, "arity underflow: sequence ended at token " + std::to_string(pos));
  }
  const int tok = tokens[pos];
  TokenKind kind;
  try {
    kind = a.kind(tok);
  } catch (const Error&) {
    throw Error(ErrorKind::MalformedIds, "unknown token id " + std::to_string(tok));
  }
  ++pos;
  if (kind == TokenKind::Radical) return IdsTree::leaf(a.as_radical(tok));
  if (kind != TokenKind::Op) {
    throw Error(ErrorKind::MalformedIds,
                "token " + std::to_string(tok) + " at position " + std::to_string(pos - 1) +
                    " is not an operator or radical");
  }
  const StructureOp op = a.as_op(tok);
  std::vector<IdsTree> children;
  children.reserve(static_cast<std::size_t>(arity(op)));
  for (int i = 0; i < arity(op); ++i) children.push_back(parse_rec(tokens, pos, a));
  return IdsTree::node(op, std::move(children));
}

void collect_radicals(const IdsTree& t, std::set<RadicalId>& out) {
  if (t.is_leaf()) {
    out.insert(t.radical());
    return;
  }
  for (const auto& c : t.children()) collect_radicals(c, out);
}

}  // namespace

std::string_view op_name(StructureOp op) { return kOpNames[static_cast<int>(op)]; }

std::string stroke_name(StrokeId s) {
  std::string name(1, kStrokeLetters[static_cast<int>(stroke_category(s))]);
  name += std::to_string(stroke_instance(s));
  return name;
}

// ---------------------------------------------------------------------------
// IdsTree

IdsTree IdsTree::leaf(RadicalId r) {
  IdsTree t;
  t.leaf_ = true;
  t.radical_ = r;
  return t;
}

IdsTree IdsTree::node(StructureOp op, std::vector<IdsTree> children) {
  if (static_cast<int>(children.size()) != arity(op)) {
    throw Error(ErrorKind::MalformedIds, std::string(op_name(op)) + " expects " +
                                             std::to_string(arity(op)) + " children, got " +
                                             std::to_string(children.size()));
  }
  IdsTree t;
  t.leaf_ = false;
  t.op_ = op;
  t.children_ = std::move(children);
  return t;
}

int IdsTree::depth() const {
  int d = 0;
  for (const auto& c : children_) d = std::max(d, c.depth());
  return d + 1;
}

int IdsTree::node_count() const {
  if (leaf_) return 0;
  int n = 1;
  for (const auto& c : children_) n += c.node_count();
  return n;
}

int IdsTree::leaf_count() const {
  if (leaf_) return 1;
  int n = 0;
  for (const auto& c : children_) n += c.leaf_count();
  return n;
}

std::vector<RadicalId> IdsTree::leaves() const {
  std::vector<RadicalId> out;
  if (leaf_) {
    out.push_back(radical_);
    return out;
  }
  for (const auto& c : children_) {
    auto sub = c.leaves();
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alphabet

Alphabet::Alphabet(int radicals, int class_capacity, int strokes)
    : radicals_(radicals), strokes_(strokes), classes_(class_capacity) {}

int Alphabet::radical_token(RadicalId r) const {
  if (r.value >= radicals_) throw Error(ErrorKind::UnknownRadical, "radical " + std::to_string(r.value));
  return kNumOps + r.value;
}

int Alphabet::stroke_token(StrokeId s) const {
  if (s.value >= strokes_) throw Error(ErrorKind::UnknownToken, "stroke " + std::to_string(s.value));
  return kNumOps + radicals_ + s.value;
}

int Alphabet::class_token(int class_id) const {
  if (class_id < 0 || class_id >= classes_) {
    throw Error(ErrorKind::UnknownToken, "class token " + std::to_string(class_id) +
                                             " beyond capacity " + std::to_string(classes_));
  }
  return kNumOps + radicals_ + strokes_ + class_id;
}

TokenKind Alphabet::kind(int token) const {
  if (token < 0 || token >= size()) throw Error(ErrorKind::UnknownToken, "token id " + std::to_string(token));
  if (token < kNumOps) return TokenKind::Op;
  if (token < kNumOps + radicals_) return TokenKind::Radical;
  if (token < kNumOps + radicals_ + strokes_) return TokenKind::Stroke;
  if (token < first_special()) return TokenKind::Class;
  if (token == end()) return TokenKind::End;
  if (token == pad()) return TokenKind::Pad;
  return TokenKind::Bos;
}

StructureOp Alphabet::as_op(int token) const {
  if (kind(token) != TokenKind::Op) throw Error(ErrorKind::UnknownToken, "not an operator");
  return static_cast<StructureOp>(token);
}

RadicalId Alphabet::as_radical(int token) const {
  if (kind(token) != TokenKind::Radical) throw Error(ErrorKind::UnknownToken, "not a radical");
  return RadicalId{static_cast<std::uint16_t>(token - kNumOps)};
}

StrokeId Alphabet::as_stroke(int token) const {
  if (kind(token) != TokenKind::Stroke) throw Error(ErrorKind::UnknownToken, "not a stroke");
  return StrokeId{static_cast<std::uint16_t>(token - kNumOps - radicals_)};
}

int Alphabet::as_class(int token) const {
  if (kind(token) != TokenKind::Class) throw Error(ErrorKind::UnknownToken, "not a class token");
  return token - kNumOps - radicals_ - strokes_;
}

// ---------------------------------------------------------------------------
// Parse / serialize

IdsTree parse_ids(std::span<const int> tokens, const Alphabet& alphabet) {
  if (tokens.empty()) throw Error(ErrorKind::MalformedIds, "empty sequence");
  std::size_t pos = 0;
  IdsTree tree = parse_rec(tokens, pos, alphabet);
  if (pos != tokens.size()) {
    throw Error(ErrorKind::MalformedIds, std::to_string(tokens.size() - pos) + " trailing token(s)");
  }
  return tree;
}

TokenSeq serialize_ids(const IdsTree& tree, const Alphabet& alphabet) {
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(tree.node_count() + tree.leaf_count() + 1));
  serialize_into(tree, alphabet, out);
  out.push_back(alphabet.end());
  return out;
}

IdsTree random_tree(Rng& rng, int radicals, int max_depth, double leaf_probability) {
  if (max_depth <= 1 || rng.uniform() < leaf_probability) {
    return IdsTree::leaf(RadicalId{static_cast<std::uint16_t>(rng.below(static_cast<std::size_t>(radicals)))});
  }
  auto op = static_cast<StructureOp>(rng.below(kNumOps));
  std::vector<IdsTree> children;
  for (int i = 0; i < arity(op); ++i) children.push_back(random_tree(rng, radicals, max_depth - 1, leaf_probability));
  return IdsTree::node(op, std::move(children));
}

std::string_view level_name(Level level) {
  switch (level) {
    case Level::Character: return "character";
    case Level::Radical: return "radical";
    case Level::Stroke: return "stroke";
  }
  return "radical";
}

Level parse_level(std::string_view name) {
  if (name == "character") return Level::Character;
  if (name == "radical") return Level::Radical;
  if (name == "stroke") return Level::Stroke;
  throw Error(ErrorKind::Config, "unknown decomposition level '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Lexicon

Lexicon::Lexicon(std::vector<std::string> radical_names,
                 std::vector<std::vector<StrokeId>> radical_strokes,
                 std::vector<LexiconEntry> entries)
    : radical_names_(std::move(radical_names)),
      radical_strokes_(std::move(radical_strokes)),
      entries_(std::move(entries)) {
  validate();
}

void Lexicon::validate() const {
  if (radical_strokes_.size() != radical_names_.size()) {
    throw Error(ErrorKind::LexiconFormat, "stroke table does not cover the radical inventory");
  }
  std::set<std::string> names;
  for (const auto& n : radical_names_) {
    if (n.empty() || !names.insert(n).second) throw Error(ErrorKind::LexiconFormat, "bad or duplicate radical name '" + n + "'");
    for (auto op : kOpNames) {
      if (n == op) throw Error(ErrorKind::LexiconFormat, "radical name collides with operator '" + n + "'");
    }
    if (n == "END" || n == "PAD" || n == "BOS" || n[0] == '#' ||
        (n.size() == 2 && std::string_view("hspnz").find(n[0]) != std::string_view::npos &&
         n[1] >= '0' && n[1] <= '9')) {
      throw Error(ErrorKind::LexiconFormat, "radical name collides with a reserved token '" + n + "'");
    }
  }
  const Alphabet a = alphabet();
  std::unordered_map<std::string, int> seen;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.class_id != static_cast<int>(i)) {
      throw Error(ErrorKind::LexiconFormat, "class ids must be contiguous from 0; found " +
                                                std::to_string(e.class_id) + " at row " + std::to_string(i));
    }
    for (auto r : e.tree.leaves()) {
      if (r.value >= radical_count()) throw Error(ErrorKind::UnknownRadical, "class " + std::to_string(i));
    }
    TokenSeq seq = serialize_ids(e.tree, a);
    std::string key(reinterpret_cast<const char*>(seq.data()), seq.size() * sizeof(int));
    auto [it, inserted] = seen.emplace(std::move(key), e.class_id);
    if (!inserted) {
      throw Error(ErrorKind::DuplicateIds, "classes " + std::to_string(it->second) + " and " +
                                               std::to_string(e.class_id) + " share one IDS");
    }
  }
}

const LexiconEntry& Lexicon::entry(int class_id) const {
  if (class_id < 0 || class_id >= size()) throw Error(ErrorKind::UnknownClass, "class " + std::to_string(class_id));
  return entries_[static_cast<std::size_t>(class_id)];
}

const std::vector<StrokeId>& Lexicon::strokes_of(RadicalId r) const {
  if (!has_strokes(r)) throw Error(ErrorKind::UnknownRadical, "radical " + std::to_string(r.value) + " has no stroke entry");
  return radical_strokes_[r.value];
}

bool Lexicon::has_strokes(RadicalId r) const {
  return r.value < radical_strokes_.size() && !radical_strokes_[r.value].empty();
}

std::string Lexicon::token_name(int token, const Alphabet& a) const {
  switch (a.kind(token)) {
    case TokenKind::Op: return std::string(op_name(a.as_op(token)));
    case TokenKind::Radical: return radical_names_.at(a.as_radical(token).value);
    case TokenKind::Stroke: return stroke_name(a.as_stroke(token));
    case TokenKind::Class: return "#" + std::to_string(a.as_class(token));
    case TokenKind::End: return "END";
    case TokenKind::Pad: return "PAD";
    case TokenKind::Bos: return "BOS";
  }
  return "?";
}

int Lexicon::token_from_name(std::string_view name, const Alphabet& a) const {
  for (int i = 0; i < kNumOps; ++i) {
    if (name == kOpNames[i]) return i;
  }
  if (name == "END") return a.end();
  if (name == "PAD") return a.pad();
  if (name == "BOS") return a.bos();
  for (std::size_t i = 0; i < radical_names_.size(); ++i) {
    if (name == radical_names_[i]) return a.radical_token(RadicalId{static_cast<std::uint16_t>(i)});
  }
  if (!name.empty() && name[0] == '#') {
    int c = 0;
    if (parse_int(name.substr(1), c)) return a.class_token(c);
  }
  if (name.size() >= 2) {
    auto cat = std::string_view("hspnz").find(name[0]);
    int inst = 0;
    if (cat != std::string_view::npos && parse_int(name.substr(1), inst) && inst >= 0 && inst < kStrokeInstances) {
      return a.stroke_token(StrokeId{static_cast<std::uint16_t>(cat * kStrokeInstances + inst)});
    }
  }
  throw Error(ErrorKind::UnknownToken, "'" + std::string(name) + "'");
}

TokenSeq Lexicon::tokens_from_text(std::string_view text, const Alphabet& a) const {
  TokenSeq out;
  for (auto w : split_ws(text)) out.push_back(token_from_name(w, a));
  return out;
}

std::string Lexicon::tokens_to_text(std::span<const int> tokens, const Alphabet& a) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_name(tokens[i], a);
  }
  return out;
}

int Lexicon::add_class(std::string name, IdsTree tree) {
  const int id = size();
  entries_.push_back(LexiconEntry{id, std::move(name), std::move(tree)});
  try {
    validate();
  } catch (...) {
    entries_.pop_back();
    throw;
  }
  return id;
}

std::vector<std::vector<int>> Lexicon::stroke_collisions() const {
  std::map<std::vector<StrokeId>, std::vector<int>> groups;
  for (const auto& e : entries_) {
    bool ok = true;
    for (auto r : e.tree.leaves()) ok = ok && has_strokes(r);
    if (ok) groups[expand_strokes(e.tree, *this)].push_back(e.class_id);
  }
  std::vector<std::vector<int>> out;
  for (auto& [k, v] : groups) {
    if (v.size() > 1) out.push_back(v);
  }
  return out;
}

std::uint64_t Lexicon::hash() const {
  std::uint64_t h = fnv1a("lexicon");
  for (std::size_t r = 0; r < radical_names_.size(); ++r) {
    h = fnv1a(radical_names_[r], h);
    for (auto s : radical_strokes_[r]) h = hash_combine(h, s.value);
  }
  const Alphabet a = alphabet();
  for (const auto& e : entries_) {
    h = fnv1a(e.name, h);
    for (int t : serialize_ids(e.tree, a)) h = hash_combine(h, static_cast<std::uint64_t>(t));
  }
  return h;
}

Lexicon Lexicon::load(const std::filesystem::path& lexicon_tsv, const std::filesystem::path& strokes_tsv) {
  std::ifstream sf(strokes_tsv);
  if (!sf) throw Error(ErrorKind::Io, "cannot open " + strokes_tsv.string());
  std::vector<std::string> radical_names;
  std::vector<std::vector<StrokeId>> radical_strokes;
  std::string line;
  int row = 0;
  // Parse stroke names without an alphabet (strokes are independent of it).
  auto stroke_from_name = [](std::string_view w, int row_no) {
    auto cat = std::string_view("hspnz").find(w.empty() ? '?' : w[0]);
    int inst = 0;
    if (w.size() < 2 || cat == std::string_view::npos || !parse_int(w.substr(1), inst) || inst < 0 ||
        inst >= kStrokeInstances) {
      throw Error(ErrorKind::LexiconFormat, "stroke table row " + std::to_string(row_no) + ": bad stroke '" +
                                                std::string(w) + "'");
    }
    return StrokeId{static_cast<std::uint16_t>(cat * kStrokeInstances + inst)};
  };
  while (std::getline(sf, line)) {
    ++row;
    strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto cols = split(line, '\t');
    if (cols.size() != 2) {
      throw Error(ErrorKind::LexiconFormat, "stroke table row " + std::to_string(row) + ": expected 2 columns");
    }
    radical_names.emplace_back(cols[0]);
    std::vector<StrokeId> strokes;
    for (auto w : split_ws(cols[1])) strokes.push_back(stroke_from_name(w, row));
    if (strokes.empty()) throw Error(ErrorKind::LexiconFormat, "stroke table row " + std::to_string(row) + ": no strokes");
    radical_strokes.push_back(std::move(strokes));
  }

  std::ifstream lf(lexicon_tsv);
  if (!lf) throw Error(ErrorKind::Io, "cannot open " + lexicon_tsv.string());
  // Build a partial lexicon to resolve radical names.
  Lexicon names_only;
  names_only.radical_names_ = radical_names;
  names_only.radical_strokes_ = radical_strokes;
  const Alphabet a(static_cast<int>(radical_names.size()), 0);
  std::vector<LexiconEntry> entries;
  row = 0;
  while (std::getline(lf, line)) {
    ++row;
    strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto cols = split(line, '\t');
    if (cols.size() != 3) {
      throw Error(ErrorKind::LexiconFormat, "lexicon row " + std::to_string(row) + ": expected 3 columns");
    }
    LexiconEntry e;
    if (!parse_int(cols[0], e.class_id)) {
      throw Error(ErrorKind::LexiconFormat, "lexicon row " + std::to_string(row) + ": bad class id");
    }
    e.name = std::string(cols[1]);
    try {
      TokenSeq toks = names_only.tokens_from_text(cols[2], a);
      e.tree = parse_ids(toks, a);
    } catch (const Error& err) {
      throw Error(ErrorKind::LexiconFormat, "lexicon row " + std::to_string(row) + ": " + err.what());
    }
    entries.push_back(std::move(e));
  }
  return Lexicon(std::move(radical_names), std::move(radical_strokes), std::move(entries));
}

void Lexicon::save(const std::filesystem::path& lexicon_tsv, const std::filesystem::path& strokes_tsv) const {
  std::ofstream sf(strokes_tsv);
  if (!sf) throw Error(ErrorKind::Io, "cannot write " + strokes_tsv.string());
  for (std::size_t r = 0; r < radical_names_.size(); ++r) {
    sf << radical_names_[r] << '\t';
    for (std::size_t i = 0; i < radical_strokes_[r].size(); ++i) {
      if (i) sf << ' ';
      sf << stroke_name(radical_strokes_[r][i]);
    }
    sf << '\n';
  }
  std::ofstream lf(lexicon_tsv);
  if (!lf) throw Error(ErrorKind::Io, "cannot write " + lexicon_tsv.string());
  const Alphabet a = alphabet();
  for (const auto& e : entries_) {
    TokenSeq seq = serialize_ids(e.tree, a);
    seq.pop_back();
    lf << e.class_id << '\t' << e.name << '\t' << tokens_to_text(seq, a) << '\n';
  }
  if (!sf || !lf) throw Error(ErrorKind::Io, "write failed");
}

// ---------------------------------------------------------------------------

std::vector<StrokeId> expand_strokes(const IdsTree& tree, const Lexicon& lex) {
  std::vector<StrokeId> out;
  for (auto r : tree.leaves()) {
    const auto& s = lex.strokes_of(r);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

TokenSeq tokens_for_level(int class_id, const Lexicon& lex, Level level, const Alphabet& alphabet) {
  const auto& e = lex.entry(class_id);
  switch (level) {
    case Level::Character:
      return {alphabet.class_token(class_id), alphabet.end()};
    case Level::Radical:
      return serialize_ids(e.tree, alphabet);
    case Level::Stroke: {
      TokenSeq out;
      for (auto s : expand_strokes(e.tree, lex)) out.push_back(alphabet.stroke_token(s));
      out.push_back(alphabet.end());
      return out;
    }
  }
  return {};
}

std::map<RadicalId, int> radical_frequencies(const Lexicon& lex, std::span<const int> class_subset) {
  std::map<RadicalId, int> freq;
  for (int c : class_subset) {
    std::set<RadicalId> present;
    collect_radicals(lex.entry(c).tree, present);
    for (auto r : present) ++freq[r];
  }
  return freq;
}

int resolve_stroke_sequence(const Lexicon& lex, std::span<const StrokeId> strokes) {
  for (const auto& e : lex.entries()) {
    auto s = expand_strokes(e.tree, lex);
    if (std::equal(s.begin(), s.end(), strokes.begin(), strokes.end())) return e.class_id;
  }
  return -1;
}

}  // namespace radicalign::ids
