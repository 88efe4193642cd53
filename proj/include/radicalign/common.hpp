#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace radicalign {

enum class ErrorKind {
  MalformedIds,
  UnknownRadical,
  UnknownClass,
  UnknownToken,
  DuplicateIds,
  LexiconFormat,
  MissingBitmap,
  LineTooLong,
  Io,
  ShapeMismatch,
  NonFiniteValue,
  SequenceTooLong,
  EmptyDataset,
  EmptyCandidates,
  DimensionMismatch,
  LabelOutOfRange,
  CandidateMissing,
  DuplicateClass,
  SplitOverflow,
  DegenerateSplit,
  LengthMismatch,
  Config,
  Checkpoint,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` distinguishes the
/// failure classes callers and tests care about.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// splitmix64 finalizer; the basis for every derived seed in the project.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Named sub-seed, e.g. derive_seed(seed, "init").
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return hash_combine(seed, fnv1a(name));
}

std::string hex64(std::uint64_t v);

/// Small deterministic PRNG (splitmix64 stream). Distributions are computed
/// here rather than with <random> so that outputs do not depend on the
/// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::size_t below(std::size_t n) { return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n); }

  double normal();

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace radicalign
