#include "radicalign/common.hpp"

#include <cmath>
#include <cstdio>

namespace radicalign {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedIds: return "MalformedIds";
    case ErrorKind::UnknownRadical: return "UnknownRadical";
    case ErrorKind::UnknownClass: return "UnknownClass";
    case ErrorKind::UnknownToken: return "UnknownToken";
    case ErrorKind::DuplicateIds: return "DuplicateIds";
    case ErrorKind::LexiconFormat: return "LexiconFormat";
    case ErrorKind::MissingBitmap: return "MissingBitmap";
    case ErrorKind::LineTooLong: return "LineTooLong";
    case ErrorKind::Io: return "Io";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::SequenceTooLong: return "SequenceTooLong";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::EmptyCandidates: return "EmptyCandidates";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::CandidateMissing: return "CandidateMissing";
    case ErrorKind::DuplicateClass: return "DuplicateClass";
    case ErrorKind::SplitOverflow: return "SplitOverflow";
    case ErrorKind::DegenerateSplit: return "DegenerateSplit";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::Config: return "Config";
    case ErrorKind::Checkpoint: return "Checkpoint";
  }
  return "Unknown";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double Rng::normal() {
  // Box-Muller; one draw discarded for simplicity.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace radicalign
