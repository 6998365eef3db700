#pragma once

// Error taxonomy shared across the library. Everything derives from
// fedmiss::Error so callers can catch the whole family at an arm boundary
// (the simulation harness counts these per replication instead of aborting).

#include <stdexcept>
#include <string>
#include <vector>

namespace fedmiss {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A (near-)singular system was handed to a solver; pivot fell below the
// relative threshold documented in numerics.hpp.
struct SingularMatrix : Error {
  explicit SingularMatrix(const std::string& what) : Error("singular matrix: " + what) {}
};

// Perfect separation detected during a logistic fit: the likelihood has no
// finite maximizer.
struct Separation : Error {
  std::vector<double> last_theta;
  explicit Separation(std::vector<double> theta)
      : Error("logistic fit: perfect separation, no finite maximizer"),
        last_theta(std::move(theta)) {}
};

// Iteration budget exhausted. Carries the last iterate so callers can inspect
// how far the solver got.
struct NotConverged : Error {
  std::vector<double> last_theta;
  NotConverged(const std::string& what, std::vector<double> theta)
      : Error("did not converge: " + what), last_theta(std::move(theta)) {}
};

struct DimensionMismatch : Error {
  explicit DimensionMismatch(const std::string& what) : Error("dimension mismatch: " + what) {}
};

// CSV / JSON ingestion problems. ParseError = token not interpretable;
// SchemaError = file shape violates the documented layout (e.g. a missing
// value in a column that may never be missing).
struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error("parse error: " + what) {}
};
struct SchemaError : Error {
  explicit SchemaError(const std::string& what) : Error("schema error: " + what) {}
};

// A formula references a field that is not observable on some row (for
// example y in a dataset where y is the missingness target).
struct DriverUnavailable : Error {
  explicit DriverUnavailable(const std::string& what) : Error("driver unavailable: " + what) {}
};

// Response vector for a probability model is degenerate.
struct AllCompleteOrAllMissing : Error {
  explicit AllCompleteOrAllMissing(const std::string& what)
      : Error("degenerate complete-case indicator: " + what) {}
};

// A probability weight needed for inverse weighting is <= 0 (or numerically
// indistinguishable from 0) on a complete row.
struct NonPositiveWeight : Error {
  explicit NonPositiveWeight(const std::string& what) : Error("non-positive weight: " + what) {}
};

struct DegreesOfFreedom : Error {
  explicit DegreesOfFreedom(const std::string& what)
      : Error("not enough degrees of freedom: " + what) {}
};

// Count transport requires a finite combination space; a continuous field
// makes every combination unique.
struct NonDiscreteData : Error {
  explicit NonDiscreteData(const std::string& what) : Error("non-discrete data: " + what) {}
};

// A federated run violated its own protocol contract (unexpected payload,
// wrong round, refused suppression policy, ...).
struct ProtocolViolation : Error {
  explicit ProtocolViolation(const std::string& what) : Error("protocol violation: " + what) {}
};

// A transcript file cannot be replayed (truncated, malformed, or the header
// does not describe a known algorithm).
struct CorruptTranscript : Error {
  explicit CorruptTranscript(const std::string& what) : Error("corrupt transcript: " + what) {}
};

}  // namespace fedmiss
