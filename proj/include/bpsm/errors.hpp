#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bpsm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (bad index, invalid argument).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A drift metric was requested for a frame with zero ground-truth motion.
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericFailure : public Error {
 public:
  NumericFailure(const std::string& what, int iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}

  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

/// No usable evidence for a destination point (all belief weights vanish).
class DegenerateEvidence : public Error {
 public:
  DegenerateEvidence(const std::string& what, std::size_t index)
      : Error(what + " (destination point " + std::to_string(index) + ")"), index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// A registration baseline found no source point overlapping the destination model.
class NoOverlap : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

}  // namespace bpsm
