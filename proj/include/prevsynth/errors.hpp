#pragma once

#include <stdexcept>
#include <string>

namespace prevsynth {

/// Input data or configuration failed a schema/consistency check.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// A stratum carries no feasible careers, or a conditional distribution was
/// requested with its conditioning probability at 0 or 1.
class DegenerateStratumError : public std::runtime_error {
public:
  explicit DegenerateStratumError(const std::string& what) : std::runtime_error(what) {}
};

/// Drug-use-history inputs contradict each other (e.g. positive ex-IDU mass at
/// a time-since-start no duration can precede).
class InconsistentHistoryError : public std::runtime_error {
public:
  explicit InconsistentHistoryError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace prevsynth
