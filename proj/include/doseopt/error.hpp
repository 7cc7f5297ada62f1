#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace doseopt {

// Bad caller input: out-of-range values, malformed records.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what, std::vector<std::string> field_paths = {})
      : std::invalid_argument(what), field_paths_(std::move(field_paths)) {}

  const std::vector<std::string>& field_paths() const { return field_paths_; }

 private:
  std::vector<std::string> field_paths_;
};

// Non-finite integrands, divergent samplers.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation not permitted in the current trial stage.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Unknown trial, patient or job.
class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No posterior draws satisfy the requested inclusion pattern.
class ConditioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Enrollment attempted for a subgroup removed by a futility assessment.
class ExcludedSubgroupError : public StateError {
 public:
  ExcludedSubgroupError(const std::string& what, int assessment)
      : StateError(what), assessment_(assessment) {}
  int assessment() const { return assessment_; }

 private:
  int assessment_;
};

}  // namespace doseopt
