#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace doseopt {

// Dose levels are 0-based indices throughout the library. Reports and the
// HTTP/CLI surfaces print them 1-based.
using Level = int;

// Ordered dose levels: dosage amounts and the prior toxicity skeleton.
class DoseGrid {
 public:
  DoseGrid(std::vector<double> dosage, std::vector<double> skeleton);

  std::size_t size() const { return dosage_.size(); }
  std::span<const double> dosage() const { return dosage_; }
  std::span<const double> skeleton() const { return skeleton_; }
  double dosage(Level j) const { return dosage_.at(static_cast<std::size_t>(j)); }
  double skeleton(Level j) const { return skeleton_.at(static_cast<std::size_t>(j)); }

  // Shipped default skeleton for the four-level motivating example.
  static std::vector<double> default_skeleton() { return {0.05, 0.12, 0.25, 0.38}; }

 private:
  std::vector<double> dosage_;
  std::vector<double> skeleton_;
};

// Checks 0 < p_1 < ... < p_J < 1; throws InputError otherwise.
void validate_skeleton(std::span<const double> skeleton);

}  // namespace doseopt
