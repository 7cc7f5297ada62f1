#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace doseopt::bsgs {

// Bit k set <=> dummy indicator k equals 1. Schemas are limited to 32 indicators.
using IndicatorMask = std::uint32_t;

enum class SlabKind { Gaussian, TruncatedPositive, TruncatedNegative };

const char* to_string(SlabKind kind);

struct Characteristic {
  std::string name;
  std::vector<std::string> levels;
  std::vector<double> prevalence;
  std::size_t reference = 0;
  // Levels ordered from lowest to highest expected response. Empty when the
  // direction of association is unknown, which gives Gaussian slabs.
  std::vector<std::string> response_order;
  double slab_sd = 5.0;
  double q_group = 0.5;
  double q_level = 0.5;
};

// One non-reference level of one characteristic.
struct Indicator {
  std::size_t characteristic;
  std::size_t level;
  SlabKind slab;
  double slab_sd;
  double q_level;
  std::string name;  // "characteristic=level"
};

class CovariateSchema {
 public:
  CovariateSchema() = default;
  explicit CovariateSchema(std::vector<Characteristic> characteristics);

  const std::vector<Characteristic>& characteristics() const { return characteristics_; }
  const std::vector<Indicator>& indicators() const { return indicators_; }
  std::size_t num_characteristics() const { return characteristics_.size(); }
  std::size_t num_indicators() const { return indicators_.size(); }
  IndicatorMask all_indicators() const;

  // Indicators belonging to characteristic h.
  IndicatorMask group_mask(std::size_t h) const;

  // Dummy coding of one level index per characteristic.
  IndicatorMask encode(std::span<const int> levels) const;
  void validate_levels(std::span<const int> levels) const;

  // -1 when the level is the reference level.
  int indicator_index(std::string_view characteristic, std::string_view level) const;
  std::size_t characteristic_index(std::string_view name) const;
  int level_index(std::size_t characteristic, std::string_view level) const;

  // Same characteristics with a different reference level; slab kinds are re-derived.
  CovariateSchema with_reference(std::string_view characteristic, std::string_view level) const;

  // Full covariate patterns in mixed radix (first characteristic varies slowest).
  std::size_t num_patterns() const;
  std::vector<int> pattern_levels(std::size_t pattern) const;
  std::size_t pattern_index(std::span<const int> levels) const;
  double pattern_prevalence(std::span<const int> levels) const;

  std::string describe(std::span<const int> levels) const;

 private:
  std::vector<Characteristic> characteristics_;
  std::vector<Indicator> indicators_;
};

// The four characteristics of the motivating example: prior ROS1/ALK
// inhibitor treatment, gender, gene location and molecular alteration type.
CovariateSchema motivating_example_schema();

}  // namespace doseopt::bsgs
