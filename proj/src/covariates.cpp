#include "doseopt/covariates.hpp"

#include <algorithm>
#include <cmath>

#include "doseopt/error.hpp"

namespace doseopt::bsgs {

const char* to_string(SlabKind kind) {
  switch (kind) {
    case SlabKind::Gaussian:
      return "gaussian";
    case SlabKind::TruncatedPositive:
      return "truncated_positive";
    case SlabKind::TruncatedNegative:
      return "truncated_negative";
  }
  return "gaussian";
}

CovariateSchema::CovariateSchema(std::vector<Characteristic> characteristics)
    : characteristics_(std::move(characteristics)) {
  for (std::size_t h = 0; h < characteristics_.size(); ++h) {
    const auto& c = characteristics_[h];
    const std::string path = "characteristics/" + std::to_string(h);
    if (c.levels.size() < 2) throw InputError("characteristic needs at least two levels", {path + "/levels"});
    if (c.prevalence.size() != c.levels.size())
      throw InputError("one prevalence per level required", {path + "/prevalence"});
    double total = 0.0;
    for (double p : c.prevalence) {
      if (p < 0.0) throw InputError("prevalence must be non-negative", {path + "/prevalence"});
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) throw InputError("prevalences must sum to 1", {path + "/prevalence"});
    if (c.reference >= c.levels.size()) throw InputError("reference level out of range", {path + "/reference"});
    if (!(c.slab_sd > 0.0)) throw InputError("slab sd must be positive", {path + "/slab_sd"});
    if (!(c.q_group > 0.0 && c.q_group < 1.0) || !(c.q_level > 0.0 && c.q_level < 1.0))
      throw InputError("inclusion probabilities must lie in (0,1)", {path});

    std::vector<int> rank(c.levels.size(), -1);
    if (!c.response_order.empty()) {
      if (c.response_order.size() != c.levels.size())
        throw InputError("response_order must list every level", {path + "/response_order"});
      for (std::size_t r = 0; r < c.response_order.size(); ++r) {
        auto it = std::find(c.levels.begin(), c.levels.end(), c.response_order[r]);
        if (it == c.levels.end()) throw InputError("unknown level in response_order", {path + "/response_order"});
        rank[static_cast<std::size_t>(it - c.levels.begin())] = static_cast<int>(r);
      }
    }
    for (std::size_t l = 0; l < c.levels.size(); ++l) {
      if (l == c.reference) continue;
      SlabKind kind = SlabKind::Gaussian;
      if (!c.response_order.empty())
        kind = rank[l] > rank[c.reference] ? SlabKind::TruncatedPositive : SlabKind::TruncatedNegative;
      indicators_.push_back({h, l, kind, c.slab_sd, c.q_level, c.name + "=" + c.levels[l]});
    }
  }
  if (indicators_.size() > 32) throw InputError("at most 32 dummy indicators are supported");
}

IndicatorMask CovariateSchema::all_indicators() const {
  return indicators_.size() == 32 ? ~IndicatorMask{0} : ((IndicatorMask{1} << indicators_.size()) - 1);
}

IndicatorMask CovariateSchema::group_mask(std::size_t h) const {
  IndicatorMask mask = 0;
  for (std::size_t k = 0; k < indicators_.size(); ++k)
    if (indicators_[k].characteristic == h) mask |= IndicatorMask{1} << k;
  return mask;
}

void CovariateSchema::validate_levels(std::span<const int> levels) const {
  if (levels.size() != characteristics_.size())
    throw InputError("one level per characteristic required", {"covariates"});
  for (std::size_t h = 0; h < levels.size(); ++h) {
    if (levels[h] < 0 || static_cast<std::size_t>(levels[h]) >= characteristics_[h].levels.size())
      throw InputError("covariate level out of range", {"covariates/" + characteristics_[h].name});
  }
}

IndicatorMask CovariateSchema::encode(std::span<const int> levels) const {
  validate_levels(levels);
  IndicatorMask z = 0;
  for (std::size_t k = 0; k < indicators_.size(); ++k) {
    const auto& ind = indicators_[k];
    if (static_cast<std::size_t>(levels[ind.characteristic]) == ind.level) z |= IndicatorMask{1} << k;
  }
  return z;
}

std::size_t CovariateSchema::characteristic_index(std::string_view name) const {
  for (std::size_t h = 0; h < characteristics_.size(); ++h)
    if (characteristics_[h].name == name) return h;
  throw InputError("unknown characteristic '" + std::string(name) + "'");
}

int CovariateSchema::level_index(std::size_t characteristic, std::string_view level) const {
  const auto& lv = characteristics_.at(characteristic).levels;
  auto it = std::find(lv.begin(), lv.end(), level);
  if (it == lv.end()) throw InputError("unknown level '" + std::string(level) + "'");
  return static_cast<int>(it - lv.begin());
}

int CovariateSchema::indicator_index(std::string_view characteristic, std::string_view level) const {
  const std::size_t h = characteristic_index(characteristic);
  const auto l = static_cast<std::size_t>(level_index(h, level));
  for (std::size_t k = 0; k < indicators_.size(); ++k)
    if (indicators_[k].characteristic == h && indicators_[k].level == l) return static_cast<int>(k);
  return -1;
}

CovariateSchema CovariateSchema::with_reference(std::string_view characteristic, std::string_view level) const {
  auto copy = characteristics_;
  const std::size_t h = characteristic_index(characteristic);
  copy[h].reference = static_cast<std::size_t>(level_index(h, level));
  return CovariateSchema(std::move(copy));
}

std::size_t CovariateSchema::num_patterns() const {
  std::size_t n = 1;
  for (const auto& c : characteristics_) n *= c.levels.size();
  return n;
}

std::vector<int> CovariateSchema::pattern_levels(std::size_t pattern) const {
  std::vector<int> levels(characteristics_.size());
  for (std::size_t h = characteristics_.size(); h-- > 0;) {
    const std::size_t radix = characteristics_[h].levels.size();
    levels[h] = static_cast<int>(pattern % radix);
    pattern /= radix;
  }
  return levels;
}

std::size_t CovariateSchema::pattern_index(std::span<const int> levels) const {
  validate_levels(levels);
  std::size_t idx = 0;
  for (std::size_t h = 0; h < characteristics_.size(); ++h)
    idx = idx * characteristics_[h].levels.size() + static_cast<std::size_t>(levels[h]);
  return idx;
}

double CovariateSchema::pattern_prevalence(std::span<const int> levels) const {
  validate_levels(levels);
  double p = 1.0;
  for (std::size_t h = 0; h < characteristics_.size(); ++h)
    p *= characteristics_[h].prevalence[static_cast<std::size_t>(levels[h])];
  return p;
}

std::string CovariateSchema::describe(std::span<const int> levels) const {
  std::string out;
  for (std::size_t h = 0; h < characteristics_.size(); ++h) {
    if (h) out += ", ";
    out += characteristics_[h].name + "=" + characteristics_[h].levels.at(static_cast<std::size_t>(levels[h]));
  }
  return out;
}

CovariateSchema motivating_example_schema() {
  std::vector<Characteristic> c(4);
  c[0].name = "prior_tx";
  c[0].levels = {"no", "yes"};
  c[0].prevalence = {0.66, 0.34};
  c[0].reference = 0;
  c[0].response_order = {"yes", "no"};
  c[1].name = "gender";
  c[1].levels = {"male", "female"};
  c[1].prevalence = {0.52, 0.48};
  c[1].reference = 0;
  c[2].name = "gene";
  c[2].levels = {"NTRK", "ROS1", "ALK"};
  c[2].prevalence = {18.0 / 61.0, 21.0 / 61.0, 22.0 / 61.0};
  c[2].reference = 2;
  c[3].name = "mutation";
  c[3].levels = {"fusion", "amplification", "other"};
  c[3].prevalence = {0.53, 0.16, 0.31};
  c[3].reference = 2;
  c[3].response_order = {"other", "amplification", "fusion"};
  return CovariateSchema(std::move(c));
}

}  // namespace doseopt::bsgs
