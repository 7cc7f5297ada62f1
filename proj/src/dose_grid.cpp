#include "doseopt/dose_grid.hpp"

#include <string>

#include "doseopt/error.hpp"

namespace doseopt {

void validate_skeleton(std::span<const double> skeleton) {
  if (skeleton.size() < 2) throw InputError("dose grid needs at least two levels", {"skeleton"});
  for (std::size_t j = 0; j < skeleton.size(); ++j) {
    if (!(skeleton[j] > 0.0 && skeleton[j] < 1.0))
      throw InputError("skeleton probability outside (0,1)", {"skeleton/" + std::to_string(j)});
    if (j > 0 && !(skeleton[j] > skeleton[j - 1]))
      throw InputError("skeleton must be strictly increasing", {"skeleton/" + std::to_string(j)});
  }
}

DoseGrid::DoseGrid(std::vector<double> dosage, std::vector<double> skeleton)
    : dosage_(std::move(dosage)), skeleton_(std::move(skeleton)) {
  if (dosage_.size() != skeleton_.size())
    throw InputError("dosage and skeleton lengths differ", {"dosage", "skeleton"});
  validate_skeleton(skeleton_);
  for (std::size_t j = 0; j < dosage_.size(); ++j) {
    if (!(dosage_[j] > 0.0)) throw InputError("dosage must be positive", {"dosage/" + std::to_string(j)});
    if (j > 0 && !(dosage_[j] > dosage_[j - 1]))
      throw InputError("dosage must be strictly increasing", {"dosage/" + std::to_string(j)});
  }
}

}  // namespace doseopt
