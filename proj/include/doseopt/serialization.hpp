#pragma once

#include <json.hpp>

#include "doseopt/covariates.hpp"
#include "doseopt/design_engine.hpp"
#include "doseopt/dose_grid.hpp"

// Versioned JSON documents. Doubles are written in shortest round-trip form,
// so parse(dump(x)) == x for every type here.
namespace doseopt::io {

using Json = nlohmann::json;

Json to_json(const design::DesignConfig& config);
// Missing keys keep their defaults; unknown keys are rejected with their path.
design::DesignConfig config_from_json(const Json& j);

Json to_json(const DoseGrid& grid);
DoseGrid grid_from_json(const Json& j);

Json to_json(const bsgs::CovariateSchema& schema);
bsgs::CovariateSchema schema_from_json(const Json& j);

Json to_json(const design::TrialState& state);
design::TrialState state_from_json(const Json& j);

Json to_json(const design::ObdReport& report);
Json to_json(const design::FutilityOutcome& outcome);
Json to_json(const design::PkAdjustment& adj);

}  // namespace doseopt::io
