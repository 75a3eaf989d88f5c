#pragma once

// JSON helpers shared by checkpoints and CLI reports. Requires nlohmann/json
// (json.hpp) on the include path.

#include <json.hpp>

#include "dtmamba/metrics.hpp"
#include "dtmamba/tensor.hpp"
#include "dtmamba/train.hpp"

namespace dtmamba::json_io {

using json = nlohmann::ordered_json;

json to_json(const Tensor& t);
Tensor tensor_from_json(const json& j);

json to_json(const metrics::Report& r);
metrics::Report report_from_json(const json& j);

json to_json(const train::EpochRecord& e);
train::EpochRecord epoch_from_json(const json& j);

}  // namespace dtmamba::json_io
