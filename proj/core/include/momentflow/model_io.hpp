#pragma once

#include <string>

#include "momentflow/model.hpp"

namespace momentflow {

/// Model JSON: {"version":1, "task", "input_dim", "num_outputs",
/// "layers":[...]}; real-64 parameters round-trip bit-exactly.
void save_model(const NetworkModel& net, const std::string& path);
NetworkModel load_model(const std::string& path);

}  // namespace momentflow
