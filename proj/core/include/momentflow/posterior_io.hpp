#pragma once

#include <string>

#include "momentflow/posterior.hpp"

namespace momentflow {

/// Posterior JSON: {"version":1, "layers":{"<idx>":{"structure":...}}}.
/// Kfac entries store the raw factors plus "lambda" (the prior precision
/// lambda^2) and "convention"; the factor inversion happens on load.
void save_posterior(const PosteriorSpec& spec, const std::string& path);
PosteriorSpec load_posterior(const std::string& path);

}  // namespace momentflow
