#pragma once

#include <string>
#include <vector>

#include "momentflow/heads.hpp"
#include "momentflow/model.hpp"
#include "momentflow/posterior.hpp"
#include "momentflow/propagate.hpp"

namespace momentflow {

struct McConfig {
    std::size_t num_samples = 1000;
    std::uint64_t seed = 0;
    std::vector<std::size_t> capture_layers;  // flattened layer indices
};

/// Empirical mean/covariance with standard-error estimates.
struct EmpiricalMoments {
    Vector mean;
    Matrix cov;
    Vector mean_se;  // sqrt(var/S) per coordinate
    Matrix cov_se;   // sqrt((C_ii C_jj + C_ij^2)/S)
    std::size_t samples = 0;
};

/// Monte-Carlo predictive: classification averages softmax(logits_s) over
/// draws; regression uses the sample mean/variance of the output plus the
/// observation noise. Per-sample RNG streams are keyed by the sample index,
/// so results are bit-reproducible for a fixed seed regardless of batching.
struct McPrediction {
    PredictiveDist dist;
    Matrix sample_outputs;  // S x num_outputs
};
McPrediction mc_predict(const NetworkModel& net, const PosteriorSpec& post, const Vector& x,
                        const McConfig& cfg, double obs_noise = 0.0);

/// Empirical moments of the raw network output over S joint weight draws.
EmpiricalMoments mc_output_moments(const NetworkModel& net, const PosteriorSpec& post,
                                   const Vector& x, const McConfig& cfg);

/// Empirical moments of the captured layers' outputs (pre-activations when
/// the indices name Linear layers), keyed by layer index order.
std::vector<EmpiricalMoments> mc_layer_moments(const NetworkModel& net, const PosteriorSpec& post,
                                               const Vector& x, const McConfig& cfg);

struct BenchStrategy {
    enum class Kind { map_forward, mc, analytic } kind = Kind::map_forward;
    std::size_t samples = 0;          // mc
    PropagationConfig propagation;    // analytic
    std::string name;
};

struct BenchResult {
    std::string strategy;
    std::size_t samples = 0;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    std::size_t n_inputs = 0;
};

/// Wallclock per strategy: for each input, `warmup` discarded runs then
/// `repeats` timed runs; mean/std over repeats x inputs. Monotonic clock,
/// batch size one.
std::vector<BenchResult> bench_runtime(const NetworkModel& net, const PosteriorSpec& post,
                                       const std::vector<Vector>& inputs,
                                       const std::vector<BenchStrategy>& strategies,
                                       std::size_t warmup = 1, std::size_t repeats = 9,
                                       std::uint64_t seed = 0);

}  // namespace momentflow
