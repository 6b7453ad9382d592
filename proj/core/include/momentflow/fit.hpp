#pragma once

#include <optional>
#include <vector>

#include "momentflow/dataset.hpp"
#include "momentflow/grad.hpp"
#include "momentflow/model.hpp"
#include "momentflow/posterior.hpp"
#include "momentflow/propagate.hpp"

namespace momentflow {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::mse;
};

struct TrainLog {
    std::vector<double> epoch_loss;  // mean per-datum training loss
};

/// Adam on the given rows (all rows when `rows` is empty). Deterministic
/// for a fixed seed. Throws TrainingError (with the epoch) on NaN loss.
NetworkModel train_map(const NetworkModel& net, const Dataset& data,
                       const std::vector<std::size_t>& rows, const TrainConfig& cfg,
                       TrainLog* log = nullptr);

enum class LaplaceStructure { diagonal, kfac, full };

struct LaplaceConfig {
    LaplaceStructure structure = LaplaceStructure::diagonal;
    Vector prior_precision_grid;             // lambda^2 candidates; default 21 log pts in [1e-2,1e3]
    std::vector<std::size_t> layer_subset;   // flattened indices of Bayesian layers; empty = all Linear layers
    std::optional<double> obs_noise;         // regression; fitted from residuals when absent
    CovMode selection_cov_mode = CovMode::diag;  // propagation mode for the lambda grid search
};

struct LaplaceFit {
    PosteriorSpec posterior;
    double prior_precision = 0.0;  // chosen lambda^2
    double obs_noise = 0.0;        // regression observation noise (standardised units)
    Vector grid_nlpd;              // validation NLPD per grid point
};

/// Gaussian posterior from log-likelihood curvature at the MAP weights.
/// Classification uses per-sample gradients at the true labels; regression
/// (mse) uses the output-Jacobian outer products divided by the observation
/// noise, which coincides with the exact Hessian for linear-Gaussian
/// models. lambda^2 is picked from the grid by validation NLPD of the
/// deterministic predictive; validation rows fall back to the training rows
/// when empty.
LaplaceFit fit_laplace(const NetworkModel& net, const Dataset& data,
                       const std::vector<std::size_t>& train_rows,
                       const std::vector<std::size_t>& val_rows, const LaplaceConfig& cfg);

/// Default lambda^2 grid: 21 logarithmic points in [1e-2, 1e3].
Vector default_prior_precision_grid();

/// Flattened indices of every Linear layer (the default Bayesian subset).
std::vector<std::size_t> linear_layer_indices(const NetworkModel& net);

/// Mean squared residual of the MAP network on the given rows.
double fit_observation_noise(const NetworkModel& net, const Dataset& data,
                             const std::vector<std::size_t>& rows);

/// Architecture helper: builds an MLP from layer sizes like {4, 50, 1}
/// with the given activation between linear layers; weights are drawn with
/// He-style scaling from `rng`.
NetworkModel make_mlp(const std::vector<std::size_t>& sizes, Activation act, Task task,
                      SeededRng& rng);

}  // namespace momentflow
