#pragma once

#include <string>
#include <vector>

#include "momentflow/matrix.hpp"
#include "momentflow/model.hpp"
#include "momentflow/posterior.hpp"

namespace momentflow {

struct SensitivityOptions {
    double stop_threshold = 0.1;     // NLPD gap triggering the stop
    std::size_t max_iterations = 2000;
    double learning_rate = 5e-3;     // Adam on the log-variances
    double init_variance = 1e-5;
    double probit_scale = 1.0;
};

struct SensitivityMap {
    Vector sigma;            // learned per-input-dim standard deviations
    Vector normalised_map;   // min-max rescaling of sigma into [0,1]
    std::size_t iterations = 0;
    double final_nlpd_gap = 0.0;
    Vector loss_trace;
};

/// Learns a diagonal input covariance for one image by minimising
/// cross-entropy of the probit head (after moment propagation) minus the
/// input-distribution entropy. Adam on rho = log sigma^2; gradients by a
/// reverse sweep over the variance path (the mean path does not depend on
/// rho). Stops once the per-datum NLPD exceeds its initial value by the
/// threshold, or at max_iterations. Classification MLPs only.
SensitivityMap optimize_input_covariance(const NetworkModel& net, const PosteriorSpec& post,
                                         const Vector& x, std::size_t y,
                                         const SensitivityOptions& opts);

/// Loss and gradient of the sensitivity objective at rho (exposed for
/// finite-difference validation).
double sensitivity_loss_grad(const NetworkModel& net, const PosteriorSpec& post, const Vector& x,
                             std::size_t y, const Vector& rho, double probit_scale,
                             Vector* grad_rho);

struct LinearityProbe {
    Vector eps;            // probe magnitudes
    Matrix delta;          // eps x output-dim expected absolute deviations
    Vector output_range;   // per-dim max-min of f over the input set
};

/// Expected |f(z(1 +- eps)) - f(z)(1 +- eps)| per output dimension,
/// averaged over inputs and both signs. `scaled` divides by the per-dim
/// output range. Zero everywhere for (bias-free) linear networks.
LinearityProbe linearity_probe(const NetworkModel& net, const std::vector<Vector>& inputs,
                               const Vector& eps_list, bool scaled = false);

struct EntropyDensity {
    Vector grid;
    Vector density;
    double bandwidth_variance = 0.25;
};

/// Gaussian KDE over entropy samples. density(t) = mean_n N(t; e_n, bw).
EntropyDensity entropy_kde(const Vector& entropies, const Vector& grid,
                           double bandwidth_variance = 0.25);

/// Evenly spaced grid covering [min(e)-4, max(e)+4] so the density
/// integrates to 1 well within 1e-3 by trapezoid rule.
Vector default_entropy_grid(const Vector& entropies, std::size_t points = 512);

/// -sum p log p in nats, with 0 log 0 := 0.
double predictive_entropy(const Vector& probs);

/// Portable graymap (P2) of a normalised map laid out h x w, displayed in
/// the (0.5, 1.0) gray range.
void write_pgm(const std::string& path, const Vector& normalised, std::size_t h, std::size_t w);

}  // namespace momentflow
