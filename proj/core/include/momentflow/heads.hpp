#pragma once

#include <cstddef>
#include <vector>

#include "momentflow/matrix.hpp"
#include "momentflow/model.hpp"

namespace momentflow {

/// Predictive distribution for one datum. Regression: N(mean,
/// scale*model_var + obs_noise) with the fields kept separate so the scale
/// can be refit. Classification: probit-approximated class probabilities
/// together with the raw logit moments.
struct PredictiveDist {
    Task task = Task::regression;
    // regression
    double mean = 0.0;
    double model_var = 0.0;
    double obs_noise = 0.0;
    // classification
    Vector probs;
    Vector logit_mean;
    Vector logit_var;
};

/// Mean-field probit approximation: softmax(mu_c / sqrt(1 + (pi/8) * scale
/// * var_c)). Zero variances recover the plain softmax.
Vector probit_classify(const Vector& logit_mean, const Vector& logit_var, double scale);

PredictiveDist regression_predict(double mean, double model_var, double obs_noise, double scale);

PredictiveDist classification_predict(const Vector& logit_mean, const Vector& logit_var,
                                      double scale);

/// Gaussian NLPD in nats of target y under N(mean, scale*model_var +
/// obs_noise).
double regression_nlpd(const PredictiveDist& p, double y, double scale);

/// -log probs[y] after re-applying the probit head at `scale`.
double classification_nlpd(const PredictiveDist& p, std::size_t y, double scale);

/// Logarithmic grid of `points` values spanning [lo, hi].
Vector log_grid(double lo, double hi, std::size_t points);

/// Variance scale minimising the mean validation NLPD over `grid`; ties
/// break toward the point nearest 1.0. Classification targets index into
/// `class_targets`; regression uses `real_targets`.
double fit_variance_scale(const std::vector<PredictiveDist>& preds, const Vector& real_targets,
                          const std::vector<std::size_t>& class_targets, const Vector& grid);

struct DatumRecord {
    double nlpd = 0.0;
    double sq_error = 0.0;   // regression
    bool correct = false;    // classification
    double confidence = 0.0; // max predicted probability
    std::size_t predicted = 0;
};

struct MetricReport {
    double nlpd = 0.0;
    double acc = 0.0;
    double rmse = 0.0;
    double ece = 0.0;
    std::vector<DatumRecord> per_datum;
};

/// NLPD / ACC / RMSE / ECE (15 equal-width confidence bins on the max
/// predicted probability). Aggregates are means of the retained per-datum
/// records. Predictions must already carry their final scale-applied
/// moments (pass scale=1 here after fitting, or the chosen scale).
MetricReport compute_metrics(const std::vector<PredictiveDist>& preds, const Vector& real_targets,
                             const std::vector<std::size_t>& class_targets, Task task,
                             double scale);

}  // namespace momentflow
