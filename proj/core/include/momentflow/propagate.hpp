#pragma once

#include <vector>

#include "momentflow/matrix.hpp"
#include "momentflow/model.hpp"
#include "momentflow/posterior.hpp"

namespace momentflow {

enum class CovKind { deterministic, diagonal, full };

/// Gaussian moments of the value flowing through the network, carried in
/// place of samples. `mean` is T x D row-major for token sequences and
/// 1 x D otherwise. Full covariances are stored per token (one D x D block
/// per row of `mean`; distinct tokens are treated as independent).
struct MomentState {
    Matrix mean;
    CovKind kind = CovKind::deterministic;
    Matrix var;               // diagonal kind: same shape as mean
    std::vector<Matrix> cov;  // full kind: one block per token
    TensorShape shape;

    static MomentState deterministic_input(const Vector& x);
    static MomentState diagonal_input(const Vector& x, const Vector& variances);
    static MomentState full_input(const Vector& x, const Matrix& covariance);

    std::size_t tokens() const { return mean.rows; }
    std::size_t dim() const { return mean.cols; }

    /// Variance vector of token t regardless of kind (zeros when
    /// deterministic, the covariance diagonal when full).
    Vector token_variances(std::size_t t) const;

    /// Flat per-coordinate variances across all tokens.
    Vector variances() const;
};

enum class CovMode { diag, full };
enum class ValueCov { full, variance_only };

struct PropagationConfig {
    /// Activation-covariance bookkeeping: `full` carries D x D blocks
    /// through every layer, `diag` keeps per-coordinate variances and drops
    /// cross-covariances after each linear map. Conv layers require diag.
    CovMode activation_cov_mode = CovMode::diag;
    /// Whether attention value vectors keep their within-token
    /// cross-covariances or only the variances.
    ValueCov attention_value_cov = ValueCov::full;
    /// Distinct tokens are always treated as independent.
    bool token_independence = true;
};

// Per-layer propagation. Inputs are immutable; every op returns a fresh
// state. Variances are clamped at zero from below; a computed variance
// under -1e-12 raises NumericalError.

MomentState propagate_linear(const MomentState& state, const LinearLayer& layer,
                             const LayerPosterior& post, const PropagationConfig& cfg);

MomentState propagate_activation(const MomentState& state, Activation kind);

MomentState propagate_layernorm(const MomentState& state, const LayerNormLayer& layer);

/// Residual combination: means add, covariances add (branches assumed
/// independent).
MomentState propagate_residual(const MomentState& state_in, const MomentState& inner_out);

/// Scores are frozen at the input means (deterministic, row-stochastic);
/// value moments follow the deterministic / diagonal-Gaussian W_V formulas;
/// heads are treated as independent; W_O is applied via propagate_linear.
/// Requires diagonal (or deterministic) input covariance.
MomentState propagate_attention(const MomentState& state, const AttentionLayer& layer,
                                const LayerPosterior& post, const PropagationConfig& cfg);

/// Diag mode only; kernel posterior deterministic or diagonal.
MomentState propagate_conv2d(const MomentState& state, const Conv2dLayer& layer,
                             const LayerPosterior& post, const PropagationConfig& cfg);

MomentState propagate_avgpool(const MomentState& state, const AvgPool2dLayer& layer);

MomentState propagate_flatten(const MomentState& state);

/// Folds the per-layer ops over the network; returns the output-layer
/// moments (pre-softmax logits for classification). Errors from per-layer
/// ops are rethrown with the layer index attached.
MomentState propagate_network(const NetworkModel& net, const PosteriorSpec& post,
                              const MomentState& input, const PropagationConfig& cfg);

/// Same walk, but also records the state after every flattened layer.
std::vector<MomentState> propagate_network_trace(const NetworkModel& net, const PosteriorSpec& post,
                                                 const MomentState& input,
                                                 const PropagationConfig& cfg);

}  // namespace momentflow
