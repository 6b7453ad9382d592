#pragma once

#include <map>

#include "momentflow/matrix.hpp"
#include "momentflow/model.hpp"

namespace momentflow {

/// Parameter gradients of one layer; only the fields matching the layer
/// type are populated.
struct LayerGrads {
    Matrix d_weight;  // linear weight, conv kernels, or attention (unused)
    Vector d_bias;
    Matrix d_wq, d_wk, d_wv, d_wo;  // attention
    Vector d_gamma, d_beta;         // layernorm
};

struct GradResult {
    Vector output;                          // forward value at x
    Vector input_grad;                      // d loss / d input
    std::map<std::size_t, LayerGrads> layers;  // keyed by flattened layer index
    // Filled for requested Linear layers: (layer input, gradient w.r.t. the
    // layer output), the two factors of that layer's per-sample curvature.
    std::map<std::size_t, std::pair<Vector, Vector>> captures;
};

/// Forward pass plus reverse sweep seeded with d_output = d loss / d f(x).
/// `capture` optionally names Linear layers whose (input, output-gradient)
/// pairs are recorded.
GradResult backward_from_output(const NetworkModel& net, const Vector& x, const Vector& d_output,
                                const std::vector<std::size_t>* capture = nullptr);

enum class LossKind { mse, cross_entropy };

/// Loss value and gradients for one labelled datum. mse is the half squared
/// error 0.5*sum_c (f_c - y_c)^2; cross_entropy applies softmax internally
/// and expects a class index in `class_target`.
struct LossGrad {
    double loss = 0.0;
    GradResult grads;
};
LossGrad loss_backward(const NetworkModel& net, const Vector& x, LossKind kind, double real_target,
                       std::size_t class_target);

/// In-place axpy over the gradient maps (used by the optimisers).
void accumulate(std::map<std::size_t, LayerGrads>& into,
                const std::map<std::size_t, LayerGrads>& from, double factor);

}  // namespace momentflow
