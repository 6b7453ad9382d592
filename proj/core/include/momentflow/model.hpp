#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "momentflow/matrix.hpp"

namespace momentflow {

enum class Task { regression, classification };

enum class Activation { relu, gelu, tanh, identity };

struct LayerSpec;

/// h = W a + b. An empty bias vector means the layer has no bias term.
struct LinearLayer {
    Matrix weight;  // D_out x D_in
    Vector bias;    // D_out or empty
};

struct ActivationLayer {
    Activation kind = Activation::relu;
};

struct LayerNormLayer {
    Vector gamma;
    Vector beta;
    double epsilon = 1e-5;
};

/// x + f(x) with f the composition of `inner`.
struct ResidualLayer {
    std::vector<LayerSpec> inner;
};

/// Multi-head self-attention over T x D token matrices. Projections
/// right-multiply (Q = H Wq); no bias terms. Scores use the per-head
/// dimension D/heads in the softmax scaling, so heads=1 scales by sqrt(D).
struct AttentionLayer {
    Matrix wq, wk, wv, wo;  // D x D each
    std::size_t heads = 1;
};

struct Conv2dLayer {
    // Kernels stored as a (C_out) x (C_in*K_h*K_w) row-major matrix;
    // entry (co, ci*K_h*K_w + ky*K_w + kx) is W[co, ci][ky, kx].
    Matrix kernels;
    std::size_t c_in = 0, k_h = 0, k_w = 0;
    Vector bias;  // C_out or empty
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t c_out() const { return kernels.rows; }
};

struct AvgPool2dLayer {
    std::size_t window = 2;
    std::size_t stride = 2;
};

struct FlattenLayer {};

struct LayerSpec {
    std::variant<LinearLayer, ActivationLayer, LayerNormLayer, ResidualLayer, AttentionLayer,
                 Conv2dLayer, AvgPool2dLayer, FlattenLayer>
        value;

    template <class T>
    bool is() const { return std::holds_alternative<T>(value); }
    template <class T>
    const T& as() const { return std::get<T>(value); }
    template <class T>
    T& as() { return std::get<T>(value); }
};

/// Shape of the value flowing between layers. Vectors are `flat`; images
/// carry channel-major (c, h, w) extents; token sequences are T x D.
struct TensorShape {
    enum class Kind { flat, image, tokens } kind = Kind::flat;
    std::size_t flat = 0;        // total element count, maintained for all kinds
    std::size_t c = 0, h = 0, w = 0;
    std::size_t t = 0, d = 0;

    static TensorShape make_flat(std::size_t n) { return {Kind::flat, n, 0, 0, 0, 0, 0}; }
    static TensorShape make_image(std::size_t c, std::size_t h, std::size_t w) {
        return {Kind::image, c * h * w, c, h, w, 0, 0};
    }
    static TensorShape make_tokens(std::size_t t, std::size_t d) {
        return {Kind::tokens, t * d, 0, 0, 0, t, d};
    }
};

struct InputShape {
    bool is_image = false;
    std::size_t flat = 0;        // flat length (row-major T*D for sequence models)
    std::size_t c = 0, h = 0, w = 0;
};

struct NetworkModel {
    std::vector<LayerSpec> layers;
    InputShape input;
    Task task = Task::regression;
    std::size_t num_outputs = 0;
};

/// Pre-order walk over the layer tree (Residual inners included); the
/// position in this list is the layer index used by posterior specs.
std::vector<const LayerSpec*> flatten_layers(const NetworkModel& net);

/// Shape the model consumes. Sequence models (any Attention layer present)
/// read a flat input of length T*D row-major.
TensorShape model_input_shape(const NetworkModel& net);

TensorShape conv_output_shape(const Conv2dLayer& l, const TensorShape& in);
TensorShape pool_output_shape(const AvgPool2dLayer& l, const TensorShape& in);

/// Shape of the value entering each flattened layer, plus the output shape
/// at the back. Throws StructuralError on incompatible adjacent layers or
/// when the composed output does not reach num_outputs.
std::vector<TensorShape> layer_input_shapes(const NetworkModel& net);

/// Validates dimension compatibility (and heads | D, kernel extents).
void validate_model(const NetworkModel& net);

/// Deterministic forward pass; returns logits (classification) or the
/// regression output. Sequence models consume x as T*D row-major.
Vector forward(const NetworkModel& net, const Vector& x);

/// Forward pass that records the output of each flattened-layer index.
/// Entry i holds the value right after layer i (flattened row-major).
std::vector<Vector> forward_trace(const NetworkModel& net, const Vector& x);

// Shared per-layer kernels. The moment-propagation mean path calls exactly
// these, which keeps it bit-identical to forward().
Vector linear_apply(const LinearLayer& l, const Vector& a);
Vector layernorm_apply(const LayerNormLayer& l, const Vector& h);
double activation_eval(Activation kind, double x);
double activation_derivative(Activation kind, double x);
double activation_second_derivative(Activation kind, double x);
Vector activation_apply(Activation kind, const Vector& h);

/// Y = X * W for T x D row-major X (token matrix) and D x D2 W.
Matrix tokens_matmul(const Matrix& x, const Matrix& w);

/// Numerically stable softmax (max subtraction).
Vector softmax(const Vector& z);

struct AttentionDetail {
    std::vector<Matrix> scores;  // per head, T x T row-stochastic
    Matrix values;               // T x D value matrix (H Wv)
    Matrix mixed;                // T x D concatenated head outputs
    Matrix output;               // T x D after Wo
};

/// Attention forward on a token matrix, exposing the internals the moment
/// propagation reuses.
AttentionDetail attention_forward(const AttentionLayer& l, const Matrix& tokens);

Vector conv2d_apply(const Conv2dLayer& l, const Vector& image, const TensorShape& in_shape,
                    const TensorShape& out_shape);
Vector avgpool_apply(const AvgPool2dLayer& l, const Vector& image, const TensorShape& in_shape,
                     const TensorShape& out_shape);

std::string activation_name(Activation kind);
Activation activation_from_name(const std::string& name);

}  // namespace momentflow
