#include "momentflow/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "momentflow/errors.hpp"

namespace momentflow {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gauss_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

void collect_layers(const std::vector<LayerSpec>& layers, std::vector<const LayerSpec*>& out) {
    for (const LayerSpec& l : layers) {
        out.push_back(&l);
        if (l.is<ResidualLayer>()) collect_layers(l.as<ResidualLayer>().inner, out);
    }
}

std::optional<std::size_t> sequence_dim(const std::vector<LayerSpec>& layers) {
    for (const LayerSpec& l : layers) {
        if (l.is<AttentionLayer>()) return l.as<AttentionLayer>().wq.rows;
        if (l.is<ResidualLayer>()) {
            auto d = sequence_dim(l.as<ResidualLayer>().inner);
            if (d) return d;
        }
    }
    return std::nullopt;
}

}  // namespace

TensorShape model_input_shape(const NetworkModel& net) {
    if (net.input.is_image)
        return TensorShape::make_image(net.input.c, net.input.h, net.input.w);
    if (auto d = sequence_dim(net.layers)) {
        if (*d == 0 || net.input.flat % *d != 0)
            throw StructuralError("model: input length " + std::to_string(net.input.flat) +
                                  " is not a multiple of the token dimension " +
                                  std::to_string(*d));
        return TensorShape::make_tokens(net.input.flat / *d, *d);
    }
    return TensorShape::make_flat(net.input.flat);
}

TensorShape conv_output_shape(const Conv2dLayer& l, const TensorShape& in) {
    if (in.kind != TensorShape::Kind::image)
        throw StructuralError("conv2d: input is not an image (flatten misplaced?)");
    if (l.c_in != in.c)
        throw StructuralError("conv2d: channel mismatch (" + std::to_string(l.c_in) + " vs " +
                              std::to_string(in.c) + ")");
    if (l.k_h < 1 || l.k_w < 1) throw StructuralError("conv2d: kernel extents must be >= 1");
    if (l.stride < 1) throw StructuralError("conv2d: stride must be >= 1");
    const std::size_t padded_h = in.h + 2 * l.padding;
    const std::size_t padded_w = in.w + 2 * l.padding;
    if (padded_h < l.k_h || padded_w < l.k_w)
        throw StructuralError("conv2d: stride/padding produce an empty output");
    return TensorShape::make_image(l.c_out(), (padded_h - l.k_h) / l.stride + 1,
                                   (padded_w - l.k_w) / l.stride + 1);
}

TensorShape pool_output_shape(const AvgPool2dLayer& l, const TensorShape& in) {
    if (in.kind != TensorShape::Kind::image)
        throw StructuralError("avgpool2d: input is not an image");
    if (l.window < 1 || l.stride < 1)
        throw StructuralError("avgpool2d: window and stride must be >= 1");
    if (in.h < l.window || in.w < l.window)
        throw StructuralError("avgpool2d: window larger than the image");
    return TensorShape::make_image(in.c, (in.h - l.window) / l.stride + 1,
                                   (in.w - l.window) / l.stride + 1);
}

namespace {

TensorShape layer_output_shape(const LayerSpec& layer, const TensorShape& in,
                               std::vector<TensorShape>* record, std::size_t* counter);

TensorShape walk_shapes(const std::vector<LayerSpec>& layers, TensorShape shape,
                        std::vector<TensorShape>* record, std::size_t* counter) {
    for (const LayerSpec& l : layers) shape = layer_output_shape(l, shape, record, counter);
    return shape;
}

TensorShape layer_output_shape(const LayerSpec& layer, const TensorShape& in,
                               std::vector<TensorShape>* record, std::size_t* counter) {
    if (record) record->push_back(in);
    if (counter) ++*counter;
    if (layer.is<LinearLayer>()) {
        const LinearLayer& l = layer.as<LinearLayer>();
        if (!l.bias.empty() && l.bias.size() != l.weight.rows)
            throw StructuralError("linear: bias length != output dimension");
        if (in.kind == TensorShape::Kind::tokens) {
            if (l.weight.cols != in.d)
                throw StructuralError("linear: expects token dim " + std::to_string(l.weight.cols) +
                                      ", got " + std::to_string(in.d));
            return TensorShape::make_tokens(in.t, l.weight.rows);
        }
        if (in.kind == TensorShape::Kind::image)
            throw StructuralError("linear: image input (flatten first)");
        if (l.weight.cols != in.flat)
            throw StructuralError("linear: expects input dim " + std::to_string(l.weight.cols) +
                                  ", got " + std::to_string(in.flat));
        return TensorShape::make_flat(l.weight.rows);
    }
    if (layer.is<ActivationLayer>()) return in;
    if (layer.is<LayerNormLayer>()) {
        const LayerNormLayer& l = layer.as<LayerNormLayer>();
        const std::size_t dim = (in.kind == TensorShape::Kind::tokens) ? in.d : in.flat;
        if (in.kind == TensorShape::Kind::image)
            throw StructuralError("layernorm: image input unsupported");
        if (l.gamma.size() != dim || l.beta.size() != dim)
            throw StructuralError("layernorm: gamma/beta length " + std::to_string(l.gamma.size()) +
                                  " does not match dim " + std::to_string(dim));
        if (dim == 0) throw StructuralError("layernorm: zero-dimensional input");
        return in;
    }
    if (layer.is<ResidualLayer>()) {
        const TensorShape out = walk_shapes(layer.as<ResidualLayer>().inner, in, record, counter);
        if (out.kind != in.kind || out.flat != in.flat)
            throw StructuralError("residual: inner branch changes the shape");
        return in;
    }
    if (layer.is<AttentionLayer>()) {
        const AttentionLayer& l = layer.as<AttentionLayer>();
        if (in.kind != TensorShape::Kind::tokens)
            throw StructuralError("attention: input is not a token sequence");
        const std::size_t d = in.d;
        for (const Matrix* w : {&l.wq, &l.wk, &l.wv, &l.wo})
            if (w->rows != d || w->cols != d)
                throw StructuralError("attention: projection matrices must be DxD with D=" +
                                      std::to_string(d));
        if (l.heads == 0 || d % l.heads != 0)
            throw StructuralError("attention: heads must divide the token dimension");
        return in;
    }
    if (layer.is<Conv2dLayer>()) return conv_output_shape(layer.as<Conv2dLayer>(), in);
    if (layer.is<AvgPool2dLayer>()) return pool_output_shape(layer.as<AvgPool2dLayer>(), in);
    // Flatten
    return TensorShape::make_flat(in.flat);
}

}  // namespace

std::vector<const LayerSpec*> flatten_layers(const NetworkModel& net) {
    std::vector<const LayerSpec*> out;
    collect_layers(net.layers, out);
    return out;
}

std::vector<TensorShape> layer_input_shapes(const NetworkModel& net) {
    std::vector<TensorShape> shapes;
    const TensorShape out = walk_shapes(net.layers, model_input_shape(net), &shapes, nullptr);
    shapes.push_back(out);
    if (net.num_outputs != 0 && out.flat != net.num_outputs)
        throw StructuralError("model: composed output dim " + std::to_string(out.flat) +
                              " does not reach num_outputs " + std::to_string(net.num_outputs));
    return shapes;
}

void validate_model(const NetworkModel& net) { (void)layer_input_shapes(net); }

Vector linear_apply(const LinearLayer& l, const Vector& a) {
    Vector h = matvec(l.weight, a);
    if (!l.bias.empty())
        for (std::size_t k = 0; k < h.size(); ++k) h[k] += l.bias[k];
    return h;
}

Vector layernorm_apply(const LayerNormLayer& l, const Vector& h) {
    const std::size_t d = h.size();
    double m = 0.0;
    for (double v : h) m += v;
    m /= static_cast<double>(d);
    double var = 0.0;
    for (double v : h) var += (v - m) * (v - m);
    var /= static_cast<double>(d);
    const double s = std::sqrt(var + l.epsilon);
    Vector y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = l.gamma[i] * (h[i] - m) / s + l.beta[i];
    return y;
}

double activation_eval(Activation kind, double x) {
    switch (kind) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::gelu: return x * gauss_cdf(x);
        case Activation::tanh: return std::tanh(x);
        case Activation::identity: return x;
    }
    throw StructuralError("unknown activation kind");
}

double activation_derivative(Activation kind, double x) {
    switch (kind) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;  // 0 at the kink
        case Activation::gelu: return gauss_cdf(x) + x * gauss_pdf(x);
        case Activation::tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case Activation::identity: return 1.0;
    }
    throw StructuralError("unknown activation kind");
}

double activation_second_derivative(Activation kind, double x) {
    switch (kind) {
        case Activation::relu: return 0.0;
        case Activation::gelu: return gauss_pdf(x) * (2.0 - x * x);
        case Activation::tanh: {
            const double t = std::tanh(x);
            return -2.0 * t * (1.0 - t * t);
        }
        case Activation::identity: return 0.0;
    }
    throw StructuralError("unknown activation kind");
}

Vector activation_apply(Activation kind, const Vector& h) {
    Vector a(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) a[i] = activation_eval(kind, h[i]);
    return a;
}

Matrix tokens_matmul(const Matrix& x, const Matrix& w) {
    if (x.cols != w.rows) throw StructuralError("tokens_matmul: shape mismatch");
    Matrix y(x.rows, w.cols);
    for (std::size_t t = 0; t < x.rows; ++t)
        for (std::size_t k = 0; k < w.cols; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < x.cols; ++i) acc += x(t, i) * w(i, k);
            y(t, k) = acc;
        }
    return y;
}

Vector softmax(const Vector& z) {
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    Vector p(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - zmax);
        total += p[i];
    }
    for (double& v : p) v /= total;
    return p;
}

AttentionDetail attention_forward(const AttentionLayer& l, const Matrix& tokens) {
    const std::size_t t_count = tokens.rows;
    const std::size_t d = tokens.cols;
    const std::size_t heads = l.heads;
    const std::size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    AttentionDetail out;
    const Matrix q = tokens_matmul(tokens, l.wq);
    const Matrix k = tokens_matmul(tokens, l.wk);
    out.values = tokens_matmul(tokens, l.wv);
    out.mixed = Matrix(t_count, d);
    out.scores.reserve(heads);

    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        Matrix s(t_count, t_count);
        for (std::size_t t = 0; t < t_count; ++t) {
            Vector logits(t_count);
            for (std::size_t u = 0; u < t_count; ++u) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j) acc += q(t, off + j) * k(u, off + j);
                logits[u] = acc * inv_sqrt_dh;
            }
            const Vector p = softmax(logits);
            for (std::size_t u = 0; u < t_count; ++u) s(t, u) = p[u];
        }
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (std::size_t u = 0; u < t_count; ++u) acc += s(t, u) * out.values(u, off + j);
                out.mixed(t, off + j) = acc;
            }
        out.scores.push_back(std::move(s));
    }
    out.output = tokens_matmul(out.mixed, l.wo);
    return out;
}

Vector conv2d_apply(const Conv2dLayer& l, const Vector& image, const TensorShape& in_shape,
                    const TensorShape& out_shape) {
    Vector out(out_shape.flat, 0.0);
    const std::size_t in_hw = in_shape.h * in_shape.w;
    const std::size_t out_hw = out_shape.h * out_shape.w;
    const long pad = static_cast<long>(l.padding);
    for (std::size_t co = 0; co < l.c_out(); ++co) {
        const double* ker = l.kernels.row_ptr(co);
        for (std::size_t oy = 0; oy < out_shape.h; ++oy)
            for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                double acc = 0.0;
                for (std::size_t ci = 0; ci < l.c_in; ++ci)
                    for (std::size_t ky = 0; ky < l.k_h; ++ky) {
                        const long iy = static_cast<long>(oy * l.stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(in_shape.h)) continue;
                        for (std::size_t kx = 0; kx < l.k_w; ++kx) {
                            const long ix = static_cast<long>(ox * l.stride + kx) - pad;
                            if (ix < 0 || ix >= static_cast<long>(in_shape.w)) continue;
                            acc += image[ci * in_hw + static_cast<std::size_t>(iy) * in_shape.w +
                                         static_cast<std::size_t>(ix)] *
                                   ker[ci * l.k_h * l.k_w + ky * l.k_w + kx];
                        }
                    }
                if (!l.bias.empty()) acc += l.bias[co];
                out[co * out_hw + oy * out_shape.w + ox] = acc;
            }
    }
    return out;
}

Vector avgpool_apply(const AvgPool2dLayer& l, const Vector& image, const TensorShape& in_shape,
                     const TensorShape& out_shape) {
    Vector out(out_shape.flat, 0.0);
    const std::size_t in_hw = in_shape.h * in_shape.w;
    const std::size_t out_hw = out_shape.h * out_shape.w;
    const double inv_n = 1.0 / static_cast<double>(l.window * l.window);
    for (std::size_t c = 0; c < in_shape.c; ++c)
        for (std::size_t oy = 0; oy < out_shape.h; ++oy)
            for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < l.window; ++ky)
                    for (std::size_t kx = 0; kx < l.window; ++kx)
                        acc += image[c * in_hw + (oy * l.stride + ky) * in_shape.w +
                                     (ox * l.stride + kx)];
                out[c * out_hw + oy * out_shape.w + ox] = acc * inv_n;
            }
    return out;
}

namespace {

struct ForwardWalker {
    std::vector<Vector>* trace = nullptr;
    std::size_t counter = 0;

    Vector run(const std::vector<LayerSpec>& layers, Vector value, TensorShape& shape) {
        for (const LayerSpec& layer : layers) {
            const std::size_t idx = counter++;
            const TensorShape in_shape = shape;
            if (layer.is<LinearLayer>()) {
                const LinearLayer& l = layer.as<LinearLayer>();
                if (in_shape.kind == TensorShape::Kind::tokens) {
                    Vector out(in_shape.t * l.weight.rows);
                    for (std::size_t t = 0; t < in_shape.t; ++t) {
                        Vector tok(value.begin() + static_cast<std::ptrdiff_t>(t * in_shape.d),
                                   value.begin() + static_cast<std::ptrdiff_t>((t + 1) * in_shape.d));
                        const Vector h = linear_apply(l, tok);
                        std::copy(h.begin(), h.end(),
                                  out.begin() + static_cast<std::ptrdiff_t>(t * l.weight.rows));
                    }
                    value = std::move(out);
                    shape = TensorShape::make_tokens(in_shape.t, l.weight.rows);
                } else {
                    value = linear_apply(l, value);
                    shape = TensorShape::make_flat(l.weight.rows);
                }
            } else if (layer.is<ActivationLayer>()) {
                value = activation_apply(layer.as<ActivationLayer>().kind, value);
            } else if (layer.is<LayerNormLayer>()) {
                const LayerNormLayer& l = layer.as<LayerNormLayer>();
                if (in_shape.kind == TensorShape::Kind::tokens) {
                    for (std::size_t t = 0; t < in_shape.t; ++t) {
                        Vector tok(value.begin() + static_cast<std::ptrdiff_t>(t * in_shape.d),
                                   value.begin() + static_cast<std::ptrdiff_t>((t + 1) * in_shape.d));
                        const Vector y = layernorm_apply(l, tok);
                        std::copy(y.begin(), y.end(),
                                  value.begin() + static_cast<std::ptrdiff_t>(t * in_shape.d));
                    }
                } else {
                    value = layernorm_apply(l, value);
                }
            } else if (layer.is<ResidualLayer>()) {
                TensorShape inner_shape = in_shape;
                const Vector inner = run(layer.as<ResidualLayer>().inner, value, inner_shape);
                for (std::size_t i = 0; i < value.size(); ++i) value[i] = value[i] + inner[i];
            } else if (layer.is<AttentionLayer>()) {
                const AttentionLayer& l = layer.as<AttentionLayer>();
                Matrix tokens(in_shape.t, in_shape.d);
                tokens.data = value;
                value = attention_forward(l, tokens).output.data;
            } else if (layer.is<Conv2dLayer>()) {
                const Conv2dLayer& l = layer.as<Conv2dLayer>();
                const TensorShape out_shape = conv_output_shape(l, in_shape);
                value = conv2d_apply(l, value, in_shape, out_shape);
                shape = out_shape;
            } else if (layer.is<AvgPool2dLayer>()) {
                const AvgPool2dLayer& l = layer.as<AvgPool2dLayer>();
                const TensorShape out_shape = pool_output_shape(l, in_shape);
                value = avgpool_apply(l, value, in_shape, out_shape);
                shape = out_shape;
            } else {  // Flatten
                shape = TensorShape::make_flat(in_shape.flat);
            }
            if (trace) (*trace)[idx] = value;
        }
        return value;
    }
};

}  // namespace

Vector forward(const NetworkModel& net, const Vector& x) {
    TensorShape shape = model_input_shape(net);
    if (x.size() != shape.flat)
        throw StructuralError("forward: input length " + std::to_string(x.size()) +
                              " != expected " + std::to_string(shape.flat));
    ForwardWalker walker;
    return walker.run(net.layers, x, shape);
}

std::vector<Vector> forward_trace(const NetworkModel& net, const Vector& x) {
    TensorShape shape = model_input_shape(net);
    if (x.size() != shape.flat) throw StructuralError("forward_trace: input length mismatch");
    std::vector<Vector> trace(flatten_layers(net).size());
    ForwardWalker walker;
    walker.trace = &trace;
    walker.run(net.layers, x, shape);
    return trace;
}

std::string activation_name(Activation kind) {
    switch (kind) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    if (name == "tanh") return Activation::tanh;
    if (name == "identity") return Activation::identity;
    throw StructuralError("unknown activation kind: " + name);
}

}  // namespace momentflow
