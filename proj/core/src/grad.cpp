#include "momentflow/grad.hpp"

#include <cmath>

#include "momentflow/errors.hpp"

namespace momentflow {

namespace {

std::size_t node_count(const LayerSpec& layer) {
    if (!layer.is<ResidualLayer>()) return 1;
    std::size_t n = 1;
    for (const LayerSpec& inner : layer.as<ResidualLayer>().inner) n += node_count(inner);
    return n;
}

struct TapeEntry {
    Vector input;
    TensorShape in_shape, out_shape;
    AttentionDetail att;  // attention layers only
};

struct Engine {
    const NetworkModel* net;
    std::vector<TapeEntry> tape;
    std::map<std::size_t, LayerGrads>* grads;
    const std::vector<std::size_t>* capture = nullptr;
    std::map<std::size_t, std::pair<Vector, Vector>>* captured = nullptr;

    bool wants_capture(std::size_t idx) const {
        if (!capture) return false;
        for (std::size_t c : *capture)
            if (c == idx) return true;
        return false;
    }

    Vector forward_rec(const std::vector<LayerSpec>& layers, std::size_t base, Vector value,
                       TensorShape shape, TensorShape& out_shape) {
        std::size_t idx = base;
        for (const LayerSpec& layer : layers) {
            const std::size_t my_idx = idx;
            idx += node_count(layer);
            TapeEntry& entry = tape[my_idx];
            entry.input = value;
            entry.in_shape = shape;

            if (layer.is<LinearLayer>()) {
                const LinearLayer& l = layer.as<LinearLayer>();
                if (shape.kind == TensorShape::Kind::tokens) {
                    Vector out(shape.t * l.weight.rows);
                    for (std::size_t t = 0; t < shape.t; ++t) {
                        Vector tok(value.begin() + static_cast<std::ptrdiff_t>(t * shape.d),
                                   value.begin() + static_cast<std::ptrdiff_t>((t + 1) * shape.d));
                        const Vector h = linear_apply(l, tok);
                        std::copy(h.begin(), h.end(),
                                  out.begin() + static_cast<std::ptrdiff_t>(t * l.weight.rows));
                    }
                    value = std::move(out);
                    shape = TensorShape::make_tokens(shape.t, l.weight.rows);
                } else {
                    value = linear_apply(l, value);
                    shape = TensorShape::make_flat(l.weight.rows);
                }
            } else if (layer.is<ActivationLayer>()) {
                value = activation_apply(layer.as<ActivationLayer>().kind, value);
            } else if (layer.is<LayerNormLayer>()) {
                const LayerNormLayer& l = layer.as<LayerNormLayer>();
                const std::size_t d = shape.kind == TensorShape::Kind::tokens ? shape.d : shape.flat;
                const std::size_t t_count = value.size() / d;
                for (std::size_t t = 0; t < t_count; ++t) {
                    Vector tok(value.begin() + static_cast<std::ptrdiff_t>(t * d),
                               value.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
                    const Vector y = layernorm_apply(l, tok);
                    std::copy(y.begin(), y.end(),
                              value.begin() + static_cast<std::ptrdiff_t>(t * d));
                }
            } else if (layer.is<ResidualLayer>()) {
                TensorShape inner_out;
                const Vector inner = forward_rec(layer.as<ResidualLayer>().inner, my_idx + 1, value,
                                                 shape, inner_out);
                for (std::size_t i = 0; i < value.size(); ++i) value[i] += inner[i];
            } else if (layer.is<AttentionLayer>()) {
                Matrix tokens(shape.t, shape.d);
                tokens.data = value;
                entry.att = attention_forward(layer.as<AttentionLayer>(), tokens);
                value = entry.att.output.data;
            } else if (layer.is<Conv2dLayer>()) {
                const Conv2dLayer& l = layer.as<Conv2dLayer>();
                const TensorShape out = conv_output_shape(l, shape);
                value = conv2d_apply(l, value, shape, out);
                shape = out;
            } else if (layer.is<AvgPool2dLayer>()) {
                const AvgPool2dLayer& l = layer.as<AvgPool2dLayer>();
                const TensorShape out = pool_output_shape(l, shape);
                value = avgpool_apply(l, value, shape, out);
                shape = out;
            } else {
                shape = TensorShape::make_flat(shape.flat);
            }
            entry.out_shape = shape;
        }
        out_shape = shape;
        return value;
    }

    LayerGrads& grads_for(std::size_t idx) { return (*grads)[idx]; }

    Vector backward_rec(const std::vector<LayerSpec>& layers, std::size_t base, Vector d_value) {
        // Recover each layer's index, then sweep in reverse.
        std::vector<std::size_t> indices;
        indices.reserve(layers.size());
        std::size_t idx = base;
        for (const LayerSpec& layer : layers) {
            indices.push_back(idx);
            idx += node_count(layer);
        }
        for (std::size_t pos = layers.size(); pos-- > 0;) {
            const LayerSpec& layer = layers[pos];
            const std::size_t my_idx = indices[pos];
            const TapeEntry& entry = tape[my_idx];

            if (layer.is<LinearLayer>()) {
                const LinearLayer& l = layer.as<LinearLayer>();
                if (wants_capture(my_idx)) (*captured)[my_idx] = {entry.input, d_value};
                LayerGrads& g = grads_for(my_idx);
                if (g.d_weight.empty()) {
                    g.d_weight = Matrix(l.weight.rows, l.weight.cols);
                    g.d_bias.assign(l.bias.size(), 0.0);
                }
                const std::size_t d_in = l.weight.cols;
                const std::size_t d_out = l.weight.rows;
                const std::size_t t_count = entry.input.size() / d_in;
                Vector d_input(entry.input.size(), 0.0);
                for (std::size_t t = 0; t < t_count; ++t) {
                    const double* a = entry.input.data() + t * d_in;
                    const double* delta = d_value.data() + t * d_out;
                    for (std::size_t k = 0; k < d_out; ++k) {
                        const double dk = delta[k];
                        if (!l.bias.empty()) g.d_bias[k] += dk;
                        double* gw = g.d_weight.row_ptr(k);
                        const double* wk = l.weight.row_ptr(k);
                        double* di = d_input.data() + t * d_in;
                        for (std::size_t i = 0; i < d_in; ++i) {
                            gw[i] += dk * a[i];
                            di[i] += wk[i] * dk;
                        }
                    }
                }
                d_value = std::move(d_input);
            } else if (layer.is<ActivationLayer>()) {
                const Activation kind = layer.as<ActivationLayer>().kind;
                for (std::size_t i = 0; i < d_value.size(); ++i)
                    d_value[i] *= activation_derivative(kind, entry.input[i]);
            } else if (layer.is<LayerNormLayer>()) {
                const LayerNormLayer& l = layer.as<LayerNormLayer>();
                LayerGrads& g = grads_for(my_idx);
                const std::size_t d = l.gamma.size();
                if (g.d_gamma.empty()) {
                    g.d_gamma.assign(d, 0.0);
                    g.d_beta.assign(d, 0.0);
                }
                const std::size_t t_count = entry.input.size() / d;
                for (std::size_t t = 0; t < t_count; ++t) {
                    const double* x = entry.input.data() + t * d;
                    double* dy = d_value.data() + t * d;
                    double m = 0.0;
                    for (std::size_t i = 0; i < d; ++i) m += x[i];
                    m /= static_cast<double>(d);
                    double var = 0.0;
                    for (std::size_t i = 0; i < d; ++i) var += (x[i] - m) * (x[i] - m);
                    var /= static_cast<double>(d);
                    const double s = std::sqrt(var + l.epsilon);
                    double mean_g = 0.0, mean_gx = 0.0;
                    Vector xhat(d), gv(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        xhat[i] = (x[i] - m) / s;
                        gv[i] = dy[i] * l.gamma[i];
                        g.d_gamma[i] += dy[i] * xhat[i];
                        g.d_beta[i] += dy[i];
                        mean_g += gv[i];
                        mean_gx += gv[i] * xhat[i];
                    }
                    mean_g /= static_cast<double>(d);
                    mean_gx /= static_cast<double>(d);
                    for (std::size_t i = 0; i < d; ++i)
                        dy[i] = (gv[i] - mean_g - xhat[i] * mean_gx) / s;
                }
            } else if (layer.is<ResidualLayer>()) {
                const Vector d_inner =
                    backward_rec(layer.as<ResidualLayer>().inner, my_idx + 1, d_value);
                for (std::size_t i = 0; i < d_value.size(); ++i) d_value[i] += d_inner[i];
            } else if (layer.is<AttentionLayer>()) {
                d_value = attention_backward(layer.as<AttentionLayer>(), entry, d_value,
                                             grads_for(my_idx));
            } else if (layer.is<Conv2dLayer>()) {
                d_value = conv_backward(layer.as<Conv2dLayer>(), entry, d_value, grads_for(my_idx));
            } else if (layer.is<AvgPool2dLayer>()) {
                d_value = pool_backward(layer.as<AvgPool2dLayer>(), entry, d_value);
            }
            // Flatten: gradient passes through unchanged.
        }
        return d_value;
    }

    Vector attention_backward(const AttentionLayer& l, const TapeEntry& entry, const Vector& d_out,
                              LayerGrads& g) {
        const std::size_t t_count = entry.in_shape.t;
        const std::size_t d = entry.in_shape.d;
        const std::size_t heads = l.heads;
        const std::size_t dh = d / heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        if (g.d_wq.empty()) {
            g.d_wq = Matrix(d, d);
            g.d_wk = Matrix(d, d);
            g.d_wv = Matrix(d, d);
            g.d_wo = Matrix(d, d);
        }

        Matrix x(t_count, d);
        x.data = entry.input;
        const Matrix q = tokens_matmul(x, l.wq);
        const Matrix k = tokens_matmul(x, l.wk);
        const Matrix& v = entry.att.values;
        const Matrix& mixed = entry.att.mixed;

        Matrix dz(t_count, d);
        dz.data = d_out;
        // output = mixed Wo
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < t_count; ++t) acc += mixed(t, i) * dz(t, j);
                g.d_wo(i, j) += acc;
            }
        const Matrix d_mixed = tokens_matmul(dz, transpose(l.wo));

        Matrix d_q(t_count, d), d_k(t_count, d), d_v(t_count, d);
        for (std::size_t head = 0; head < heads; ++head) {
            const std::size_t off = head * dh;
            const Matrix& s = entry.att.scores[head];
            // mixed_h = S V_h
            Matrix d_s(t_count, t_count);
            for (std::size_t t = 0; t < t_count; ++t)
                for (std::size_t u = 0; u < t_count; ++u) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dh; ++j)
                        acc += d_mixed(t, off + j) * v(u, off + j);
                    d_s(t, u) = acc;
                }
            for (std::size_t u = 0; u < t_count; ++u)
                for (std::size_t j = 0; j < dh; ++j) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < t_count; ++t) acc += s(t, u) * d_mixed(t, off + j);
                    d_v(u, off + j) = acc;
                }
            // softmax rows
            for (std::size_t t = 0; t < t_count; ++t) {
                double inner = 0.0;
                for (std::size_t u = 0; u < t_count; ++u) inner += d_s(t, u) * s(t, u);
                for (std::size_t u = 0; u < t_count; ++u) {
                    const double d_logit = s(t, u) * (d_s(t, u) - inner) * inv_sqrt_dh;
                    for (std::size_t j = 0; j < dh; ++j) {
                        d_q(t, off + j) += d_logit * k(u, off + j);
                        d_k(u, off + j) += d_logit * q(t, off + j);
                    }
                }
            }
        }

        // Accumulate projection gradients and the input gradient.
        Vector d_input(t_count * d, 0.0);
        const auto add_projection = [&](const Matrix& d_proj, const Matrix& w, Matrix& d_w) {
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < t_count; ++t) acc += x(t, i) * d_proj(t, j);
                    d_w(i, j) += acc;
                }
            const Matrix dx = tokens_matmul(d_proj, transpose(w));
            for (std::size_t i = 0; i < d_input.size(); ++i) d_input[i] += dx.data[i];
        };
        add_projection(d_q, l.wq, g.d_wq);
        add_projection(d_k, l.wk, g.d_wk);
        add_projection(d_v, l.wv, g.d_wv);
        return d_input;
    }

    Vector conv_backward(const Conv2dLayer& l, const TapeEntry& entry, const Vector& d_out,
                         LayerGrads& g) {
        const TensorShape& in = entry.in_shape;
        const TensorShape& out = entry.out_shape;
        if (g.d_weight.empty()) {
            g.d_weight = Matrix(l.kernels.rows, l.kernels.cols);
            g.d_bias.assign(l.bias.size(), 0.0);
        }
        Vector d_input(in.flat, 0.0);
        const std::size_t in_hw = in.h * in.w;
        const std::size_t out_hw = out.h * out.w;
        const long pad = static_cast<long>(l.padding);
        for (std::size_t co = 0; co < l.c_out(); ++co) {
            const double* ker = l.kernels.row_ptr(co);
            double* dker = g.d_weight.row_ptr(co);
            for (std::size_t oy = 0; oy < out.h; ++oy)
                for (std::size_t ox = 0; ox < out.w; ++ox) {
                    const double delta = d_out[co * out_hw + oy * out.w + ox];
                    if (!l.bias.empty()) g.d_bias[co] += delta;
                    for (std::size_t ci = 0; ci < l.c_in; ++ci)
                        for (std::size_t ky = 0; ky < l.k_h; ++ky) {
                            const long iy = static_cast<long>(oy * l.stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<long>(in.h)) continue;
                            for (std::size_t kx = 0; kx < l.k_w; ++kx) {
                                const long ix = static_cast<long>(ox * l.stride + kx) - pad;
                                if (ix < 0 || ix >= static_cast<long>(in.w)) continue;
                                const std::size_t pix = ci * in_hw +
                                                        static_cast<std::size_t>(iy) * in.w +
                                                        static_cast<std::size_t>(ix);
                                const std::size_t kidx =
                                    ci * l.k_h * l.k_w + ky * l.k_w + kx;
                                dker[kidx] += delta * entry.input[pix];
                                d_input[pix] += delta * ker[kidx];
                            }
                        }
                }
        }
        return d_input;
    }

    Vector pool_backward(const AvgPool2dLayer& l, const TapeEntry& entry, const Vector& d_out) {
        const TensorShape& in = entry.in_shape;
        const TensorShape& out = entry.out_shape;
        Vector d_input(in.flat, 0.0);
        const std::size_t in_hw = in.h * in.w;
        const std::size_t out_hw = out.h * out.w;
        const double inv_n = 1.0 / static_cast<double>(l.window * l.window);
        for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t oy = 0; oy < out.h; ++oy)
                for (std::size_t ox = 0; ox < out.w; ++ox) {
                    const double delta = d_out[c * out_hw + oy * out.w + ox] * inv_n;
                    for (std::size_t ky = 0; ky < l.window; ++ky)
                        for (std::size_t kx = 0; kx < l.window; ++kx)
                            d_input[c * in_hw + (oy * l.stride + ky) * in.w +
                                    (ox * l.stride + kx)] += delta;
                }
        return d_input;
    }
};

}  // namespace

GradResult backward_from_output(const NetworkModel& net, const Vector& x, const Vector& d_output,
                                const std::vector<std::size_t>* capture) {
    GradResult result;
    Engine engine;
    engine.net = &net;
    engine.tape.resize(flatten_layers(net).size());
    engine.grads = &result.layers;
    engine.capture = capture;
    engine.captured = &result.captures;

    TensorShape out_shape;
    result.output = engine.forward_rec(net.layers, 0, x, model_input_shape(net), out_shape);
    if (d_output.size() != result.output.size())
        throw StructuralError("backward_from_output: output gradient length mismatch");
    result.input_grad = engine.backward_rec(net.layers, 0, d_output);
    return result;
}

LossGrad loss_backward(const NetworkModel& net, const Vector& x, LossKind kind, double real_target,
                       std::size_t class_target) {
    // Forward once to build the seed, then reuse backward_from_output.
    const Vector f = forward(net, x);
    LossGrad out;
    Vector d_output(f.size(), 0.0);
    if (kind == LossKind::mse) {
        if (f.size() != 1)
            throw StructuralError("loss_backward: mse expects a single-output network");
        const double r = f[0] - real_target;
        out.loss = 0.5 * r * r;
        d_output[0] = r;
    } else {
        if (class_target >= f.size()) throw StructuralError("loss_backward: class out of range");
        const Vector p = softmax(f);
        out.loss = -std::log(std::max(p[class_target], 1e-300));
        for (std::size_t c = 0; c < f.size(); ++c)
            d_output[c] = p[c] - (c == class_target ? 1.0 : 0.0);
    }
    out.grads = backward_from_output(net, x, d_output);
    return out;
}

void accumulate(std::map<std::size_t, LayerGrads>& into,
                const std::map<std::size_t, LayerGrads>& from, double factor) {
    for (const auto& [idx, g] : from) {
        LayerGrads& dst = into[idx];
        const auto add_mat = [factor](Matrix& a, const Matrix& b) {
            if (b.empty()) return;
            if (a.empty()) a = Matrix(b.rows, b.cols);
            for (std::size_t i = 0; i < b.data.size(); ++i) a.data[i] += factor * b.data[i];
        };
        const auto add_vec = [factor](Vector& a, const Vector& b) {
            if (b.empty()) return;
            if (a.empty()) a.assign(b.size(), 0.0);
            for (std::size_t i = 0; i < b.size(); ++i) a[i] += factor * b[i];
        };
        add_mat(dst.d_weight, g.d_weight);
        add_vec(dst.d_bias, g.d_bias);
        add_mat(dst.d_wq, g.d_wq);
        add_mat(dst.d_wk, g.d_wk);
        add_mat(dst.d_wv, g.d_wv);
        add_mat(dst.d_wo, g.d_wo);
        add_vec(dst.d_gamma, g.d_gamma);
        add_vec(dst.d_beta, g.d_beta);
    }
}

}  // namespace momentflow
