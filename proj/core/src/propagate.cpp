#include "momentflow/propagate.hpp"

#include <cmath>
#include <string>

#include "momentflow/errors.hpp"

namespace momentflow {

namespace {

constexpr double kNegativeVarianceTol = -1e-12;

void check_and_clamp(double& v, const char* what) {
    if (v < kNegativeVarianceTol)
        throw NumericalError(std::string(what) + ": negative variance " + std::to_string(v));
    if (v < 0.0) v = 0.0;
}

void check_and_clamp(Vector& v, const char* what) {
    for (double& x : v) check_and_clamp(x, what);
}

void check_diag_and_symmetrize(Matrix& m, const char* what) {
    for (std::size_t i = 0; i < m.rows; ++i) check_and_clamp(m(i, i), what);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j) {
            const double s = 0.5 * (m(i, j) + m(j, i));
            m(i, j) = s;
            m(j, i) = s;
        }
}

// Moments of one token; the public ops loop these over rows.
struct TokenMoments {
    Vector mean;
    CovKind kind = CovKind::deterministic;
    Vector var;
    Matrix cov;

    Vector variances() const {
        if (kind == CovKind::deterministic) return Vector(mean.size(), 0.0);
        if (kind == CovKind::diagonal) return var;
        Vector d(mean.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = cov(i, i);
        return d;
    }
};

TokenMoments token_of(const MomentState& s, std::size_t t) {
    TokenMoments tok;
    tok.mean = s.mean.row(t);
    tok.kind = s.kind;
    if (s.kind == CovKind::diagonal) tok.var = s.var.row(t);
    if (s.kind == CovKind::full) tok.cov = s.cov[t];
    return tok;
}

MomentState assemble(std::vector<TokenMoments> tokens, const TensorShape& shape) {
    MomentState out;
    const std::size_t t_count = tokens.size();
    const std::size_t d = tokens[0].mean.size();
    out.mean = Matrix(t_count, d);
    out.shape = shape;
    CovKind kind = CovKind::deterministic;
    for (const TokenMoments& tok : tokens) {
        if (tok.kind == CovKind::full) kind = CovKind::full;
        if (tok.kind == CovKind::diagonal && kind == CovKind::deterministic)
            kind = CovKind::diagonal;
    }
    out.kind = kind;
    if (kind == CovKind::diagonal) out.var = Matrix(t_count, d);
    if (kind == CovKind::full) out.cov.assign(t_count, Matrix(d, d));
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t i = 0; i < d; ++i) out.mean(t, i) = tokens[t].mean[i];
        if (kind == CovKind::diagonal) {
            const Vector v = tokens[t].variances();
            for (std::size_t i = 0; i < d; ++i) out.var(t, i) = v[i];
        } else if (kind == CovKind::full) {
            if (tokens[t].kind == CovKind::full) {
                out.cov[t] = tokens[t].cov;
            } else {
                const Vector v = tokens[t].variances();
                for (std::size_t i = 0; i < d; ++i) out.cov[t](i, i) = v[i];
            }
        }
    }
    return out;
}

Vector augmented(const Vector& a, bool with_one) {
    if (!with_one) return a;
    Vector out = a;
    out.push_back(1.0);
    return out;
}

// <C, S> over the leading d x d block (the augmented coordinate of C has no
// input variance).
double cov_inner(const Matrix& c, const Matrix& s_a, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) acc += c(i, j) * s_a(i, j);
    return acc;
}

double cov_inner_diag(const Matrix& c, const Vector& va) {
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += c(i, i) * va[i];
    return acc;
}

void check_linear_posterior_shape(const LayerPosterior& post, std::size_t d_in, std::size_t d_out,
                                  bool has_bias) {
    const std::size_t n_aug = d_in + (has_bias ? 1 : 0);
    if (const auto* dp = std::get_if<DiagonalPosterior>(&post)) {
        if (dp->var_weight.rows != d_out || dp->var_weight.cols != d_in)
            throw StructuralError("propagate_linear: diagonal var_weight shape mismatch");
        if (has_bias && dp->var_bias.size() != d_out)
            throw StructuralError("propagate_linear: diagonal var_bias length mismatch");
    } else if (const auto* kp = std::get_if<KfacPosterior>(&post)) {
        if (!kp->inverted()) throw StructuralError("propagate_linear: kfac factors not inverted");
        if (kp->a_tilde.rows != n_aug || kp->b_tilde.rows != d_out)
            throw StructuralError("propagate_linear: kfac factor shape mismatch");
    } else if (const auto* fp = std::get_if<FullPosterior>(&post)) {
        const std::size_t n = d_out * d_in + (has_bias ? d_out : 0);
        if (fp->cov.rows != n || fp->cov.cols != n)
            throw StructuralError("propagate_linear: full covariance shape mismatch");
    }
}

TokenMoments linear_token(const TokenMoments& in, const LinearLayer& layer,
                          const LayerPosterior& post, const PropagationConfig& cfg) {
    const std::size_t d_in = layer.weight.cols;
    const std::size_t d_out = layer.weight.rows;
    if (in.mean.size() != d_in)
        throw StructuralError("propagate_linear: input dim " + std::to_string(in.mean.size()) +
                              " != " + std::to_string(d_in));
    const bool has_bias = !layer.bias.empty();
    check_linear_posterior_shape(post, d_in, d_out, has_bias);
    const bool post_det = std::holds_alternative<DeterministicPosterior>(post);
    const Matrix& w = layer.weight;

    TokenMoments out;
    out.mean = linear_apply(layer, in.mean);
    if (in.kind == CovKind::deterministic && post_det) {
        out.kind = CovKind::deterministic;
        return out;
    }

    const Vector aug = augmented(in.mean, has_bias);
    const Vector va = in.variances();
    const bool full_mode = cfg.activation_cov_mode == CovMode::full;

    if (full_mode) {
        Matrix s_out(d_out, d_out);
        // E[W] Cov[a] E[W]'
        if (in.kind == CovKind::full) {
            s_out = matmul(matmul(w, in.cov), transpose(w));
        } else if (in.kind == CovKind::diagonal) {
            for (std::size_t k = 0; k < d_out; ++k)
                for (std::size_t l = k; l < d_out; ++l) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < d_in; ++i) acc += w(k, i) * w(l, i) * va[i];
                    s_out(k, l) = acc;
                    s_out(l, k) = acc;
                }
        }
        if (const auto* dp = std::get_if<DiagonalPosterior>(&post)) {
            for (std::size_t k = 0; k < d_out; ++k) {
                double extra = has_bias ? dp->var_bias[k] : 0.0;
                for (std::size_t i = 0; i < d_in; ++i)
                    extra += (in.mean[i] * in.mean[i] + va[i]) * dp->var_weight(k, i);
                s_out(k, k) += extra;
            }
        } else if (const auto* kp = std::get_if<KfacPosterior>(&post)) {
            if (kp->convention == KfacConvention::row) {
                // One scalar shared by every (k,l): a' A~ a + <A~, Cov[a]>.
                double q = quadratic_form(kp->a_tilde, aug);
                if (in.kind == CovKind::full)
                    q += cov_inner(kp->a_tilde, in.cov, d_in);
                else
                    q += cov_inner_diag(kp->a_tilde, va);
                for (std::size_t k = 0; k < d_out; ++k)
                    for (std::size_t l = 0; l < d_out; ++l) s_out(k, l) += q * kp->b_tilde(k, l);
            } else {
                for (std::size_t k = 0; k < d_out; ++k)
                    for (std::size_t l = k; l < d_out; ++l) {
                        const Matrix c = kfac_row_cov(*kp, k, l);
                        double term = quadratic_form(c, aug);
                        if (in.kind == CovKind::full)
                            term += cov_inner(c, in.cov, d_in);
                        else
                            term += cov_inner_diag(c, va);
                        s_out(k, l) += term;
                        if (l != k) s_out(l, k) += term;
                    }
            }
        } else if (const auto* fp = std::get_if<FullPosterior>(&post)) {
            for (std::size_t k = 0; k < d_out; ++k)
                for (std::size_t l = k; l < d_out; ++l) {
                    const Matrix c = full_row_cov(*fp, d_in, d_out, has_bias, k, l);
                    // a~' C a~ covers the W-W, W-b and b-b terms at once;
                    // <C, Cov[a]> adds the Cov[a] Cov[W] cross term.
                    double term = quadratic_form(c, aug);
                    if (in.kind == CovKind::full)
                        term += cov_inner(c, in.cov, d_in);
                    else
                        term += cov_inner_diag(c, va);
                    s_out(k, l) += term;
                    if (l != k) s_out(l, k) += term;
                }
        }
        check_diag_and_symmetrize(s_out, "propagate_linear");
        out.kind = CovKind::full;
        out.cov = std::move(s_out);
        return out;
    }

    // Diag mode: input cross-covariances dropped.
    Vector v_out(d_out, 0.0);
    for (std::size_t k = 0; k < d_out; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d_in; ++i) acc += w(k, i) * w(k, i) * va[i];
        v_out[k] = acc;
    }
    if (const auto* dp = std::get_if<DiagonalPosterior>(&post)) {
        for (std::size_t k = 0; k < d_out; ++k) {
            double extra = has_bias ? dp->var_bias[k] : 0.0;
            for (std::size_t i = 0; i < d_in; ++i)
                extra += (in.mean[i] * in.mean[i] + va[i]) * dp->var_weight(k, i);
            v_out[k] += extra;
        }
    } else if (const auto* kp = std::get_if<KfacPosterior>(&post)) {
        if (kp->convention == KfacConvention::row) {
            const double q = quadratic_form(kp->a_tilde, aug) + cov_inner_diag(kp->a_tilde, va);
            for (std::size_t k = 0; k < d_out; ++k) v_out[k] += q * kp->b_tilde(k, k);
        } else {
            for (std::size_t k = 0; k < d_out; ++k) {
                const Matrix c = kfac_row_cov(*kp, k, k);
                v_out[k] += quadratic_form(c, aug) + cov_inner_diag(c, va);
            }
        }
    } else if (const auto* fp = std::get_if<FullPosterior>(&post)) {
        for (std::size_t k = 0; k < d_out; ++k) {
            const Matrix c = full_row_cov(*fp, d_in, d_out, has_bias, k, k);
            v_out[k] += quadratic_form(c, aug) + cov_inner_diag(c, va);
        }
    }
    check_and_clamp(v_out, "propagate_linear");
    out.kind = CovKind::diagonal;
    out.var = std::move(v_out);
    return out;
}

TokenMoments activation_token(const TokenMoments& in, Activation kind) {
    TokenMoments out;
    out.mean = activation_apply(kind, in.mean);
    out.kind = in.kind;
    if (in.kind == CovKind::deterministic) return out;
    const std::size_t d = in.mean.size();
    Vector deriv(d);
    for (std::size_t i = 0; i < d; ++i) deriv[i] = activation_derivative(kind, in.mean[i]);
    if (in.kind == CovKind::diagonal) {
        out.var.resize(d);
        for (std::size_t i = 0; i < d; ++i) out.var[i] = deriv[i] * deriv[i] * in.var[i];
        check_and_clamp(out.var, "propagate_activation");
    } else {
        out.cov = Matrix(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) out.cov(i, j) = deriv[i] * deriv[j] * in.cov(i, j);
        check_diag_and_symmetrize(out.cov, "propagate_activation");
    }
    return out;
}

TokenMoments layernorm_token(const TokenMoments& in, const LayerNormLayer& layer) {
    const std::size_t d = in.mean.size();
    if (d == 0) throw StructuralError("propagate_layernorm: zero-dimensional input");
    TokenMoments out;
    out.mean = layernorm_apply(layer, in.mean);
    out.kind = in.kind;
    if (in.kind == CovKind::deterministic) return out;

    // Statistics frozen at the input mean make the layer an affine map.
    double m = 0.0;
    for (double v : in.mean) m += v;
    m /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in.mean) var += (v - m) * (v - m);
    var /= static_cast<double>(d);
    const double s = std::sqrt(var + layer.epsilon);

    if (in.kind == CovKind::diagonal) {
        out.var.resize(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double g = layer.gamma[i] / s;
            out.var[i] = g * g * in.var[i];
        }
        check_and_clamp(out.var, "propagate_layernorm");
    } else {
        // A = diag(gamma)/s (I - 11'/D)
        Matrix a(d, d);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double g = layer.gamma[i] / s;
            for (std::size_t j = 0; j < d; ++j) a(i, j) = g * ((i == j ? 1.0 : 0.0) - inv_d);
        }
        out.cov = matmul(matmul(a, in.cov), transpose(a));
        check_diag_and_symmetrize(out.cov, "propagate_layernorm");
    }
    return out;
}

}  // namespace

MomentState MomentState::deterministic_input(const Vector& x) {
    MomentState s;
    s.mean = Matrix(1, x.size());
    s.mean.data = x;
    s.kind = CovKind::deterministic;
    s.shape = TensorShape::make_flat(x.size());
    return s;
}

MomentState MomentState::diagonal_input(const Vector& x, const Vector& variances) {
    if (x.size() != variances.size())
        throw StructuralError("diagonal_input: variance length mismatch");
    MomentState s = deterministic_input(x);
    s.kind = CovKind::diagonal;
    s.var = Matrix(1, x.size());
    s.var.data = variances;
    check_and_clamp(s.var.data, "diagonal_input");
    return s;
}

MomentState MomentState::full_input(const Vector& x, const Matrix& covariance) {
    require_symmetric(covariance, 1e-10, "full_input");
    if (covariance.rows != x.size()) throw StructuralError("full_input: covariance dim mismatch");
    MomentState s = deterministic_input(x);
    s.kind = CovKind::full;
    s.cov.assign(1, covariance);
    check_diag_and_symmetrize(s.cov[0], "full_input");
    return s;
}

Vector MomentState::token_variances(std::size_t t) const { return token_of(*this, t).variances(); }

Vector MomentState::variances() const {
    Vector out;
    out.reserve(mean.size());
    for (std::size_t t = 0; t < tokens(); ++t) {
        const Vector v = token_variances(t);
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

MomentState propagate_linear(const MomentState& state, const LinearLayer& layer,
                             const LayerPosterior& post, const PropagationConfig& cfg) {
    std::vector<TokenMoments> toks;
    toks.reserve(state.tokens());
    for (std::size_t t = 0; t < state.tokens(); ++t)
        toks.push_back(linear_token(token_of(state, t), layer, post, cfg));
    TensorShape shape = state.shape.kind == TensorShape::Kind::tokens
                            ? TensorShape::make_tokens(state.tokens(), layer.weight.rows)
                            : TensorShape::make_flat(layer.weight.rows);
    return assemble(std::move(toks), shape);
}

MomentState propagate_activation(const MomentState& state, Activation kind) {
    std::vector<TokenMoments> toks;
    toks.reserve(state.tokens());
    for (std::size_t t = 0; t < state.tokens(); ++t)
        toks.push_back(activation_token(token_of(state, t), kind));
    return assemble(std::move(toks), state.shape);
}

MomentState propagate_layernorm(const MomentState& state, const LayerNormLayer& layer) {
    std::vector<TokenMoments> toks;
    toks.reserve(state.tokens());
    for (std::size_t t = 0; t < state.tokens(); ++t)
        toks.push_back(layernorm_token(token_of(state, t), layer));
    return assemble(std::move(toks), state.shape);
}

MomentState propagate_residual(const MomentState& state_in, const MomentState& inner_out) {
    if (state_in.mean.rows != inner_out.mean.rows || state_in.mean.cols != inner_out.mean.cols)
        throw StructuralError("propagate_residual: shape mismatch");
    std::vector<TokenMoments> toks;
    toks.reserve(state_in.tokens());
    for (std::size_t t = 0; t < state_in.tokens(); ++t) {
        const TokenMoments a = token_of(state_in, t);
        const TokenMoments b = token_of(inner_out, t);
        TokenMoments o;
        const std::size_t d = a.mean.size();
        o.mean.resize(d);
        for (std::size_t i = 0; i < d; ++i) o.mean[i] = a.mean[i] + b.mean[i];
        if (a.kind == CovKind::deterministic && b.kind == CovKind::deterministic) {
            o.kind = CovKind::deterministic;
        } else if (a.kind != CovKind::full && b.kind != CovKind::full) {
            o.kind = CovKind::diagonal;
            const Vector va = a.variances();
            const Vector vb = b.variances();
            o.var.resize(d);
            for (std::size_t i = 0; i < d; ++i) o.var[i] = va[i] + vb[i];
        } else {
            o.kind = CovKind::full;
            o.cov = Matrix(d, d);
            for (const TokenMoments* part : {&a, &b}) {
                if (part->kind == CovKind::full) {
                    for (std::size_t i = 0; i < d * d; ++i) o.cov.data[i] += part->cov.data[i];
                } else {
                    const Vector v = part->variances();
                    for (std::size_t i = 0; i < d; ++i) o.cov(i, i) += v[i];
                }
            }
        }
        toks.push_back(std::move(o));
    }
    return assemble(std::move(toks), state_in.shape);
}

MomentState propagate_attention(const MomentState& state, const AttentionLayer& layer,
                                const LayerPosterior& post, const PropagationConfig& cfg) {
    if (state.shape.kind != TensorShape::Kind::tokens)
        throw StructuralError("propagate_attention: input is not a token sequence");
    if (state.kind == CovKind::full)
        throw StructuralError("propagate_attention: requires diagonal input covariance");
    const std::size_t t_count = state.tokens();
    const std::size_t d = state.dim();
    const std::size_t heads = layer.heads;
    if (heads == 0 || d % heads != 0)
        throw StructuralError("propagate_attention: heads must divide D");
    const std::size_t dh = d / heads;

    const bool post_det = std::holds_alternative<DeterministicPosterior>(post);
    const auto* dp = std::get_if<DiagonalPosterior>(&post);
    if (!post_det && dp == nullptr)
        throw StructuralError("propagate_attention: only deterministic or diagonal W_V posteriors");
    if (dp && (dp->var_weight.rows != d || dp->var_weight.cols != d))
        throw StructuralError("propagate_attention: var_weight must match wv");

    // Scores and value/output means are frozen at the input means; this is
    // exactly the plain forward pass evaluated at E[H].
    const AttentionDetail detail = attention_forward(layer, state.mean);

    const LinearLayer wo_layer{transpose(layer.wo), Vector{}};
    if (state.kind == CovKind::deterministic && post_det) {
        MomentState out;
        out.mean = detail.output;
        out.kind = CovKind::deterministic;
        out.shape = TensorShape::make_tokens(t_count, d);
        return out;
    }

    const bool want_value_cov = cfg.attention_value_cov == ValueCov::full;
    const Matrix& wv = layer.wv;

    // Per-token value moments; cross-covariances only within a head.
    std::vector<Matrix> value_cov;   // per token, d x d block-diagonal by head
    Matrix value_var(t_count, d);
    if (want_value_cov) value_cov.assign(t_count, Matrix(d, d));
    for (std::size_t s = 0; s < t_count; ++s) {
        const Vector h_mean = state.mean.row(s);
        const Vector h_var = state.token_variances(s);
        for (std::size_t head = 0; head < heads; ++head) {
            const std::size_t off = head * dh;
            for (std::size_t k = off; k < off + dh; ++k) {
                double v = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const double w_ik = wv(i, k);
                    v += w_ik * w_ik * h_var[i];
                    if (dp) {
                        const double vw = dp->var_weight(i, k);
                        v += h_mean[i] * h_mean[i] * vw + h_var[i] * vw;
                    }
                }
                check_and_clamp(v, "propagate_attention value");
                value_var(s, k) = v;
                if (want_value_cov) {
                    value_cov[s](k, k) = v;
                    for (std::size_t l = k + 1; l < off + dh; ++l) {
                        double c = 0.0;
                        for (std::size_t i = 0; i < d; ++i) c += wv(i, k) * wv(i, l) * h_var[i];
                        value_cov[s](k, l) = c;
                        value_cov[s](l, k) = c;
                    }
                }
            }
        }
    }

    // Mix with the frozen, row-stochastic scores; distinct tokens are
    // independent, so coefficients enter squared.
    MomentState mixed;
    mixed.mean = detail.mixed;
    mixed.shape = TensorShape::make_tokens(t_count, d);
    mixed.kind = want_value_cov ? CovKind::full : CovKind::diagonal;
    if (want_value_cov)
        mixed.cov.assign(t_count, Matrix(d, d));
    else
        mixed.var = Matrix(t_count, d);
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t head = 0; head < heads; ++head) {
            const Matrix& s_mat = detail.scores[head];
            const std::size_t off = head * dh;
            for (std::size_t k = off; k < off + dh; ++k) {
                for (std::size_t l = k; l < off + dh; ++l) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s < t_count; ++s) {
                        const double w2 = s_mat(t, s) * s_mat(t, s);
                        acc += w2 * (want_value_cov ? value_cov[s](k, l)
                                                    : (k == l ? value_var(s, k) : 0.0));
                    }
                    if (want_value_cov) {
                        mixed.cov[t](k, l) = acc;
                        mixed.cov[t](l, k) = acc;
                    } else if (k == l) {
                        mixed.var(t, k) = acc;
                    }
                }
            }
        }
    }

    // Output projection; full-covariance bookkeeping whenever the mixed
    // state carries cross terms, regardless of the activation mode.
    PropagationConfig wo_cfg = cfg;
    if (mixed.kind == CovKind::full) wo_cfg.activation_cov_mode = CovMode::full;
    return propagate_linear(mixed, wo_layer, LayerPosterior{DeterministicPosterior{}}, wo_cfg);
}

MomentState propagate_conv2d(const MomentState& state, const Conv2dLayer& layer,
                             const LayerPosterior& post, const PropagationConfig& cfg) {
    if (cfg.activation_cov_mode == CovMode::full)
        throw StructuralError("propagate_conv2d: requires diag activation-covariance mode");
    if (state.shape.kind != TensorShape::Kind::image)
        throw StructuralError("propagate_conv2d: input is not an image");
    if (state.kind == CovKind::full)
        throw StructuralError("propagate_conv2d: full input covariance unsupported");
    const bool post_det = std::holds_alternative<DeterministicPosterior>(post);
    const auto* dp = std::get_if<DiagonalPosterior>(&post);
    if (!post_det && dp == nullptr)
        throw StructuralError("propagate_conv2d: only deterministic or diagonal kernel posteriors");
    if (dp && (dp->var_weight.rows != layer.kernels.rows ||
               dp->var_weight.cols != layer.kernels.cols))
        throw StructuralError("propagate_conv2d: var_weight must match the kernel matrix");

    const TensorShape in_shape = state.shape;
    const TensorShape out_shape = conv_output_shape(layer, in_shape);

    MomentState out;
    out.shape = out_shape;
    out.mean = Matrix(1, out_shape.flat);
    out.mean.data = conv2d_apply(layer, state.mean.row(0), in_shape, out_shape);
    if (state.kind == CovKind::deterministic && post_det) {
        out.kind = CovKind::deterministic;
        return out;
    }

    const Vector a_mean = state.mean.row(0);
    const Vector a_var = state.token_variances(0);
    Vector v(out_shape.flat, 0.0);
    const std::size_t in_hw = in_shape.h * in_shape.w;
    const std::size_t out_hw = out_shape.h * out_shape.w;
    const long pad = static_cast<long>(layer.padding);
    for (std::size_t co = 0; co < layer.c_out(); ++co) {
        const double* ker = layer.kernels.row_ptr(co);
        const double* kvar = dp ? dp->var_weight.row_ptr(co) : nullptr;
        for (std::size_t oy = 0; oy < out_shape.h; ++oy)
            for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                double acc = 0.0;
                for (std::size_t ci = 0; ci < layer.c_in; ++ci)
                    for (std::size_t ky = 0; ky < layer.k_h; ++ky) {
                        const long iy = static_cast<long>(oy * layer.stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(in_shape.h)) continue;
                        for (std::size_t kx = 0; kx < layer.k_w; ++kx) {
                            const long ix = static_cast<long>(ox * layer.stride + kx) - pad;
                            if (ix < 0 || ix >= static_cast<long>(in_shape.w)) continue;
                            const std::size_t pix = ci * in_hw +
                                                    static_cast<std::size_t>(iy) * in_shape.w +
                                                    static_cast<std::size_t>(ix);
                            const std::size_t kidx = ci * layer.k_h * layer.k_w + ky * layer.k_w + kx;
                            const double wm = ker[kidx];
                            const double vw = kvar ? kvar[kidx] : 0.0;
                            acc += a_mean[pix] * a_mean[pix] * vw +
                                   a_var[pix] * (wm * wm + vw);
                        }
                    }
                if (dp && !dp->var_bias.empty()) acc += dp->var_bias[co];
                check_and_clamp(acc, "propagate_conv2d");
                v[co * out_hw + oy * out_shape.w + ox] = acc;
            }
    }
    out.kind = CovKind::diagonal;
    out.var = Matrix(1, out_shape.flat);
    out.var.data = std::move(v);
    return out;
}

MomentState propagate_avgpool(const MomentState& state, const AvgPool2dLayer& layer) {
    if (state.shape.kind != TensorShape::Kind::image)
        throw StructuralError("propagate_avgpool: input is not an image");
    if (state.kind == CovKind::full)
        throw StructuralError("propagate_avgpool: full input covariance unsupported");
    const TensorShape in_shape = state.shape;
    const TensorShape out_shape = pool_output_shape(layer, in_shape);
    MomentState out;
    out.shape = out_shape;
    out.mean = Matrix(1, out_shape.flat);
    out.mean.data = avgpool_apply(layer, state.mean.row(0), in_shape, out_shape);
    if (state.kind == CovKind::deterministic) {
        out.kind = CovKind::deterministic;
        return out;
    }
    const Vector a_var = state.token_variances(0);
    Vector v(out_shape.flat, 0.0);
    const std::size_t in_hw = in_shape.h * in_shape.w;
    const std::size_t out_hw = out_shape.h * out_shape.w;
    const double inv_n2 = 1.0 / static_cast<double>(layer.window * layer.window *
                                                    layer.window * layer.window);
    for (std::size_t c = 0; c < in_shape.c; ++c)
        for (std::size_t oy = 0; oy < out_shape.h; ++oy)
            for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < layer.window; ++ky)
                    for (std::size_t kx = 0; kx < layer.window; ++kx)
                        acc += a_var[c * in_hw + (oy * layer.stride + ky) * in_shape.w +
                                     (ox * layer.stride + kx)];
                v[c * out_hw + oy * out_shape.w + ox] = acc * inv_n2;
            }
    out.kind = CovKind::diagonal;
    out.var = Matrix(1, out_shape.flat);
    out.var.data = std::move(v);
    return out;
}

MomentState propagate_flatten(const MomentState& state) {
    MomentState out;
    out.shape = TensorShape::make_flat(state.shape.flat);
    out.kind = state.kind;
    out.mean = Matrix(1, state.mean.size());
    out.mean.data = state.mean.data;
    if (state.kind == CovKind::diagonal) {
        out.var = Matrix(1, state.var.size());
        out.var.data = state.var.data;
    } else if (state.kind == CovKind::full) {
        // Tokens are independent: block-diagonal assembly.
        const std::size_t t_count = state.tokens();
        const std::size_t d = state.dim();
        Matrix big(t_count * d, t_count * d);
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    big(t * d + i, t * d + j) = state.cov[t](i, j);
        out.cov.assign(1, std::move(big));
    }
    return out;
}

namespace {

struct PropagateWalker {
    const PosteriorSpec* post;
    const PropagationConfig* cfg;
    std::vector<MomentState>* trace = nullptr;
    std::size_t counter = 0;

    MomentState run(const std::vector<LayerSpec>& layers, MomentState state) {
        for (const LayerSpec& layer : layers) {
            const std::size_t idx = counter++;
            try {
                if (layer.is<LinearLayer>()) {
                    state = propagate_linear(state, layer.as<LinearLayer>(), post->at(idx), *cfg);
                } else if (layer.is<ActivationLayer>()) {
                    state = propagate_activation(state, layer.as<ActivationLayer>().kind);
                } else if (layer.is<LayerNormLayer>()) {
                    state = propagate_layernorm(state, layer.as<LayerNormLayer>());
                } else if (layer.is<ResidualLayer>()) {
                    const MomentState inner = run(layer.as<ResidualLayer>().inner, state);
                    state = propagate_residual(state, inner);
                } else if (layer.is<AttentionLayer>()) {
                    state = propagate_attention(state, layer.as<AttentionLayer>(), post->at(idx),
                                                *cfg);
                } else if (layer.is<Conv2dLayer>()) {
                    state = propagate_conv2d(state, layer.as<Conv2dLayer>(), post->at(idx), *cfg);
                } else if (layer.is<AvgPool2dLayer>()) {
                    state = propagate_avgpool(state, layer.as<AvgPool2dLayer>());
                } else {
                    state = propagate_flatten(state);
                }
            } catch (const StructuralError& e) {
                throw StructuralError("layer " + std::to_string(idx) + ": " + e.what());
            } catch (const NumericalError& e) {
                throw NumericalError("layer " + std::to_string(idx) + ": " + e.what(), e.index);
            }
            if (trace) (*trace)[idx] = state;
        }
        return state;
    }
};

MomentState reshape_input(const NetworkModel& net, const MomentState& input) {
    const TensorShape shape = model_input_shape(net);
    if (input.mean.size() != shape.flat)
        throw StructuralError("propagate_network: input length " +
                              std::to_string(input.mean.size()) + " != expected " +
                              std::to_string(shape.flat));
    MomentState state = input;
    state.shape = shape;
    if (shape.kind == TensorShape::Kind::tokens && input.mean.rows != shape.t) {
        if (input.kind == CovKind::full)
            throw StructuralError(
                "propagate_network: full input covariance unsupported for token inputs");
        state.mean = Matrix(shape.t, shape.d);
        state.mean.data = input.mean.data;
        if (input.kind == CovKind::diagonal) {
            state.var = Matrix(shape.t, shape.d);
            state.var.data = input.var.data;
        }
    }
    return state;
}

}  // namespace

MomentState propagate_network(const NetworkModel& net, const PosteriorSpec& post,
                              const MomentState& input, const PropagationConfig& cfg) {
    PropagateWalker walker{&post, &cfg, nullptr, 0};
    return walker.run(net.layers, reshape_input(net, input));
}

std::vector<MomentState> propagate_network_trace(const NetworkModel& net, const PosteriorSpec& post,
                                                 const MomentState& input,
                                                 const PropagationConfig& cfg) {
    std::vector<MomentState> trace(flatten_layers(net).size());
    PropagateWalker walker{&post, &cfg, &trace, 0};
    walker.run(net.layers, reshape_input(net, input));
    return trace;
}

}  // namespace momentflow
