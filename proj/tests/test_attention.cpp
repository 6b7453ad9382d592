#include <doctest.h>

#include <cmath>

#include "momentflow/errors.hpp"
#include "momentflow/oracle.hpp"
#include "momentflow/propagate.hpp"

using namespace momentflow;

namespace {

AttentionLayer identity_attention(std::size_t d) {
    AttentionLayer l;
    l.heads = 1;
    l.wq = Matrix::identity(d);
    l.wk = Matrix::identity(d);
    l.wv = Matrix::identity(d);
    l.wo = Matrix::identity(d);
    return l;
}

AttentionLayer random_attention(std::size_t d, std::size_t heads, SeededRng& rng) {
    AttentionLayer l;
    l.heads = heads;
    for (Matrix* w : {&l.wq, &l.wk, &l.wv, &l.wo}) {
        *w = Matrix(d, d);
        for (double& v : w->data) v = 0.6 * rng.next_normal();
    }
    return l;
}

MomentState token_state(const Matrix& mean, const Matrix& var) {
    MomentState s;
    s.mean = mean;
    s.kind = CovKind::diagonal;
    s.var = var;
    s.shape = TensorShape::make_tokens(mean.rows, mean.cols);
    return s;
}

PropagationConfig cfg_with(ValueCov vc) {
    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::diag;
    cfg.attention_value_cov = vc;
    return cfg;
}

}  // namespace

TEST_CASE("T=1 identity attention passes the moments through") {
    Matrix mean(1, 2);
    mean(0, 0) = 0.4;
    mean(0, 1) = -1.2;
    Matrix var(1, 2);
    var(0, 0) = 0.09;
    var(0, 1) = 0.25;
    const MomentState out = propagate_attention(
        token_state(mean, var), identity_attention(2), LayerPosterior{DeterministicPosterior{}},
        cfg_with(ValueCov::variance_only));
    CHECK(out.mean(0, 0) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(out.mean(0, 1) == doctest::Approx(-1.2).epsilon(1e-15));
    const Vector v = out.token_variances(0);
    CHECK(v[0] == doctest::Approx(0.09).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("deterministic posterior and zero input covariance collapse to plain attention") {
    SeededRng rng(500, 0);
    const std::size_t t_count = 3, d = 4;
    const AttentionLayer att = random_attention(d, 2, rng);

    NetworkModel net;
    net.task = Task::regression;
    net.input.flat = t_count * d;
    net.num_outputs = t_count * d;
    net.layers.push_back({att});

    SeededRng xr(501, 0);
    const Vector x = standard_normal(xr, t_count * d);
    const Vector f = forward(net, x);

    const MomentState out = propagate_network(net, PosteriorSpec{},
                                              MomentState::deterministic_input(x),
                                              cfg_with(ValueCov::full));
    CHECK(out.kind == CovKind::deterministic);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(out.mean.data[i] == f[i]);
}

TEST_CASE("full and variance-only value covariance agree on the output variances pre-Wo") {
    // Wo = I isolates the value/mixing stage, where dropping within-token
    // cross-covariances cannot change the diagonals.
    SeededRng rng(502, 0);
    const std::size_t t_count = 2, d = 2;
    AttentionLayer att = random_attention(d, 1, rng);
    att.wo = Matrix::identity(d);

    Matrix mean(t_count, d), var(t_count, d);
    for (double& v : mean.data) v = rng.next_normal();
    for (double& v : var.data) v = 0.2 + 0.3 * rng.next_uniform();

    DiagonalPosterior post;
    post.var_weight = Matrix(d, d);
    for (double& v : post.var_weight.data) v = 0.1 * rng.next_uniform();

    const MomentState full_out = propagate_attention(
        token_state(mean, var), att, LayerPosterior{post}, cfg_with(ValueCov::full));
    const MomentState varonly_out = propagate_attention(
        token_state(mean, var), att, LayerPosterior{post}, cfg_with(ValueCov::variance_only));
    for (std::size_t t = 0; t < t_count; ++t) {
        const Vector vf = full_out.token_variances(t);
        const Vector vv = varonly_out.token_variances(t);
        for (std::size_t i = 0; i < d; ++i) CHECK(vf[i] == doctest::Approx(vv[i]).epsilon(1e-12));
    }
}

TEST_CASE("attention value moments match an MC oracle with frozen scores") {
    SeededRng rng(503, 0);
    const std::size_t t_count = 2, d = 2;
    AttentionLayer att = random_attention(d, 1, rng);
    att.wo = Matrix::identity(d);

    Matrix mean(t_count, d), var(t_count, d);
    for (double& v : mean.data) v = rng.next_normal();
    for (double& v : var.data) v = 0.1 + 0.2 * rng.next_uniform();

    DiagonalPosterior post;
    post.var_weight = Matrix(d, d);
    for (double& v : post.var_weight.data) v = 0.05 + 0.1 * rng.next_uniform();

    const MomentState out = propagate_attention(
        token_state(mean, var), att, LayerPosterior{post}, cfg_with(ValueCov::variance_only));

    // Oracle: joint W_V + input draws with the scores frozen at the means,
    // and tokens constructed independent (a fresh W_V draw per token, the
    // independence the propagation assumes).
    const AttentionDetail detail = attention_forward(att, mean);
    const Matrix& s = detail.scores[0];
    const std::size_t s_count = 100000;
    SeededRng mc(504, 0);
    Matrix sum(t_count, d), sumsq(t_count, d);
    Matrix v_draw(t_count, d);
    for (std::size_t rep = 0; rep < s_count; ++rep) {
        for (std::size_t u = 0; u < t_count; ++u) {
            Matrix wv = att.wv;
            for (std::size_t i = 0; i < wv.data.size(); ++i)
                wv.data[i] += std::sqrt(post.var_weight.data[i]) * mc.next_normal();
            Vector h = mean.row(u);
            for (std::size_t i = 0; i < d; ++i)
                h[i] += std::sqrt(var(u, i)) * mc.next_normal();
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < d; ++i) acc += h[i] * wv(i, j);
                v_draw(u, j) = acc;
            }
        }
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t u = 0; u < t_count; ++u) acc += s(t, u) * v_draw(u, j);
                sum(t, j) += acc;
                sumsq(t, j) += acc * acc;
            }
    }
    for (std::size_t t = 0; t < t_count; ++t) {
        const Vector analytic = out.token_variances(t);
        for (std::size_t j = 0; j < d; ++j) {
            const double m = sum(t, j) / s_count;
            const double v_emp = sumsq(t, j) / s_count - m * m;
            CHECK(std::fabs(m - out.mean(t, j)) < 0.02 * std::fabs(out.mean(t, j)) + 0.01);
            CHECK(std::fabs(v_emp - analytic[j]) / analytic[j] < 0.05);
        }
    }
}

TEST_CASE("multi-head value covariance is block-diagonal by head") {
    SeededRng rng(511, 0);
    const std::size_t t_count = 2, d = 4, heads = 2, dh = 2;
    AttentionLayer att = random_attention(d, heads, rng);
    att.wo = Matrix::identity(d);  // expose the mixed state directly

    Matrix mean(t_count, d), var(t_count, d);
    for (double& v : mean.data) v = rng.next_normal();
    for (double& v : var.data) v = 0.1 + 0.3 * rng.next_uniform();

    DiagonalPosterior post;
    post.var_weight = Matrix(d, d);
    for (double& v : post.var_weight.data) v = 0.1 * rng.next_uniform();

    const MomentState out = propagate_attention(token_state(mean, var), att,
                                                LayerPosterior{post}, cfg_with(ValueCov::full));
    REQUIRE(out.kind == CovKind::full);
    const AttentionDetail detail = attention_forward(att, mean);
    for (std::size_t t = 0; t < t_count; ++t) {
        // Cross-head entries are zero (heads independent).
        for (std::size_t k = 0; k < dh; ++k)
            for (std::size_t l = dh; l < d; ++l) {
                CHECK(out.cov[t](k, l) == 0.0);
                CHECK(out.cov[t](l, k) == 0.0);
            }
        // Within-head entries follow the per-token value formulas mixed
        // with the squared scores of that head.
        for (std::size_t head = 0; head < heads; ++head) {
            const Matrix& s = detail.scores[head];
            const std::size_t off = head * dh;
            for (std::size_t k = off; k < off + dh; ++k)
                for (std::size_t l = off; l < off + dh; ++l) {
                    double expect = 0.0;
                    for (std::size_t u = 0; u < t_count; ++u) {
                        double cv = 0.0;
                        for (std::size_t i = 0; i < d; ++i) {
                            cv += att.wv(i, k) * att.wv(i, l) * var(u, i);
                            if (k == l)
                                cv += (mean(u, i) * mean(u, i) + var(u, i)) *
                                      post.var_weight(i, k);
                        }
                        expect += s(t, u) * s(t, u) * cv;
                    }
                    CHECK(out.cov[t](k, l) == doctest::Approx(expect).epsilon(1e-12));
                }
        }
    }
}

TEST_CASE("T=1 attention equals propagate_linear through wv then wo") {
    SeededRng rng(505, 0);
    const std::size_t d = 3;
    AttentionLayer att = random_attention(d, 1, rng);

    Matrix mean(1, d), var(1, d);
    for (double& v : mean.data) v = rng.next_normal();
    for (double& v : var.data) v = 0.1 + 0.4 * rng.next_uniform();

    DiagonalPosterior post;
    post.var_weight = Matrix(d, d);
    for (double& v : post.var_weight.data) v = 0.2 * rng.next_uniform();

    const MomentState att_out = propagate_attention(
        token_state(mean, var), att, LayerPosterior{post}, cfg_with(ValueCov::full));

    // Equivalent two-step linear route: value projection (posterior on the
    // transposed weight), then the output projection.
    LinearLayer wv_layer{transpose(att.wv), Vector{}};
    DiagonalPosterior wv_post;
    wv_post.var_weight = transpose(post.var_weight);
    LinearLayer wo_layer{transpose(att.wo), Vector{}};

    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::full;
    const MomentState v_state = propagate_linear(
        MomentState::diagonal_input(mean.row(0), var.row(0)), wv_layer, LayerPosterior{wv_post},
        cfg);
    const MomentState lin_out =
        propagate_linear(v_state, wo_layer, LayerPosterior{DeterministicPosterior{}}, cfg);

    for (std::size_t i = 0; i < d; ++i)
        CHECK(att_out.mean(0, i) == doctest::Approx(lin_out.mean(0, i)).epsilon(1e-12));
    CHECK(max_abs_diff(att_out.cov[0], lin_out.cov[0]) < 1e-12);
}

TEST_CASE("attention rejects full input covariance and bad posteriors") {
    SeededRng rng(506, 0);
    const AttentionLayer att = identity_attention(2);
    MomentState full_state;
    full_state.mean = Matrix(1, 2);
    full_state.kind = CovKind::full;
    full_state.cov.assign(1, Matrix::identity(2));
    full_state.shape = TensorShape::make_tokens(1, 2);
    CHECK_THROWS_AS(propagate_attention(full_state, att, LayerPosterior{DeterministicPosterior{}},
                                        cfg_with(ValueCov::full)),
                    StructuralError);

    Matrix mean(1, 2), var(1, 2, 0.1);
    KfacPosterior kfac;
    CHECK_THROWS_AS(propagate_attention(token_state(mean, var), att, LayerPosterior{kfac},
                                        cfg_with(ValueCov::full)),
                    StructuralError);
}

TEST_CASE("conv: 1x1 identity kernel with zero variance passes moments through") {
    Conv2dLayer conv;
    conv.c_in = 1;
    conv.k_h = 1;
    conv.k_w = 1;
    conv.kernels = Matrix(1, 1, 1.0);
    conv.bias = {0.0};
    conv.stride = 1;
    conv.padding = 0;

    MomentState in;
    in.mean = Matrix(1, 4);
    in.mean.data = {1.0, 2.0, 3.0, 4.0};
    in.kind = CovKind::diagonal;
    in.var = Matrix(1, 4);
    in.var.data = {0.1, 0.2, 0.3, 0.4};
    in.shape = TensorShape::make_image(1, 2, 2);

    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::diag;
    const MomentState out =
        propagate_conv2d(in, conv, LayerPosterior{DeterministicPosterior{}}, cfg);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(out.mean.data[i] == in.mean.data[i]);
        CHECK(out.var.data[i] == doctest::Approx(in.var.data[i]).epsilon(1e-15));
    }
}

TEST_CASE("deterministic conv on a deterministic image equals direct convolution") {
    SeededRng rng(507, 0);
    Conv2dLayer conv;
    conv.c_in = 1;
    conv.k_h = 3;
    conv.k_w = 3;
    conv.kernels = Matrix(2, 9);
    for (double& v : conv.kernels.data) v = rng.next_normal();
    conv.bias = {0.5, -0.5};
    conv.stride = 1;
    conv.padding = 1;

    const TensorShape in_shape = TensorShape::make_image(1, 4, 4);
    SeededRng xr(508, 0);
    const Vector img = standard_normal(xr, 16);

    MomentState in;
    in.mean = Matrix(1, 16);
    in.mean.data = img;
    in.kind = CovKind::deterministic;
    in.shape = in_shape;

    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::diag;
    const MomentState out =
        propagate_conv2d(in, conv, LayerPosterior{DeterministicPosterior{}}, cfg);
    const Vector direct = conv2d_apply(conv, img, in_shape, conv_output_shape(conv, in_shape));
    CHECK(out.kind == CovKind::deterministic);
    for (std::size_t i = 0; i < direct.size(); ++i) CHECK(out.mean.data[i] == direct[i]);
}

TEST_CASE("conv variance matches the unrolled im2col linear layer") {
    SeededRng rng(509, 0);
    Conv2dLayer conv;
    conv.c_in = 1;
    conv.k_h = 2;
    conv.k_w = 2;
    conv.kernels = Matrix(1, 4);
    for (double& v : conv.kernels.data) v = rng.next_normal();
    conv.bias = {0.3};
    conv.stride = 1;
    conv.padding = 0;

    DiagonalPosterior post;
    post.var_weight = Matrix(1, 4);
    for (double& v : post.var_weight.data) v = 0.1 + 0.2 * rng.next_uniform();
    post.var_bias = {0.05};

    const TensorShape in_shape = TensorShape::make_image(1, 4, 4);
    const TensorShape out_shape = conv_output_shape(conv, in_shape);
    SeededRng xr(510, 0);
    const Vector img = standard_normal(xr, 16);
    Vector img_var(16);
    for (double& v : img_var) v = 0.1 + 0.3 * xr.next_uniform();

    MomentState in;
    in.mean = Matrix(1, 16);
    in.mean.data = img;
    in.kind = CovKind::diagonal;
    in.var = Matrix(1, 16);
    in.var.data = img_var;
    in.shape = in_shape;

    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::diag;
    const MomentState out = propagate_conv2d(in, conv, LayerPosterior{post}, cfg);

    // im2col oracle: each output pixel is a scalar linear layer over its
    // receptive field with shared weights.
    for (std::size_t oy = 0; oy < out_shape.h; ++oy)
        for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
            LinearLayer row;
            row.weight = Matrix(1, 4);
            row.bias = {conv.bias[0]};
            DiagonalPosterior row_post;
            row_post.var_weight = Matrix(1, 4);
            row_post.var_bias = {post.var_bias[0]};
            Vector patch(4), patch_var(4);
            std::size_t p = 0;
            for (std::size_t ky = 0; ky < 2; ++ky)
                for (std::size_t kx = 0; kx < 2; ++kx, ++p) {
                    row.weight(0, p) = conv.kernels(0, ky * 2 + kx);
                    row_post.var_weight(0, p) = post.var_weight(0, ky * 2 + kx);
                    patch[p] = img[(oy + ky) * 4 + (ox + kx)];
                    patch_var[p] = img_var[(oy + ky) * 4 + (ox + kx)];
                }
            const MomentState ref = propagate_linear(
                MomentState::diagonal_input(patch, patch_var), row, LayerPosterior{row_post}, cfg);
            CHECK(out.var(0, oy * out_shape.w + ox) ==
                  doctest::Approx(ref.var(0, 0)).epsilon(1e-12));
            CHECK(out.mean(0, oy * out_shape.w + ox) ==
                  doctest::Approx(ref.mean(0, 0)).epsilon(1e-12));
        }
}

TEST_CASE("conv rejects full mode") {
    Conv2dLayer conv;
    conv.c_in = 1;
    conv.k_h = 1;
    conv.k_w = 1;
    conv.kernels = Matrix(1, 1, 1.0);
    MomentState in;
    in.mean = Matrix(1, 4);
    in.kind = CovKind::deterministic;
    in.shape = TensorShape::make_image(1, 2, 2);
    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::full;
    CHECK_THROWS_AS(propagate_conv2d(in, conv, LayerPosterior{DeterministicPosterior{}}, cfg),
                    StructuralError);
}

TEST_CASE("avgpool averages means and scales variances by 1/n^2") {
    AvgPool2dLayer pool{2, 2};
    MomentState in;
    in.mean = Matrix(1, 4);
    in.mean.data = {1.0, 3.0, 5.0, 7.0};
    in.kind = CovKind::diagonal;
    in.var = Matrix(1, 4);
    in.var.data = {0.4, 0.4, 0.4, 0.4};
    in.shape = TensorShape::make_image(1, 2, 2);
    const MomentState out = propagate_avgpool(in, pool);
    CHECK(out.mean(0, 0) == doctest::Approx(4.0));
    CHECK(out.var(0, 0) == doctest::Approx(4.0 * 0.4 / 16.0).epsilon(1e-14));
}
