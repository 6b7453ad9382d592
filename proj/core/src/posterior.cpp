#include "momentflow/posterior.hpp"

#include <cmath>
#include <string>

#include "momentflow/errors.hpp"
#include "momentflow/linalg.hpp"

namespace momentflow {

namespace {

const LayerPosterior kDeterministic{DeterministicPosterior{}};

void require_psd(const Matrix& m, const char* what) {
    require_symmetric(m, 1e-8, what);
    const EigenDecomposition eig = sym_eig(m);
    double max_ev = 0.0;
    for (double l : eig.eigenvalues) max_ev = std::max(max_ev, std::fabs(l));
    for (double l : eig.eigenvalues)
        if (l < -1e-10 * std::max(max_ev, 1.0))
            throw StructuralError(std::string(what) + ": matrix not PSD (eigenvalue " +
                                  std::to_string(l) + ")");
}

void require_nonnegative(const Matrix& m, const char* what) {
    for (double v : m.data)
        if (v < 0.0) throw StructuralError(std::string(what) + ": negative variance");
}

void require_nonnegative(const Vector& v, const char* what) {
    for (double x : v)
        if (x < 0.0) throw StructuralError(std::string(what) + ": negative variance");
}

}  // namespace

const LayerPosterior& PosteriorSpec::at(std::size_t index) const {
    const auto it = layers.find(index);
    return it == layers.end() ? kDeterministic : it->second;
}

bool PosteriorSpec::is_deterministic(std::size_t index) const {
    return std::holds_alternative<DeterministicPosterior>(at(index));
}

void validate_posterior(const NetworkModel& net, const PosteriorSpec& spec) {
    const std::vector<const LayerSpec*> flat = flatten_layers(net);
    for (const auto& [idx, post] : spec.layers) {
        if (idx >= flat.size())
            throw StructuralError("posterior: layer index " + std::to_string(idx) +
                                  " out of range");
        const LayerSpec& layer = *flat[idx];
        if (std::holds_alternative<DeterministicPosterior>(post)) continue;

        if (layer.is<LinearLayer>()) {
            const LinearLayer& l = layer.as<LinearLayer>();
            const std::size_t d_out = l.weight.rows;
            const std::size_t d_in = l.weight.cols;
            const std::size_t d_aug = d_in + (l.bias.empty() ? 0 : 1);
            if (const auto* d = std::get_if<DiagonalPosterior>(&post)) {
                if (d->var_weight.rows != d_out || d->var_weight.cols != d_in)
                    throw StructuralError("posterior: diagonal var_weight shape mismatch at layer " +
                                          std::to_string(idx));
                if (d->var_bias.size() != l.bias.size())
                    throw StructuralError("posterior: diagonal var_bias length mismatch at layer " +
                                          std::to_string(idx));
                require_nonnegative(d->var_weight, "posterior diagonal");
                require_nonnegative(d->var_bias, "posterior diagonal");
            } else if (const auto* k = std::get_if<KfacPosterior>(&post)) {
                if (k->a_factor.rows != d_aug || k->b_factor.rows != d_out)
                    throw StructuralError("posterior: kfac factor shape mismatch at layer " +
                                          std::to_string(idx));
                if (k->prior_precision < 0.0)
                    throw StructuralError("posterior: negative prior precision");
                require_psd(k->a_factor, "posterior kfac a_factor");
                require_psd(k->b_factor, "posterior kfac b_factor");
            } else if (const auto* f = std::get_if<FullPosterior>(&post)) {
                const std::size_t n = d_out * d_in + l.bias.size();
                if (f->cov.rows != n || f->cov.cols != n)
                    throw StructuralError("posterior: full covariance shape mismatch at layer " +
                                          std::to_string(idx));
                require_psd(f->cov, "posterior full cov");
            }
        } else if (layer.is<AttentionLayer>()) {
            const AttentionLayer& l = layer.as<AttentionLayer>();
            const auto* d = std::get_if<DiagonalPosterior>(&post);
            if (!d)
                throw StructuralError(
                    "posterior: attention layers support diagonal posteriors only (layer " +
                    std::to_string(idx) + ")");
            if (d->var_weight.rows != l.wv.rows || d->var_weight.cols != l.wv.cols)
                throw StructuralError("posterior: attention var_weight must match wv at layer " +
                                      std::to_string(idx));
            if (!d->var_bias.empty())
                throw StructuralError("posterior: attention layers carry no bias");
            require_nonnegative(d->var_weight, "posterior attention");
        } else if (layer.is<Conv2dLayer>()) {
            const Conv2dLayer& l = layer.as<Conv2dLayer>();
            const auto* d = std::get_if<DiagonalPosterior>(&post);
            if (!d)
                throw StructuralError(
                    "posterior: conv2d layers support diagonal posteriors only (layer " +
                    std::to_string(idx) + ")");
            if (d->var_weight.rows != l.kernels.rows || d->var_weight.cols != l.kernels.cols)
                throw StructuralError("posterior: conv var_weight shape mismatch at layer " +
                                      std::to_string(idx));
            if (d->var_bias.size() != l.bias.size())
                throw StructuralError("posterior: conv var_bias length mismatch at layer " +
                                      std::to_string(idx));
            require_nonnegative(d->var_weight, "posterior conv");
            require_nonnegative(d->var_bias, "posterior conv");
        } else {
            throw StructuralError("posterior: layer " + std::to_string(idx) +
                                  " is not Linear/Attention/Conv2d");
        }
    }
}

std::pair<Matrix, Matrix> kfac_invert(const Matrix& a, const Matrix& b, double lambda) {
    if (lambda < 0.0) throw StructuralError("kfac_invert: lambda must be >= 0");
    const auto invert_one = [lambda](const Matrix& m, const char* what) {
        const EigenDecomposition eig = sym_eig(m);
        const std::size_t n = m.rows;
        Vector inv(n);
        for (std::size_t i = 0; i < n; ++i) {
            double l = eig.eigenvalues[i];
            if (l < 0.0) l = 0.0;  // clamp fitting noise before the shift
            const double shifted = l + lambda;
            if (shifted <= 0.0)
                throw NumericalError(std::string(what) + ": singular shifted factor", i);
            inv[i] = 1.0 / shifted;
        }
        Matrix out(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < n; ++k)
                    acc += eig.eigenvectors(i, k) * inv[k] * eig.eigenvectors(j, k);
                out(i, j) = acc;
                out(j, i) = acc;
            }
        return out;
    };
    return {invert_one(a, "kfac_invert a"), invert_one(b, "kfac_invert b")};
}

void invert_kfac_posterior(KfacPosterior& p) {
    auto [a_tilde, b_tilde] = kfac_invert(p.a_factor, p.b_factor, std::sqrt(p.prior_precision));
    p.a_tilde = std::move(a_tilde);
    p.b_tilde = std::move(b_tilde);
}

Matrix kfac_row_cov(const KfacPosterior& p, std::size_t k, std::size_t l) {
    if (!p.inverted()) throw StructuralError("kfac_row_cov: factors not inverted yet");
    const std::size_t n_a = p.a_tilde.rows;
    const std::size_t n_b = p.b_tilde.rows;
    if (k >= n_b || l >= n_b) throw StructuralError("kfac_row_cov: row index out of range");

    if (p.convention == KfacConvention::row) return matscale(p.a_tilde, p.b_tilde(k, l));

    // Column convention: the covariance of interest sits at rows
    // [k*n_a, (k+1)*n_a) and columns [l*n_a, (l+1)*n_a) of kron(a_tilde,
    // b_tilde), whose block grid has b-sized cells. Reconstruct only the
    // a-blocks that overlap that window, then slice.
    const std::size_t row_start = (k * n_a) / n_b;
    const std::size_t row_end = ((k + 1) * n_a + n_b - 1) / n_b;  // ceil
    const std::size_t col_start = (l * n_a) / n_b;
    const std::size_t col_end = ((l + 1) * n_a + n_b - 1) / n_b;
    const std::size_t select_row = (k * n_a) % n_b;
    const std::size_t select_col = (l * n_a) % n_b;

    Matrix block((row_end - row_start) * n_b, (col_end - col_start) * n_b);
    for (std::size_t bi = row_start; bi < row_end; ++bi)
        for (std::size_t bj = col_start; bj < col_end; ++bj) {
            const double c = p.a_tilde(bi, bj);
            for (std::size_t r = 0; r < n_b; ++r)
                for (std::size_t s = 0; s < n_b; ++s)
                    block((bi - row_start) * n_b + r, (bj - col_start) * n_b + s) =
                        c * p.b_tilde(r, s);
        }
    Matrix out(n_a, n_a);
    for (std::size_t i = 0; i < n_a; ++i)
        for (std::size_t j = 0; j < n_a; ++j) out(i, j) = block(select_row + i, select_col + j);
    return out;
}

namespace {

// Flat index of W[k,i] in a FullPosterior, biases after all weights.
std::size_t full_weight_index(Flattening f, std::size_t d_in, std::size_t d_out, std::size_t k,
                              std::size_t i) {
    return f == Flattening::row ? k * d_in + i : i * d_out + k;
}

}  // namespace

Matrix full_row_cov(const FullPosterior& p, std::size_t d_in, std::size_t d_out, bool has_bias,
                    std::size_t k, std::size_t l) {
    const std::size_t n_aug = d_in + (has_bias ? 1 : 0);
    const std::size_t bias_base = d_in * d_out;
    Matrix out(n_aug, n_aug);
    const auto idx = [&](std::size_t row, std::size_t i) {
        return i < d_in ? full_weight_index(p.flattening, d_in, d_out, row, i) : bias_base + row;
    };
    for (std::size_t i = 0; i < n_aug; ++i)
        for (std::size_t j = 0; j < n_aug; ++j) out(i, j) = p.cov(idx(k, i), idx(l, j));
    return out;
}

namespace {

Matrix elementwise_sqrt(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.data) v = std::sqrt(v);
    return out;
}

void add_elementwise_draw(Matrix& mean, const Matrix& sigma, SeededRng& rng) {
    for (std::size_t i = 0; i < mean.data.size(); ++i)
        mean.data[i] += sigma.data[i] * rng.next_normal();
}

// Sampling factor F with F F' == m. Cholesky when PD; otherwise an
// eigendecomposition with tolerance-level negative eigenvalues clamped to
// zero, so PSD-within-tolerance covariances remain usable. Eigenvalues
// below the tolerance still raise NumericalError.
Matrix psd_factor(const Matrix& m) {
    try {
        return cholesky(m);
    } catch (const NumericalError&) {
        const EigenDecomposition eig = sym_eig(m);
        double max_ev = 0.0;
        for (double l : eig.eigenvalues) max_ev = std::max(max_ev, std::fabs(l));
        Matrix f(m.rows, m.rows);
        for (std::size_t j = 0; j < m.rows; ++j) {
            double l = eig.eigenvalues[j];
            if (l < -1e-10 * std::max(max_ev, 1.0))
                throw NumericalError("sampler: covariance not PSD (eigenvalue " +
                                         std::to_string(l) + ")",
                                     j);
            if (l < 0.0) l = 0.0;
            const double s = std::sqrt(l);
            for (std::size_t i = 0; i < m.rows; ++i) f(i, j) = eig.eigenvectors(i, j) * s;
        }
        return f;
    }
}

Matrix augmented_mean(const LinearLayer& l) {
    const bool has_bias = !l.bias.empty();
    Matrix m(l.weight.rows, l.weight.cols + (has_bias ? 1 : 0));
    for (std::size_t k = 0; k < l.weight.rows; ++k) {
        for (std::size_t i = 0; i < l.weight.cols; ++i) m(k, i) = l.weight(k, i);
        if (has_bias) m(k, l.weight.cols) = l.bias[k];
    }
    return m;
}

void split_augmented(const Matrix& aug, LinearLayer& l) {
    const bool has_bias = !l.bias.empty();
    for (std::size_t k = 0; k < l.weight.rows; ++k) {
        for (std::size_t i = 0; i < l.weight.cols; ++i) l.weight(k, i) = aug(k, i);
        if (has_bias) l.bias[k] = aug(k, l.weight.cols);
    }
}

}  // namespace

PreparedSampler::PreparedSampler(const PosteriorSpec& spec, const NetworkModel& net) : net_(&net) {
    const std::vector<const LayerSpec*> flat = flatten_layers(net);
    for (const auto& [idx, post] : spec.layers) {
        if (std::holds_alternative<DeterministicPosterior>(post)) continue;
        if (idx >= flat.size())
            throw StructuralError("sampler: posterior index " + std::to_string(idx) +
                                  " out of range");
        PreparedLayer p;
        if (const auto* d = std::get_if<DiagonalPosterior>(&post)) {
            p.kind = PreparedLayer::Kind::diagonal;
            p.sigma_weight = elementwise_sqrt(d->var_weight);
            p.sigma_bias.resize(d->var_bias.size());
            for (std::size_t i = 0; i < d->var_bias.size(); ++i)
                p.sigma_bias[i] = std::sqrt(d->var_bias[i]);
        } else if (const auto* kf = std::get_if<KfacPosterior>(&post)) {
            if (!kf->inverted())
                throw StructuralError("sampler: kfac factors not inverted at layer " +
                                      std::to_string(idx));
            p.kind = kf->convention == KfacConvention::row ? PreparedLayer::Kind::kfac_row
                                                           : PreparedLayer::Kind::kfac_column;
            p.chol_a = cholesky(kf->a_tilde);
            p.chol_b = cholesky(kf->b_tilde);
        } else {
            const auto& f = std::get<FullPosterior>(post);
            p.kind = PreparedLayer::Kind::full;
            p.chol_full = psd_factor(f.cov);
            p.flattening = f.flattening;
        }
        prepared_.emplace(idx, std::move(p));
    }
}

void PreparedSampler::apply(std::vector<LayerSpec>& layers, std::size_t& counter,
                            SeededRng& rng) const {
    for (LayerSpec& layer : layers) {
        const std::size_t idx = counter++;
        if (layer.is<ResidualLayer>()) {
            apply(layer.as<ResidualLayer>().inner, counter, rng);
            continue;
        }
        const auto it = prepared_.find(idx);
        if (it == prepared_.end()) continue;
        const PreparedLayer& p = it->second;

        if (layer.is<AttentionLayer>()) {
            if (p.kind != PreparedLayer::Kind::diagonal)
                throw StructuralError("sampler: unsupported attention posterior");
            add_elementwise_draw(layer.as<AttentionLayer>().wv, p.sigma_weight, rng);
            continue;
        }
        if (layer.is<Conv2dLayer>()) {
            if (p.kind != PreparedLayer::Kind::diagonal)
                throw StructuralError("sampler: unsupported conv posterior");
            Conv2dLayer& l = layer.as<Conv2dLayer>();
            add_elementwise_draw(l.kernels, p.sigma_weight, rng);
            for (std::size_t c = 0; c < l.bias.size(); ++c)
                l.bias[c] += p.sigma_bias[c] * rng.next_normal();
            continue;
        }
        if (!layer.is<LinearLayer>())
            throw StructuralError("sampler: posterior on a parameter-free layer");
        LinearLayer& l = layer.as<LinearLayer>();

        switch (p.kind) {
            case PreparedLayer::Kind::diagonal: {
                add_elementwise_draw(l.weight, p.sigma_weight, rng);
                for (std::size_t k = 0; k < l.bias.size(); ++k)
                    l.bias[k] += p.sigma_bias[k] * rng.next_normal();
                break;
            }
            case PreparedLayer::Kind::kfac_row: {
                // W~ = M~ + L_b Z L_a' realises Cov[vec_row W~] = kron(b~, a~).
                Matrix aug = augmented_mean(l);
                const std::size_t d_out = aug.rows;
                const std::size_t n_a = aug.cols;
                Matrix z(d_out, n_a);
                for (double& v : z.data) v = rng.next_normal();
                const Matrix t = matmul(p.chol_b, z);
                for (std::size_t k = 0; k < d_out; ++k)
                    for (std::size_t i = 0; i < n_a; ++i) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) acc += t(k, j) * p.chol_a(i, j);
                        aug(k, i) += acc;
                    }
                split_augmented(aug, l);
                break;
            }
            case PreparedLayer::Kind::kfac_column: {
                // kron(a~, b~) is the covariance over row-major positions
                // p = k*n_a + i with block coordinates (p / n_b, p % n_b);
                // Y = L_a Z L_b' realises it.
                Matrix aug = augmented_mean(l);
                const std::size_t d_out = aug.rows;
                const std::size_t n_a = aug.cols;
                const std::size_t n_b = d_out;
                Matrix z(n_a, n_b);
                for (double& v : z.data) v = rng.next_normal();
                const Matrix y = matmul(matmul(p.chol_a, z), transpose(p.chol_b));
                for (std::size_t k = 0; k < d_out; ++k)
                    for (std::size_t i = 0; i < n_a; ++i) {
                        const std::size_t pos = k * n_a + i;
                        aug(k, i) += y(pos / n_b, pos % n_b);
                    }
                split_augmented(aug, l);
                break;
            }
            case PreparedLayer::Kind::full: {
                // chol_full may be a dense eigen-based factor, not triangular.
                const std::size_t n = p.chol_full.rows;
                Vector z(n);
                for (double& v : z) v = rng.next_normal();
                Vector delta(n, 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += p.chol_full(i, j) * z[j];
                    delta[i] = acc;
                }
                const std::size_t d_out = l.weight.rows;
                const std::size_t d_in = l.weight.cols;
                for (std::size_t k = 0; k < d_out; ++k)
                    for (std::size_t i = 0; i < d_in; ++i)
                        l.weight(k, i) += delta[full_weight_index(p.flattening, d_in, d_out, k, i)];
                for (std::size_t k = 0; k < l.bias.size(); ++k)
                    l.bias[k] += delta[d_out * d_in + k];
                break;
            }
        }
    }
}

NetworkModel PreparedSampler::draw(SeededRng& rng) const {
    NetworkModel out = *net_;
    std::size_t counter = 0;
    apply(out.layers, counter, rng);
    return out;
}

NetworkModel sample_weights(const PosteriorSpec& spec, const NetworkModel& net, SeededRng& rng) {
    return PreparedSampler(spec, net).draw(rng);
}

}  // namespace momentflow
