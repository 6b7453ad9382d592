#pragma once

#include <cstddef>
#include <map>
#include <utility>
#include <variant>

#include "momentflow/matrix.hpp"
#include "momentflow/model.hpp"
#include "momentflow/rng.hpp"

namespace momentflow {

struct DeterministicPosterior {};

/// Independent Gaussian per parameter. For Linear layers `var_weight` is
/// D_out x D_in; for Attention layers it holds the elementwise variances of
/// W_V (same storage orientation as the layer's wv); for Conv2d layers it is
/// C_out x (C_in*K_h*K_w) aligned with the kernel storage.
struct DiagonalPosterior {
    Matrix var_weight;
    Vector var_bias;  // empty when the layer has no bias
};

enum class KfacConvention { row, column };

/// Kronecker-factored covariance. `a_factor`/`b_factor` are the raw
/// curvature factors (input side, bias-augmented when the layer has a bias;
/// output side). The posterior covariance factors a_tilde/b_tilde are the
/// shifted inverses (factor + sqrt(prior_precision) I)^-1 and are filled by
/// invert_kfac_posterior below.
struct KfacPosterior {
    Matrix a_factor;
    Matrix b_factor;
    double prior_precision = 0.0;  // lambda^2
    KfacConvention convention = KfacConvention::row;
    Matrix a_tilde;
    Matrix b_tilde;

    bool inverted() const { return !a_tilde.empty(); }
};

enum class Flattening { row, column };

/// Dense covariance over the layer's flattened (weight ++ bias) parameters.
/// Row flattening indexes W[k,i] at k*D_in+i; column flattening at
/// i*D_out+k; biases follow after the D_out*D_in weight entries.
struct FullPosterior {
    Matrix cov;
    Flattening flattening = Flattening::row;
};

using LayerPosterior =
    std::variant<DeterministicPosterior, DiagonalPosterior, KfacPosterior, FullPosterior>;

/// Per-layer posterior map; layers absent from the map are deterministic.
/// Indices refer to the flatten_layers pre-order enumeration and may only
/// name Linear, Attention, or Conv2d layers.
struct PosteriorSpec {
    std::map<std::size_t, LayerPosterior> layers;

    const LayerPosterior& at(std::size_t index) const;
    bool is_deterministic(std::size_t index) const;
};

/// Checks map indices against the model (existence and layer kinds) and the
/// per-structure shape/PSD invariants. Throws StructuralError on violation.
void validate_posterior(const NetworkModel& net, const PosteriorSpec& spec);

/// (a + lambda I)^-1 and (b + lambda I)^-1 via symmetric eigendecomposition;
/// negative eigenvalues are clamped to zero before the shift. `lambda` is
/// the per-factor shift, i.e. the square root of the prior precision.
/// Throws NumericalError when a shifted factor is singular.
std::pair<Matrix, Matrix> kfac_invert(const Matrix& a, const Matrix& b, double lambda);

/// Fills a_tilde/b_tilde from the raw factors and prior precision.
void invert_kfac_posterior(KfacPosterior& p);

/// Covariance between rows k and l of the weight matrix, a D_in x D_in
/// block (bias-augmented D_in+1 when the factors are). Row convention
/// returns b_tilde[k,l] * a_tilde. Column convention assembles the block
/// from kron(a_tilde, b_tilde) by the block-index arithmetic, without
/// materialising the full Kronecker product.
Matrix kfac_row_cov(const KfacPosterior& p, std::size_t k, std::size_t l);

/// Augmented row-covariance block Cov[[W|b][k,:], [W|b][l,:]] of a dense
/// posterior, (d_in+1)^2 when the layer has a bias.
Matrix full_row_cov(const FullPosterior& p, std::size_t d_in, std::size_t d_out, bool has_bias,
                    std::size_t k, std::size_t l);

/// Repeated-draw sampler; factorises every layer covariance once at
/// construction. Throws NumericalError when a covariance is not PD.
class PreparedSampler {
  public:
    PreparedSampler(const PosteriorSpec& spec, const NetworkModel& net);
    NetworkModel draw(SeededRng& rng) const;

  private:
    struct PreparedLayer {
        // diagonal: sigma_* hold elementwise standard deviations;
        // kfac: chol_a/chol_b; full: chol_full plus the flattening.
        enum class Kind { diagonal, kfac_row, kfac_column, full } kind = Kind::diagonal;
        Matrix sigma_weight;
        Vector sigma_bias;
        Matrix chol_a, chol_b;
        Matrix chol_full;
        Flattening flattening = Flattening::row;
    };
    const NetworkModel* net_;
    std::map<std::size_t, PreparedLayer> prepared_;

    void apply(std::vector<LayerSpec>& layers, std::size_t& counter, SeededRng& rng) const;
};

/// One joint draw of all Bayesian-layer parameters; deterministic layers
/// are copied. Advances `rng`. Equivalent to PreparedSampler(...).draw(rng).
NetworkModel sample_weights(const PosteriorSpec& spec, const NetworkModel& net, SeededRng& rng);

}  // namespace momentflow
