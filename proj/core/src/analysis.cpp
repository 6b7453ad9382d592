#include "momentflow/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "momentflow/errors.hpp"
#include "momentflow/heads.hpp"
#include "momentflow/propagate.hpp"

namespace momentflow {

namespace {

constexpr double kProbitFactor = 0.39269908169872415481;  // pi/8
constexpr double kLog2PiE = 2.8378770664093454836;        // ln(2 pi e)

// The sensitivity objective only moves the input variances: means are
// fixed at the image, so the variance path is an affine map per layer with
// coefficients frozen at the mean trace. One step per layer.
struct VarStep {
    bool is_affine = false;  // linear layer: v' = coeff v + offset
    Matrix coeff;
    Vector offset;
    Vector scale2;  // activation: v' = scale2 .* v
};

struct VarPath {
    std::vector<VarStep> steps;
    Vector logit_mean;
};

VarPath prepare_var_path(const NetworkModel& net, const PosteriorSpec& post, const Vector& x) {
    if (net.task != Task::classification)
        throw StructuralError("sensitivity: classification networks only");
    VarPath path;
    Vector mean = x;
    std::size_t idx = 0;
    for (const LayerSpec& layer : net.layers) {
        const std::size_t my_idx = idx++;
        if (layer.is<LinearLayer>()) {
            const LinearLayer& l = layer.as<LinearLayer>();
            const LayerPosterior& p = post.at(my_idx);
            const std::size_t d_in = l.weight.cols;
            const std::size_t d_out = l.weight.rows;
            const bool has_bias = !l.bias.empty();
            VarStep step;
            step.is_affine = true;
            step.coeff = Matrix(d_out, d_in);
            step.offset.assign(d_out, 0.0);
            for (std::size_t k = 0; k < d_out; ++k)
                for (std::size_t i = 0; i < d_in; ++i)
                    step.coeff(k, i) = l.weight(k, i) * l.weight(k, i);
            if (const auto* dp = std::get_if<DiagonalPosterior>(&p)) {
                for (std::size_t k = 0; k < d_out; ++k) {
                    double c = has_bias ? dp->var_bias[k] : 0.0;
                    for (std::size_t i = 0; i < d_in; ++i) {
                        step.coeff(k, i) += dp->var_weight(k, i);
                        c += mean[i] * mean[i] * dp->var_weight(k, i);
                    }
                    step.offset[k] = c;
                }
            } else if (const auto* kp = std::get_if<KfacPosterior>(&p)) {
                Vector aug = mean;
                if (has_bias) aug.push_back(1.0);
                for (std::size_t k = 0; k < d_out; ++k) {
                    const Matrix c = kfac_row_cov(*kp, k, k);
                    for (std::size_t i = 0; i < d_in; ++i) step.coeff(k, i) += c(i, i);
                    step.offset[k] = quadratic_form(c, aug);
                }
            } else if (const auto* fp = std::get_if<FullPosterior>(&p)) {
                Vector aug = mean;
                if (has_bias) aug.push_back(1.0);
                for (std::size_t k = 0; k < d_out; ++k) {
                    const Matrix c = full_row_cov(*fp, d_in, d_out, has_bias, k, k);
                    for (std::size_t i = 0; i < d_in; ++i) step.coeff(k, i) += c(i, i);
                    step.offset[k] = quadratic_form(c, aug);
                }
            }
            path.steps.push_back(std::move(step));
            mean = linear_apply(l, mean);
        } else if (layer.is<ActivationLayer>()) {
            const Activation kind = layer.as<ActivationLayer>().kind;
            VarStep step;
            step.scale2.resize(mean.size());
            for (std::size_t i = 0; i < mean.size(); ++i) {
                const double d = activation_derivative(kind, mean[i]);
                step.scale2[i] = d * d;
            }
            path.steps.push_back(std::move(step));
            mean = activation_apply(kind, mean);
        } else if (layer.is<FlattenLayer>()) {
            VarStep step;
            step.scale2.assign(mean.size(), 1.0);
            path.steps.push_back(std::move(step));
        } else {
            throw StructuralError(
                "sensitivity: only Linear/Activation/Flatten layers are supported");
        }
    }
    path.logit_mean = std::move(mean);
    return path;
}

double loss_and_grad_on_path(const VarPath& path, std::size_t y, const Vector& rho,
                             double probit_scale, Vector* grad_rho) {
    const std::size_t d_in = rho.size();
    Vector v(d_in);
    for (std::size_t i = 0; i < d_in; ++i) v[i] = std::exp(rho[i]);

    for (const VarStep& step : path.steps) {
        if (step.is_affine) {
            Vector next = matvec(step.coeff, v);
            for (std::size_t k = 0; k < next.size(); ++k) next[k] += step.offset[k];
            v = std::move(next);
        } else {
            for (std::size_t i = 0; i < v.size(); ++i) v[i] *= step.scale2[i];
        }
    }

    // Probit head, cross-entropy at the true label.
    const std::size_t n_class = path.logit_mean.size();
    if (y >= n_class) throw StructuralError("sensitivity: class index out of range");
    Vector denom(n_class), z(n_class);
    for (std::size_t c = 0; c < n_class; ++c) {
        denom[c] = std::sqrt(1.0 + kProbitFactor * probit_scale * v[c]);
        z[c] = path.logit_mean[c] / denom[c];
    }
    const Vector p = softmax(z);
    const double ce = -std::log(std::max(p[y], 1e-300));

    double entropy = 0.0;
    for (std::size_t i = 0; i < d_in; ++i) entropy += 0.5 * (kLog2PiE + rho[i]);
    const double loss = ce - entropy;

    if (grad_rho) {
        Vector vbar(n_class);
        for (std::size_t c = 0; c < n_class; ++c) {
            const double dce_dz = p[c] - (c == y ? 1.0 : 0.0);
            const double dz_dv = path.logit_mean[c] * (-0.5) * kProbitFactor * probit_scale /
                                 (denom[c] * denom[c] * denom[c]);
            vbar[c] = dce_dz * dz_dv;
        }
        for (std::size_t s = path.steps.size(); s-- > 0;) {
            const VarStep& step = path.steps[s];
            if (step.is_affine) {
                Vector prev(step.coeff.cols, 0.0);
                for (std::size_t k = 0; k < step.coeff.rows; ++k) {
                    const double b = vbar[k];
                    if (b == 0.0) continue;
                    const double* row = step.coeff.row_ptr(k);
                    for (std::size_t i = 0; i < step.coeff.cols; ++i) prev[i] += row[i] * b;
                }
                vbar = std::move(prev);
            } else {
                for (std::size_t i = 0; i < vbar.size(); ++i) vbar[i] *= step.scale2[i];
            }
        }
        grad_rho->assign(d_in, 0.0);
        for (std::size_t i = 0; i < d_in; ++i)
            (*grad_rho)[i] = vbar[i] * std::exp(rho[i]) - 0.5;
    }
    return loss;
}

}  // namespace

double sensitivity_loss_grad(const NetworkModel& net, const PosteriorSpec& post, const Vector& x,
                             std::size_t y, const Vector& rho, double probit_scale,
                             Vector* grad_rho) {
    if (rho.size() != x.size())
        throw StructuralError("sensitivity_loss_grad: rho length must match the input");
    const VarPath path = prepare_var_path(net, post, x);
    return loss_and_grad_on_path(path, y, rho, probit_scale, grad_rho);
}

SensitivityMap optimize_input_covariance(const NetworkModel& net, const PosteriorSpec& post,
                                         const Vector& x, std::size_t y,
                                         const SensitivityOptions& opts) {
    if (!all_finite(x)) throw StructuralError("sensitivity: non-finite input");
    const VarPath path = prepare_var_path(net, post, x);
    const std::size_t d = x.size();
    Vector rho(d, std::log(opts.init_variance));

    // NLPD of the datum is the cross-entropy part of the loss.
    const auto nlpd_of = [&](double loss) {
        double entropy = 0.0;
        for (std::size_t i = 0; i < d; ++i) entropy += 0.5 * (kLog2PiE + rho[i]);
        return loss + entropy;
    };

    Vector m(d, 0.0), v(d, 0.0);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    SensitivityMap map;
    Vector grad(d, 0.0);
    double initial_nlpd = 0.0;
    std::size_t iter = 0;
    for (;; ++iter) {
        const double loss = loss_and_grad_on_path(path, y, rho, opts.probit_scale, &grad);
        if (!std::isfinite(loss)) throw TrainingError("sensitivity: divergent loss", iter);
        const double nlpd = nlpd_of(loss);
        if (iter == 0) initial_nlpd = nlpd;
        map.loss_trace.push_back(loss);
        map.final_nlpd_gap = nlpd - initial_nlpd;
        if (map.final_nlpd_gap >= opts.stop_threshold || iter >= opts.max_iterations) break;

        const double t = static_cast<double>(iter + 1);
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < d; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            rho[i] -= opts.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }

    map.iterations = iter;
    map.sigma.resize(d);
    for (std::size_t i = 0; i < d; ++i) map.sigma[i] = std::exp(0.5 * rho[i]);
    const double lo = *std::min_element(map.sigma.begin(), map.sigma.end());
    const double hi = *std::max_element(map.sigma.begin(), map.sigma.end());
    map.normalised_map.resize(d);
    for (std::size_t i = 0; i < d; ++i)
        map.normalised_map[i] = hi > lo ? (map.sigma[i] - lo) / (hi - lo) : 0.0;
    return map;
}

LinearityProbe linearity_probe(const NetworkModel& net, const std::vector<Vector>& inputs,
                               const Vector& eps_list, bool scaled) {
    if (inputs.empty()) throw StructuralError("linearity_probe: empty input set");
    for (double e : eps_list)
        if (e < 0.0) throw StructuralError("linearity_probe: eps must be >= 0");

    const std::size_t n_out = net.num_outputs;
    LinearityProbe probe;
    probe.eps = eps_list;
    probe.delta = Matrix(eps_list.size(), n_out);
    probe.output_range.assign(n_out, 0.0);

    std::vector<Vector> base;
    base.reserve(inputs.size());
    Vector out_min(n_out, 0.0), out_max(n_out, 0.0);
    for (std::size_t n = 0; n < inputs.size(); ++n) {
        base.push_back(forward(net, inputs[n]));
        for (std::size_t c = 0; c < n_out; ++c) {
            if (n == 0 || base[n][c] < out_min[c]) out_min[c] = base[n][c];
            if (n == 0 || base[n][c] > out_max[c]) out_max[c] = base[n][c];
        }
    }
    for (std::size_t c = 0; c < n_out; ++c) probe.output_range[c] = out_max[c] - out_min[c];

    for (std::size_t e = 0; e < eps_list.size(); ++e) {
        const double eps = eps_list[e];
        for (std::size_t n = 0; n < inputs.size(); ++n) {
            for (const double sign : {+1.0, -1.0}) {
                const double factor = 1.0 + sign * eps;
                Vector z = inputs[n];
                for (double& v : z) v *= factor;
                const Vector f = forward(net, z);
                for (std::size_t c = 0; c < n_out; ++c)
                    probe.delta(e, c) += std::fabs(f[c] - base[n][c] * factor);
            }
        }
        const double denom = 2.0 * static_cast<double>(inputs.size());
        for (std::size_t c = 0; c < n_out; ++c) {
            probe.delta(e, c) /= denom;
            if (scaled && probe.output_range[c] > 0.0) probe.delta(e, c) /= probe.output_range[c];
        }
    }
    return probe;
}

EntropyDensity entropy_kde(const Vector& entropies, const Vector& grid,
                           double bandwidth_variance) {
    if (entropies.empty()) throw StructuralError("entropy_kde: no entropy samples");
    if (bandwidth_variance <= 0.0) throw StructuralError("entropy_kde: bandwidth must be > 0");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (grid[i] <= grid[i - 1]) throw StructuralError("entropy_kde: grid must be sorted");

    EntropyDensity out;
    out.grid = grid;
    out.bandwidth_variance = bandwidth_variance;
    out.density.assign(grid.size(), 0.0);
    const double norm = 1.0 / std::sqrt(2.0 * M_PI * bandwidth_variance);
    const double inv2bw = 1.0 / (2.0 * bandwidth_variance);
    for (std::size_t g = 0; g < grid.size(); ++g) {
        double acc = 0.0;
        for (double e : entropies) {
            const double d = grid[g] - e;
            acc += std::exp(-d * d * inv2bw);
        }
        out.density[g] = norm * acc / static_cast<double>(entropies.size());
    }
    return out;
}

Vector default_entropy_grid(const Vector& entropies, std::size_t points) {
    if (entropies.empty()) throw StructuralError("default_entropy_grid: no samples");
    double lo = entropies[0], hi = entropies[0];
    for (double e : entropies) {
        lo = std::min(lo, e);
        hi = std::max(hi, e);
    }
    lo -= 4.0;
    hi += 4.0;
    Vector grid(points);
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    return grid;
}

double predictive_entropy(const Vector& probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p < 0.0 || p > 1.0 + 1e-12)
            throw StructuralError("predictive_entropy: invalid probability");
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

void write_pgm(const std::string& path, const Vector& normalised, std::size_t h, std::size_t w) {
    if (normalised.size() != h * w) throw StructuralError("write_pgm: size mismatch");
    std::ofstream out(path);
    if (!out) throw ConfigError("write_pgm: cannot open " + path);
    out << "P2\n" << w << " " << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            // display range (0.5, 1.0) of full scale
            const double v = 0.5 + 0.5 * std::clamp(normalised[y * w + x], 0.0, 1.0);
            out << static_cast<int>(std::lround(v * 255.0));
            out << (x + 1 == w ? '\n' : ' ');
        }
    }
}

}  // namespace momentflow
