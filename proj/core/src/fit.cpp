#include "momentflow/fit.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "momentflow/errors.hpp"
#include "momentflow/heads.hpp"
#include "momentflow/linalg.hpp"

namespace momentflow {

namespace {

// Uniform access to the trainable tensors of a layer tree, paired with the
// matching gradient field.
struct ParamTensor {
    std::size_t layer_idx = 0;
    double* values = nullptr;
    std::size_t n = 0;
    const Vector* (*grad_vec)(const LayerGrads&) = nullptr;
    const Matrix* (*grad_mat)(const LayerGrads&) = nullptr;

    const double* grad_data(const std::map<std::size_t, LayerGrads>& grads) const {
        const auto it = grads.find(layer_idx);
        if (it == grads.end()) return nullptr;
        if (grad_mat) {
            const Matrix* m = grad_mat(it->second);
            return m->empty() ? nullptr : m->data.data();
        }
        const Vector* v = grad_vec(it->second);
        return v->empty() ? nullptr : v->data();
    }
};

void collect_params(std::vector<LayerSpec>& layers, std::size_t& counter,
                    std::vector<ParamTensor>& out) {
    const auto mat = [&](std::size_t idx, Matrix& m, const Matrix* (*sel)(const LayerGrads&)) {
        if (!m.empty()) out.push_back({idx, m.data.data(), m.data.size(), nullptr, sel});
    };
    const auto vec = [&](std::size_t idx, Vector& v, const Vector* (*sel)(const LayerGrads&)) {
        if (!v.empty()) out.push_back({idx, v.data(), v.size(), sel, nullptr});
    };
    for (LayerSpec& layer : layers) {
        const std::size_t idx = counter++;
        if (layer.is<LinearLayer>()) {
            LinearLayer& l = layer.as<LinearLayer>();
            mat(idx, l.weight, [](const LayerGrads& g) { return &g.d_weight; });
            vec(idx, l.bias, [](const LayerGrads& g) { return &g.d_bias; });
        } else if (layer.is<LayerNormLayer>()) {
            LayerNormLayer& l = layer.as<LayerNormLayer>();
            vec(idx, l.gamma, [](const LayerGrads& g) { return &g.d_gamma; });
            vec(idx, l.beta, [](const LayerGrads& g) { return &g.d_beta; });
        } else if (layer.is<AttentionLayer>()) {
            AttentionLayer& l = layer.as<AttentionLayer>();
            mat(idx, l.wq, [](const LayerGrads& g) { return &g.d_wq; });
            mat(idx, l.wk, [](const LayerGrads& g) { return &g.d_wk; });
            mat(idx, l.wv, [](const LayerGrads& g) { return &g.d_wv; });
            mat(idx, l.wo, [](const LayerGrads& g) { return &g.d_wo; });
        } else if (layer.is<Conv2dLayer>()) {
            Conv2dLayer& l = layer.as<Conv2dLayer>();
            mat(idx, l.kernels, [](const LayerGrads& g) { return &g.d_weight; });
            vec(idx, l.bias, [](const LayerGrads& g) { return &g.d_bias; });
        } else if (layer.is<ResidualLayer>()) {
            collect_params(layer.as<ResidualLayer>().inner, counter, out);
        }
    }
}

std::vector<std::size_t> shuffled_indices(const std::vector<std::size_t>& rows, SeededRng& rng) {
    std::vector<std::size_t> idx = rows;
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = rng.next_u64() % i;
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

double target_real(const Dataset& data, std::size_t row) {
    return data.task == Task::regression ? data.targets_real[row] : 0.0;
}

std::size_t target_class(const Dataset& data, std::size_t row) {
    return data.task == Task::classification ? data.targets_class[row] : 0;
}

}  // namespace

NetworkModel train_map(const NetworkModel& net, const Dataset& data,
                       const std::vector<std::size_t>& rows, const TrainConfig& cfg,
                       TrainLog* log) {
    if (cfg.batch_size == 0 || cfg.learning_rate <= 0.0)
        throw ConfigError("train_map: positive batch size and learning rate required");
    NetworkModel model = net;
    validate_model(model);
    std::vector<std::size_t> train_rows =
        rows.empty() ? data.rows_with_split(Split::train) : rows;
    if (train_rows.empty()) throw ConfigError("train_map: no training rows");

    std::vector<ParamTensor> params;
    std::size_t counter = 0;
    collect_params(model.layers, counter, params);
    std::size_t total = 0;
    for (const ParamTensor& p : params) total += p.n;

    Vector m(total, 0.0), v(total, 0.0);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;
    SeededRng rng(cfg.seed, 0x7261696e);  // shuffling stream

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_indices(train_rows, rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, order.size());
            std::map<std::size_t, LayerGrads> batch_grads;
            const double inv_b = 1.0 / static_cast<double>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t row = order[i];
                const LossGrad lg = loss_backward(model, data.features.row(row), cfg.loss,
                                                  target_real(data, row), target_class(data, row));
                epoch_loss += lg.loss;
                accumulate(batch_grads, lg.grads.layers, inv_b);
            }
            ++step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            std::size_t offset = 0;
            for (const ParamTensor& p : params) {
                const double* g = p.grad_data(batch_grads);
                for (std::size_t i = 0; i < p.n; ++i) {
                    const double gi = (g ? g[i] : 0.0) + cfg.weight_decay * p.values[i];
                    m[offset + i] = beta1 * m[offset + i] + (1.0 - beta1) * gi;
                    v[offset + i] = beta2 * v[offset + i] + (1.0 - beta2) * gi * gi;
                    p.values[i] -= cfg.learning_rate * (m[offset + i] / bc1) /
                                   (std::sqrt(v[offset + i] / bc2) + eps);
                }
                offset += p.n;
            }
        }
        epoch_loss /= static_cast<double>(order.size());
        if (!std::isfinite(epoch_loss))
            throw TrainingError("train_map: loss diverged at epoch " + std::to_string(epoch),
                                epoch);
        if (log) log->epoch_loss.push_back(epoch_loss);
    }
    return model;
}

Vector default_prior_precision_grid() { return log_grid(1e-2, 1e3, 21); }

std::vector<std::size_t> linear_layer_indices(const NetworkModel& net) {
    std::vector<std::size_t> out;
    const std::vector<const LayerSpec*> flat = flatten_layers(net);
    for (std::size_t i = 0; i < flat.size(); ++i)
        if (flat[i]->is<LinearLayer>()) out.push_back(i);
    return out;
}

double fit_observation_noise(const NetworkModel& net, const Dataset& data,
                             const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw ConfigError("fit_observation_noise: no rows");
    double acc = 0.0;
    for (std::size_t r : rows) {
        const Vector f = forward(net, data.features.row(r));
        const double res = data.targets_real[r] - f[0];
        acc += res * res;
    }
    return std::max(acc / static_cast<double>(rows.size()), 1e-12);
}

namespace {

// Mean validation NLPD of the deterministic predictive under `spec`.
double validation_nlpd(const NetworkModel& net, const PosteriorSpec& spec, const Dataset& data,
                       const std::vector<std::size_t>& rows, CovMode mode, double obs_noise) {
    PropagationConfig cfg;
    cfg.activation_cov_mode = mode;
    double total = 0.0;
    for (std::size_t r : rows) {
        const MomentState out = propagate_network(
            net, spec, MomentState::deterministic_input(data.features.row(r)), cfg);
        const Vector mean = out.mean.row(0);
        const Vector var = out.token_variances(0);
        if (data.task == Task::regression) {
            const PredictiveDist p = regression_predict(mean[0], var[0], obs_noise, 1.0);
            total += regression_nlpd(p, data.targets_real[r], 1.0);
        } else {
            const Vector probs = probit_classify(mean, var, 1.0);
            total += -std::log(std::max(probs[data.targets_class[r]], 1e-300));
        }
    }
    return total / static_cast<double>(rows.size());
}

}  // namespace

LaplaceFit fit_laplace(const NetworkModel& net, const Dataset& data,
                       const std::vector<std::size_t>& train_rows,
                       const std::vector<std::size_t>& val_rows, const LaplaceConfig& cfg) {
    if (train_rows.empty()) throw ConfigError("fit_laplace: no training rows");
    const Vector grid =
        cfg.prior_precision_grid.empty() ? default_prior_precision_grid() : cfg.prior_precision_grid;
    for (double l2 : grid)
        if (l2 <= 0.0) throw ConfigError("fit_laplace: prior precision grid must be positive");

    std::vector<std::size_t> subset =
        cfg.layer_subset.empty() ? linear_layer_indices(net) : cfg.layer_subset;
    std::sort(subset.begin(), subset.end());
    const std::vector<const LayerSpec*> flat = flatten_layers(net);
    for (std::size_t idx : subset) {
        if (idx >= flat.size())
            throw ConfigError("fit_laplace: subset index out of range");
        const bool linear = flat[idx]->is<LinearLayer>();
        const bool diag_ok = linear || flat[idx]->is<Conv2dLayer>() || flat[idx]->is<AttentionLayer>();
        if (cfg.structure == LaplaceStructure::diagonal ? !diag_ok : !linear)
            throw ConfigError("fit_laplace: unsupported layer kind in subset for this structure");
    }

    const double obs_noise =
        data.task == Task::regression
            ? (cfg.obs_noise ? *cfg.obs_noise : fit_observation_noise(net, data, train_rows))
            : 0.0;
    const double inv_sigma =
        data.task == Task::regression ? 1.0 / std::sqrt(obs_noise) : 1.0;

    // Curvature accumulation over the training rows. Classification seeds
    // the backward pass with the true-label likelihood gradient; regression
    // seeds with 1/sigma per output so the outer products give J J'/sigma^2.
    std::map<std::size_t, LayerGrads> sq_grads;                       // diagonal
    std::map<std::size_t, std::pair<Matrix, Matrix>> kfac_factors;    // a_sum, b_sum
    std::map<std::size_t, double> kfac_pairs;  // (sample, token) pairs behind a_sum
    Matrix full_curv;                                                 // full
    std::vector<std::size_t> full_offsets;
    std::size_t full_dim = 0;

    const bool is_classification = data.task == Task::classification;
    if (cfg.structure == LaplaceStructure::full) {
        for (std::size_t idx : subset) {
            const LinearLayer& l = flat[idx]->as<LinearLayer>();
            full_offsets.push_back(full_dim);
            full_dim += l.weight.size() + l.bias.size();
        }
        full_curv = Matrix(full_dim, full_dim);
    }

    const auto accumulate_sample = [&](const GradResult& gr) {
        if (cfg.structure == LaplaceStructure::diagonal) {
            for (std::size_t idx : subset) {
                const auto it = gr.layers.find(idx);
                if (it == gr.layers.end()) continue;
                LayerGrads& acc = sq_grads[idx];
                const LayerGrads& g = it->second;
                const Matrix& gm = flat[idx]->is<AttentionLayer>() ? g.d_wv : g.d_weight;
                if (acc.d_weight.empty() && !gm.empty()) acc.d_weight = Matrix(gm.rows, gm.cols);
                for (std::size_t i = 0; i < gm.data.size(); ++i)
                    acc.d_weight.data[i] += gm.data[i] * gm.data[i];
                if (acc.d_bias.size() < g.d_bias.size()) acc.d_bias.assign(g.d_bias.size(), 0.0);
                for (std::size_t i = 0; i < g.d_bias.size(); ++i)
                    acc.d_bias[i] += g.d_bias[i] * g.d_bias[i];
            }
        } else if (cfg.structure == LaplaceStructure::kfac) {
            for (std::size_t idx : subset) {
                const auto it = gr.captures.find(idx);
                if (it == gr.captures.end()) continue;
                const LinearLayer& l = flat[idx]->as<LinearLayer>();
                const bool has_bias = !l.bias.empty();
                const Vector& input = it->second.first;
                const Vector& delta = it->second.second;
                const std::size_t n_a = l.weight.cols + (has_bias ? 1 : 0);
                auto& [a_sum, b_sum] = kfac_factors[idx];
                if (a_sum.empty()) {
                    a_sum = Matrix(n_a, n_a);
                    b_sum = Matrix(l.weight.rows, l.weight.rows);
                }
                // Token inputs contribute one (a, delta) pair per token.
                const std::size_t d_in = l.weight.cols;
                const std::size_t d_out = l.weight.rows;
                const std::size_t t_count = input.size() / d_in;
                kfac_pairs[idx] += static_cast<double>(t_count);
                for (std::size_t t = 0; t < t_count; ++t) {
                    Vector aug(input.begin() + static_cast<std::ptrdiff_t>(t * d_in),
                               input.begin() + static_cast<std::ptrdiff_t>((t + 1) * d_in));
                    if (has_bias) aug.push_back(1.0);
                    for (std::size_t i = 0; i < n_a; ++i)
                        for (std::size_t j = 0; j < n_a; ++j) a_sum(i, j) += aug[i] * aug[j];
                    const double* dl = delta.data() + t * d_out;
                    for (std::size_t i = 0; i < d_out; ++i)
                        for (std::size_t j = 0; j < d_out; ++j) b_sum(i, j) += dl[i] * dl[j];
                }
            }
        } else {
            Vector g(full_dim, 0.0);
            for (std::size_t s = 0; s < subset.size(); ++s) {
                const auto it = gr.layers.find(subset[s]);
                if (it == gr.layers.end()) continue;
                std::size_t off = full_offsets[s];
                for (double w : it->second.d_weight.data) g[off++] = w;
                for (double b : it->second.d_bias) g[off++] = b;
            }
            for (std::size_t i = 0; i < full_dim; ++i) {
                if (g[i] == 0.0) continue;
                for (std::size_t j = 0; j < full_dim; ++j) full_curv(i, j) += g[i] * g[j];
            }
        }
    };

    const std::vector<std::size_t>* capture =
        cfg.structure == LaplaceStructure::kfac ? &subset : nullptr;
    for (std::size_t row : train_rows) {
        const Vector x = data.features.row(row);
        if (is_classification) {
            const Vector f = forward(net, x);
            const Vector p = softmax(f);
            Vector d_out(f.size());
            for (std::size_t c = 0; c < f.size(); ++c)
                d_out[c] = p[c] - (c == target_class(data, row) ? 1.0 : 0.0);
            accumulate_sample(backward_from_output(net, x, d_out, capture));
        } else {
            const std::size_t n_out = net.num_outputs;
            for (std::size_t c = 0; c < n_out; ++c) {
                Vector d_out(n_out, 0.0);
                d_out[c] = inv_sigma;
                accumulate_sample(backward_from_output(net, x, d_out, capture));
            }
        }
    }

    // Realise the posterior for each grid point; keep the lambda^2 with the
    // best deterministic validation NLPD.
    const std::vector<std::size_t>& eval_rows = val_rows.empty() ? train_rows : val_rows;
    const CovMode mode =
        cfg.structure == LaplaceStructure::full ? CovMode::full : cfg.selection_cov_mode;

    EigenDecomposition full_eig;
    if (cfg.structure == LaplaceStructure::full) full_eig = sym_eig(full_curv);

    const auto realise = [&](double lambda2) {
        PosteriorSpec spec;
        if (cfg.structure == LaplaceStructure::diagonal) {
            for (std::size_t idx : subset) {
                const auto it = sq_grads.find(idx);
                if (it == sq_grads.end()) continue;
                DiagonalPosterior d;
                d.var_weight = it->second.d_weight;
                for (double& v : d.var_weight.data) v = 1.0 / (v + lambda2);
                d.var_bias = it->second.d_bias;
                for (double& v : d.var_bias) v = 1.0 / (v + lambda2);
                spec.layers.emplace(idx, std::move(d));
            }
        } else if (cfg.structure == LaplaceStructure::kfac) {
            for (std::size_t idx : subset) {
                const auto it = kfac_factors.find(idx);
                if (it == kfac_factors.end()) continue;
                KfacPosterior k;
                k.a_factor = matscale(it->second.first, 1.0 / kfac_pairs.at(idx));
                k.b_factor = it->second.second;
                k.prior_precision = lambda2;
                k.convention = KfacConvention::row;
                invert_kfac_posterior(k);
                spec.layers.emplace(idx, std::move(k));
            }
        } else {
            // (H + lambda^2 I)^-1 via the cached eigendecomposition.
            Vector inv(full_dim);
            for (std::size_t i = 0; i < full_dim; ++i) {
                const double ev = std::max(full_eig.eigenvalues[i], 0.0);
                inv[i] = 1.0 / (ev + lambda2);
            }
            Matrix sigma(full_dim, full_dim);
            for (std::size_t i = 0; i < full_dim; ++i)
                for (std::size_t j = i; j < full_dim; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < full_dim; ++k)
                        acc += full_eig.eigenvectors(i, k) * inv[k] * full_eig.eigenvectors(j, k);
                    sigma(i, j) = acc;
                    sigma(j, i) = acc;
                }
            // Per-layer marginal blocks; cross-layer covariance is dropped
            // at storage since the propagation treats layers independently.
            for (std::size_t s = 0; s < subset.size(); ++s) {
                const LinearLayer& l = flat[subset[s]]->as<LinearLayer>();
                const std::size_t n = l.weight.size() + l.bias.size();
                const std::size_t off = full_offsets[s];
                FullPosterior f;
                f.flattening = Flattening::row;
                f.cov = Matrix(n, n);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) f.cov(i, j) = sigma(off + i, off + j);
                spec.layers.emplace(subset[s], std::move(f));
            }
        }
        return spec;
    };

    LaplaceFit fit;
    fit.obs_noise = obs_noise;
    fit.grid_nlpd.reserve(grid.size());
    double best = 0.0;
    bool first = true;
    for (double lambda2 : grid) {
        const PosteriorSpec spec = realise(lambda2);
        const double nlpd = validation_nlpd(net, spec, data, eval_rows, mode, obs_noise);
        fit.grid_nlpd.push_back(nlpd);
        if (first || nlpd < best) {
            best = nlpd;
            fit.prior_precision = lambda2;
            first = false;
        }
    }
    fit.posterior = realise(fit.prior_precision);
    return fit;
}

NetworkModel make_mlp(const std::vector<std::size_t>& sizes, Activation act, Task task,
                      SeededRng& rng) {
    if (sizes.size() < 2) throw ConfigError("make_mlp: need at least input and output sizes");
    NetworkModel net;
    net.task = task;
    net.input.flat = sizes.front();
    net.num_outputs = sizes.back();
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        LinearLayer l;
        l.weight = Matrix(sizes[i + 1], sizes[i]);
        const double scale = std::sqrt(2.0 / static_cast<double>(sizes[i]));
        for (double& w : l.weight.data) w = scale * rng.next_normal();
        l.bias.assign(sizes[i + 1], 0.0);
        net.layers.push_back({std::move(l)});
        if (i + 2 < sizes.size()) net.layers.push_back({ActivationLayer{act}});
    }
    validate_model(net);
    return net;
}

}  // namespace momentflow
