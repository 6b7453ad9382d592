#include "momentflow/oracle.hpp"

#include <chrono>
#include <cmath>

#include "momentflow/errors.hpp"

namespace momentflow {

namespace {

EmpiricalMoments moments_of(const Matrix& samples) {
    const std::size_t s_count = samples.rows;
    const std::size_t d = samples.cols;
    EmpiricalMoments out;
    out.samples = s_count;
    out.mean.assign(d, 0.0);
    for (std::size_t s = 0; s < s_count; ++s)
        for (std::size_t i = 0; i < d; ++i) out.mean[i] += samples(s, i);
    for (double& v : out.mean) v /= static_cast<double>(s_count);

    out.cov = Matrix(d, d);
    for (std::size_t s = 0; s < s_count; ++s)
        for (std::size_t i = 0; i < d; ++i) {
            const double di = samples(s, i) - out.mean[i];
            for (std::size_t j = i; j < d; ++j)
                out.cov(i, j) += di * (samples(s, j) - out.mean[j]);
        }
    const double denom = static_cast<double>(s_count > 1 ? s_count - 1 : 1);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            out.cov(i, j) /= denom;
            out.cov(j, i) = out.cov(i, j);
        }

    out.mean_se.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        out.mean_se[i] = std::sqrt(std::max(out.cov(i, i), 0.0) / static_cast<double>(s_count));
    out.cov_se = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
            out.cov_se(i, j) = std::sqrt((std::max(out.cov(i, i), 0.0) * std::max(out.cov(j, j), 0.0) +
                                          out.cov(i, j) * out.cov(i, j)) /
                                         static_cast<double>(s_count));
    return out;
}

}  // namespace

McPrediction mc_predict(const NetworkModel& net, const PosteriorSpec& post, const Vector& x,
                        const McConfig& cfg, double obs_noise) {
    if (cfg.num_samples == 0) throw ConfigError("mc_predict: num_samples must be >= 1");
    const PreparedSampler sampler(post, net);
    const SeededRng base(cfg.seed, 0x6d63);
    const std::size_t s_count = cfg.num_samples;

    McPrediction out;
    Matrix outputs;
    Vector prob_sum;
    for (std::size_t s = 0; s < s_count; ++s) {
        SeededRng rng = base.split(s);
        const NetworkModel draw = sampler.draw(rng);
        const Vector f = forward(draw, x);
        if (s == 0) outputs = Matrix(s_count, f.size());
        for (std::size_t i = 0; i < f.size(); ++i) outputs(s, i) = f[i];
        if (net.task == Task::classification) {
            const Vector p = softmax(f);
            if (prob_sum.empty()) prob_sum.assign(p.size(), 0.0);
            for (std::size_t i = 0; i < p.size(); ++i) prob_sum[i] += p[i];
        }
    }

    if (net.task == Task::classification) {
        out.dist.task = Task::classification;
        out.dist.probs = prob_sum;
        for (double& v : out.dist.probs) v /= static_cast<double>(s_count);
        // Logit moments retained for diagnostics.
        const EmpiricalMoments m = moments_of(outputs);
        out.dist.logit_mean = m.mean;
        out.dist.logit_var.resize(m.mean.size());
        for (std::size_t i = 0; i < m.mean.size(); ++i) out.dist.logit_var[i] = m.cov(i, i);
    } else {
        const EmpiricalMoments m = moments_of(outputs);
        out.dist.task = Task::regression;
        out.dist.mean = m.mean[0];
        out.dist.model_var = m.cov(0, 0);
        out.dist.obs_noise = obs_noise;
    }
    out.sample_outputs = std::move(outputs);
    return out;
}

EmpiricalMoments mc_output_moments(const NetworkModel& net, const PosteriorSpec& post,
                                   const Vector& x, const McConfig& cfg) {
    if (cfg.num_samples == 0) throw ConfigError("mc_output_moments: num_samples must be >= 1");
    const PreparedSampler sampler(post, net);
    const SeededRng base(cfg.seed, 0x6d63);
    Matrix outputs;
    for (std::size_t s = 0; s < cfg.num_samples; ++s) {
        SeededRng rng = base.split(s);
        const Vector f = forward(sampler.draw(rng), x);
        if (s == 0) outputs = Matrix(cfg.num_samples, f.size());
        for (std::size_t i = 0; i < f.size(); ++i) outputs(s, i) = f[i];
    }
    return moments_of(outputs);
}

std::vector<EmpiricalMoments> mc_layer_moments(const NetworkModel& net, const PosteriorSpec& post,
                                               const Vector& x, const McConfig& cfg) {
    if (cfg.num_samples == 0) throw ConfigError("mc_layer_moments: num_samples must be >= 1");
    const std::size_t n_layers = flatten_layers(net).size();
    for (std::size_t idx : cfg.capture_layers)
        if (idx >= n_layers) throw StructuralError("mc_layer_moments: capture index out of range");

    const PreparedSampler sampler(post, net);
    const SeededRng base(cfg.seed, 0x6d63);
    std::vector<Matrix> captured(cfg.capture_layers.size());
    for (std::size_t s = 0; s < cfg.num_samples; ++s) {
        SeededRng rng = base.split(s);
        const std::vector<Vector> trace = forward_trace(sampler.draw(rng), x);
        for (std::size_t c = 0; c < cfg.capture_layers.size(); ++c) {
            const Vector& v = trace[cfg.capture_layers[c]];
            if (s == 0) captured[c] = Matrix(cfg.num_samples, v.size());
            for (std::size_t i = 0; i < v.size(); ++i) captured[c](s, i) = v[i];
        }
    }
    std::vector<EmpiricalMoments> out;
    out.reserve(captured.size());
    for (const Matrix& m : captured) out.push_back(moments_of(m));
    return out;
}

std::vector<BenchResult> bench_runtime(const NetworkModel& net, const PosteriorSpec& post,
                                       const std::vector<Vector>& inputs,
                                       const std::vector<BenchStrategy>& strategies,
                                       std::size_t warmup, std::size_t repeats,
                                       std::uint64_t seed) {
    if (inputs.empty()) throw ConfigError("bench_runtime: no inputs");
    if (repeats == 0) throw ConfigError("bench_runtime: repeats must be >= 1");
    using clock = std::chrono::steady_clock;

    std::vector<BenchResult> results;
    for (const BenchStrategy& strat : strategies) {
        std::vector<double> times_ms;
        times_ms.reserve(inputs.size() * repeats);
        // Keep the sampler/config setup outside the timed region: the
        // comparison targets the per-prediction cost.
        const PreparedSampler sampler(post, net);
        const SeededRng base(seed, 0x62656e);

        double sink = 0.0;  // defeat dead-code elimination
        for (const Vector& x : inputs) {
            for (std::size_t r = 0; r < warmup + repeats; ++r) {
                const auto t0 = clock::now();
                switch (strat.kind) {
                    case BenchStrategy::Kind::map_forward: {
                        const Vector f = forward(net, x);
                        sink += f[0];
                        break;
                    }
                    case BenchStrategy::Kind::mc: {
                        Vector acc;
                        for (std::size_t s = 0; s < strat.samples; ++s) {
                            SeededRng rng = base.split(s);
                            const Vector f = forward(sampler.draw(rng), x);
                            if (acc.empty()) acc.assign(f.size(), 0.0);
                            for (std::size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
                        }
                        sink += acc[0];
                        break;
                    }
                    case BenchStrategy::Kind::analytic: {
                        const MomentState out = propagate_network(
                            net, post, MomentState::deterministic_input(x), strat.propagation);
                        sink += out.mean(0, 0);
                        break;
                    }
                }
                const auto t1 = clock::now();
                if (r >= warmup)
                    times_ms.push_back(
                        std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
        }
        if (sink == 0.12345) throw NumericalError("bench_runtime: unreachable");

        double mean = 0.0;
        for (double t : times_ms) mean += t;
        mean /= static_cast<double>(times_ms.size());
        double var = 0.0;
        for (double t : times_ms) var += (t - mean) * (t - mean);
        var /= static_cast<double>(times_ms.size());

        BenchResult res;
        res.strategy = strat.name.empty()
                           ? (strat.kind == BenchStrategy::Kind::map_forward
                                  ? "map"
                                  : (strat.kind == BenchStrategy::Kind::mc ? "mc" : "analytic"))
                           : strat.name;
        res.samples = strat.samples;
        res.mean_ms = mean;
        res.std_ms = std::sqrt(var);
        res.n_inputs = inputs.size();
        results.push_back(std::move(res));
    }
    return results;
}

}  // namespace momentflow
