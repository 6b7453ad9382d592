// momentflow: deterministic moment propagation for Bayesian neural networks.
//
// Subcommands: train, laplace, predict, eval, ood, sensitivity, probe,
// bench. All outputs are plain CSV/JSONL/PGM; wallclock metadata goes to a
// run_meta.json sidecar so seeded runs stay byte-reproducible.

#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "momentflow/analysis.hpp"
#include "momentflow/dataset.hpp"
#include "momentflow/errors.hpp"
#include "momentflow/fit.hpp"
#include "momentflow/heads.hpp"
#include "momentflow/model_io.hpp"
#include "momentflow/oracle.hpp"
#include "momentflow/parallel.hpp"
#include "momentflow/posterior_io.hpp"
#include "momentflow/propagate.hpp"

namespace mf = momentflow;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

// All artifacts are written to a temp file first and renamed into place, so
// failures never leave partial outputs behind.
void write_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw mf::ConfigError("cannot open " + tmp + " for writing");
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) parts.push_back(part);
    return parts;
}

std::vector<std::size_t> parse_arch(const std::string& arch) {
    std::vector<std::size_t> sizes;
    for (const std::string& p : split(arch, '-')) sizes.push_back(std::stoul(p));
    if (sizes.size() < 2) throw mf::ConfigError("--arch needs at least input-output sizes");
    return sizes;
}

mf::Task parse_task(const std::string& s) {
    if (s == "regression") return mf::Task::regression;
    if (s == "classification") return mf::Task::classification;
    throw mf::ConfigError("unknown task: " + s);
}

mf::PropagationConfig propagation_config(const std::string& cov_mode,
                                         const std::string& value_cov) {
    mf::PropagationConfig cfg;
    if (cov_mode == "diag")
        cfg.activation_cov_mode = mf::CovMode::diag;
    else if (cov_mode == "full")
        cfg.activation_cov_mode = mf::CovMode::full;
    else
        throw mf::ConfigError("--cov-mode must be diag or full");
    if (value_cov == "full")
        cfg.attention_value_cov = mf::ValueCov::full;
    else if (value_cov == "var-only")
        cfg.attention_value_cov = mf::ValueCov::variance_only;
    else
        throw mf::ConfigError("--value-cov must be full or var-only");
    return cfg;
}

struct SplitRows {
    std::vector<std::size_t> train, val, test;
};

// Uses the file's split tags when present; otherwise a seeded 80/10/10
// shuffle split.
SplitRows resolve_splits(const mf::Dataset& data, std::uint64_t seed) {
    SplitRows rows;
    if (!data.split.empty()) {
        rows.train = data.rows_with_split(mf::Split::train);
        rows.val = data.rows_with_split(mf::Split::val);
        rows.test = data.rows_with_split(mf::Split::test);
        return rows;
    }
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    mf::SeededRng rng(seed, 0x73706c69);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.next_u64() % i]);
    const std::size_t n_train = (idx.size() * 8) / 10;
    const std::size_t n_val = idx.size() / 10;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (i < n_train)
            rows.train.push_back(idx[i]);
        else if (i < n_train + n_val)
            rows.val.push_back(idx[i]);
        else
            rows.test.push_back(idx[i]);
    }
    if (rows.val.empty()) rows.val = rows.train;
    if (rows.test.empty()) rows.test = rows.val;
    return rows;
}

// Shortest decimal that parses back to the same double.
std::string double_str(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::size_t resolve_threads(std::size_t flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("MOMENTFLOW_THREADS")) {
        const long v = std::atol(env);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return 1;
}

void write_run_meta(const std::string& dir, const std::string& command, double wall_ms) {
    json meta;
    meta["command"] = command;
    meta["wall_ms"] = wall_ms;
    meta["timestamp_unix"] =
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count();
    write_atomic(dir + "/run_meta.json", meta.dump(1) + "\n");
}

mf::Dataset load_data(const std::string& path, const std::string& target, mf::Task task,
                      const std::string& split_col) {
    mf::CsvSchema schema;
    schema.target_column = target;
    schema.task = task;
    schema.split_column = split_col;
    return mf::load_dataset_csv(path, schema);
}

// Like load_data, but a named split column that the file lacks is ignored
// instead of raising (downstream tools accept files with or without tags).
mf::Dataset load_data_tolerant(const std::string& path, const std::string& target, mf::Task task,
                               const std::string& split_col) {
    if (!split_col.empty()) {
        std::ifstream in(path);
        std::string header;
        if (in && std::getline(in, header)) {
            bool found = false;
            for (const std::string& col : split(header, ','))
                if (col == split_col) found = true;
            if (!found) return load_data(path, target, task, "");
        }
    }
    return load_data(path, target, task, split_col);
}

// Rows a downstream tool should evaluate: the test split when tags exist,
// every row otherwise.
std::vector<std::size_t> eval_rows_of(const mf::Dataset& data) {
    if (!data.split.empty()) {
        std::vector<std::size_t> rows = data.rows_with_split(mf::Split::test);
        if (!rows.empty()) return rows;
    }
    std::vector<std::size_t> rows(data.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return rows;
}

// Scaler sidecar written by train, read back by eval/predict.
void save_scaler(const std::string& model_path, const mf::Standardization& s, double obs_noise) {
    json j;
    j["features"] = s.features;
    j["targets"] = s.targets;
    j["feature_mean"] = s.feature_mean;
    j["feature_std"] = s.feature_std;
    j["target_mean"] = s.target_mean;
    j["target_std"] = s.target_std;
    j["obs_noise"] = obs_noise;
    write_atomic(model_path + ".scaler.json", j.dump(1) + "\n");
}

struct ScalerInfo {
    mf::Standardization standardization;
    double obs_noise = 0.0;
    bool found = false;
};

ScalerInfo load_scaler(const std::string& model_path) {
    ScalerInfo info;
    std::ifstream in(model_path + ".scaler.json");
    if (!in) return info;
    json j;
    in >> j;
    info.standardization.features = j.value("features", false);
    info.standardization.targets = j.value("targets", false);
    info.standardization.feature_mean = j.value("feature_mean", mf::Vector{});
    info.standardization.feature_std = j.value("feature_std", mf::Vector{});
    info.standardization.target_mean = j.value("target_mean", 0.0);
    info.standardization.target_std = j.value("target_std", 1.0);
    info.obs_noise = j.value("obs_noise", 0.0);
    info.found = true;
    return info;
}

void apply_scaler(mf::Dataset& data, const mf::Standardization& s) {
    if (s.features) {
        for (std::size_t r = 0; r < data.size(); ++r)
            for (std::size_t c = 0; c < data.dim(); ++c)
                data.features(r, c) = (data.features(r, c) - s.feature_mean[c]) / s.feature_std[c];
    }
    if (s.targets && data.task == mf::Task::regression) {
        for (double& y : data.targets_real) y = (y - s.target_mean) / s.target_std;
    }
    data.standardization = s;
}

// ---------------------------------------------------------------- train --

int cmd_train(const std::string& data_path, const std::string& target,
              const std::string& split_col, const std::string& arch, const std::string& activation,
              const std::string& task_name, mf::TrainConfig train_cfg, bool standardize_data,
              const std::string& out_path) {
    const mf::Task task = parse_task(task_name);
    mf::Dataset data = load_data(data_path, target, task, split_col);
    const SplitRows rows = resolve_splits(data, train_cfg.seed);
    if (standardize_data) mf::standardize(data, rows.train, true, task == mf::Task::regression);

    const std::vector<std::size_t> sizes = parse_arch(arch);
    if (sizes.front() != data.dim())
        throw mf::ConfigError("--arch input size " + std::to_string(sizes.front()) +
                              " does not match the data dimension " + std::to_string(data.dim()));
    train_cfg.loss =
        task == mf::Task::regression ? mf::LossKind::mse : mf::LossKind::cross_entropy;

    mf::SeededRng init_rng(train_cfg.seed, 0x696e6974);
    const mf::NetworkModel init =
        mf::make_mlp(sizes, mf::activation_from_name(activation), task, init_rng);

    mf::TrainLog log;
    const auto t0 = std::chrono::steady_clock::now();
    const mf::NetworkModel fitted = mf::train_map(init, data, rows.train, train_cfg, &log);
    const auto t1 = std::chrono::steady_clock::now();

    mf::save_model(fitted, out_path);
    const double obs_noise = task == mf::Task::regression
                                 ? mf::fit_observation_noise(fitted, data, rows.train)
                                 : 0.0;
    save_scaler(out_path, data.standardization, obs_noise);

    std::string log_csv = "epoch,loss\n";
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
        log_csv += std::to_string(e) + "," + double_str(log.epoch_loss[e]) + "\n";
    write_atomic(out_path + ".train_log.csv", log_csv);
    write_run_meta(std::filesystem::path(out_path).parent_path().string().empty()
                       ? "."
                       : std::filesystem::path(out_path).parent_path().string(),
                   "train", std::chrono::duration<double, std::milli>(t1 - t0).count());
    std::cout << "wrote " << out_path << "\n";
    return kExitOk;
}

// -------------------------------------------------------------- laplace --

std::vector<std::size_t> resolve_layer_subset(const mf::NetworkModel& net,
                                              const std::string& spec) {
    const std::vector<std::size_t> linear = mf::linear_layer_indices(net);
    if (spec.empty() || spec == "all") return linear;
    if (spec == "last") return {linear.back()};
    if (spec == "last2") {
        if (linear.size() < 2) return linear;
        return {linear[linear.size() - 2], linear.back()};
    }
    std::vector<std::size_t> out;
    for (const std::string& p : split(spec, ',')) out.push_back(std::stoul(p));
    return out;
}

int cmd_laplace(const std::string& model_path, const std::string& data_path,
                const std::string& target, const std::string& split_col,
                const std::string& structure, const std::string& layers_spec, double grid_lo,
                double grid_hi, std::size_t grid_points, std::uint64_t seed,
                const std::string& out_path) {
    const mf::NetworkModel net = mf::load_model(model_path);
    mf::Dataset data = load_data(data_path, target, net.task, split_col);
    const ScalerInfo scaler = load_scaler(model_path);
    if (scaler.found) apply_scaler(data, scaler.standardization);
    const SplitRows rows = resolve_splits(data, seed);

    mf::LaplaceConfig cfg;
    if (structure == "diag" || structure == "diagonal")
        cfg.structure = mf::LaplaceStructure::diagonal;
    else if (structure == "kfac")
        cfg.structure = mf::LaplaceStructure::kfac;
    else if (structure == "full")
        cfg.structure = mf::LaplaceStructure::full;
    else
        throw mf::ConfigError("--structure must be diag, kfac, or full");
    cfg.prior_precision_grid = mf::log_grid(grid_lo, grid_hi, grid_points);
    cfg.layer_subset = resolve_layer_subset(net, layers_spec);

    const mf::LaplaceFit fit = mf::fit_laplace(net, data, rows.train, rows.val, cfg);
    mf::save_posterior(fit.posterior, out_path);

    json meta;
    meta["prior_precision"] = fit.prior_precision;
    meta["obs_noise"] = fit.obs_noise;
    meta["grid_nlpd"] = fit.grid_nlpd;
    write_atomic(out_path + ".meta.json", meta.dump(1) + "\n");
    std::cout << "wrote " << out_path << " (lambda^2 = " << fit.prior_precision << ")\n";
    return kExitOk;
}

// -------------------------------------------------------- predict / eval --

struct PredictionBatch {
    std::vector<mf::PredictiveDist> preds;
    double runtime_ms = 0.0;
};

PredictionBatch predict_rows(const mf::NetworkModel& net, const mf::PosteriorSpec& post,
                             const mf::Dataset& data, const std::vector<std::size_t>& rows,
                             const std::string& method, const mf::PropagationConfig& prop_cfg,
                             std::size_t samples, std::uint64_t seed, double obs_noise,
                             std::size_t threads) {
    PredictionBatch batch;
    batch.preds.resize(rows.size());
    const auto t0 = std::chrono::steady_clock::now();
    mf::parallel_for(rows.size(), threads, [&](std::size_t i) {
        const mf::Vector x = data.features.row(rows[i]);
        if (method == "ours") {
            const mf::MomentState out =
                mf::propagate_network(net, post, mf::MomentState::deterministic_input(x), prop_cfg);
            const mf::Vector mean = out.mean.row(0);
            const mf::Vector var = out.token_variances(0);
            batch.preds[i] = net.task == mf::Task::regression
                                 ? mf::regression_predict(mean[0], var[0], obs_noise, 1.0)
                                 : mf::classification_predict(mean, var, 1.0);
        } else if (method == "mc") {
            mf::McConfig mc;
            mc.num_samples = samples;
            mc.seed = seed + rows[i];  // per-datum stream family
            batch.preds[i] = mf::mc_predict(net, post, x, mc, obs_noise).dist;
        } else if (method == "map") {
            const mf::Vector f = mf::forward(net, x);
            batch.preds[i] = net.task == mf::Task::regression
                                 ? mf::regression_predict(f[0], 0.0, obs_noise, 1.0)
                                 : mf::classification_predict(f, mf::Vector(f.size(), 0.0), 1.0);
        } else {
            throw mf::ConfigError("--method must be ours, mc, or map");
        }
    });
    const auto t1 = std::chrono::steady_clock::now();
    batch.runtime_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() /
                       std::max<std::size_t>(rows.size(), 1);
    return batch;
}

std::string predictions_jsonl(const mf::Dataset& data, const std::vector<std::size_t>& rows,
                              const std::vector<mf::PredictiveDist>& preds, double scale) {
    std::string out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        json rec;
        rec["row"] = rows[i];
        const mf::PredictiveDist& p = preds[i];
        if (p.task == mf::Task::regression) {
            rec["mean"] = p.mean;
            rec["variance"] = scale * p.model_var + p.obs_noise;
        } else {
            rec["probs"] = mf::probit_classify(p.logit_mean, p.logit_var, scale);
            rec["logit_mean"] = p.logit_mean;
            rec["logit_var"] = p.logit_var;
        }
        out += rec.dump() + "\n";
    }
    return out;
}

int cmd_predict(const std::string& model_path, const std::string& posterior_path,
                const std::string& data_path, const std::string& target,
                const std::string& split_col, const std::string& method,
                const std::string& cov_mode, const std::string& value_cov, std::size_t samples,
                std::uint64_t seed, std::size_t threads, const std::string& out_dir) {
    if (method == "mc" && samples == 0) throw mf::ConfigError("--samples must be >= 1");
    const mf::NetworkModel net = mf::load_model(model_path);
    mf::PosteriorSpec post;
    if (!posterior_path.empty()) {
        post = mf::load_posterior(posterior_path);
        mf::validate_posterior(net, post);
    }
    mf::Dataset data = load_data(data_path, target, net.task, split_col);
    const ScalerInfo scaler = load_scaler(model_path);
    if (scaler.found) apply_scaler(data, scaler.standardization);

    std::vector<std::size_t> rows(data.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    const mf::PropagationConfig prop_cfg = propagation_config(cov_mode, value_cov);
    const PredictionBatch batch = predict_rows(net, post, data, rows, method, prop_cfg, samples,
                                               seed, scaler.obs_noise, resolve_threads(threads));

    std::filesystem::create_directories(out_dir);
    write_atomic(out_dir + "/predictions.jsonl", predictions_jsonl(data, rows, batch.preds, 1.0));
    write_run_meta(out_dir, "predict", batch.runtime_ms);
    std::cout << "wrote " << out_dir << "/predictions.jsonl\n";
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& posterior_path,
             const std::string& data_path, const std::string& target, const std::string& split_col,
             const std::string& method, const std::string& cov_mode, const std::string& value_cov,
             std::size_t samples, std::uint64_t seed, bool fit_scale, double scale_lo,
             double scale_hi, std::size_t scale_points, std::size_t threads,
             const std::string& dataset_label, const std::string& out_dir) {
    if ((method == "mc") && samples == 0) throw mf::ConfigError("--samples must be >= 1");
    const mf::NetworkModel net = mf::load_model(model_path);
    mf::PosteriorSpec post;
    if (!posterior_path.empty()) {
        post = mf::load_posterior(posterior_path);
        mf::validate_posterior(net, post);
    }
    mf::Dataset data = load_data(data_path, target, net.task, split_col);
    const ScalerInfo scaler = load_scaler(model_path);
    if (scaler.found) apply_scaler(data, scaler.standardization);
    const SplitRows rows = resolve_splits(data, seed);

    double obs_noise = scaler.obs_noise;
    if (net.task == mf::Task::regression && obs_noise <= 0.0)
        obs_noise = mf::fit_observation_noise(net, data, rows.train);

    const mf::PropagationConfig prop_cfg = propagation_config(cov_mode, value_cov);
    const std::size_t n_threads = resolve_threads(threads);

    // Scale fitted on the validation split ("ours" only; sampling baselines
    // are reported raw).
    double scale = 1.0;
    if (fit_scale && method == "ours") {
        const PredictionBatch val_batch = predict_rows(net, post, data, rows.val, method, prop_cfg,
                                                       samples, seed, obs_noise, n_threads);
        mf::Vector val_real;
        std::vector<std::size_t> val_class;
        for (std::size_t r : rows.val) {
            if (net.task == mf::Task::regression)
                val_real.push_back(data.targets_real[r]);
            else
                val_class.push_back(data.targets_class[r]);
        }
        scale = mf::fit_variance_scale(val_batch.preds, val_real, val_class,
                                       mf::log_grid(scale_lo, scale_hi, scale_points));
    }

    const PredictionBatch batch = predict_rows(net, post, data, rows.test, method, prop_cfg,
                                               samples, seed, obs_noise, n_threads);
    mf::Vector test_real;
    std::vector<std::size_t> test_class;
    for (std::size_t r : rows.test) {
        if (net.task == mf::Task::regression)
            test_real.push_back(data.targets_real[r]);
        else
            test_class.push_back(data.targets_class[r]);
    }
    const mf::MetricReport report =
        mf::compute_metrics(batch.preds, test_real, test_class, net.task, scale);

    std::filesystem::create_directories(out_dir);
    std::string csv = "dataset,method,acc,nlpd,ece,rmse,scale,runtime_ms\n";
    csv += dataset_label + "," + method + "," + double_str(report.acc) + "," +
           double_str(report.nlpd) + "," + double_str(report.ece) + "," +
           double_str(report.rmse) + "," + double_str(scale) + "," +
           double_str(batch.runtime_ms) + "\n";
    write_atomic(out_dir + "/metrics.csv", csv);

    json jm;
    jm["dataset"] = dataset_label;
    jm["method"] = method;
    jm["acc"] = report.acc;
    jm["nlpd"] = report.nlpd;
    jm["ece"] = report.ece;
    jm["rmse"] = report.rmse;
    jm["scale"] = scale;
    jm["runtime_ms"] = batch.runtime_ms;
    write_atomic(out_dir + "/metrics.json", jm.dump(1) + "\n");
    write_atomic(out_dir + "/predictions.jsonl",
                 predictions_jsonl(data, rows.test, batch.preds, scale));
    write_run_meta(out_dir, "eval", batch.runtime_ms);
    std::cout << "acc=" << report.acc << " nlpd=" << report.nlpd << " ece=" << report.ece
              << " rmse=" << report.rmse << " scale=" << scale << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------ ood --

int cmd_ood(const std::string& model_path, const std::string& posterior_path,
            const std::string& data_in, const std::string& data_ood, const std::string& target,
            const std::string& split_col, const std::string& cov_mode,
            const std::string& value_cov, double bandwidth, std::size_t grid_points,
            std::uint64_t seed, std::size_t threads, const std::string& out_dir) {
    const mf::NetworkModel net = mf::load_model(model_path);
    if (net.task != mf::Task::classification)
        throw mf::ConfigError("ood requires a classification model");
    mf::PosteriorSpec post;
    if (!posterior_path.empty()) {
        post = mf::load_posterior(posterior_path);
        mf::validate_posterior(net, post);
    }
    const ScalerInfo scaler = load_scaler(model_path);
    const mf::PropagationConfig prop_cfg = propagation_config(cov_mode, value_cov);
    const std::size_t n_threads = resolve_threads(threads);

    const auto entropies_of = [&](const std::string& path) {
        mf::Dataset data = load_data_tolerant(path, target, net.task, split_col);
        if (data.size() == 0) throw mf::ConfigError("empty dataset: " + path);
        if (scaler.found) apply_scaler(data, scaler.standardization);
        const std::vector<std::size_t> rows = eval_rows_of(data);
        const PredictionBatch batch =
            predict_rows(net, post, data, rows, "ours", prop_cfg, 0, seed, 0.0, n_threads);
        mf::Vector entropies(batch.preds.size());
        for (std::size_t i = 0; i < batch.preds.size(); ++i)
            entropies[i] = mf::predictive_entropy(batch.preds[i].probs);
        return entropies;
    };

    const mf::Vector e_in = entropies_of(data_in);
    const mf::Vector e_ood = entropies_of(data_ood);

    // One shared grid covering both samples keeps the two CSVs comparable.
    mf::Vector merged = e_in;
    merged.insert(merged.end(), e_ood.begin(), e_ood.end());
    const mf::Vector grid = mf::default_entropy_grid(merged, grid_points);

    std::filesystem::create_directories(out_dir);
    const auto write_kde = [&](const mf::Vector& entropies, const std::string& name) {
        const mf::EntropyDensity kde = mf::entropy_kde(entropies, grid, bandwidth);
        std::string csv = "entropy,density\n";
        for (std::size_t i = 0; i < grid.size(); ++i)
            csv += double_str(kde.grid[i]) + "," + double_str(kde.density[i]) + "\n";
        write_atomic(out_dir + "/" + name, csv);
    };
    write_kde(e_in, "kde_in.csv");
    write_kde(e_ood, "kde_ood.csv");

    double mean_in = 0.0, mean_ood = 0.0;
    for (double e : e_in) mean_in += e;
    for (double e : e_ood) mean_ood += e;
    mean_in /= static_cast<double>(e_in.size());
    mean_ood /= static_cast<double>(e_ood.size());
    json meta;
    meta["mean_entropy_in"] = mean_in;
    meta["mean_entropy_ood"] = mean_ood;
    write_atomic(out_dir + "/ood_summary.json", meta.dump(1) + "\n");
    write_run_meta(out_dir, "ood", 0.0);
    std::cout << "mean entropy in=" << mean_in << " ood=" << mean_ood << "\n";
    return kExitOk;
}

// ---------------------------------------------------------- sensitivity --

int cmd_sensitivity(const std::string& model_path, const std::string& posterior_path,
                    const std::string& data_path, const std::string& target,
                    const std::string& split_col, const std::string& rows_spec, double threshold,
                    std::size_t max_iters, double lr, double init_var, std::size_t image_h,
                    std::size_t image_w, std::size_t threads, const std::string& out_dir) {
    const mf::NetworkModel net = mf::load_model(model_path);
    mf::PosteriorSpec post;
    if (!posterior_path.empty()) {
        post = mf::load_posterior(posterior_path);
        mf::validate_posterior(net, post);
    }
    mf::Dataset data = load_data_tolerant(data_path, target, net.task, split_col);
    const ScalerInfo scaler = load_scaler(model_path);
    if (scaler.found) apply_scaler(data, scaler.standardization);

    std::vector<std::size_t> rows;
    if (rows_spec.empty() || rows_spec == "all") {
        rows.resize(data.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    } else {
        for (const std::string& p : split(rows_spec, ',')) rows.push_back(std::stoul(p));
    }

    mf::SensitivityOptions opts;
    opts.stop_threshold = threshold;
    opts.max_iterations = max_iters;
    opts.learning_rate = lr;
    opts.init_variance = init_var;

    std::size_t h = image_h, w = image_w;
    if (h == 0 || w == 0) {
        // Square fallback for image-shaped inputs.
        const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(
            static_cast<double>(data.dim()))));
        if (side * side == data.dim()) {
            h = side;
            w = side;
        } else {
            h = 1;
            w = data.dim();
        }
    }

    std::filesystem::create_directories(out_dir);
    std::vector<mf::SensitivityMap> maps(rows.size());
    mf::parallel_for(rows.size(), resolve_threads(threads), [&](std::size_t i) {
        maps[i] = mf::optimize_input_covariance(net, post, data.features.row(rows[i]),
                                                data.targets_class[rows[i]], opts);
    });

    std::string csv = "row,dim,sigma,normalised\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        mf::write_pgm(out_dir + "/sensitivity_" + std::to_string(rows[i]) + ".pgm",
                      maps[i].normalised_map, h, w);
        for (std::size_t dci = 0; dci < maps[i].sigma.size(); ++dci)
            csv += std::to_string(rows[i]) + "," + std::to_string(dci) + "," +
                   double_str(maps[i].sigma[dci]) + "," + double_str(maps[i].normalised_map[dci]) +
                   "\n";
    }
    write_atomic(out_dir + "/sensitivities.csv", csv);
    write_run_meta(out_dir, "sensitivity", 0.0);
    std::cout << "wrote " << rows.size() << " sensitivity maps to " << out_dir << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- probe --

int cmd_probe(const std::string& model_path, const std::string& data_path,
              const std::string& target, const std::string& split_col,
              const std::string& eps_spec, bool scaled, std::size_t max_inputs,
              const std::string& out_dir) {
    const mf::NetworkModel net = mf::load_model(model_path);
    mf::Dataset data = load_data_tolerant(data_path, target, net.task, split_col);
    const ScalerInfo scaler = load_scaler(model_path);
    if (scaler.found) apply_scaler(data, scaler.standardization);

    mf::Vector eps;
    for (const std::string& p : split(eps_spec, ',')) eps.push_back(std::stod(p));

    const std::vector<std::size_t> rows = eval_rows_of(data);
    std::vector<mf::Vector> inputs;
    for (std::size_t r = 0; r < std::min(rows.size(), max_inputs); ++r)
        inputs.push_back(data.features.row(rows[r]));

    const mf::LinearityProbe probe = mf::linearity_probe(net, inputs, eps, scaled);

    std::filesystem::create_directories(out_dir);
    std::string csv = "eps";
    for (std::size_t c = 0; c < net.num_outputs; ++c) csv += ",delta_" + std::to_string(c);
    csv += "\n";
    for (std::size_t e = 0; e < eps.size(); ++e) {
        csv += double_str(eps[e]);
        for (std::size_t c = 0; c < net.num_outputs; ++c)
            csv += "," + double_str(probe.delta(e, c));
        csv += "\n";
    }
    write_atomic(out_dir + "/probe.csv", csv);
    write_run_meta(out_dir, "probe", 0.0);
    std::cout << "wrote " << out_dir << "/probe.csv\n";
    return kExitOk;
}

// ---------------------------------------------------------------- bench --

int cmd_bench(const std::string& model_path, const std::string& posterior_path,
              const std::string& data_path, const std::string& target,
              const std::string& split_col, const std::string& samples_spec, std::size_t warmup,
              std::size_t repeats, std::size_t n_inputs, const std::string& cov_mode,
              const std::string& value_cov, std::uint64_t seed, const std::string& out_dir) {
    const mf::NetworkModel net = mf::load_model(model_path);
    mf::PosteriorSpec post;
    if (!posterior_path.empty()) {
        post = mf::load_posterior(posterior_path);
        mf::validate_posterior(net, post);
    }
    mf::Dataset data = load_data_tolerant(data_path, target, net.task, split_col);
    const ScalerInfo scaler = load_scaler(model_path);
    if (scaler.found) apply_scaler(data, scaler.standardization);

    const std::vector<std::size_t> rows = eval_rows_of(data);
    std::vector<mf::Vector> inputs;
    for (std::size_t r = 0; r < std::min(rows.size(), n_inputs); ++r)
        inputs.push_back(data.features.row(rows[r]));

    std::vector<mf::BenchStrategy> strategies;
    strategies.push_back({mf::BenchStrategy::Kind::map_forward, 0, {}, "map"});
    mf::BenchStrategy analytic;
    analytic.kind = mf::BenchStrategy::Kind::analytic;
    analytic.propagation = propagation_config(cov_mode, value_cov);
    analytic.name = "ours";
    strategies.push_back(analytic);
    for (const std::string& p : split(samples_spec, ',')) {
        mf::BenchStrategy mc;
        mc.kind = mf::BenchStrategy::Kind::mc;
        mc.samples = std::stoul(p);
        mc.name = "mc";
        strategies.push_back(mc);
    }

    const std::vector<mf::BenchResult> results =
        mf::bench_runtime(net, post, inputs, strategies, warmup, repeats, seed);

    std::filesystem::create_directories(out_dir);
    std::string csv = "strategy,samples,mean_ms,std_ms,n_inputs\n";
    for (const mf::BenchResult& r : results)
        csv += r.strategy + "," + std::to_string(r.samples) + "," + double_str(r.mean_ms) + "," +
               double_str(r.std_ms) + "," + std::to_string(r.n_inputs) + "\n";
    write_atomic(out_dir + "/bench.csv", csv);
    write_run_meta(out_dir, "bench", 0.0);
    for (const mf::BenchResult& r : results)
        std::cout << r.strategy << (r.samples ? "(" + std::to_string(r.samples) + ")" : "")
                  << ": " << r.mean_ms << " +- " << r.std_ms << " ms\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"momentflow: analytic posterior-predictive moments for Bayesian networks"};
    app.require_subcommand(1);

    // Shared option storage.
    std::string data_path, data_ood_path, target = "target", split_col, model_path,
                posterior_path, out_path, out_dir = ".";
    std::string arch, activation = "relu", task_name = "regression";
    std::string structure = "diag", layers_spec = "all";
    std::string method = "ours", cov_mode = "diag", value_cov = "var-only";
    std::string rows_spec = "all", eps_spec = "1e-6,1e-5,1e-4,1e-3,1e-2,1e-1,1";
    std::string samples_spec = "100,1000", dataset_label = "data";
    std::size_t samples = 1000, threads = 0, grid_points = 21, scale_points = 41;
    std::size_t max_iters = 2000, image_h = 0, image_w = 0, max_inputs = 128, n_inputs = 16;
    std::size_t warmup = 1, repeats = 9, kde_points = 512;
    std::uint64_t seed = 0;
    double grid_lo = 1e-2, grid_hi = 1e3, scale_lo = 1e-3, scale_hi = 1e3;
    double threshold = 0.1, lr = 5e-3, init_var = 1e-5, bandwidth = 0.25;
    bool standardize_data = true, fit_scale = true, scaled_probe = false;
    mf::TrainConfig train_cfg;

    CLI::App* train = app.add_subcommand("train", "train a MAP network with Adam");
    train->add_option("--data", data_path)->required();
    train->add_option("--target", target);
    train->add_option("--split-col", split_col);
    train->add_option("--arch", arch, "layer sizes, e.g. 4-50-1")->required();
    train->add_option("--activation", activation);
    train->add_option("--task", task_name);
    train->add_option("--epochs", train_cfg.epochs);
    train->add_option("--batch", train_cfg.batch_size);
    train->add_option("--lr", train_cfg.learning_rate);
    train->add_option("--weight-decay", train_cfg.weight_decay);
    train->add_option("--seed", train_cfg.seed);
    train->add_flag("--standardize,!--no-standardize", standardize_data);
    train->add_option("--out", out_path)->default_val("model.json");

    CLI::App* laplace = app.add_subcommand("laplace", "fit a Gaussian posterior at the MAP");
    laplace->add_option("--model", model_path)->required();
    laplace->add_option("--data", data_path)->required();
    laplace->add_option("--target", target);
    laplace->add_option("--split-col", split_col);
    laplace->add_option("--structure", structure, "diag | kfac | full");
    laplace->add_option("--layers", layers_spec, "all | last | last2 | i,j,...");
    laplace->add_option("--grid-lo", grid_lo);
    laplace->add_option("--grid-hi", grid_hi);
    laplace->add_option("--grid-points", grid_points);
    laplace->add_option("--seed", seed);
    laplace->add_option("--out", out_path)->default_val("posterior.json");

    CLI::App* predict = app.add_subcommand("predict", "per-datum predictive distributions");
    predict->add_option("--model", model_path)->required();
    predict->add_option("--posterior", posterior_path);
    predict->add_option("--data", data_path)->required();
    predict->add_option("--target", target);
    predict->add_option("--split-col", split_col);
    predict->add_option("--method", method, "ours | mc | map");
    predict->add_option("--cov-mode", cov_mode, "diag | full");
    predict->add_option("--value-cov", value_cov, "full | var-only");
    predict->add_option("--samples", samples);
    predict->add_option("--seed", seed);
    predict->add_option("--threads", threads);
    predict->add_option("--out-dir", out_dir);

    CLI::App* eval = app.add_subcommand("eval", "metrics with validation-fitted variance scale");
    eval->add_option("--model", model_path)->required();
    eval->add_option("--posterior", posterior_path);
    eval->add_option("--data", data_path)->required();
    eval->add_option("--target", target);
    eval->add_option("--split-col", split_col);
    eval->add_option("--method", method);
    eval->add_option("--cov-mode", cov_mode);
    eval->add_option("--value-cov", value_cov);
    eval->add_option("--samples", samples);
    eval->add_option("--seed", seed);
    eval->add_flag("--fit-scale,!--no-fit-scale", fit_scale);
    eval->add_option("--scale-grid-lo", scale_lo);
    eval->add_option("--scale-grid-hi", scale_hi);
    eval->add_option("--scale-grid-points", scale_points);
    eval->add_option("--threads", threads);
    eval->add_option("--dataset-label", dataset_label);
    eval->add_option("--out-dir", out_dir);

    CLI::App* ood = app.add_subcommand("ood", "predictive-entropy KDEs in vs out of distribution");
    ood->add_option("--model", model_path)->required();
    ood->add_option("--posterior", posterior_path);
    ood->add_option("--data-in", data_path)->required();
    ood->add_option("--data-ood", data_ood_path)->required();
    ood->add_option("--target", target);
    ood->add_option("--split-col", split_col);
    ood->add_option("--cov-mode", cov_mode);
    ood->add_option("--value-cov", value_cov);
    ood->add_option("--bandwidth", bandwidth, "KDE variance");
    ood->add_option("--grid-points", kde_points);
    ood->add_option("--seed", seed);
    ood->add_option("--threads", threads);
    ood->add_option("--out-dir", out_dir);

    CLI::App* sensitivity = app.add_subcommand("sensitivity", "per-input sensitivity maps");
    sensitivity->add_option("--model", model_path)->required();
    sensitivity->add_option("--posterior", posterior_path);
    sensitivity->add_option("--data", data_path)->required();
    sensitivity->add_option("--target", target);
    sensitivity->add_option("--split-col", split_col);
    sensitivity->add_option("--rows", rows_spec, "all | i,j,...");
    sensitivity->add_option("--threshold", threshold,
                            "NLPD gap that stops the optimisation (0.01 is a stricter preset)");
    sensitivity->add_option("--max-iters", max_iters);
    sensitivity->add_option("--lr", lr);
    sensitivity->add_option("--init-var", init_var);
    sensitivity->add_option("--image-h", image_h);
    sensitivity->add_option("--image-w", image_w);
    sensitivity->add_option("--threads", threads);
    sensitivity->add_option("--out-dir", out_dir);

    CLI::App* probe = app.add_subcommand("probe", "local-linearity deviation per output");
    probe->add_option("--model", model_path)->required();
    probe->add_option("--data", data_path)->required();
    probe->add_option("--target", target);
    probe->add_option("--split-col", split_col);
    probe->add_option("--eps", eps_spec);
    probe->add_flag("--scaled", scaled_probe, "divide by the per-dim output range");
    probe->add_option("--max-inputs", max_inputs);
    probe->add_option("--out-dir", out_dir);

    CLI::App* bench = app.add_subcommand("bench", "wallclock: map vs mc vs analytic");
    bench->add_option("--model", model_path)->required();
    bench->add_option("--posterior", posterior_path);
    bench->add_option("--data", data_path)->required();
    bench->add_option("--target", target);
    bench->add_option("--split-col", split_col);
    bench->add_option("--samples", samples_spec, "comma list of MC sample counts");
    bench->add_option("--warmup", warmup);
    bench->add_option("--repeats", repeats);
    bench->add_option("--inputs", n_inputs);
    bench->add_option("--cov-mode", cov_mode);
    bench->add_option("--value-cov", value_cov);
    bench->add_option("--seed", seed);
    bench->add_option("--out-dir", out_dir);

    try {
        app.parse(argc, argv);
        if (train->parsed())
            return cmd_train(data_path, target, split_col, arch, activation, task_name, train_cfg,
                             standardize_data, out_path);
        if (laplace->parsed())
            return cmd_laplace(model_path, data_path, target, split_col, structure, layers_spec,
                               grid_lo, grid_hi, grid_points, seed, out_path);
        if (predict->parsed())
            return cmd_predict(model_path, posterior_path, data_path, target, split_col, method,
                               cov_mode, value_cov, samples, seed, threads, out_dir);
        if (eval->parsed())
            return cmd_eval(model_path, posterior_path, data_path, target, split_col, method,
                            cov_mode, value_cov, samples, seed, fit_scale, scale_lo, scale_hi,
                            scale_points, threads, dataset_label, out_dir);
        if (ood->parsed())
            return cmd_ood(model_path, posterior_path, data_path, data_ood_path, target,
                           split_col, cov_mode, value_cov, bandwidth, kde_points, seed, threads,
                           out_dir);
        if (sensitivity->parsed())
            return cmd_sensitivity(model_path, posterior_path, data_path, target, split_col,
                                   rows_spec, threshold, max_iters, lr, init_var, image_h,
                                   image_w, threads, out_dir);
        if (probe->parsed())
            return cmd_probe(model_path, data_path, target, split_col, eps_spec, scaled_probe,
                             max_inputs, out_dir);
        if (bench->parsed())
            return cmd_bench(model_path, posterior_path, data_path, target, split_col,
                             samples_spec, warmup, repeats, n_inputs, cov_mode, value_cov, seed,
                             out_dir);
        std::cerr << "no subcommand given\n";
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    } catch (const mf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const mf::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const mf::StructuralError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const mf::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const mf::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
