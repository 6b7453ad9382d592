#include "momentflow/heads.hpp"

#include <algorithm>
#include <cmath>

#include "momentflow/errors.hpp"

namespace momentflow {

namespace {

constexpr double kProbitFactor = 0.39269908169872415481;  // pi/8
constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace

Vector probit_classify(const Vector& logit_mean, const Vector& logit_var, double scale) {
    if (logit_mean.size() != logit_var.size())
        throw StructuralError("probit_classify: length mismatch");
    if (scale <= 0.0) throw StructuralError("probit_classify: scale must be > 0");
    Vector scaled(logit_mean.size());
    for (std::size_t c = 0; c < logit_mean.size(); ++c) {
        if (logit_var[c] < 0.0) throw StructuralError("probit_classify: negative variance");
        scaled[c] = logit_mean[c] / std::sqrt(1.0 + kProbitFactor * scale * logit_var[c]);
    }
    return softmax(scaled);
}

PredictiveDist regression_predict(double mean, double model_var, double obs_noise, double scale) {
    if (model_var < 0.0 || obs_noise < 0.0)
        throw StructuralError("regression_predict: negative variance");
    if (scale <= 0.0) throw StructuralError("regression_predict: scale must be > 0");
    PredictiveDist p;
    p.task = Task::regression;
    p.mean = mean;
    p.model_var = scale * model_var;
    p.obs_noise = obs_noise;
    return p;
}

PredictiveDist classification_predict(const Vector& logit_mean, const Vector& logit_var,
                                      double scale) {
    PredictiveDist p;
    p.task = Task::classification;
    p.logit_mean = logit_mean;
    p.logit_var = logit_var;
    p.probs = probit_classify(logit_mean, logit_var, scale);
    return p;
}

double regression_nlpd(const PredictiveDist& p, double y, double scale) {
    const double var = scale * p.model_var + p.obs_noise;
    if (var <= 0.0) throw NumericalError("regression_nlpd: non-positive predictive variance");
    const double r = y - p.mean;
    return 0.5 * (kLog2Pi + std::log(var) + r * r / var);
}

double classification_nlpd(const PredictiveDist& p, std::size_t y, double scale) {
    if (y >= p.logit_mean.size()) throw StructuralError("classification_nlpd: class out of range");
    const Vector probs = probit_classify(p.logit_mean, p.logit_var, scale);
    return -std::log(std::max(probs[y], 1e-300));
}

Vector log_grid(double lo, double hi, std::size_t points) {
    if (points == 0 || lo <= 0.0 || hi < lo) throw StructuralError("log_grid: bad bounds");
    Vector grid(points);
    if (points == 1) {
        grid[0] = lo;
        return grid;
    }
    const double la = std::log(lo);
    const double lb = std::log(hi);
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = std::exp(la + (lb - la) * static_cast<double>(i) /
                                    static_cast<double>(points - 1));
    return grid;
}

double fit_variance_scale(const std::vector<PredictiveDist>& preds, const Vector& real_targets,
                          const std::vector<std::size_t>& class_targets, const Vector& grid) {
    if (preds.empty()) throw StructuralError("fit_variance_scale: empty validation set");
    if (grid.empty()) throw StructuralError("fit_variance_scale: empty grid");
    double best_scale = grid[0];
    double best_nlpd = 0.0;
    bool first = true;
    for (double s : grid) {
        double total = 0.0;
        for (std::size_t n = 0; n < preds.size(); ++n) {
            total += preds[n].task == Task::regression
                         ? regression_nlpd(preds[n], real_targets[n], s)
                         : classification_nlpd(preds[n], class_targets[n], s);
        }
        const double nlpd = total / static_cast<double>(preds.size());
        const bool better =
            first || nlpd < best_nlpd ||
            (nlpd == best_nlpd && std::fabs(std::log(s)) < std::fabs(std::log(best_scale)));
        if (better) {
            best_nlpd = nlpd;
            best_scale = s;
            first = false;
        }
    }
    return best_scale;
}

MetricReport compute_metrics(const std::vector<PredictiveDist>& preds, const Vector& real_targets,
                             const std::vector<std::size_t>& class_targets, Task task,
                             double scale) {
    if (task == Task::regression && preds.size() != real_targets.size())
        throw StructuralError("compute_metrics: target length mismatch");
    if (task == Task::classification && preds.size() != class_targets.size())
        throw StructuralError("compute_metrics: target length mismatch");

    MetricReport report;
    report.per_datum.reserve(preds.size());
    for (std::size_t n = 0; n < preds.size(); ++n) {
        DatumRecord rec;
        if (task == Task::regression) {
            rec.nlpd = regression_nlpd(preds[n], real_targets[n], scale);
            const double r = real_targets[n] - preds[n].mean;
            rec.sq_error = r * r;
        } else {
            const std::size_t y = class_targets[n];
            if (y >= preds[n].logit_mean.size())
                throw StructuralError("compute_metrics: class index out of range");
            const Vector probs = probit_classify(preds[n].logit_mean, preds[n].logit_var, scale);
            rec.nlpd = -std::log(std::max(probs[y], 1e-300));
            rec.predicted = static_cast<std::size_t>(
                std::max_element(probs.begin(), probs.end()) - probs.begin());
            rec.confidence = probs[rec.predicted];
            rec.correct = rec.predicted == y;
        }
        report.per_datum.push_back(rec);
    }

    const double n_inv = 1.0 / static_cast<double>(preds.size());
    double nlpd = 0.0, sq = 0.0, acc = 0.0;
    for (const DatumRecord& rec : report.per_datum) {
        nlpd += rec.nlpd;
        sq += rec.sq_error;
        acc += rec.correct ? 1.0 : 0.0;
    }
    report.nlpd = nlpd * n_inv;
    report.rmse = std::sqrt(sq * n_inv);
    report.acc = acc * n_inv;

    if (task == Task::classification) {
        // 15 equal-width bins over the max predicted probability.
        constexpr std::size_t kBins = 15;
        std::vector<double> bin_conf(kBins, 0.0), bin_acc(kBins, 0.0);
        std::vector<std::size_t> bin_count(kBins, 0);
        for (const DatumRecord& rec : report.per_datum) {
            std::size_t b = static_cast<std::size_t>(rec.confidence * kBins);
            if (b >= kBins) b = kBins - 1;
            bin_conf[b] += rec.confidence;
            bin_acc[b] += rec.correct ? 1.0 : 0.0;
            ++bin_count[b];
        }
        double ece = 0.0;
        for (std::size_t b = 0; b < kBins; ++b) {
            if (bin_count[b] == 0) continue;
            const double nb = static_cast<double>(bin_count[b]);
            ece += (nb * n_inv) * std::fabs(bin_acc[b] / nb - bin_conf[b] / nb);
        }
        report.ece = ece;
    }
    return report;
}

}  // namespace momentflow
