#include "momentflow/posterior_io.hpp"

#include <fstream>

#include <json.hpp>

#include "momentflow/errors.hpp"

namespace momentflow {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows; ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < m.cols; ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const json& j, const char* what) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw ParseError(std::string(what) + ": expected a 2-d array");
    Matrix m(j.size(), j[0].size());
    for (std::size_t r = 0; r < m.rows; ++r) {
        if (j[r].size() != m.cols) throw ParseError(std::string(what) + ": ragged rows");
        for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

}  // namespace

void save_posterior(const PosteriorSpec& spec, const std::string& path) {
    json layers = json::object();
    for (const auto& [idx, post] : spec.layers) {
        json entry;
        if (std::holds_alternative<DeterministicPosterior>(post)) {
            entry["structure"] = "deterministic";
        } else if (const auto* d = std::get_if<DiagonalPosterior>(&post)) {
            entry["structure"] = "diagonal";
            entry["var_weight"] = matrix_to_json(d->var_weight);
            entry["var_bias"] = d->var_bias;
        } else if (const auto* k = std::get_if<KfacPosterior>(&post)) {
            entry["structure"] = "kfac";
            entry["a_factor"] = matrix_to_json(k->a_factor);
            entry["b_factor"] = matrix_to_json(k->b_factor);
            entry["lambda"] = k->prior_precision;
            entry["convention"] = k->convention == KfacConvention::row ? "row" : "column";
        } else {
            const auto& f = std::get<FullPosterior>(post);
            entry["structure"] = "full";
            entry["cov"] = matrix_to_json(f.cov);
            entry["flattening"] = f.flattening == Flattening::row ? "row" : "column";
        }
        layers[std::to_string(idx)] = std::move(entry);
    }
    json j;
    j["version"] = 1;
    j["layers"] = std::move(layers);

    std::ofstream out(path);
    if (!out) throw ConfigError("save_posterior: cannot open " + path);
    out << j.dump(1) << "\n";
}

PosteriorSpec load_posterior(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_posterior: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("load_posterior: " + std::string(e.what()), e.byte);
    }
    try {
        if (j.at("version").get<int>() != 1)
            throw ParseError("load_posterior: unsupported format version");
        PosteriorSpec spec;
        for (const auto& [key, entry] : j.at("layers").items()) {
            const std::size_t idx = std::stoul(key);
            const std::string structure = entry.at("structure").get<std::string>();
            if (structure == "deterministic") {
                spec.layers.emplace(idx, DeterministicPosterior{});
            } else if (structure == "diagonal") {
                DiagonalPosterior d;
                d.var_weight = matrix_from_json(entry.at("var_weight"), "var_weight");
                d.var_bias = entry.at("var_bias").get<Vector>();
                spec.layers.emplace(idx, std::move(d));
            } else if (structure == "kfac") {
                KfacPosterior k;
                k.a_factor = matrix_from_json(entry.at("a_factor"), "a_factor");
                k.b_factor = matrix_from_json(entry.at("b_factor"), "b_factor");
                k.prior_precision = entry.at("lambda").get<double>();
                const std::string conv = entry.at("convention").get<std::string>();
                if (conv == "row")
                    k.convention = KfacConvention::row;
                else if (conv == "column")
                    k.convention = KfacConvention::column;
                else
                    throw ParseError("load_posterior: unknown convention " + conv);
                invert_kfac_posterior(k);
                spec.layers.emplace(idx, std::move(k));
            } else if (structure == "full") {
                FullPosterior f;
                f.cov = matrix_from_json(entry.at("cov"), "cov");
                const std::string flat = entry.at("flattening").get<std::string>();
                if (flat == "row")
                    f.flattening = Flattening::row;
                else if (flat == "column")
                    f.flattening = Flattening::column;
                else
                    throw ParseError("load_posterior: unknown flattening " + flat);
                spec.layers.emplace(idx, std::move(f));
            } else {
                throw ParseError("load_posterior: unknown structure " + structure);
            }
        }
        return spec;
    } catch (const json::exception& e) {
        throw ParseError("load_posterior: " + std::string(e.what()));
    }
}

}  // namespace momentflow
