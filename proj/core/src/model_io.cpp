#include "momentflow/model_io.hpp"

#include <fstream>

#include <json.hpp>

#include "momentflow/errors.hpp"

namespace momentflow {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

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
        if (j[r].size() != m.cols)
            throw ParseError(std::string(what) + ": ragged rows in matrix");
        for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = j[r][c].get<double>();
    }
    if (!all_finite(m)) throw ParseError(std::string(what) + ": non-finite entry");
    return m;
}

Vector vector_from_json(const json& j, const char* what) {
    Vector v = j.get<Vector>();
    if (!all_finite(v)) throw ParseError(std::string(what) + ": non-finite entry");
    return v;
}

json layers_to_json(const std::vector<LayerSpec>& layers);

json layer_to_json(const LayerSpec& layer) {
    json out;
    if (layer.is<LinearLayer>()) {
        const auto& l = layer.as<LinearLayer>();
        out["type"] = "linear";
        out["weight"] = matrix_to_json(l.weight);
        out["bias"] = l.bias;
    } else if (layer.is<ActivationLayer>()) {
        out["type"] = "activation";
        out["kind"] = activation_name(layer.as<ActivationLayer>().kind);
    } else if (layer.is<LayerNormLayer>()) {
        const auto& l = layer.as<LayerNormLayer>();
        out["type"] = "layernorm";
        out["gamma"] = l.gamma;
        out["beta"] = l.beta;
        out["epsilon"] = l.epsilon;
    } else if (layer.is<ResidualLayer>()) {
        out["type"] = "residual";
        out["layers"] = layers_to_json(layer.as<ResidualLayer>().inner);
    } else if (layer.is<AttentionLayer>()) {
        const auto& l = layer.as<AttentionLayer>();
        out["type"] = "attention";
        out["heads"] = l.heads;
        out["wq"] = matrix_to_json(l.wq);
        out["wk"] = matrix_to_json(l.wk);
        out["wv"] = matrix_to_json(l.wv);
        out["wo"] = matrix_to_json(l.wo);
    } else if (layer.is<Conv2dLayer>()) {
        const auto& l = layer.as<Conv2dLayer>();
        out["type"] = "conv2d";
        out["kernels"] = matrix_to_json(l.kernels);
        out["c_in"] = l.c_in;
        out["k_h"] = l.k_h;
        out["k_w"] = l.k_w;
        out["bias"] = l.bias;
        out["stride"] = l.stride;
        out["padding"] = l.padding;
    } else if (layer.is<AvgPool2dLayer>()) {
        const auto& l = layer.as<AvgPool2dLayer>();
        out["type"] = "avgpool2d";
        out["window"] = l.window;
        out["stride"] = l.stride;
    } else {
        out["type"] = "flatten";
    }
    return out;
}

json layers_to_json(const std::vector<LayerSpec>& layers) {
    json arr = json::array();
    for (const LayerSpec& l : layers) arr.push_back(layer_to_json(l));
    return arr;
}

std::vector<LayerSpec> layers_from_json(const json& arr);

LayerSpec layer_from_json(const json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "linear") {
        LinearLayer l;
        l.weight = matrix_from_json(j.at("weight"), "linear weight");
        l.bias = vector_from_json(j.at("bias"), "linear bias");
        return {l};
    }
    if (type == "activation") return {ActivationLayer{activation_from_name(j.at("kind"))}};
    if (type == "layernorm") {
        LayerNormLayer l;
        l.gamma = vector_from_json(j.at("gamma"), "layernorm gamma");
        l.beta = vector_from_json(j.at("beta"), "layernorm beta");
        l.epsilon = j.value("epsilon", 1e-5);
        return {l};
    }
    if (type == "residual") return {ResidualLayer{layers_from_json(j.at("layers"))}};
    if (type == "attention") {
        AttentionLayer l;
        l.heads = j.at("heads").get<std::size_t>();
        l.wq = matrix_from_json(j.at("wq"), "attention wq");
        l.wk = matrix_from_json(j.at("wk"), "attention wk");
        l.wv = matrix_from_json(j.at("wv"), "attention wv");
        l.wo = matrix_from_json(j.at("wo"), "attention wo");
        return {l};
    }
    if (type == "conv2d") {
        Conv2dLayer l;
        l.kernels = matrix_from_json(j.at("kernels"), "conv kernels");
        l.c_in = j.at("c_in").get<std::size_t>();
        l.k_h = j.at("k_h").get<std::size_t>();
        l.k_w = j.at("k_w").get<std::size_t>();
        l.bias = vector_from_json(j.at("bias"), "conv bias");
        l.stride = j.at("stride").get<std::size_t>();
        l.padding = j.at("padding").get<std::size_t>();
        if (l.kernels.cols != l.c_in * l.k_h * l.k_w)
            throw ParseError("conv2d: kernel matrix width != c_in*k_h*k_w");
        return {l};
    }
    if (type == "avgpool2d")
        return {AvgPool2dLayer{j.at("window").get<std::size_t>(), j.at("stride").get<std::size_t>()}};
    if (type == "flatten") return {FlattenLayer{}};
    throw ParseError("unknown layer type: " + type);
}

std::vector<LayerSpec> layers_from_json(const json& arr) {
    if (!arr.is_array()) throw ParseError("layers: expected an array");
    std::vector<LayerSpec> out;
    out.reserve(arr.size());
    for (const json& j : arr) out.push_back(layer_from_json(j));
    return out;
}

}  // namespace

void save_model(const NetworkModel& net, const std::string& path) {
    json j;
    j["version"] = kFormatVersion;
    j["task"] = net.task == Task::regression ? "regression" : "classification";
    if (net.input.is_image)
        j["input_dim"] = {net.input.c, net.input.h, net.input.w};
    else
        j["input_dim"] = net.input.flat;
    j["num_outputs"] = net.num_outputs;
    j["layers"] = layers_to_json(net.layers);

    std::ofstream out(path);
    if (!out) throw ConfigError("save_model: cannot open " + path);
    out << j.dump(1) << "\n";
}

NetworkModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_model: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("load_model: " + std::string(e.what()), e.byte);
    }
    try {
        const int version = j.at("version").get<int>();
        if (version != kFormatVersion)
            throw ParseError("load_model: unsupported format version " + std::to_string(version));
        NetworkModel net;
        const std::string task = j.at("task").get<std::string>();
        if (task == "regression")
            net.task = Task::regression;
        else if (task == "classification")
            net.task = Task::classification;
        else
            throw ParseError("load_model: unknown task " + task);
        const json& dim = j.at("input_dim");
        if (dim.is_array()) {
            if (dim.size() != 3) throw ParseError("load_model: image input_dim needs [C,H,W]");
            net.input.is_image = true;
            net.input.c = dim[0].get<std::size_t>();
            net.input.h = dim[1].get<std::size_t>();
            net.input.w = dim[2].get<std::size_t>();
            net.input.flat = net.input.c * net.input.h * net.input.w;
        } else {
            net.input.flat = dim.get<std::size_t>();
        }
        net.num_outputs = j.at("num_outputs").get<std::size_t>();
        net.layers = layers_from_json(j.at("layers"));
        validate_model(net);
        return net;
    } catch (const json::exception& e) {
        throw ParseError("load_model: " + std::string(e.what()));
    }
}

}  // namespace momentflow
