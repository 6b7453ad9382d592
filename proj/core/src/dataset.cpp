#include "momentflow/dataset.hpp"

#include <cmath>
#include <charconv>
#include <fstream>
#include <sstream>

#include "momentflow/errors.hpp"

namespace momentflow {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        // trim surrounding whitespace
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

double parse_cell(const std::string& cell, std::size_t line_no, const std::string& col) {
    double value = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    const auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last)
        throw ParseError("csv line " + std::to_string(line_no) + ": non-numeric cell '" + cell +
                             "' in column " + col,
                         line_no);
    return value;
}

Split split_from_string(const std::string& s, std::size_t line_no) {
    if (s == "train") return Split::train;
    if (s == "val" || s == "validation") return Split::val;
    if (s == "test") return Split::test;
    throw ParseError("csv line " + std::to_string(line_no) + ": unknown split tag '" + s + "'",
                     line_no);
}

}  // namespace

std::vector<std::size_t> Dataset::rows_with_split(Split s) const {
    std::vector<std::size_t> rows;
    if (split.empty()) {
        if (s == Split::train)
            for (std::size_t i = 0; i < size(); ++i) rows.push_back(i);
        return rows;
    }
    for (std::size_t i = 0; i < size(); ++i)
        if (split[i] == s) rows.push_back(i);
    return rows;
}

Dataset load_dataset_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_dataset_csv: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw ParseError("csv: empty file", 1);
    const std::vector<std::string> header = split_csv_line(line);

    std::ptrdiff_t target_idx = -1;
    std::ptrdiff_t split_idx = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == schema.target_column) target_idx = static_cast<std::ptrdiff_t>(i);
        if (!schema.split_column.empty() && header[i] == schema.split_column)
            split_idx = static_cast<std::ptrdiff_t>(i);
    }
    if (target_idx < 0)
        throw ParseError("csv: target column '" + schema.target_column + "' not in header", 1);
    if (!schema.split_column.empty() && split_idx < 0)
        throw ParseError("csv: split column '" + schema.split_column + "' not in header", 1);

    std::size_t n_features = header.size() - 1 - (split_idx >= 0 ? 1 : 0);
    if (n_features == 0) throw ParseError("csv: no feature columns", 1);

    std::vector<double> feature_data;
    Vector targets_real;
    std::vector<std::size_t> targets_class;
    std::vector<Split> splits;

    std::size_t line_no = 1;
    std::size_t n_rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw ParseError("csv line " + std::to_string(line_no) + ": expected " +
                                 std::to_string(header.size()) + " cells, got " +
                                 std::to_string(cells.size()),
                             line_no);
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (static_cast<std::ptrdiff_t>(i) == target_idx) continue;
            if (static_cast<std::ptrdiff_t>(i) == split_idx) continue;
            feature_data.push_back(parse_cell(cells[i], line_no, header[i]));
        }
        const std::string& target = cells[static_cast<std::size_t>(target_idx)];
        if (schema.task == Task::regression) {
            targets_real.push_back(parse_cell(target, line_no, schema.target_column));
        } else {
            const double v = parse_cell(target, line_no, schema.target_column);
            if (v < 0.0 || v != std::floor(v))
                throw ParseError("csv line " + std::to_string(line_no) +
                                     ": class index must be a non-negative integer",
                                 line_no);
            targets_class.push_back(static_cast<std::size_t>(v));
        }
        if (split_idx >= 0)
            splits.push_back(split_from_string(cells[static_cast<std::size_t>(split_idx)], line_no));
        ++n_rows;
    }
    if (n_rows == 0) throw ParseError("csv: no data rows", line_no);

    Dataset data;
    data.task = schema.task;
    data.features = Matrix(n_rows, n_features);
    data.features.data = std::move(feature_data);
    data.targets_real = std::move(targets_real);
    data.targets_class = std::move(targets_class);
    data.split = std::move(splits);
    return data;
}

void standardize(Dataset& data, const std::vector<std::size_t>& fit_rows, bool features,
                 bool targets) {
    if (fit_rows.empty()) throw StructuralError("standardize: no rows to fit on");
    const std::size_t d = data.dim();
    if (features) {
        data.standardization.features = true;
        data.standardization.feature_mean.assign(d, 0.0);
        data.standardization.feature_std.assign(d, 1.0);
        for (std::size_t j = 0; j < d; ++j) {
            double m = 0.0;
            for (std::size_t r : fit_rows) m += data.features(r, j);
            m /= static_cast<double>(fit_rows.size());
            double var = 0.0;
            for (std::size_t r : fit_rows) {
                const double dv = data.features(r, j) - m;
                var += dv * dv;
            }
            var /= static_cast<double>(fit_rows.size());
            const double s = var > 0.0 ? std::sqrt(var) : 1.0;
            data.standardization.feature_mean[j] = m;
            data.standardization.feature_std[j] = s;
            for (std::size_t r = 0; r < data.size(); ++r)
                data.features(r, j) = (data.features(r, j) - m) / s;
        }
    }
    if (targets && data.task == Task::regression) {
        data.standardization.targets = true;
        double m = 0.0;
        for (std::size_t r : fit_rows) m += data.targets_real[r];
        m /= static_cast<double>(fit_rows.size());
        double var = 0.0;
        for (std::size_t r : fit_rows) {
            const double dv = data.targets_real[r] - m;
            var += dv * dv;
        }
        var /= static_cast<double>(fit_rows.size());
        const double s = var > 0.0 ? std::sqrt(var) : 1.0;
        data.standardization.target_mean = m;
        data.standardization.target_std = s;
        for (double& y : data.targets_real) y = (y - m) / s;
    }
}

}  // namespace momentflow
