#pragma once

#include <string>
#include <vector>

#include "momentflow/matrix.hpp"
#include "momentflow/model.hpp"

namespace momentflow {

enum class Split { none, train, val, test };

/// Feature/target scaling applied to a dataset, kept so predictions can be
/// reported consistently. RMSE/NLPD are computed on the standardised scale.
struct Standardization {
    bool features = false;
    bool targets = false;
    Vector feature_mean, feature_std;
    double target_mean = 0.0;
    double target_std = 1.0;
};

struct Dataset {
    Matrix features;                       // N x d
    Vector targets_real;                   // regression targets
    std::vector<std::size_t> targets_class;  // classification labels
    Task task = Task::regression;
    std::vector<Split> split;              // empty when the file has no split column
    Standardization standardization;

    std::size_t size() const { return features.rows; }
    std::size_t dim() const { return features.cols; }

    /// Row indices belonging to `s`; all rows when no split tags exist and
    /// s == train.
    std::vector<std::size_t> rows_with_split(Split s) const;
};

struct CsvSchema {
    std::string target_column;
    Task task = Task::regression;
    std::string split_column;  // empty = no split column
};

/// Comma-separated, header row, UTF-8, '.' decimal separator. Ragged rows
/// and non-numeric cells raise ParseError carrying the 1-based line number.
Dataset load_dataset_csv(const std::string& path, const CsvSchema& schema);

/// Fits scalers on `fit_rows` and transforms every row in place.
/// Classification targets are left untouched.
void standardize(Dataset& data, const std::vector<std::size_t>& fit_rows, bool features,
                 bool targets);

}  // namespace momentflow
