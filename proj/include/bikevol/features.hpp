#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bikevol/matrix.hpp"

namespace bikevol::graph {

struct FeatureColumn {
    enum class Kind { continuous, categorical };

    std::string name;
    Kind kind = Kind::continuous;
    std::vector<std::string> levels;  // categorical only; unique, sorted
    std::string units;
};

struct FeatureSchema {
    std::vector<FeatureColumn> columns;

    // One-hot width for categorical columns plus one per continuous column.
    std::size_t encoded_width() const;
    // Stable hash of names/kinds/levels; recorded in checkpoints so a model is
    // never applied to differently encoded features.
    std::uint64_t fingerprint() const;
};

// Column-oriented view of a parsed input table; all cells as text.
struct RawTable {
    std::vector<std::string> column_names;
    std::vector<std::vector<std::string>> rows;

    std::size_t n_rows() const { return rows.size(); }
    std::size_t n_cols() const { return column_names.size(); }
};

// Columns whose every cell parses as a real number become continuous;
// everything else becomes categorical with sorted distinct levels.
FeatureSchema infer_schema(const RawTable& table);

// One-hot categoricals, min-max continuous columns to [0,1] with statistics
// from the full table. A constant continuous column maps to 0.5 everywhere.
core::DenseMatrix encode_features(const RawTable& table, const FeatureSchema& schema);

}  // namespace bikevol::graph
