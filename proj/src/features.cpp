#include "bikevol/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include "bikevol/errors.hpp"
#include "bikevol/rng.hpp"

namespace bikevol::graph {

namespace {

bool parse_real(const std::string& s, double& out) {
    if (s.empty()) {
        return false;
    }
    const char* begin = s.c_str();
    char* end = nullptr;
    out = std::strtod(begin, &end);
    return end == begin + s.size() && std::isfinite(out);
}

}  // namespace

std::size_t FeatureSchema::encoded_width() const {
    std::size_t w = 0;
    for (const FeatureColumn& c : columns) {
        w += c.kind == FeatureColumn::Kind::categorical ? c.levels.size() : 1;
    }
    return w;
}

std::uint64_t FeatureSchema::fingerprint() const {
    std::string canon;
    for (const FeatureColumn& c : columns) {
        canon += c.name;
        canon += '\x1f';
        canon += c.kind == FeatureColumn::Kind::categorical ? 'c' : 'r';
        canon += '\x1f';
        for (const std::string& l : c.levels) {
            canon += l;
            canon += '\x1e';
        }
        canon += '\x1d';
    }
    return core::fnv1a64(canon);
}

FeatureSchema infer_schema(const RawTable& table) {
    if (table.n_cols() == 0) {
        throw DataError("schema: table has no columns");
    }
    for (const auto& row : table.rows) {
        if (row.size() != table.n_cols()) {
            throw DataError("schema: ragged table row");
        }
    }
    FeatureSchema schema;
    for (std::size_t c = 0; c < table.n_cols(); ++c) {
        FeatureColumn col;
        col.name = table.column_names[c];
        bool numeric = !table.rows.empty();
        for (const auto& row : table.rows) {
            double v;
            if (!parse_real(row[c], v)) {
                numeric = false;
                break;
            }
        }
        if (numeric) {
            col.kind = FeatureColumn::Kind::continuous;
        } else {
            col.kind = FeatureColumn::Kind::categorical;
            std::set<std::string> levels;
            for (const auto& row : table.rows) {
                if (row[c].empty()) {
                    throw DataError("schema: empty cell in categorical column " + col.name);
                }
                levels.insert(row[c]);
            }
            col.levels.assign(levels.begin(), levels.end());
        }
        schema.columns.push_back(std::move(col));
    }
    return schema;
}

core::DenseMatrix encode_features(const RawTable& table, const FeatureSchema& schema) {
    if (table.n_cols() != schema.columns.size()) {
        throw DataError("encode: table/schema column count mismatch");
    }
    const std::size_t n = table.n_rows();
    core::DenseMatrix out(n, schema.encoded_width());

    std::size_t at = 0;
    for (std::size_t c = 0; c < schema.columns.size(); ++c) {
        const FeatureColumn& col = schema.columns[c];
        if (col.kind == FeatureColumn::Kind::continuous) {
            std::vector<double> vals(n);
            for (std::size_t r = 0; r < n; ++r) {
                if (!parse_real(table.rows[r][c], vals[r])) {
                    throw DataError("encode: non-numeric value '" + table.rows[r][c] +
                                    "' in continuous column " + col.name);
                }
            }
            double lo = vals.empty() ? 0.0 : vals[0];
            double hi = lo;
            for (double v : vals) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            for (std::size_t r = 0; r < n; ++r) {
                out(r, at) = hi > lo ? (vals[r] - lo) / (hi - lo) : 0.5;
            }
            at += 1;
        } else {
            for (std::size_t r = 0; r < n; ++r) {
                const std::string& cell = table.rows[r][c];
                auto it = std::find(col.levels.begin(), col.levels.end(), cell);
                if (it == col.levels.end()) {
                    throw DataError("encode: unknown level '" + cell + "' in column " + col.name);
                }
                out(r, at + static_cast<std::size_t>(it - col.levels.begin())) = 1.0;
            }
            at += col.levels.size();
        }
    }
    return out;
}

}  // namespace bikevol::graph
