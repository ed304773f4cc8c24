#include "bikevol/targets.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "bikevol/errors.hpp"

namespace bikevol::graph {

std::int64_t compute_adb(const std::vector<std::int64_t>& daily_counts) {
    if (daily_counts.empty()) {
        throw DataError("adb: empty daily count list");
    }
    std::int64_t sum = 0;
    for (std::int64_t c : daily_counts) {
        if (c < 0) {
            throw DataError("adb: negative daily count");
        }
        sum += c;
    }
    const auto n = static_cast<std::int64_t>(daily_counts.size());
    return (sum + n - 1) / n;
}

std::vector<int> quantile_classes(const std::vector<double>& values, int n_classes) {
    if (n_classes < 2) {
        throw ContractError("quantiles: need at least two classes");
    }
    std::set<double> distinct;
    for (double v : values) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw DataError("quantiles: values must be positive and finite");
        }
        distinct.insert(v);
    }
    if (distinct.size() < static_cast<std::size_t>(n_classes)) {
        throw DataError("quantiles: degenerate binning, fewer distinct values than classes");
    }

    std::vector<double> sorted(values);
    std::sort(sorted.begin(), sorted.end());
    const std::size_t k = sorted.size();
    std::vector<double> cuts;
    for (int q = 1; q < n_classes; ++q) {
        // Nearest-rank percentile at q/n_classes.
        const double frac = static_cast<double>(q) / static_cast<double>(n_classes);
        const std::size_t rank = static_cast<std::size_t>(
            std::ceil(frac * static_cast<double>(k)));
        cuts.push_back(sorted[rank - 1]);
    }

    std::vector<int> classes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        int cls = 1;
        for (double c : cuts) {
            if (values[i] > c) {
                ++cls;
            }
        }
        classes[i] = cls;
    }
    return classes;
}

TargetScaler::TargetScaler(double lo, double hi) : lo_(lo), hi_(hi) {
    if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
        throw DataError("target scaler: degenerate range");
    }
}

TargetScaler TargetScaler::fit(const std::vector<double>& train_adb) {
    if (train_adb.empty()) {
        throw DataError("target scaler: no training labels");
    }
    double lo = train_adb[0];
    double hi = train_adb[0];
    for (double v : train_adb) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return TargetScaler(lo, hi);
}

}  // namespace bikevol::graph
