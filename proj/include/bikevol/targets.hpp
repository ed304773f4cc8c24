#pragma once

#include <cstdint>
#include <vector>

namespace bikevol::graph {

// Average daily bicyclists from a stream of daily counts: ceiling of the
// arithmetic mean, computed in exact integer arithmetic.
std::int64_t compute_adb(const std::vector<std::int64_t>& daily_counts);

// Quantile discretization into classes 1..n_classes (Very Low to Very High).
// Boundaries sit at the 20/40/60/80 empirical percentiles for n_classes=5;
// values equal to a boundary fall into the lower class.
std::vector<int> quantile_classes(const std::vector<double>& values, int n_classes = 5);

// Min-max map of training-fold ADB onto [0,1]. Fit on training labels only;
// held-out values may map outside the unit interval.
class TargetScaler {
public:
    TargetScaler(double lo, double hi);
    static TargetScaler fit(const std::vector<double>& train_adb);

    double normalize(double adb) const { return (adb - lo_) / (hi_ - lo_); }
    double denormalize(double unit) const { return lo_ + unit * (hi_ - lo_); }

    double lo() const { return lo_; }
    double hi() const { return hi_; }

private:
    double lo_;
    double hi_;
};

}  // namespace bikevol::graph
