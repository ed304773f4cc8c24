#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "bikevol/matrix.hpp"

namespace bikevol::core {

// Adam with bias correction. One state per optimized parameter list; the
// parameter order passed to step() must stay stable across calls.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                           double epsilon = 1e-8);

    // Applies one update in place. params[i] and grads[i] must share a shape;
    // moment buffers are allocated on first use.
    void step(std::vector<DenseMatrix*> params, std::vector<const DenseMatrix*> grads);

    double learning_rate() const { return lr_; }
    std::uint64_t steps_taken() const { return t_; }
    void reset();

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::uint64_t t_ = 0;
    std::vector<DenseMatrix> m_;
    std::vector<DenseMatrix> v_;
};

}  // namespace bikevol::core
