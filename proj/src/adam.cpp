#include "bikevol/adam.hpp"

#include <cmath>

#include "bikevol/errors.hpp"

namespace bikevol::core {

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
    if (!(learning_rate > 0.0)) {
        throw ContractError("adam: learning rate must be positive");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ContractError("adam: betas must be in [0, 1)");
    }
}

void AdamOptimizer::step(std::vector<DenseMatrix*> params, std::vector<const DenseMatrix*> grads) {
    if (params.size() != grads.size()) {
        throw ContractError("adam: parameter/gradient count mismatch");
    }
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = DenseMatrix::zeros(params[i]->rows, params[i]->cols);
            v_[i] = DenseMatrix::zeros(params[i]->rows, params[i]->cols);
        }
    } else if (m_.size() != params.size()) {
        throw ContractError("adam: parameter count changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        DenseMatrix& p = *params[i];
        const DenseMatrix& g = *grads[i];
        if (!p.same_shape(g) || !p.same_shape(m_[i])) {
            throw ShapeError("adam: parameter/gradient shape mismatch");
        }
        double* mp = m_[i].data.data();
        double* vp = v_[i].data.data();
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            mp[k] = beta1_ * mp[k] + (1.0 - beta1_) * g.data[k];
            vp[k] = beta2_ * vp[k] + (1.0 - beta2_) * g.data[k] * g.data[k];
            const double mhat = mp[k] / bc1;
            const double vhat = vp[k] / bc2;
            p.data[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void AdamOptimizer::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

}  // namespace bikevol::core
