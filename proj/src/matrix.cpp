#include "bikevol/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "bikevol/errors.hpp"

namespace bikevol::core {

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> init) {
    rows = init.size();
    cols = rows == 0 ? 0 : init.begin()->size();
    data.reserve(rows * cols);
    for (const auto& row : init) {
        if (row.size() != cols) {
            throw ShapeError("ragged initializer list");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
}

bool DenseMatrix::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix out(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            out(c, r) = m(r, c);
        }
    }
    return out;
}

DenseMatrix matmul_plain(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                         std::to_string(b.rows) + ")");
    }
    DenseMatrix c(a.rows, b.cols, 0.0);
    add_matmul(c, a, b);
    return c;
}

void add_matmul(DenseMatrix& c, const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols) {
        throw ShapeError("add_matmul: dimension mismatch");
    }
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

void add_matmul_nt(DenseMatrix& c, const DenseMatrix& a, const DenseMatrix& b) {
    // C[i][j] += dot(A[i][:], B[j][:])
    if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows) {
        throw ShapeError("add_matmul_nt: dimension mismatch");
    }
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.row_ptr(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                acc += arow[k] * brow[k];
            }
            crow[j] += acc;
        }
    }
}

void add_matmul_tn(DenseMatrix& c, const DenseMatrix& a, const DenseMatrix& b) {
    // C[k][j] += sum_i A[i][k] * B[i][j]
    if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols) {
        throw ShapeError("add_matmul_tn: dimension mismatch");
    }
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        const double* brow = b.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            double* crow = c.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

double max_abs(const DenseMatrix& m) {
    double best = 0.0;
    for (double v : m.data) {
        best = std::max(best, std::fabs(v));
    }
    return best;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: shape mismatch");
    }
    double best = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        best = std::max(best, std::fabs(a.data[i] - b.data[i]));
    }
    return best;
}

double mean_all(const DenseMatrix& m) {
    if (m.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (double v : m.data) {
        acc += v;
    }
    return acc / static_cast<double>(m.size());
}

}  // namespace bikevol::core
