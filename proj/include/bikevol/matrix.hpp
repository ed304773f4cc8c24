#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace bikevol::core {

// Row-major dense matrix of 64-bit reals. The only numeric container in the
// library; vectors are n-by-1 or 1-by-n matrices.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    // Brace-literal constructor for small test fixtures: {{1,2},{3,4}}.
    DenseMatrix(std::initializer_list<std::initializer_list<double>> init);

    static DenseMatrix zeros(std::size_t r, std::size_t c) { return DenseMatrix(r, c, 0.0); }
    static DenseMatrix filled(std::size_t r, std::size_t c, double v) { return DenseMatrix(r, c, v); }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row_ptr(std::size_t r) { return data.data() + r * cols; }
    const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const DenseMatrix& other) const {
        return rows == other.rows && cols == other.cols;
    }
    bool all_finite() const;
};

DenseMatrix transpose(const DenseMatrix& m);

// C = A * B with a fixed i-k-j loop order, so each output entry accumulates
// its k-terms in ascending order on every run.
DenseMatrix matmul_plain(const DenseMatrix& a, const DenseMatrix& b);

// Accumulating products used by backward rules; all keep the same fixed
// deterministic accumulation order.
void add_matmul(DenseMatrix& c, const DenseMatrix& a, const DenseMatrix& b);      // C += A*B
void add_matmul_nt(DenseMatrix& c, const DenseMatrix& a, const DenseMatrix& b);   // C += A*B^T
void add_matmul_tn(DenseMatrix& c, const DenseMatrix& a, const DenseMatrix& b);   // C += A^T*B

double max_abs(const DenseMatrix& m);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);
double mean_all(const DenseMatrix& m);

}  // namespace bikevol::core
