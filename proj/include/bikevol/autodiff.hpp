#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bikevol/matrix.hpp"
#include "bikevol/rng.hpp"

namespace bikevol::core {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives and
// has not been cleared.
class Value {
public:
    Value() = default;

    const DenseMatrix& matrix() const;
    std::size_t rows() const { return matrix().rows; }
    std::size_t cols() const { return matrix().cols; }
    double scalar() const;  // requires a 1x1 value

    bool valid() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::uint32_t index() const { return index_; }

private:
    friend class Tape;
    Value(Tape* t, std::uint32_t i) : tape_(t), index_(i) {}

    Tape* tape_ = nullptr;
    std::uint32_t index_ = 0;
};

// Directed neighbor pairs grouped contiguously by target node. Pair p sends
// source[p]'s features to target[p]; pairs for target i occupy
// [offsets[i], offsets[i+1]).
struct EdgeGroups {
    std::vector<std::uint32_t> target;
    std::vector<std::uint32_t> source;
    std::vector<std::uint32_t> offsets;

    std::size_t pair_count() const { return target.size(); }
    std::size_t group_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

// Define-by-run reverse-mode tape over matrix-valued primitives. Nodes are
// recorded in execution order, which is already a topological order, and
// backward() replays them exactly once in reverse.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Differentiable leaf (a parameter). Input must be finite.
    Value leaf(const DenseMatrix& m);
    // Non-differentiable input (data, targets, fixed coefficients).
    Value constant(const DenseMatrix& m);
    Value constant_scalar(double v) { return constant(DenseMatrix(1, 1, v)); }

    // Record a computed node. Used by the op builders below.
    Value emit(DenseMatrix value, BackwardFn backward);

    // Seed d(loss)=1 and sweep the tape once in reverse. loss must be 1x1.
    void backward(const Value& loss);

    const DenseMatrix& value_of(std::uint32_t index) const { return nodes_[index].value; }

    // Gradient of the last backward() w.r.t. v. Nodes unreachable from the
    // loss get exact zeros.
    DenseMatrix grad(const Value& v) const;

    bool has_grad(std::uint32_t index) const {
        return index < grads_.size() && !grads_[index].empty();
    }
    const DenseMatrix& grad_ref(std::uint32_t index) const { return grads_[index]; }
    // Accumulation buffer for a node's gradient, created as zeros on first use.
    DenseMatrix& grad_buffer(std::uint32_t index);

    std::size_t size() const { return nodes_.size(); }
    void clear();

private:
    struct Node {
        DenseMatrix value;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::vector<DenseMatrix> grads_;
};

// -- Primitive ops -----------------------------------------------------------
// All record onto the tape of their arguments and provide a local backward
// rule; see src/autodiff.cpp for the rules.

Value matmul(Value a, Value b);
Value add(Value a, Value b);             // same shape
Value sub(Value a, Value b);
Value mul(Value a, Value b);             // elementwise
Value scale(Value a, double c);
Value add_rowvec(Value x, Value row);    // broadcast a 1xC row over all rows

Value relu(Value x);
Value leaky_relu(Value x, double slope);
Value sigmoid(Value x);
Value exp_elem(Value x);
Value log_elem(Value x);
Value softmax_rows(Value x);             // per-row, max-subtracted

Value sum_all(Value x);                  // 1x1
Value concat_cols(std::span<const Value> parts);
Value slice_rows(Value x, std::size_t r0, std::size_t r1);
Value slice_cols(Value x, std::size_t c0, std::size_t c1);
Value gather_rows(Value x, const std::vector<std::uint32_t>& row_indices);
Value select_col_per_row(Value x, const std::vector<std::uint32_t>& col_per_row);  // Kx1
Value rowwise_dot(Value a, Value b);     // Nx1 of per-row dot products
Value mul_by_scalar_node(Value x, Value s);  // s is 1x1

// v[p] = s[target[p]] + t[source[p]]; s, t are Nx1. Groups are held by
// shared_ptr so sampled neighborhoods outlive the tape that recorded them.
Value pair_sum(Value s, Value t, std::shared_ptr<const EdgeGroups> groups);
// Softmax over each target group of an Ex1 column.
Value segment_softmax(Value v, std::shared_ptr<const EdgeGroups> groups);
// out[i] = sum over pairs p with target i of w[p] * h[source[p]].
Value edge_weighted_sum(Value w, Value h, std::shared_ptr<const EdgeGroups> groups);

// Inverted dropout: in training mode zeroes entries with probability rate and
// scales survivors by 1/(1-rate); in eval mode the identity.
Value dropout(Value x, double rate, RngStream& rng, bool training);

// mean_e [ max(s,0) - s*y + log(1+exp(-|s|)) ]; targets in {0,1}, constant.
Value bce_with_logits_mean(Value scores, const DenseMatrix& targets);

}  // namespace bikevol::core
