#include "bikevol/autodiff.hpp"

#include <cmath>
#include <memory>
#include <utility>

#include "bikevol/errors.hpp"

namespace bikevol::core {

namespace {

Tape& same_tape(Value a, Value b) {
    if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
        throw ContractError("operands recorded on different tapes");
    }
    return *a.tape();
}

void check_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols) + ")");
    }
}

void check_groups(const EdgeGroups& g) {
    if (g.target.size() != g.source.size()) {
        throw ContractError("edge groups: target/source size mismatch");
    }
}

}  // namespace

const DenseMatrix& Value::matrix() const {
    if (!valid()) {
        throw ContractError("use of an empty Value handle");
    }
    return tape_->value_of(index_);
}

double Value::scalar() const {
    const DenseMatrix& m = matrix();
    if (m.rows != 1 || m.cols != 1) {
        throw ContractError("scalar() on a non-1x1 value");
    }
    return m.data[0];
}

Value Tape::leaf(const DenseMatrix& m) {
    if (!m.all_finite()) {
        throw DataError("leaf: non-finite entries");
    }
    return emit(m, nullptr);
}

Value Tape::constant(const DenseMatrix& m) {
    if (!m.all_finite()) {
        throw DataError("constant: non-finite entries");
    }
    return emit(m, nullptr);
}

Value Tape::emit(DenseMatrix value, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), std::move(backward)});
    return Value(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

DenseMatrix& Tape::grad_buffer(std::uint32_t index) {
    DenseMatrix& g = grads_[index];
    if (g.empty()) {
        const DenseMatrix& v = nodes_[index].value;
        g = DenseMatrix::zeros(v.rows, v.cols);
    }
    return g;
}

void Tape::backward(const Value& loss) {
    if (!loss.valid() || loss.tape() != this) {
        throw ContractError("backward: loss not on this tape");
    }
    const DenseMatrix& lv = value_of(loss.index());
    if (lv.rows != 1 || lv.cols != 1) {
        throw ContractError("backward: loss must be scalar (1x1)");
    }
    grads_.assign(nodes_.size(), DenseMatrix{});
    grads_[loss.index()] = DenseMatrix(1, 1, 1.0);
    for (std::uint32_t i = static_cast<std::uint32_t>(nodes_.size()); i-- > 0;) {
        if (!grads_[i].empty() && nodes_[i].backward) {
            nodes_[i].backward(*this, i);
        }
    }
}

DenseMatrix Tape::grad(const Value& v) const {
    if (!v.valid() || v.tape() != this) {
        throw ContractError("grad: value not on this tape");
    }
    if (has_grad(v.index())) {
        return grads_[v.index()];
    }
    const DenseMatrix& val = value_of(v.index());
    return DenseMatrix::zeros(val.rows, val.cols);
}

void Tape::clear() {
    nodes_.clear();
    grads_.clear();
}

// -- binary ops ---------------------------------------------------------------

Value matmul(Value a, Value b) {
    Tape& t = same_tape(a, b);
    DenseMatrix out = matmul_plain(a.matrix(), b.matrix());
    const std::uint32_t ia = a.index(), ib = b.index();
    return t.emit(std::move(out), [ia, ib](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        add_matmul_nt(tp.grad_buffer(ia), dc, tp.value_of(ib));  // dA += dC * B^T
        add_matmul_tn(tp.grad_buffer(ib), tp.value_of(ia), dc);  // dB += A^T * dC
    });
}

Value add(Value a, Value b) {
    Tape& t = same_tape(a, b);
    const DenseMatrix& av = a.matrix();
    const DenseMatrix& bv = b.matrix();
    check_same_shape(av, bv, "add");
    DenseMatrix out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += bv.data[i];
    }
    const std::uint32_t ia = a.index(), ib = b.index();
    return t.emit(std::move(out), [ia, ib](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& da = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            da.data[i] += dc.data[i];
        }
        DenseMatrix& db = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            db.data[i] += dc.data[i];
        }
    });
}

Value sub(Value a, Value b) {
    Tape& t = same_tape(a, b);
    const DenseMatrix& av = a.matrix();
    const DenseMatrix& bv = b.matrix();
    check_same_shape(av, bv, "sub");
    DenseMatrix out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] -= bv.data[i];
    }
    const std::uint32_t ia = a.index(), ib = b.index();
    return t.emit(std::move(out), [ia, ib](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& da = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            da.data[i] += dc.data[i];
        }
        DenseMatrix& db = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            db.data[i] -= dc.data[i];
        }
    });
}

Value mul(Value a, Value b) {
    Tape& t = same_tape(a, b);
    const DenseMatrix& av = a.matrix();
    const DenseMatrix& bv = b.matrix();
    check_same_shape(av, bv, "mul");
    DenseMatrix out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] *= bv.data[i];
    }
    const std::uint32_t ia = a.index(), ib = b.index();
    return t.emit(std::move(out), [ia, ib](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& av = tp.value_of(ia);
        const DenseMatrix& bv = tp.value_of(ib);
        DenseMatrix& da = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            da.data[i] += dc.data[i] * bv.data[i];
        }
        DenseMatrix& db = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            db.data[i] += dc.data[i] * av.data[i];
        }
    });
}

Value scale(Value a, double c) {
    Tape& t = *a.tape();
    DenseMatrix out = a.matrix();
    for (double& v : out.data) {
        v *= c;
    }
    const std::uint32_t ia = a.index();
    return t.emit(std::move(out), [ia, c](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& da = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            da.data[i] += c * dc.data[i];
        }
    });
}

Value add_rowvec(Value x, Value row) {
    Tape& t = same_tape(x, row);
    const DenseMatrix& xv = x.matrix();
    const DenseMatrix& rv = row.matrix();
    if (rv.rows != 1 || rv.cols != xv.cols) {
        throw ShapeError("add_rowvec: row must be 1x" + std::to_string(xv.cols));
    }
    DenseMatrix out = xv;
    for (std::size_t r = 0; r < out.rows; ++r) {
        double* orow = out.row_ptr(r);
        for (std::size_t c = 0; c < out.cols; ++c) {
            orow[c] += rv.data[c];
        }
    }
    const std::uint32_t ix = x.index(), ir = row.index();
    return t.emit(std::move(out), [ix, ir](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += dc.data[i];
        }
        DenseMatrix& dr = tp.grad_buffer(ir);
        for (std::size_t r = 0; r < dc.rows; ++r) {
            const double* drow = dc.row_ptr(r);
            for (std::size_t c = 0; c < dc.cols; ++c) {
                dr.data[c] += drow[c];
            }
        }
    });
}

// -- elementwise nonlinearities -----------------------------------------------

Value relu(Value x) {
    Tape& t = *x.tape();
    DenseMatrix out = x.matrix();
    for (double& v : out.data) {
        v = v > 0.0 ? v : 0.0;
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& xv = tp.value_of(ix);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            if (xv.data[i] > 0.0) {
                dx.data[i] += dc.data[i];
            }
        }
    });
}

Value leaky_relu(Value x, double slope) {
    Tape& t = *x.tape();
    DenseMatrix out = x.matrix();
    for (double& v : out.data) {
        v = v > 0.0 ? v : slope * v;
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix, slope](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& xv = tp.value_of(ix);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += dc.data[i] * (xv.data[i] > 0.0 ? 1.0 : slope);
        }
    });
}

Value sigmoid(Value x) {
    Tape& t = *x.tape();
    DenseMatrix out = x.matrix();
    for (double& v : out.data) {
        v = 1.0 / (1.0 + std::exp(-v));
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& s = tp.value_of(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += dc.data[i] * s.data[i] * (1.0 - s.data[i]);
        }
    });
}

Value exp_elem(Value x) {
    Tape& t = *x.tape();
    DenseMatrix out = x.matrix();
    for (double& v : out.data) {
        v = std::exp(v);
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& ev = tp.value_of(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += dc.data[i] * ev.data[i];
        }
    });
}

Value log_elem(Value x) {
    Tape& t = *x.tape();
    DenseMatrix out = x.matrix();
    for (double& v : out.data) {
        v = std::log(v);
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& xv = tp.value_of(ix);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += dc.data[i] / xv.data[i];
        }
    });
}

Value softmax_rows(Value x) {
    Tape& t = *x.tape();
    DenseMatrix out = x.matrix();
    for (std::size_t r = 0; r < out.rows; ++r) {
        double* row = out.row_ptr(r);
        double mx = row[0];
        for (std::size_t c = 1; c < out.cols; ++c) {
            mx = std::max(mx, row[c]);
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < out.cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < out.cols; ++c) {
            row[c] /= sum;
        }
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix](Tape& tp, std::uint32_t self) {
        // dX_row = S_row .* (dC_row - <dC_row, S_row>)
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& s = tp.value_of(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < s.rows; ++r) {
            const double* srow = s.row_ptr(r);
            const double* drow = dc.row_ptr(r);
            double inner = 0.0;
            for (std::size_t c = 0; c < s.cols; ++c) {
                inner += drow[c] * srow[c];
            }
            double* out_row = dx.row_ptr(r);
            for (std::size_t c = 0; c < s.cols; ++c) {
                out_row[c] += srow[c] * (drow[c] - inner);
            }
        }
    });
}

// -- reductions and reshapes ----------------------------------------------------

Value sum_all(Value x) {
    Tape& t = *x.tape();
    double acc = 0.0;
    for (double v : x.matrix().data) {
        acc += v;
    }
    const std::uint32_t ix = x.index();
    return t.emit(DenseMatrix(1, 1, acc), [ix](Tape& tp, std::uint32_t self) {
        const double d = tp.grad_ref(self).data[0];
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (double& v : dx.data) {
            v += d;
        }
    });
}

Value concat_cols(std::span<const Value> parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: no inputs");
    }
    Tape& t = *parts[0].tape();
    const std::size_t rows = parts[0].rows();
    std::size_t total_cols = 0;
    for (const Value& p : parts) {
        if (p.tape() != &t) {
            throw ContractError("concat_cols: mixed tapes");
        }
        if (p.rows() != rows) {
            throw ShapeError("concat_cols: row count mismatch");
        }
        total_cols += p.cols();
    }
    DenseMatrix out(rows, total_cols);
    std::vector<std::uint32_t> idx;
    std::vector<std::size_t> widths;
    std::size_t at = 0;
    for (const Value& p : parts) {
        const DenseMatrix& pv = p.matrix();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* src = pv.row_ptr(r);
            double* dst = out.row_ptr(r) + at;
            for (std::size_t c = 0; c < pv.cols; ++c) {
                dst[c] = src[c];
            }
        }
        idx.push_back(p.index());
        widths.push_back(pv.cols);
        at += pv.cols;
    }
    return t.emit(std::move(out), [idx, widths](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        std::size_t at = 0;
        for (std::size_t p = 0; p < idx.size(); ++p) {
            DenseMatrix& dp = tp.grad_buffer(idx[p]);
            for (std::size_t r = 0; r < dc.rows; ++r) {
                const double* src = dc.row_ptr(r) + at;
                double* dst = dp.row_ptr(r);
                for (std::size_t c = 0; c < widths[p]; ++c) {
                    dst[c] += src[c];
                }
            }
            at += widths[p];
        }
    });
}

Value slice_rows(Value x, std::size_t r0, std::size_t r1) {
    Tape& t = *x.tape();
    const DenseMatrix& xv = x.matrix();
    if (r0 > r1 || r1 > xv.rows) {
        throw ShapeError("slice_rows: range out of bounds");
    }
    DenseMatrix out(r1 - r0, xv.cols);
    for (std::size_t r = r0; r < r1; ++r) {
        const double* src = xv.row_ptr(r);
        double* dst = out.row_ptr(r - r0);
        for (std::size_t c = 0; c < xv.cols; ++c) {
            dst[c] = src[c];
        }
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix, r0](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < dc.rows; ++r) {
            const double* src = dc.row_ptr(r);
            double* dst = dx.row_ptr(r + r0);
            for (std::size_t c = 0; c < dc.cols; ++c) {
                dst[c] += src[c];
            }
        }
    });
}

Value slice_cols(Value x, std::size_t c0, std::size_t c1) {
    Tape& t = *x.tape();
    const DenseMatrix& xv = x.matrix();
    if (c0 > c1 || c1 > xv.cols) {
        throw ShapeError("slice_cols: range out of bounds");
    }
    DenseMatrix out(xv.rows, c1 - c0);
    for (std::size_t r = 0; r < xv.rows; ++r) {
        const double* src = xv.row_ptr(r) + c0;
        double* dst = out.row_ptr(r);
        for (std::size_t c = 0; c < out.cols; ++c) {
            dst[c] = src[c];
        }
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix, c0](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < dc.rows; ++r) {
            const double* src = dc.row_ptr(r);
            double* dst = dx.row_ptr(r) + c0;
            for (std::size_t c = 0; c < dc.cols; ++c) {
                dst[c] += src[c];
            }
        }
    });
}

Value gather_rows(Value x, const std::vector<std::uint32_t>& row_indices) {
    Tape& t = *x.tape();
    const DenseMatrix& xv = x.matrix();
    DenseMatrix out(row_indices.size(), xv.cols);
    for (std::size_t r = 0; r < row_indices.size(); ++r) {
        if (row_indices[r] >= xv.rows) {
            throw ShapeError("gather_rows: index out of range");
        }
        const double* src = xv.row_ptr(row_indices[r]);
        double* dst = out.row_ptr(r);
        for (std::size_t c = 0; c < xv.cols; ++c) {
            dst[c] = src[c];
        }
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix, row_indices](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < row_indices.size(); ++r) {
            const double* src = dc.row_ptr(r);
            double* dst = dx.row_ptr(row_indices[r]);
            for (std::size_t c = 0; c < dc.cols; ++c) {
                dst[c] += src[c];
            }
        }
    });
}

Value select_col_per_row(Value x, const std::vector<std::uint32_t>& col_per_row) {
    Tape& t = *x.tape();
    const DenseMatrix& xv = x.matrix();
    if (col_per_row.size() != xv.rows) {
        throw ShapeError("select_col_per_row: one column index per row required");
    }
    DenseMatrix out(xv.rows, 1);
    for (std::size_t r = 0; r < xv.rows; ++r) {
        if (col_per_row[r] >= xv.cols) {
            throw ShapeError("select_col_per_row: column index out of range");
        }
        out(r, 0) = xv(r, col_per_row[r]);
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix, col_per_row](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < col_per_row.size(); ++r) {
            dx(r, col_per_row[r]) += dc(r, 0);
        }
    });
}

Value rowwise_dot(Value a, Value b) {
    Tape& t = same_tape(a, b);
    const DenseMatrix& av = a.matrix();
    const DenseMatrix& bv = b.matrix();
    check_same_shape(av, bv, "rowwise_dot");
    DenseMatrix out(av.rows, 1);
    for (std::size_t r = 0; r < av.rows; ++r) {
        const double* arow = av.row_ptr(r);
        const double* brow = bv.row_ptr(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < av.cols; ++c) {
            acc += arow[c] * brow[c];
        }
        out(r, 0) = acc;
    }
    const std::uint32_t ia = a.index(), ib = b.index();
    return t.emit(std::move(out), [ia, ib](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& av = tp.value_of(ia);
        const DenseMatrix& bv = tp.value_of(ib);
        DenseMatrix& da = tp.grad_buffer(ia);
        DenseMatrix& db = tp.grad_buffer(ib);
        for (std::size_t r = 0; r < av.rows; ++r) {
            const double d = dc(r, 0);
            const double* arow = av.row_ptr(r);
            const double* brow = bv.row_ptr(r);
            double* darow = da.row_ptr(r);
            double* dbrow = db.row_ptr(r);
            for (std::size_t c = 0; c < av.cols; ++c) {
                darow[c] += d * brow[c];
                dbrow[c] += d * arow[c];
            }
        }
    });
}

Value mul_by_scalar_node(Value x, Value s) {
    Tape& t = same_tape(x, s);
    const DenseMatrix& sv = s.matrix();
    if (sv.rows != 1 || sv.cols != 1) {
        throw ShapeError("mul_by_scalar_node: scale must be 1x1");
    }
    const double sc = sv.data[0];
    DenseMatrix out = x.matrix();
    for (double& v : out.data) {
        v *= sc;
    }
    const std::uint32_t ix = x.index(), is = s.index();
    return t.emit(std::move(out), [ix, is](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& xv = tp.value_of(ix);
        const double sc = tp.value_of(is).data[0];
        DenseMatrix& dx = tp.grad_buffer(ix);
        double ds = 0.0;
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += sc * dc.data[i];
            ds += dc.data[i] * xv.data[i];
        }
        tp.grad_buffer(is).data[0] += ds;
    });
}

// -- graph aggregation ----------------------------------------------------------

Value pair_sum(Value s, Value t_col, std::shared_ptr<const EdgeGroups> groups) {
    Tape& t = same_tape(s, t_col);
    check_groups(*groups);
    const DenseMatrix& sv = s.matrix();
    const DenseMatrix& tv = t_col.matrix();
    if (sv.cols != 1 || tv.cols != 1) {
        throw ShapeError("pair_sum: inputs must be Nx1 columns");
    }
    DenseMatrix out(groups->pair_count(), 1);
    for (std::size_t p = 0; p < groups->pair_count(); ++p) {
        out(p, 0) = sv(groups->target[p], 0) + tv(groups->source[p], 0);
    }
    const std::uint32_t is = s.index(), it = t_col.index();
    std::shared_ptr<const EdgeGroups> g = std::move(groups);
    return t.emit(std::move(out), [is, it, g](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& ds = tp.grad_buffer(is);
        DenseMatrix& dt = tp.grad_buffer(it);
        for (std::size_t p = 0; p < g->pair_count(); ++p) {
            ds(g->target[p], 0) += dc(p, 0);
            dt(g->source[p], 0) += dc(p, 0);
        }
    });
}

Value segment_softmax(Value v, std::shared_ptr<const EdgeGroups> groups) {
    Tape& t = *v.tape();
    check_groups(*groups);
    const DenseMatrix& vv = v.matrix();
    if (vv.cols != 1 || vv.rows != groups->pair_count()) {
        throw ShapeError("segment_softmax: expected one score per pair");
    }
    DenseMatrix out(vv.rows, 1);
    for (std::size_t gidx = 0; gidx + 1 < groups->offsets.size(); ++gidx) {
        const std::uint32_t lo = groups->offsets[gidx];
        const std::uint32_t hi = groups->offsets[gidx + 1];
        if (lo == hi) {
            continue;
        }
        double mx = vv(lo, 0);
        for (std::uint32_t p = lo + 1; p < hi; ++p) {
            mx = std::max(mx, vv(p, 0));
        }
        double sum = 0.0;
        for (std::uint32_t p = lo; p < hi; ++p) {
            out(p, 0) = std::exp(vv(p, 0) - mx);
            sum += out(p, 0);
        }
        for (std::uint32_t p = lo; p < hi; ++p) {
            out(p, 0) /= sum;
        }
    }
    const std::uint32_t iv = v.index();
    std::shared_ptr<const EdgeGroups> g = std::move(groups);
    return t.emit(std::move(out), [iv, g](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& a = tp.value_of(self);
        DenseMatrix& dv = tp.grad_buffer(iv);
        for (std::size_t gidx = 0; gidx + 1 < g->offsets.size(); ++gidx) {
            const std::uint32_t lo = g->offsets[gidx];
            const std::uint32_t hi = g->offsets[gidx + 1];
            double inner = 0.0;
            for (std::uint32_t p = lo; p < hi; ++p) {
                inner += dc(p, 0) * a(p, 0);
            }
            for (std::uint32_t p = lo; p < hi; ++p) {
                dv(p, 0) += a(p, 0) * (dc(p, 0) - inner);
            }
        }
    });
}

Value edge_weighted_sum(Value w, Value h, std::shared_ptr<const EdgeGroups> groups) {
    Tape& t = same_tape(w, h);
    check_groups(*groups);
    const DenseMatrix& wv = w.matrix();
    const DenseMatrix& hv = h.matrix();
    if (wv.cols != 1 || wv.rows != groups->pair_count()) {
        throw ShapeError("edge_weighted_sum: expected one weight per pair");
    }
    const std::size_t n = groups->group_count();
    DenseMatrix out(n, hv.cols);
    for (std::size_t p = 0; p < groups->pair_count(); ++p) {
        const double wp = wv(p, 0);
        const double* src = hv.row_ptr(groups->source[p]);
        double* dst = out.row_ptr(groups->target[p]);
        for (std::size_t c = 0; c < hv.cols; ++c) {
            dst[c] += wp * src[c];
        }
    }
    const std::uint32_t iw = w.index(), ih = h.index();
    std::shared_ptr<const EdgeGroups> g = std::move(groups);
    return t.emit(std::move(out), [iw, ih, g](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        const DenseMatrix& wv = tp.value_of(iw);
        const DenseMatrix& hv = tp.value_of(ih);
        DenseMatrix& dw = tp.grad_buffer(iw);
        DenseMatrix& dh = tp.grad_buffer(ih);
        for (std::size_t p = 0; p < g->pair_count(); ++p) {
            const double* drow = dc.row_ptr(g->target[p]);
            const double* hrow = hv.row_ptr(g->source[p]);
            double* dhrow = dh.row_ptr(g->source[p]);
            const double wp = wv(p, 0);
            double acc = 0.0;
            for (std::size_t c = 0; c < hv.cols; ++c) {
                acc += drow[c] * hrow[c];
                dhrow[c] += wp * drow[c];
            }
            dw(p, 0) += acc;
        }
    });
}

Value dropout(Value x, double rate, RngStream& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ContractError("dropout: rate must be in [0, 1)");
    }
    if (!training || rate == 0.0) {
        return x;  // identity in eval mode; no node recorded
    }
    Tape& t = *x.tape();
    const DenseMatrix& xv = x.matrix();
    auto mask = std::make_shared<DenseMatrix>(xv.rows, xv.cols);
    const double keep_scale = 1.0 / (1.0 - rate);
    DenseMatrix out(xv.rows, xv.cols);
    for (std::size_t i = 0; i < xv.data.size(); ++i) {
        const double m = rng.uniform() < rate ? 0.0 : keep_scale;
        mask->data[i] = m;
        out.data[i] = m * xv.data[i];
    }
    const std::uint32_t ix = x.index();
    return t.emit(std::move(out), [ix, mask](Tape& tp, std::uint32_t self) {
        const DenseMatrix& dc = tp.grad_ref(self);
        DenseMatrix& dx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < dc.data.size(); ++i) {
            dx.data[i] += dc.data[i] * mask->data[i];
        }
    });
}

Value bce_with_logits_mean(Value scores, const DenseMatrix& targets) {
    Tape& t = *scores.tape();
    const DenseMatrix& sv = scores.matrix();
    check_same_shape(sv, targets, "bce_with_logits_mean");
    if (sv.data.empty()) {
        throw ContractError("bce_with_logits_mean: empty input");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < sv.data.size(); ++i) {
        const double s = sv.data[i];
        const double y = targets.data[i];
        acc += std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::fabs(s)));
    }
    const double inv_n = 1.0 / static_cast<double>(sv.data.size());
    auto tgt = std::make_shared<DenseMatrix>(targets);
    const std::uint32_t is = scores.index();
    return t.emit(DenseMatrix(1, 1, acc * inv_n), [is, tgt, inv_n](Tape& tp, std::uint32_t self) {
        const double d = tp.grad_ref(self).data[0] * inv_n;
        const DenseMatrix& sv = tp.value_of(is);
        DenseMatrix& ds = tp.grad_buffer(is);
        for (std::size_t i = 0; i < sv.data.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-sv.data[i]));
            ds.data[i] += d * (p - tgt->data[i]);
        }
    });
}

}  // namespace bikevol::core
