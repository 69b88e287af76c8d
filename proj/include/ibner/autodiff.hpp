#pragma once

// Define-by-run reverse-mode automatic differentiation over dense tensors.
//
// A Graph is a tape: every operation appends a node holding its forward value
// and a closure that pushes the node's gradient back to its inputs. Nodes are
// appended in evaluation order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ibner/error.hpp"
#include "ibner/tensor.hpp"

namespace ibner::ad {

class Graph;

/// Handle to a node in a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
};

class Graph {
public:
    /// Receives the node's own output and its accumulated gradient.
    using BackwardFn = std::function<void(Graph&, const Tensor& out, const Tensor& out_grad)>;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    /// Leaf holding a value that never receives gradient.
    Var constant(Tensor value) { return push("constant", std::move(value), false, {}, nullptr); }

    /// Leaf bound to a trainable parameter. Repeated calls with the same
    /// parameter return the same node so its contributions accumulate.
    Var param(Parameter& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
        Var v = push("param", p.value, grad_enabled_, {}, nullptr);
        nodes_[v.id].param = &p;
        param_nodes_.emplace(&p, v.id);
        return v;
    }

    bool binds(const Parameter& p) const { return param_nodes_.count(const_cast<Parameter*>(&p)) != 0; }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
    std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }

    /// Gradient from the last backward(); null when the node is off every
    /// differentiable path.
    const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }

    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    Var emit(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return emit(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var emit(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
        bool needs = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& in : inputs) {
            if (in.graph != this) throw Error(std::string(op) + ": input belongs to a different graph");
            ids.push_back(in.id);
            needs = needs || nodes_[in.id].needs_grad;
        }
        needs = needs && grad_enabled_;
        value.requires_grad = needs;
        return push(op, std::move(value), needs, std::move(ids), needs ? std::move(fn) : nullptr);
    }

    /// Gradient accumulator for node `id`, allocated as zeros on first use.
    Tensor& grad_buffer(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }

    /// Reverse sweep from a scalar loss. Every parameter bound to this graph
    /// has its gradient reset to zero and then receives d(loss)/d(param).
    void backward(Var loss) {
        if (loss.graph != this) throw Error("backward: loss belongs to a different graph");
        if (backward_done_) throw Error("backward: already called on this graph; call reset_gradients() first");
        const Tensor& lv = nodes_.at(loss.id).value;
        if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
        backward_done_ = true;

        for (auto& entry : param_nodes_) entry.first->zero_grad();
        if (!nodes_[loss.id].needs_grad) return;

        grad_buffer(loss.id)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n.value, n.grad);
            if (n.param != nullptr) {
                auto& pg = n.param->grad.storage();
                const auto& g = n.grad.storage();
                for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
            }
        }
    }

    /// Clears node gradients so backward() may run again.
    void reset_gradients() {
        for (auto& n : nodes_) n.grad = Tensor();
        backward_done_ = false;
    }

private:
    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool needs_grad = false;
    };

    Var push(std::string_view op, Tensor value, bool needs, std::vector<std::size_t> inputs, BackwardFn fn) {
        Node n;
        n.op = std::string(op);
        n.value = std::move(value);
        n.needs_grad = needs;
        n.inputs = std::move(inputs);
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<Parameter*, std::size_t> param_nodes_;
    bool grad_enabled_ = true;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline void require_same(std::string_view op, Var a, Var b) {
    if (a.graph != b.graph) throw Error(std::string(op) + ": operands belong to different graphs");
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

inline void require_rank(std::string_view op, const Tensor& t, std::size_t lo, std::size_t hi) {
    if (t.rank() < lo || t.rank() > hi) {
        throw ShapeError(std::string(op) + ": unsupported rank for shape " + shape_str(t.shape()));
    }
}

/// buf += scale * delta, skipped when `target` is off the gradient path.
inline void accumulate(Graph& g, Var target, const Tensor& delta, double s = 1.0) {
    if (!g.needs_grad(target.id)) return;
    auto& buf = g.grad_buffer(target.id).storage();
    const auto& d = delta.storage();
    for (std::size_t i = 0; i < d.size(); ++i) buf[i] += s * d[i];
}

/// Elementwise op whose derivative is expressed through input x and output y.
template <class F, class D>
Var pointwise(std::string_view op, Var a, F f, D dydx) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return a.graph->emit(op, std::move(y), {a}, [a, dydx](Graph& g, const Tensor& out, const Tensor& go) {
        const Tensor& x = a.value();
        auto& buf = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i] * dydx(x[i], out[i]);
    });
}

inline double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// Elementwise -----------------------------------------------------------------

inline Var add(Var a, Var b) {
    detail::require_same("add", a, b);
    Tensor y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return a.graph->emit("add", std::move(y), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
        detail::accumulate(g, a, go);
        detail::accumulate(g, b, go);
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same("sub", a, b);
    Tensor y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    return a.graph->emit("sub", std::move(y), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
        detail::accumulate(g, a, go);
        detail::accumulate(g, b, go, -1.0);
    });
}

inline Var mul(Var a, Var b) {
    detail::require_same("mul", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    return a.graph->emit("mul", std::move(y), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
        const auto& av = a.value();
        const auto& bv = b.value();
        if (g.needs_grad(a.id)) {
            auto& buf = g.grad_buffer(a.id);
            for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i] * bv[i];
        }
        if (g.needs_grad(b.id)) {
            auto& buf = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i] * av[i];
        }
    });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double c) {
    return detail::pointwise(
        "scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
    return detail::pointwise(
        "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var exp(Var a) {
    return detail::pointwise(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    return detail::pointwise(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a) {
    return detail::pointwise(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
    return detail::pointwise("sigmoid", a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

// Linear algebra ---------------------------------------------------------------

/// A[m,k] . B[k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
        detail::shape_fail("matmul", A.shape(), B.shape());
    }
    const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
    Tensor C(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
        }
    }
    return a.graph->emit("matmul", std::move(C), {a, b}, [a, b, m, k, n](Graph& g, const Tensor&, const Tensor& go) {
        const Tensor& A = a.value();
        const Tensor& B = b.value();
        if (g.needs_grad(a.id)) {
            auto& dA = g.grad_buffer(a.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * B[p * n + j];
                    dA[i * k + p] += s;
                }
        }
        if (g.needs_grad(b.id)) {
            auto& dB = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * go[i * n + j];
                }
        }
    });
}

namespace detail {

// y = x W^T (+ b); x is [in] or [r,in], W is [out,in].
inline Var linear_impl(std::string_view op, Var x, Var w, const Var* b) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    require_rank(op, X, 1, 2);
    if (W.rank() != 2 || X.cols() != W.shape()[1]) shape_fail(op, W.shape(), X.shape());
    const std::size_t out = W.shape()[0], in = W.shape()[1], rows = X.rows();
    if (b != nullptr && b->shape() != Shape{out}) shape_fail(op, W.shape(), b->shape());
    Tensor Y(X.rank() == 1 ? Shape{out} : Shape{rows, out});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
            double s = b != nullptr ? b->value()[o] : 0.0;
            const double* wr = &W[o * in];
            const double* xr = &X[r * in];
            for (std::size_t i = 0; i < in; ++i) s += wr[i] * xr[i];
            Y[r * out + o] = s;
        }
    }
    auto backward = [x, w, out, in, rows, has_b = b != nullptr, bias = b ? *b : Var{}](
                        Graph& g, const Tensor&, const Tensor& go) {
        const Tensor& X = x.value();
        const Tensor& W = w.value();
        if (g.needs_grad(x.id)) {
            auto& dX = g.grad_buffer(x.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out; ++o) {
                    const double gro = go[r * out + o];
                    if (gro == 0.0) continue;
                    for (std::size_t i = 0; i < in; ++i) dX[r * in + i] += gro * W[o * in + i];
                }
        }
        if (g.needs_grad(w.id)) {
            auto& dW = g.grad_buffer(w.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out; ++o) {
                    const double gro = go[r * out + o];
                    if (gro == 0.0) continue;
                    for (std::size_t i = 0; i < in; ++i) dW[o * in + i] += gro * X[r * in + i];
                }
        }
        if (has_b && g.needs_grad(bias.id)) {
            auto& dB = g.grad_buffer(bias.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out; ++o) dB[o] += go[r * out + o];
        }
    };
    if (b != nullptr) return x.graph->emit(op, std::move(Y), {x, w, *b}, backward);
    return x.graph->emit(op, std::move(Y), {x, w}, backward);
}

}  // namespace detail

/// W.x for x of shape [in], or row-wise x W^T for x of shape [rows, in].
inline Var linear(Var x, Var w) { return detail::linear_impl("linear", x, w, nullptr); }

/// W.x + b, row-wise for matrices.
inline Var affine(Var x, Var w, Var b) { return detail::linear_impl("affine", x, w, &b); }

// Structural ----------------------------------------------------------------------

/// Concatenation along the last axis. All parts are vectors, or all are
/// matrices with the same row count.
inline Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Tensor& first = parts[0].value();
    detail::require_rank("concat", first, 1, 2);
    const std::size_t rows = first.rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Tensor& t = p.value();
        if (t.rank() != first.rank() || t.rows() != rows) detail::shape_fail("concat", first.shape(), t.shape());
        widths.push_back(t.cols());
        total += t.cols();
    }
    Tensor Y(first.rank() == 1 ? Shape{total} : Shape{rows, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& t = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) Y[r * total + off + c] = t[r * widths[k] + c];
        off += widths[k];
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return parts[0].graph->emit("concat", std::move(Y), parts,
                                [ins, widths, rows, total](Graph& g, const Tensor&, const Tensor& go) {
                                    std::size_t off = 0;
                                    for (std::size_t k = 0; k < ins.size(); ++k) {
                                        if (g.needs_grad(ins[k].id)) {
                                            auto& buf = g.grad_buffer(ins[k].id);
                                            for (std::size_t r = 0; r < rows; ++r)
                                                for (std::size_t c = 0; c < widths[k]; ++c)
                                                    buf[r * widths[k] + c] += go[r * total + off + c];
                                        }
                                        off += widths[k];
                                    }
                                });
}

inline Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Stacks vectors [c] and/or matrices [r,c] vertically into [sum r, c].
inline Var vstack(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("vstack: no inputs");
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    std::vector<std::size_t> counts;
    for (const auto& p : parts) {
        const Tensor& t = p.value();
        detail::require_rank("vstack", t, 1, 2);
        if (t.cols() != cols) detail::shape_fail("vstack", parts[0].shape(), t.shape());
        counts.push_back(t.rows());
        rows += t.rows();
    }
    Tensor Y(Shape{rows, cols});
    std::size_t r0 = 0;
    for (const auto& p : parts) {
        const auto& src = p.value().storage();
        std::copy(src.begin(), src.end(), Y.storage().begin() + static_cast<std::ptrdiff_t>(r0 * cols));
        r0 += p.value().rows();
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return parts[0].graph->emit("vstack", std::move(Y), parts, [ins, cols](Graph& g, const Tensor&, const Tensor& go) {
        std::size_t off = 0;
        for (const auto& in : ins) {
            const std::size_t n = in.value().size();
            if (g.needs_grad(in.id)) {
                auto& buf = g.grad_buffer(in.id);
                for (std::size_t i = 0; i < n; ++i) buf[i] += go[off + i];
            }
            off += n;
        }
        (void)cols;
    });
}

/// Contiguous slice along the last axis: [n] -> [len], [r,n] -> [r,len].
inline Var slice(Var a, std::size_t begin, std::size_t len) {
    const Tensor& A = a.value();
    detail::require_rank("slice", A, 1, 2);
    if (len == 0 || begin + len > A.cols()) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                         ") out of bounds for shape " + shape_str(A.shape()));
    }
    const std::size_t rows = A.rows(), cols = A.cols();
    Tensor Y(A.rank() == 1 ? Shape{len} : Shape{rows, len});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) Y[r * len + c] = A[r * cols + begin + c];
    return a.graph->emit("slice", std::move(Y), {a}, [a, begin, len, rows, cols](Graph& g, const Tensor&, const Tensor& go) {
        auto& buf = g.grad_buffer(a.id);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c) buf[r * cols + begin + c] += go[r * len + c];
    });
}

/// Row gather: M[R,c], indices -> [n,c]. Duplicate indices accumulate.
inline Var gather_rows(Var m, std::span<const std::size_t> idx) {
    const Tensor& M = m.value();
    if (M.rank() != 2) throw ShapeError("gather_rows: expected matrix, got " + shape_str(M.shape()));
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    const std::size_t R = M.shape()[0], c = M.shape()[1];
    Tensor Y(Shape{idx.size(), c});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= R) {
            throw ShapeError("gather_rows: index " + std::to_string(idx[k]) + " out of range for shape " +
                             shape_str(M.shape()));
        }
        std::copy_n(&M[idx[k] * c], c, &Y[k * c]);
    }
    std::vector<std::size_t> ids(idx.begin(), idx.end());
    return m.graph->emit("gather_rows", std::move(Y), {m}, [m, ids, c](Graph& g, const Tensor&, const Tensor& go) {
        auto& buf = g.grad_buffer(m.id);
        for (std::size_t k = 0; k < ids.size(); ++k)
            for (std::size_t j = 0; j < c; ++j) buf[ids[k] * c + j] += go[k * c + j];
    });
}

/// Single row of a matrix as a vector [c].
inline Var row(Var m, std::size_t i) {
    const Tensor& M = m.value();
    if (M.rank() != 2) throw ShapeError("row: expected matrix, got " + shape_str(M.shape()));
    if (i >= M.shape()[0]) {
        throw ShapeError("row: index " + std::to_string(i) + " out of range for shape " + shape_str(M.shape()));
    }
    const std::size_t c = M.shape()[1];
    Tensor Y(Shape{c});
    std::copy_n(&M[i * c], c, &Y[0]);
    return m.graph->emit("row", std::move(Y), {m}, [m, i, c](Graph& g, const Tensor&, const Tensor& go) {
        auto& buf = g.grad_buffer(m.id);
        for (std::size_t j = 0; j < c; ++j) buf[i * c + j] += go[j];
    });
}

/// Inclusive row range [first, last] for range_mean.
struct RowRange {
    std::size_t first;
    std::size_t last;
};

/// For each range, the arithmetic mean of rows first..last of M -> [n,c].
inline Var range_mean(Var m, std::span<const RowRange> ranges) {
    const Tensor& M = m.value();
    if (M.rank() != 2) throw ShapeError("range_mean: expected matrix, got " + shape_str(M.shape()));
    if (ranges.empty()) throw ShapeError("range_mean: empty range list");
    const std::size_t R = M.shape()[0], c = M.shape()[1];
    Tensor Y(Shape{ranges.size(), c});
    for (std::size_t k = 0; k < ranges.size(); ++k) {
        const auto [lo, hi] = ranges[k];
        if (lo > hi || hi >= R) {
            throw ShapeError("range_mean: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                             "] invalid for shape " + shape_str(M.shape()));
        }
        for (std::size_t t = lo; t <= hi; ++t)
            for (std::size_t j = 0; j < c; ++j) Y[k * c + j] += M[t * c + j];
        const double inv = 1.0 / static_cast<double>(hi - lo + 1);
        for (std::size_t j = 0; j < c; ++j) Y[k * c + j] *= inv;
    }
    std::vector<RowRange> rs(ranges.begin(), ranges.end());
    return m.graph->emit("range_mean", std::move(Y), {m}, [m, rs, c](Graph& g, const Tensor&, const Tensor& go) {
        auto& buf = g.grad_buffer(m.id);
        for (std::size_t k = 0; k < rs.size(); ++k) {
            const double inv = 1.0 / static_cast<double>(rs[k].last - rs[k].first + 1);
            for (std::size_t t = rs[k].first; t <= rs[k].last; ++t)
                for (std::size_t j = 0; j < c; ++j) buf[t * c + j] += go[k * c + j] * inv;
        }
    });
}

/// Mean of rows first..last (inclusive) as a vector [c].
inline Var mean_rows(Var m, std::size_t first, std::size_t last) {
    RowRange r{first, last};
    return row(range_mean(m, std::span<const RowRange>(&r, 1)), 0);
}

inline Var reshape(Var a, Shape shape) {
    if (shape_numel(shape) != a.value().size()) detail::shape_fail("reshape", a.shape(), shape);
    Tensor Y(std::move(shape), a.value().storage());
    return a.graph->emit("reshape", std::move(Y), {a}, [a](Graph& g, const Tensor&, const Tensor& go) {
        auto& buf = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i];
    });
}

// Reductions and losses -----------------------------------------------------------

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().storage()) s += v;
    return a.graph->emit("sum", Tensor::scalar(s), {a}, [a](Graph& g, const Tensor&, const Tensor& go) {
        auto& buf = g.grad_buffer(a.id);
        const double gv = go[0];
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += gv;
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Fused log-softmax + negative log-likelihood, summed over rows.
/// logits is [V] with one target, or [r,V] with r targets.
inline Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets) {
    const Tensor& L = logits.value();
    detail::require_rank("softmax_cross_entropy", L, 1, 2);
    const std::size_t rows = L.rows(), V = L.cols();
    if (targets.size() != rows) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(L.shape()));
    }
    Tensor probs(Shape{rows, V});
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= V) throw ShapeError("softmax_cross_entropy: target id out of range");
        const double* x = &L[r * V];
        const double mx = *std::max_element(x, x + V);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(x[v] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t v = 0; v < V; ++v) probs[r * V + v] = std::exp(x[v] - lse);
        loss += lse - x[targets[r]];
    }
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return logits.graph->emit("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                              [logits, probs = std::move(probs), tg, V](Graph& g, const Tensor&, const Tensor& go) {
                                  auto& buf = g.grad_buffer(logits.id);
                                  const double gv = go[0];
                                  for (std::size_t r = 0; r < tg.size(); ++r) {
                                      for (std::size_t v = 0; v < V; ++v) buf[r * V + v] += gv * probs[r * V + v];
                                      buf[r * V + tg[r]] -= gv;
                                  }
                              });
}

/// Numerically stable sigmoid + binary cross-entropy, summed over all entries.
inline Var bce_with_logits(Var logits, const Tensor& targets) {
    const Tensor& X = logits.value();
    if (X.shape() != targets.shape()) detail::shape_fail("bce_with_logits", X.shape(), targets.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double x = X[i];
        loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return logits.graph->emit("bce_with_logits", Tensor::scalar(loss), {logits},
                              [logits, targets](Graph& g, const Tensor&, const Tensor& go) {
                                  const Tensor& X = logits.value();
                                  auto& buf = g.grad_buffer(logits.id);
                                  for (std::size_t i = 0; i < X.size(); ++i) {
                                      buf[i] += go[0] * (detail::stable_sigmoid(X[i]) - targets[i]);
                                  }
                              });
}

// Value-level helpers (no graph) ----------------------------------------------------

/// Row-wise softmax of a [V] or [r,V] tensor.
inline Tensor softmax(const Tensor& logits) {
    Tensor out(logits.shape());
    const std::size_t rows = logits.rows(), V = logits.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &logits[r * V];
        const double mx = *std::max_element(x, x + V);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(x[v] - mx);
        for (std::size_t v = 0; v < V; ++v) out[r * V + v] = std::exp(x[v] - mx) / z;
    }
    return out;
}

inline Tensor log_softmax(const Tensor& logits) {
    Tensor out(logits.shape());
    const std::size_t rows = logits.rows(), V = logits.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &logits[r * V];
        const double mx = *std::max_element(x, x + V);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(x[v] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t v = 0; v < V; ++v) out[r * V + v] = x[v] - lse;
    }
    return out;
}

inline double sigmoid(double x) { return detail::stable_sigmoid(x); }

}  // namespace ibner::ad
