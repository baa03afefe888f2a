#ifndef FTP_AUTODIFF_HPP
#define FTP_AUTODIFF_HPP

#include "tensor.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

/**
 * @file autodiff.hpp
 *
 * @brief Reverse-mode differentiation over whole-tensor operations.
 *
 * Every differentiable op produces a `Var` whose node remembers its parents and
 * a backward closure. `backward()` orders the reachable nodes topologically
 * (the tape) and replays the closures in reverse, so each node's closure runs
 * exactly once. Recording is skipped when no input requires a gradient or when
 * a `NoGradGuard` is alive on the current thread.
 */

namespace ftp {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Tensor& g) {
        if (!requires_grad) {
            return;
        }
        if (grad.empty()) {
            grad = g;
        } else {
            kernels::axpy(1.0, g, grad);
        }
    }
};

namespace detail {
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled()) { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Handle to a node in the computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    /// Mutable access for optimizers and finite-difference perturbation.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }

    /// Gradient after backward; zeros if nothing flowed into this node.
    Tensor grad() const {
        if (node_->grad.empty()) {
            return Tensor(node_->value.shape());
        }
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = Tensor(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    const NodePtr& node() const { return node_; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Identity comparison: true when both handles share one node.
    bool same_node(const Var& other) const { return node_ == other.node_; }

private:
    NodePtr node_;
};

/// Creates the output node of an op, wiring parents only when recording is needed.
inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (detail::grad_enabled()) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (auto& in : inputs) {
                node->parents.push_back(in.node());
            }
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Var(std::move(node));
}

/// Runs reverse-mode differentiation from a scalar root.
inline void backward(const Var& root) {
    if (root.value().numel() != 1) {
        throw ContractError("backward: root must be scalar, got shape " + to_string(root.shape()));
    }
    if (!root.requires_grad()) {
        return;
    }

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->backward_fn) {
            n->grad = Tensor();
        }
    }
    root.node()->grad = Tensor(root.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    Tensor out = kernels::matmul(a.value(), b.value());
    add_macs(static_cast<std::uint64_t>(a.shape()[0]) * a.shape()[1] * b.shape()[1]);
    return make_result(std::move(out), {a, b}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.accumulate(kernels::matmul_nt(self.grad, pb.value));
        }
        if (pb.requires_grad) {
            pb.accumulate(kernels::matmul_tn(pa.value, self.grad));
        }
    });
}

/// a * b^T without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b) {
    Tensor out = kernels::matmul_nt(a.value(), b.value());
    add_macs(static_cast<std::uint64_t>(a.shape()[0]) * a.shape()[1] * b.shape()[0]);
    return make_result(std::move(out), {a, b}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.accumulate(kernels::matmul(self.grad, pb.value));
        }
        if (pb.requires_grad) {
            pb.accumulate(kernels::matmul_tn(self.grad, pa.value));
        }
    });
}

inline Var transpose(const Var& a) {
    return make_result(kernels::transpose(a.value()), {a},
                       [](Node& self) { self.parents[0]->accumulate(kernels::transpose(self.grad)); });
}

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    kernels::axpy(1.0, b.value(), out);
    return make_result(std::move(out), {a, b}, [](Node& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate(self.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    kernels::axpy(-1.0, b.value(), out);
    return make_result(std::move(out), {a, b}, [](Node& self) {
        self.parents[0]->accumulate(self.grad);
        if (self.parents[1]->requires_grad) {
            Tensor neg(self.grad.shape());
            kernels::axpy(-1.0, self.grad, neg);
            self.parents[1]->accumulate(neg);
        }
    });
}

/// Element-wise product.
inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a.value()[i] * b.value()[i];
    }
    return make_result(std::move(out), {a, b}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor g(self.grad.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] = self.grad[i] * pb.value[i];
            }
            pa.accumulate(g);
        }
        if (pb.requires_grad) {
            Tensor g(self.grad.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] = self.grad[i] * pa.value[i];
            }
            pb.accumulate(g);
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data()) {
        v *= s;
    }
    return make_result(std::move(out), {a}, [s](Node& self) {
        Tensor g = self.grad;
        for (double& v : g.data()) {
            v *= s;
        }
        self.parents[0]->accumulate(g);
    });
}

/// Adds a length-C bias (any shape with C elements) to every row of an N x C matrix.
inline Var add_bias(const Var& x, const Var& bias) {
    require_rank(x.value(), 2, "add_bias");
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    if (bias.value().numel() != c) {
        throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match width of " +
                         to_string(x.shape()));
    }
    Tensor out = x.value();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            out(r, j) += bias.value()[j];
        }
    }
    return make_result(std::move(out), {x, bias}, [n, c](Node& self) {
        self.parents[0]->accumulate(self.grad);
        auto& pb = *self.parents[1];
        if (pb.requires_grad) {
            Tensor g(pb.value.shape());
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < c; ++j) {
                    g[j] += self.grad(r, j);
                }
            }
            pb.accumulate(g);
        }
    });
}

inline Var softmax_rows(const Var& x) {
    return make_result(kernels::softmax_rows(x.value()), {x}, [](Node& self) {
        const Tensor& y = self.value;
        Tensor g(y.shape());
        for (std::size_t r = 0; r < y.dim(0); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.dim(1); ++c) {
                dot += self.grad(r, c) * y(r, c);
            }
            for (std::size_t c = 0; c < y.dim(1); ++c) {
                g(r, c) = y(r, c) * (self.grad(r, c) - dot);
            }
        }
        self.parents[0]->accumulate(g);
    });
}

/// Per-row layer normalization with learned scale and shift (both length C).
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    require_rank(x.value(), 2, "layer_norm");
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    if (gamma.value().numel() != c || beta.value().numel() != c) {
        throw ShapeError("layer_norm: scale/shift must have " + std::to_string(c) + " elements");
    }
    Tensor xhat({n, c});
    std::vector<double> inv_std(n);
    Tensor out({n, c});
    for (std::size_t r = 0; r < n; ++r) {
        auto in = x.value().row(r);
        double mean = 0.0;
        for (double v : in) {
            mean += v;
        }
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (double v : in) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(c);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat(r, j) = (in[j] - mean) * inv_std[r];
            out(r, j) = xhat(r, j) * gamma.value()[j] + beta.value()[j];
        }
    }
    return make_result(std::move(out), {x, gamma, beta},
                       [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c](Node& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           auto& pb = *self.parents[2];
                           const Tensor& g = self.grad;
                           if (px.requires_grad) {
                               Tensor gx({n, c});
                               const auto cd = static_cast<double>(c);
                               for (std::size_t r = 0; r < n; ++r) {
                                   double mean_d = 0.0, mean_dx = 0.0;
                                   for (std::size_t j = 0; j < c; ++j) {
                                       const double d = g(r, j) * pg.value[j];
                                       mean_d += d;
                                       mean_dx += d * xhat(r, j);
                                   }
                                   mean_d /= cd;
                                   mean_dx /= cd;
                                   for (std::size_t j = 0; j < c; ++j) {
                                       const double d = g(r, j) * pg.value[j];
                                       gx(r, j) = inv_std[r] * (d - mean_d - xhat(r, j) * mean_dx);
                                   }
                               }
                               px.accumulate(gx);
                           }
                           if (pg.requires_grad || pb.requires_grad) {
                               Tensor gg(pg.value.shape()), gb(pb.value.shape());
                               for (std::size_t r = 0; r < n; ++r) {
                                   for (std::size_t j = 0; j < c; ++j) {
                                       gg[j] += g(r, j) * xhat(r, j);
                                       gb[j] += g(r, j);
                                   }
                               }
                               pg.accumulate(gg);
                               pb.accumulate(gb);
                           }
                       });
}

/// Exact (erf-based) GELU.
inline Var gelu(const Var& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double v = x.value()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    }
    return make_result(std::move(out), {x}, [](Node& self) {
        const Tensor& in = self.parents[0]->value;
        Tensor g(in.shape());
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double v = in[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] = self.grad[i] * (cdf + v * pdf);
        }
        self.parents[0]->accumulate(g);
    });
}

inline Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_result(std::move(out), {x}, [](Node& self) {
        self.parents[0]->accumulate(self.grad.reshaped(self.parents[0]->value.shape()));
    });
}

inline Var upsample_bilinear(const Var& x, std::size_t factor) {
    Tensor out = kernels::upsample_bilinear(x.value(), factor);
    return make_result(std::move(out), {x}, [factor](Node& self) {
        auto& p = *self.parents[0];
        p.accumulate(kernels::upsample_bilinear_adjoint(self.grad, p.value.shape(), factor));
    });
}

namespace detail {
inline void check_row_indices(std::span<const std::size_t> idx, std::size_t n, const char* what) {
    std::vector<char> used(n, 0);
    for (auto i : idx) {
        if (i >= n) {
            throw IndexError(std::string(what) + ": row index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(n) + ")");
        }
        if (used[i]) {
            throw IndexError(std::string(what) + ": duplicate row index " + std::to_string(i));
        }
        used[i] = 1;
    }
}
}  // namespace detail

/// Rows of x at the given (unique) indices, in the given order.
inline Var gather_rows(const Var& x, std::span<const std::size_t> idx) {
    require_rank(x.value(), 2, "gather_rows");
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    detail::check_row_indices(idx, n, "gather_rows");
    if (idx.empty()) {
        throw IndexError("gather_rows: empty index list");
    }
    std::vector<std::size_t> rows(idx.begin(), idx.end());
    Tensor out({rows.size(), c});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(x.value().row(rows[r]).begin(), c, out.row(r).begin());
    }
    return make_result(std::move(out), {x}, [rows = std::move(rows), c](Node& self) {
        auto& p = *self.parents[0];
        Tensor g(p.value.shape());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                g(rows[r], j) += self.grad(r, j);
            }
        }
        p.accumulate(g);
    });
}

/// Copy of base with the rows at idx overwritten by the rows of `rows`.
inline Var scatter_rows(const Var& base, std::span<const std::size_t> idx, const Var& rows) {
    require_rank(base.value(), 2, "scatter_rows");
    require_rank(rows.value(), 2, "scatter_rows");
    const std::size_t n = base.shape()[0], c = base.shape()[1];
    if (rows.shape()[1] != c || rows.shape()[0] != idx.size()) {
        throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices with rows " +
                         to_string(rows.shape()) + " into base " + to_string(base.shape()));
    }
    detail::check_row_indices(idx, n, "scatter_rows");
    std::vector<std::size_t> where(idx.begin(), idx.end());
    Tensor out = base.value();
    for (std::size_t r = 0; r < where.size(); ++r) {
        std::copy_n(rows.value().row(r).begin(), c, out.row(where[r]).begin());
    }
    return make_result(std::move(out), {base, rows}, [where = std::move(where), c](Node& self) {
        auto& pbase = *self.parents[0];
        auto& prows = *self.parents[1];
        if (pbase.requires_grad) {
            Tensor g = self.grad;
            for (auto r : where) {
                std::fill_n(g.row(r).begin(), c, 0.0);
            }
            pbase.accumulate(g);
        }
        if (prows.requires_grad) {
            Tensor g(prows.value.shape());
            for (std::size_t r = 0; r < where.size(); ++r) {
                std::copy_n(self.grad.row(where[r]).begin(), c, g.row(r).begin());
            }
            prows.accumulate(g);
        }
    });
}

/// Stacks 2-D tensors of equal width along the row axis.
inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t c = parts[0].shape().at(1);
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank(p.value(), 2, "concat_rows");
        if (p.shape()[1] != c) {
            throw ShapeError("concat_rows: width mismatch " + to_string(parts[0].shape()) + " vs " +
                             to_string(p.shape()));
        }
        total += p.shape()[0];
    }
    Tensor out({total, c});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + offset * c);
        offset += p.shape()[0];
    }
    return make_result(std::move(out), parts, [c](Node& self) {
        std::size_t off = 0;
        for (auto& parent : self.parents) {
            const std::size_t rows = parent->value.dim(0);
            if (parent->requires_grad) {
                Tensor g({rows, c});
                std::copy_n(self.grad.data().begin() + off * c, rows * c, g.data().begin());
                parent->accumulate(g);
            }
            off += rows;
        }
    });
}

/// Rows [begin, begin + count).
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
    require_rank(x.value(), 2, "slice_rows");
    const std::size_t c = x.shape()[1];
    if (count == 0 || begin + count > x.shape()[0]) {
        throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + to_string(x.shape()));
    }
    Tensor out({count, c});
    std::copy_n(x.value().data().begin() + begin * c, count * c, out.data().begin());
    return make_result(std::move(out), {x}, [begin, count, c](Node& self) {
        auto& p = *self.parents[0];
        Tensor g(p.value.shape());
        std::copy_n(self.grad.data().begin(), count * c, g.data().begin() + begin * c);
        p.accumulate(g);
    });
}

/// Columns [begin, begin + count).
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
    require_rank(x.value(), 2, "slice_cols");
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    if (count == 0 || begin + count > c) {
        throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + to_string(x.shape()));
    }
    Tensor out({n, count});
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(x.value().row(r).begin() + begin, count, out.row(r).begin());
    }
    return make_result(std::move(out), {x}, [begin, count, n](Node& self) {
        auto& p = *self.parents[0];
        Tensor g(p.value.shape());
        for (std::size_t r = 0; r < n; ++r) {
            std::copy_n(self.grad.row(r).begin(), count, g.row(r).begin() + begin);
        }
        p.accumulate(g);
    });
}

/// Joins 2-D tensors with equal row counts side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    const std::size_t n = parts[0].shape().at(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank(p.value(), 2, "concat_cols");
        if (p.shape()[0] != n) {
            throw ShapeError("concat_cols: row count mismatch " + to_string(parts[0].shape()) + " vs " +
                             to_string(p.shape()));
        }
        total += p.shape()[1];
    }
    Tensor out({n, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t r = 0; r < n; ++r) {
            std::copy_n(p.value().row(r).begin(), w, out.row(r).begin() + off);
        }
        off += w;
    }
    return make_result(std::move(out), parts, [n](Node& self) {
        std::size_t o = 0;
        for (auto& parent : self.parents) {
            const std::size_t w = parent->value.dim(1);
            if (parent->requires_grad) {
                Tensor g({n, w});
                for (std::size_t r = 0; r < n; ++r) {
                    std::copy_n(self.grad.row(r).begin() + o, w, g.row(r).begin());
                }
                parent->accumulate(g);
            }
            o += w;
        }
    });
}

inline Var sum(const Var& x) {
    double total = 0.0;
    for (double v : x.value().data()) {
        total += v;
    }
    return make_result(Tensor::scalar(total), {x}, [](Node& self) {
        self.parents[0]->accumulate(Tensor(self.parents[0]->value.shape(), self.grad[0]));
    });
}

inline Var mean(const Var& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.value().numel()));
}

/// Sum of squares.
inline Var sq_norm(const Var& x) {
    double total = 0.0;
    for (double v : x.value().data()) {
        total += v * v;
    }
    return make_result(Tensor::scalar(total), {x}, [](Node& self) {
        auto& p = *self.parents[0];
        Tensor g(p.value.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) {
            g[i] = 2.0 * p.value[i] * self.grad[0];
        }
        p.accumulate(g);
    });
}

/// Mean of squared element-wise differences.
inline Var mse(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mse");
    const auto n = static_cast<double>(a.value().numel());
    double total = 0.0;
    for (std::size_t i = 0; i < a.value().numel(); ++i) {
        const double d = a.value()[i] - b.value()[i];
        total += d * d;
    }
    return make_result(Tensor::scalar(total / n), {a, b}, [n](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        Tensor g(pa.value.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) {
            g[i] = 2.0 * (pa.value[i] - pb.value[i]) / n * self.grad[0];
        }
        pa.accumulate(g);
        if (pb.requires_grad) {
            for (double& v : g.data()) {
                v = -v;
            }
            pb.accumulate(g);
        }
    });
}

}  // namespace ftp

#endif
