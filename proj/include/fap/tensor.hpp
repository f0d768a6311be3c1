#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "fap/rng.hpp"

// Reverse-mode autodiff over dense row-major double tensors. A forward pass
// records an implicit DAG through shared parent pointers; backward() walks it
// once in reverse topological order. Leaves (parameters, attacked pixels)
// accumulate gradients; everything else is transient.

namespace fap {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> v;   // values, row-major
    std::vector<double> g;   // gradient buffer, lazily allocated
    bool leaf = false;
    bool needs_grad = false;
    bool consumed = false;   // set on the output node once backward ran
    std::vector<NodePtr> parents;
    // accumulates parent gradients given this node's gradient
    std::function<void(Node&)> backfn;

    double* grad_data() {
        if (g.empty()) g.assign(v.size(), 0.0);
        return g.data();
    }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->v.assign(numel(n->shape), 0.0);
        return Tensor(n);
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.node()->v) x = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> data) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("from_data: element count mismatch for shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->v = std::move(data);
        return Tensor(n);
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.node()->v) x = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->v.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
    std::size_t ndim() const { return n_->shape.size(); }

    const std::vector<double>& values() const { return n_->v; }
    std::vector<double>& values() { return n_->v; }
    double value() const {
        if (n_->v.size() != 1) throw std::invalid_argument("value(): tensor is not scalar");
        return n_->v[0];
    }

    bool is_leaf() const { return n_->leaf; }
    void set_leaf(bool on = true) {
        n_->leaf = on;
        n_->needs_grad = on;
    }

    bool needs_grad() const { return n_->needs_grad; }

    // gradient w.r.t. this tensor after backward(); zeros if unreachable
    std::vector<double> grad() const {
        if (n_->g.empty()) return std::vector<double>(n_->v.size(), 0.0);
        return n_->g;
    }
    void zero_grad() { n_->g.clear(); }

    // value copy detached from the graph
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->shape = n_->shape;
        n->v = n_->v;
        return Tensor(n);
    }

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

namespace detail {

inline NodePtr make_result(Shape shape, std::vector<NodePtr> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->v.assign(numel(n->shape), 0.0);
    for (const auto& p : parents)
        if (p->needs_grad) n->needs_grad = true;
    if (n->needs_grad) n->parents = std::move(parents);
    return n;
}

inline void check_finite(const Node& n, const char* op) {
    for (double x : n.v)
        if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": non-finite result");
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto r = detail::make_result(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = av[i] + bv[i];
    if (r->needs_grad) {
        auto an = a.node(), bn = b.node();
        r->backfn = [an, bn](Node& self) {
            if (an->needs_grad) {
                double* g = an->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i];
            }
            if (bn->needs_grad) {
                double* g = bn->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i];
            }
        };
    }
    return Tensor(r);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto r = detail::make_result(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = av[i] - bv[i];
    if (r->needs_grad) {
        auto an = a.node(), bn = b.node();
        r->backfn = [an, bn](Node& self) {
            if (an->needs_grad) {
                double* g = an->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i];
            }
            if (bn->needs_grad) {
                double* g = bn->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] -= self.g[i];
            }
        };
    }
    return Tensor(r);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto r = detail::make_result(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = av[i] * bv[i];
    if (r->needs_grad) {
        auto an = a.node(), bn = b.node();
        r->backfn = [an, bn](Node& self) {
            if (an->needs_grad) {
                double* g = an->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i] * bn->v[i];
            }
            if (bn->needs_grad) {
                double* g = bn->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i] * an->v[i];
            }
        };
    }
    return Tensor(r);
}

inline Tensor scalar_mul(const Tensor& a, double c) {
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = av[i] * c;
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, c](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i] * c;
        };
    }
    return Tensor(r);
}

inline Tensor scalar_add(const Tensor& a, double c) {
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = av[i] + c;
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i];
        };
    }
    return Tensor(r);
}

inline Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

// bias broadcast over the last axis
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.ndim() != 1 || x.dim(x.ndim() - 1) != bias.dim(0))
        throw std::invalid_argument("add_bias: bias must match last axis");
    auto r = detail::make_result(x.shape(), {x.node(), bias.node()});
    std::size_t d = bias.dim(0), rows = x.size() / d;
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) r->v[i * d + j] = xv[i * d + j] + bv[j];
    if (r->needs_grad) {
        auto xn = x.node(), bn = bias.node();
        r->backfn = [xn, bn, rows, d](Node& self) {
            if (xn->needs_grad) {
                double* g = xn->grad_data();
                for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i];
            }
            if (bn->needs_grad) {
                double* g = bn->grad_data();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < d; ++j) g[j] += self.g[i * d + j];
            }
        };
    }
    return Tensor(r);
}

// ------------------------------------------------------------ linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    std::size_t n = a.dim(0), m = a.dim(1), p = b.dim(1);
    auto r = detail::make_result({n, p}, {a.node(), b.node()});
    CMatMap A(a.values().data(), n, m), B(b.values().data(), m, p);
    MatMap(r->v.data(), n, p).noalias() = A * B;
    if (r->needs_grad) {
        auto an = a.node(), bn = b.node();
        r->backfn = [an, bn, n, m, p](Node& self) {
            CMatMap G(self.g.data(), n, p);
            if (an->needs_grad) {
                CMatMap B2(bn->v.data(), m, p);
                MatMap(an->grad_data(), n, m).noalias() += G * B2.transpose();
            }
            if (bn->needs_grad) {
                CMatMap A2(an->v.data(), n, m);
                MatMap(bn->grad_data(), m, p).noalias() += A2.transpose() * G;
            }
        };
    }
    return Tensor(r);
}

// batched matmul over the leading axis: (N,a,b) @ (N,b,c) -> (N,a,c)
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    std::size_t N = a.dim(0), n = a.dim(1), m = a.dim(2), p = b.dim(2);
    auto r = detail::make_result({N, n, p}, {a.node(), b.node()});
    for (std::size_t i = 0; i < N; ++i) {
        CMatMap A(a.values().data() + i * n * m, n, m);
        CMatMap B(b.values().data() + i * m * p, m, p);
        MatMap(r->v.data() + i * n * p, n, p).noalias() = A * B;
    }
    if (r->needs_grad) {
        auto an = a.node(), bn = b.node();
        r->backfn = [an, bn, N, n, m, p](Node& self) {
            for (std::size_t i = 0; i < N; ++i) {
                CMatMap G(self.g.data() + i * n * p, n, p);
                if (an->needs_grad) {
                    CMatMap B(bn->v.data() + i * m * p, m, p);
                    MatMap(an->grad_data() + i * n * m, n, m).noalias() += G * B.transpose();
                }
                if (bn->needs_grad) {
                    CMatMap A(an->v.data() + i * n * m, n, m);
                    MatMap(bn->grad_data() + i * m * p, m, p).noalias() += A.transpose() * G;
                }
            }
        };
    }
    return Tensor(r);
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    if (axes.size() != a.ndim()) throw std::invalid_argument("permute: axes rank mismatch");
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.dim(axes[i]);
    auto r = detail::make_result(out_shape, {a.node()});
    auto in_st = detail::strides_of(a.shape());
    auto out_st = detail::strides_of(out_shape);
    std::size_t nd = axes.size(), total = a.size();
    const auto& av = a.values();
    // out[i0,...] = in[axes-permuted index]
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t o = 0; o < total; ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t k = 0; k < nd; ++k) {
            std::size_t c = rem / out_st[k];
            rem %= out_st[k];
            src += c * in_st[axes[k]];
        }
        r->v[o] = av[src];
    }
    if (r->needs_grad) {
        auto an = a.node();
        auto axes_c = axes;
        r->backfn = [an, axes_c, in_st, out_st, nd, total](Node& self) {
            double* g = an->grad_data();
            for (std::size_t o = 0; o < total; ++o) {
                std::size_t rem = o, src = 0;
                for (std::size_t k = 0; k < nd; ++k) {
                    std::size_t c = rem / out_st[k];
                    rem %= out_st[k];
                    src += c * in_st[axes_c[k]];
                }
                g[src] += self.g[o];
            }
        };
    }
    return Tensor(r);
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("transpose: rank-2 only");
    return permute(a, {1, 0});
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    auto r = detail::make_result(new_shape, {a.node()});
    r->v = a.values();
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i];
        };
    }
    return Tensor(r);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw std::invalid_argument("concat: bad axis");
    Shape out = s0;
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.dim(i) != s0[i]) throw std::invalid_argument("concat: shape mismatch off-axis");
        axis_total += p.dim(axis);
    }
    out[axis] = axis_total;
    std::vector<NodePtr> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    auto r = detail::make_result(out, parents);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::size_t out_row = axis_total * inner;
    std::size_t offset = 0;
    std::vector<std::size_t> part_axis(parts.size());
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        part_axis[pi] = parts[pi].dim(axis);
        std::size_t chunk = part_axis[pi] * inner;
        const auto& pv = parts[pi].values();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t c = 0; c < chunk; ++c) r->v[o * out_row + offset + c] = pv[o * chunk + c];
        offset += chunk;
    }
    if (r->needs_grad) {
        std::vector<NodePtr> ps = std::move(parents);
        r->backfn = [ps, part_axis, outer, inner, out_row](Node& self) {
            std::size_t offset = 0;
            for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                std::size_t chunk = part_axis[pi] * inner;
                if (ps[pi]->needs_grad) {
                    double* g = ps[pi]->grad_data();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t c = 0; c < chunk; ++c) g[o * chunk + c] += self.g[o * out_row + offset + c];
                }
                offset += chunk;
            }
        };
    }
    return Tensor(r);
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.ndim() || start + len > a.dim(axis))
        throw std::invalid_argument("slice: out of range on axis " + std::to_string(axis));
    Shape out = a.shape();
    out[axis] = len;
    auto r = detail::make_result(out, {a.node()});
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
    std::size_t in_row = a.dim(axis) * inner, out_row = len * inner;
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < out_row; ++c) r->v[o * out_row + c] = av[o * in_row + start * inner + c];
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, outer, inner, in_row, out_row, start](Node& self) {
            double* g = an->grad_data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t c = 0; c < out_row; ++c) g[o * in_row + start * inner + c] += self.g[o * out_row + c];
        };
    }
    return Tensor(r);
}

// replicate along a new leading axis: (s...) -> (reps, s...)
inline Tensor tile0(const Tensor& a, std::size_t reps) {
    Shape out;
    out.push_back(reps);
    for (std::size_t e : a.shape()) out.push_back(e);
    auto r = detail::make_result(out, {a.node()});
    std::size_t n = a.size();
    const auto& av = a.values();
    for (std::size_t i = 0; i < reps; ++i)
        for (std::size_t j = 0; j < n; ++j) r->v[i * n + j] = av[j];
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, reps, n](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < reps; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.g[i * n + j];
        };
    }
    return Tensor(r);
}

// ---------------------------------------------------------------- elementwise

inline Tensor exp_(const Tensor& a) {
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = std::exp(av[i]);
    detail::check_finite(*r, "exp");
    if (r->needs_grad) {
        auto an = a.node();
        auto rv = r;  // weak capture avoided; values needed in backward
        r->backfn = [an](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i] * self.v[i];
        };
    }
    return Tensor(r);
}

inline Tensor log_(const Tensor& a) {
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = std::log(av[i]);
    detail::check_finite(*r, "log");
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i) g[i] += self.g[i] / an->v[i];
        };
    }
    return Tensor(r);
}

inline Tensor gelu(const Tensor& a) {
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i) {
                double x = an->v[i];
                double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                g[i] += self.g[i] * d;
            }
        };
    }
    return Tensor(r);
}

// subgradient 0 outside the open interval and at the kinks
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < r->v.size(); ++i) r->v[i] = std::min(hi, std::max(lo, av[i]));
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, lo, hi](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < self.g.size(); ++i)
                if (an->v[i] > lo && an->v[i] < hi) g[i] += self.g[i];
        };
    }
    return Tensor(r);
}

// forward-only: the result is a constant w.r.t. the graph
inline Tensor sign(const Tensor& a) {
    Tensor r = Tensor::zeros(a.shape());
    const auto& av = a.values();
    auto& rv = r.values();
    for (std::size_t i = 0; i < rv.size(); ++i) rv[i] = (av[i] > 0.0) - (av[i] < 0.0);
    return r;
}

// ----------------------------------------------------------------- rowwise

inline Tensor softmax_lastdim(const Tensor& a) {
    if (a.ndim() == 0) throw std::invalid_argument("softmax: rank >= 1 required");
    std::size_t d = a.dim(a.ndim() - 1), rows = a.size() / d;
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* x = av.data() + i * d;
        double* y = r->v.data() + i * d;
        double mx = x[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < d; ++j) y[j] /= sum;
    }
    detail::check_finite(*r, "softmax");
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, rows, d](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* y = self.v.data() + i * d;
                const double* dy = self.g.data() + i * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (dy[j] - dot) * y[j];
            }
        };
    }
    return Tensor(r);
}

inline Tensor log_softmax_lastdim(const Tensor& a) {
    std::size_t d = a.dim(a.ndim() - 1), rows = a.size() / d;
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* x = av.data() + i * d;
        double* y = r->v.data() + i * d;
        double mx = x[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) sum += std::exp(x[j] - mx);
        double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - lse;
    }
    detail::check_finite(*r, "log_softmax");
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, rows, d](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* y = self.v.data() + i * d;
                const double* dy = self.g.data() + i * d;
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += dy[j];
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += dy[j] - std::exp(y[j]) * s;
            }
        };
    }
    return Tensor(r);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    std::size_t d = x.dim(x.ndim() - 1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw std::invalid_argument("layer_norm: gamma/beta must match last axis");
    std::size_t rows = x.size() / d;
    auto r = detail::make_result(x.shape(), {x.node(), gamma.node(), beta.node()});
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    std::vector<double> inv_std(rows), mean(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* row = xv.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) r->v[i * d + j] = gv[j] * (row[j] - mu) * is + bv[j];
    }
    detail::check_finite(*r, "layer_norm");
    if (r->needs_grad) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        r->backfn = [xn, gn, bn, rows, d, mean, inv_std](Node& self) {
            for (std::size_t i = 0; i < rows; ++i) {
                const double* row = xn->v.data() + i * d;
                const double* dy = self.g.data() + i * d;
                double mu = mean[i], is = inv_std[i];
                if (gn->needs_grad) {
                    double* gg = gn->grad_data();
                    for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * (row[j] - mu) * is;
                }
                if (bn->needs_grad) {
                    double* gb = bn->grad_data();
                    for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
                }
                if (xn->needs_grad) {
                    double* gx = xn->grad_data();
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        double dxh = dy[j] * gn->v[j];
                        double xh = (row[j] - mu) * is;
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        double dxh = dy[j] * gn->v[j];
                        double xh = (row[j] - mu) * is;
                        gx[i * d + j] += is * (dxh - m1 - xh * m2);
                    }
                }
            }
        };
    }
    return Tensor(r);
}

inline Tensor l2_normalize_lastdim(const Tensor& a) {
    std::size_t d = a.dim(a.ndim() - 1), rows = a.size() / d;
    auto r = detail::make_result(a.shape(), {a.node()});
    const auto& av = a.values();
    std::vector<double> norms(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* x = av.data() + i * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x[j] * x[j];
        double n = std::sqrt(s);
        if (n < 1e-12) throw std::runtime_error("l2_normalize: zero-norm row");
        norms[i] = n;
        for (std::size_t j = 0; j < d; ++j) r->v[i * d + j] = x[j] / n;
    }
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, rows, d, norms](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* y = self.v.data() + i * d;
                const double* dy = self.g.data() + i * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (dy[j] - y[j] * dot) / norms[i];
            }
        };
    }
    return Tensor(r);
}

// ---------------------------------------------------------------- reductions

inline Tensor sum_all(const Tensor& a) {
    auto r = detail::make_result({1}, {a.node()});
    double s = 0.0;
    for (double x : a.values()) s += x;  // fixed left-to-right order
    r->v[0] = s;
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < an->v.size(); ++i) g[i] += self.g[0];
        };
    }
    return Tensor(r);
}

inline Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
    return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor sum_lastdim(const Tensor& a) {
    std::size_t d = a.dim(a.ndim() - 1), rows = a.size() / d;
    Shape out(a.shape().begin(), a.shape().end() - 1);
    if (out.empty()) out = {1};
    auto r = detail::make_result(out, {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += av[i * d + j];
        r->v[i] = s;
    }
    if (r->needs_grad) {
        auto an = a.node();
        r->backfn = [an, rows, d](Node& self) {
            double* g = an->grad_data();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.g[i];
        };
    }
    return Tensor(r);
}

// y[b] = x[b, idx[b]]
inline Tensor take_per_row(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.ndim() != 2 || idx.size() != a.dim(0))
        throw std::invalid_argument("take_per_row: need (B,K) input and B indices");
    std::size_t B = a.dim(0), K = a.dim(1);
    for (std::size_t j : idx)
        if (j >= K) throw std::invalid_argument("take_per_row: index out of range");
    auto r = detail::make_result({B}, {a.node()});
    const auto& av = a.values();
    for (std::size_t b = 0; b < B; ++b) r->v[b] = av[b * K + idx[b]];
    if (r->needs_grad) {
        auto an = a.node();
        auto idx_c = idx;
        r->backfn = [an, idx_c, K](Node& self) {
            double* g = an->grad_data();
            for (std::size_t b = 0; b < self.g.size(); ++b) g[b * K + idx_c[b]] += self.g[b];
        };
    }
    return Tensor(r);
}

// y[b,:] = x[b, pos[b], :]
inline Tensor take_token(const Tensor& a, const std::vector<std::size_t>& pos) {
    if (a.ndim() != 3 || pos.size() != a.dim(0))
        throw std::invalid_argument("take_token: need (B,T,d) input and B positions");
    std::size_t B = a.dim(0), T = a.dim(1), d = a.dim(2);
    for (std::size_t p : pos)
        if (p >= T) throw std::invalid_argument("take_token: position out of range");
    auto r = detail::make_result({B, d}, {a.node()});
    const auto& av = a.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < d; ++j) r->v[b * d + j] = av[(b * T + pos[b]) * d + j];
    if (r->needs_grad) {
        auto an = a.node();
        auto pos_c = pos;
        r->backfn = [an, pos_c, T, d](Node& self) {
            double* g = an->grad_data();
            std::size_t B = pos_c.size();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < d; ++j) g[(b * T + pos_c[b]) * d + j] += self.g[b * d + j];
        };
    }
    return Tensor(r);
}

// y[i,:] = x[idx[i],:]
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.ndim() != 2) throw std::invalid_argument("gather_rows: rank-2 input required");
    std::size_t K = a.dim(0), d = a.dim(1), B = idx.size();
    for (std::size_t i : idx)
        if (i >= K) throw std::invalid_argument("gather_rows: index out of range");
    auto r = detail::make_result({B, d}, {a.node()});
    const auto& av = a.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < d; ++j) r->v[b * d + j] = av[idx[b] * d + j];
    if (r->needs_grad) {
        auto an = a.node();
        auto idx_c = idx;
        r->backfn = [an, idx_c, d](Node& self) {
            double* g = an->grad_data();
            for (std::size_t b = 0; b < idx_c.size(); ++b)
                for (std::size_t j = 0; j < d; ++j) g[idx_c[b] * d + j] += self.g[b * d + j];
        };
    }
    return Tensor(r);
}

// out[b,t,:] = table[ids[b*T+t], :]
inline Tensor embedding_rows(const Tensor& table, const std::vector<std::size_t>& ids, std::size_t B, std::size_t T) {
    if (table.ndim() != 2 || ids.size() != B * T)
        throw std::invalid_argument("embedding_rows: bad arguments");
    std::size_t V = table.dim(0), d = table.dim(1);
    for (std::size_t id : ids)
        if (id >= V) throw std::invalid_argument("embedding_rows: id out of vocabulary");
    auto r = detail::make_result({B, T, d}, {table.node()});
    const auto& tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) r->v[i * d + j] = tv[ids[i] * d + j];
    if (r->needs_grad) {
        auto tn = table.node();
        auto ids_c = ids;
        r->backfn = [tn, ids_c, d](Node& self) {
            double* g = tn->grad_data();
            for (std::size_t i = 0; i < ids_c.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) g[ids_c[i] * d + j] += self.g[i * d + j];
        };
    }
    return Tensor(r);
}

// ------------------------------------------------------------------ backward

// Reverse-mode pass from a scalar output. A trace may be consumed once;
// leaves accumulate into their grad buffers (zero them between steps).
inline void backward(const Tensor& output) {
    NodePtr out = output.node();
    if (out->v.size() != 1) throw std::invalid_argument("backward: output must be scalar");
    if (out->consumed) throw std::runtime_error("backward: trace already consumed");
    out->consumed = true;
    if (!out->needs_grad) return;  // constant output: all leaf grads stay zero

    // iterative DFS post-order topological sort
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(out.get(), 0);
    seen.insert(out.get());
    while (!stack.empty()) {
        auto& [n, ci] = stack.back();
        if (ci < n->parents.size()) {
            Node* p = n->parents[ci++].get();
            if (p->needs_grad && !p->leaf && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    out->grad_data()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backfn && !n->g.empty()) n->backfn(*n);
    }
}

}  // namespace fap
