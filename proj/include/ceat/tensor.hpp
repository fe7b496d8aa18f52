#pragma once

// Dense row-major tensors and a define-by-run reverse-mode tape.
//
// A Tape records every operation applied to its Vars in append order.
// backward() walks the tape once in reverse, so a node's gradient is
// complete by the time its own backward rule runs. Gradient buffers are
// allocated lazily; nodes never reached from the root are skipped, which
// keeps dead branches of a graph from touching any gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ceat/errors.hpp"

namespace ceat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        check_dims();
        if (values_.size() != shape_size(shape_))
            throw DimensionError("tensor of shape " + shape_str(shape_) + " needs " +
                                 std::to_string(shape_size(shape_)) + " values, got " +
                                 std::to_string(values_.size()));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return values_.size(); }

    std::span<const double> values() const noexcept { return values_; }
    std::span<double> values() noexcept { return values_; }
    const std::vector<double>& data() const noexcept { return values_; }

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    double item() const {
        if (values_.size() != 1)
            throw UsageError("item() on tensor of shape " + shape_str(shape_));
        return values_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != values_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), values_);
    }

    bool operator==(const Tensor&) const = default;

private:
    void check_dims() const {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> values_;
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    // Gradient of the last backward() root with respect to this node.
    // Zeros when the node was not reached.
    Tensor grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
        return Var(this, nodes_.size() - 1);
    }
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Records an op result. The node requires grad iff any input does; the
    // backward rule is dropped otherwise.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || nodes_.at(in.id()).requires_grad;
        return push(std::move(value), needs, std::move(fn));
    }
    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || nodes_.at(in.id()).requires_grad;
        return push(std::move(value), needs, std::move(fn));
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }
    std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }

    // Gradient buffer of a node, zero-initialized on first access.
    std::span<double> grad_buffer(std::size_t id) {
        auto& node = nodes_.at(id);
        if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
        return node.grad;
    }

    void accumulate(std::size_t id, std::span<const double> g) {
        if (!requires_grad(id)) return;
        auto buf = grad_buffer(id);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    void backward(const Var& root) {
        if (&root.tape() != this) throw UsageError("backward: root belongs to another tape");
        if (backward_done_)
            throw UsageError("backward: graph already differentiated; call zero_grad() first");
        const auto& rv = value(root.id());
        if (rv.size() != 1)
            throw UsageError("backward: root must be scalar, got shape " + shape_str(rv.shape()));
        backward_done_ = true;
        if (!requires_grad(root.id())) return;
        grad_buffer(root.id())[0] = 1.0;
        for (std::size_t id = root.id() + 1; id-- > 0;) {
            auto& node = nodes_[id];
            if (node.grad.empty() || !node.requires_grad || !node.backward) continue;
            node.backward(*this, id);
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad.clear();
        backward_done_ = false;
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Tensor value, bool needs, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline Tensor Var::grad() const {
    const auto& v = value();
    if (!tape_->has_grad(id_)) return Tensor(v.shape(), 0.0);
    auto g = tape_->grad(id_);
    return Tensor(v.shape(), std::vector<double>(g.begin(), g.end()));
}

inline void backward(const Var& root) { root.tape().backward(root); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
    return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
    return MutMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

template <class Fwd, class Deriv>
Var unary(const char*, const Var& a, Fwd fwd, Deriv deriv) {
    const auto& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return a.tape().record(std::move(out), {a}, [ia = a.id(), deriv](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto& x = t.value(ia);
        const auto& y = t.value(self);
        auto g = t.grad(self);
        auto dx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * deriv(x[i], y[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    detail::as_matrix(out.values(), m, n).noalias() =
        detail::as_matrix(av.values(), m, k) * detail::as_matrix(bv.values(), k, n);
    return a.tape().record(
        std::move(out), {a, b}, [ia = a.id(), ib = b.id(), m, k, n](Tape& t, std::size_t self) {
            auto dc = detail::as_matrix(t.grad(self), m, n);
            if (t.requires_grad(ia)) {
                auto da = detail::as_matrix(t.grad_buffer(ia), m, k);
                da.noalias() += dc * detail::as_matrix(t.value(ib).values(), k, n).transpose();
            }
            if (t.requires_grad(ib)) {
                auto db = detail::as_matrix(t.grad_buffer(ib), k, n);
                db.noalias() += detail::as_matrix(t.value(ia).values(), m, k).transpose() * dc;
            }
        });
}

// x[N×F] + b[F] added to every row (dense-layer bias).
inline Var add_rowwise(const Var& x, const Var& bias) {
    const auto& xv = x.value();
    const auto& bv = bias.value();
    detail::require_rank("add_rowwise", xv, 2);
    if (bv.rank() != 1 || bv.dim(0) != xv.dim(1))
        throw DimensionError("add_rowwise: bias " + shape_str(bv.shape()) + " does not match rows of " +
                             shape_str(xv.shape()));
    const std::size_t n = xv.dim(0), f = xv.dim(1);
    Tensor out = xv;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < f; ++c) out[r * f + c] += bv[c];
    return x.tape().record(std::move(out), {x, bias},
                           [ix = x.id(), ib = bias.id(), n, f](Tape& t, std::size_t self) {
                               auto g = t.grad(self);
                               t.accumulate(ix, g);
                               if (t.requires_grad(ib)) {
                                   auto db = t.grad_buffer(ib);
                                   for (std::size_t r = 0; r < n; ++r)
                                       for (std::size_t c = 0; c < f; ++c) db[c] += g[r * f + c];
                               }
                           });
}

// 3×3 cross-correlation, stride 1, zero padding 1.
inline Var conv2d(const Var& x, const Var& kernel) {
    const auto& xv = x.value();
    const auto& kv = kernel.value();
    detail::require_rank("conv2d input", xv, 4);
    detail::require_rank("conv2d kernel", kv, 4);
    if (kv.dim(2) != 3 || kv.dim(3) != 3)
        throw DimensionError("conv2d: kernel must be Fx Cx3x3, got " + shape_str(kv.shape()));
    if (kv.dim(1) != xv.dim(1))
        throw DimensionError("conv2d: channel mismatch between input " + shape_str(xv.shape()) +
                             " and kernel " + shape_str(kv.shape()));
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3), f = kv.dim(0);

    // Visits every (output, input, kernel) index triple that touches the image.
    auto for_each_tap = [=](auto&& body) {
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < f; ++o)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t ki = 0; ki < 3; ++ki)
                        for (std::size_t kj = 0; kj < 3; ++kj) {
                            const std::size_t kidx = ((o * c + ch) * 3 + ki) * 3 + kj;
                            for (std::size_t i = 0; i < h; ++i) {
                                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + ki) - 1;
                                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t j = 0; j < w; ++j) {
                                    const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + kj) - 1;
                                    if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                                    const std::size_t oidx = ((s * f + o) * h + i) * w + j;
                                    const std::size_t xidx =
                                        ((s * c + ch) * h + static_cast<std::size_t>(ii)) * w +
                                        static_cast<std::size_t>(jj);
                                    body(oidx, xidx, kidx);
                                }
                            }
                        }
    };

    Tensor out({n, f, h, w});
    for_each_tap([&](std::size_t o, std::size_t xi, std::size_t ki) { out[o] += xv[xi] * kv[ki]; });
    return x.tape().record(std::move(out), {x, kernel},
                           [ix = x.id(), ik = kernel.id(), for_each_tap](Tape& t, std::size_t self) {
                               auto g = t.grad(self);
                               const auto& xv = t.value(ix);
                               const auto& kv = t.value(ik);
                               if (t.requires_grad(ix)) {
                                   auto dx = t.grad_buffer(ix);
                                   for_each_tap([&](std::size_t o, std::size_t xi, std::size_t ki) {
                                       dx[xi] += g[o] * kv[ki];
                                   });
                               }
                               if (t.requires_grad(ik)) {
                                   auto dk = t.grad_buffer(ik);
                                   for_each_tap([&](std::size_t o, std::size_t xi, std::size_t ki) {
                                       dk[ki] += g[o] * xv[xi];
                                   });
                               }
                           });
}

// Reinterprets the value with a new shape of the same size.
inline Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape().record(std::move(out), {x}, [ix = x.id()](Tape& t, std::size_t self) {
        t.accumulate(ix, t.grad(self));
    });
}

// ---------------------------------------------------------------- elementwise

inline Var relu(const Var& x) {
    return detail::unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var square(const Var& x) {
    return detail::unary(
        "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// d|x|/dx = sign(x), 0 at 0.
inline Var abs(const Var& x) {
    return detail::unary(
        "abs", x, [](double v) { return std::fabs(v); }, [](double v, double) { return detail::sign(v); });
}

inline Var exp(const Var& x) {
    return detail::unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// Natural log; caller keeps the argument positive.
inline Var log(const Var& x) {
    return detail::unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var scale(const Var& x, double factor) {
    return detail::unary(
        "scale", x, [factor](double v) { return v * factor; },
        [factor](double, double) { return factor; });
}

inline Var add_scalar(const Var& x, double c) {
    return detail::unary(
        "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

namespace detail {

template <class Fwd, class Da, class Db>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, Da da_rule, Db db_rule) {
    const auto& av = a.value();
    const auto& bv = b.value();
    require_same_shape(op, av, bv);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return a.tape().record(std::move(out), {a, b},
                           [ia = a.id(), ib = b.id(), da_rule, db_rule](Tape& t, std::size_t self) {
                               auto g = t.grad(self);
                               const auto& av = t.value(ia);
                               const auto& bv = t.value(ib);
                               if (t.requires_grad(ia)) {
                                   auto d = t.grad_buffer(ia);
                                   for (std::size_t i = 0; i < d.size(); ++i)
                                       d[i] += g[i] * da_rule(av[i], bv[i]);
                               }
                               if (t.requires_grad(ib)) {
                                   auto d = t.grad_buffer(ib);
                                   for (std::size_t i = 0; i < d.size(); ++i)
                                       d[i] += g[i] * db_rule(av[i], bv[i]);
                               }
                           });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& x) {
    const auto& xv = x.value();
    double total = 0.0;
    for (double v : xv.values()) total += v;
    return x.tape().record(Tensor::scalar(total), {x}, [ix = x.id()](Tape& t, std::size_t self) {
        if (!t.requires_grad(ix)) return;
        const double g = t.grad(self)[0];
        for (auto& d : t.grad_buffer(ix)) d += g;
    });
}

inline Var mean(const Var& x) {
    const auto& xv = x.value();
    double total = 0.0;
    for (double v : xv.values()) total += v;
    const double n = static_cast<double>(xv.size());
    return x.tape().record(Tensor::scalar(total / n), {x}, [ix = x.id(), n](Tape& t, std::size_t self) {
        if (!t.requires_grad(ix)) return;
        const double g = t.grad(self)[0] / n;
        for (auto& d : t.grad_buffer(ix)) d += g;
    });
}

namespace detail {

inline Var reduce_axis(const Var& x, std::size_t axis, bool average) {
    const auto& xv = x.value();
    if (axis >= xv.rank())
        throw InputError("reduce: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(xv.shape()));
    const auto& s = xv.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    const double denom = average ? static_cast<double>(len) : 1.0;
    Tensor out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < len; ++k) acc += xv[(o * len + k) * inner + i];
            out[o * inner + i] = acc / denom;
        }
    return x.tape().record(std::move(out), {x},
                           [ix = x.id(), outer, inner, len, denom](Tape& t, std::size_t self) {
                               if (!t.requires_grad(ix)) return;
                               auto g = t.grad(self);
                               auto d = t.grad_buffer(ix);
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t k = 0; k < len; ++k)
                                       for (std::size_t i = 0; i < inner; ++i)
                                           d[(o * len + k) * inner + i] += g[o * inner + i] / denom;
                           });
}

}  // namespace detail

inline Var sum(const Var& x, std::size_t axis) { return detail::reduce_axis(x, axis, false); }
inline Var mean(const Var& x, std::size_t axis) { return detail::reduce_axis(x, axis, true); }

// ---------------------------------------------------------------- classification heads

inline Tensor softmax_rows(const Tensor& logits) {
    detail::require_rank("softmax", logits, 2);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    Tensor out(logits.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const double* z = logits.values().data() + r * k;
        double* p = out.values().data() + r * k;
        const double mx = *std::max_element(z, z + k);
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) total += (p[c] = std::exp(z[c] - mx));
        for (std::size_t c = 0; c < k; ++c) p[c] /= total;
    }
    return out;
}

inline Tensor log_softmax_rows(const Tensor& logits) {
    detail::require_rank("log_softmax", logits, 2);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    Tensor out(logits.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const double* z = logits.values().data() + r * k;
        double* o = out.values().data() + r * k;
        const double mx = *std::max_element(z, z + k);
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) total += std::exp(z[c] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t c = 0; c < k; ++c) o[c] = z[c] - lse;
    }
    return out;
}

inline Var softmax(const Var& logits) {
    if (logits.value().rank() == 2 && logits.value().dim(1) < 2)
        throw DimensionError("softmax: need at least 2 classes, got " + shape_str(logits.shape()));
    Tensor out = softmax_rows(logits.value());
    const std::size_t k = out.dim(1);
    return logits.tape().record(std::move(out), {logits}, [iz = logits.id(), k](Tape& t, std::size_t self) {
        if (!t.requires_grad(iz)) return;
        auto g = t.grad(self);
        const auto& p = t.value(self);
        auto dz = t.grad_buffer(iz);
        for (std::size_t r = 0; r * k < dz.size(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < k; ++c) dot += g[r * k + c] * p[r * k + c];
            for (std::size_t c = 0; c < k; ++c) dz[r * k + c] += p[r * k + c] * (g[r * k + c] - dot);
        }
    });
}

inline Var log_softmax(const Var& logits) {
    Tensor out = log_softmax_rows(logits.value());
    const std::size_t k = out.dim(1);
    return logits.tape().record(std::move(out), {logits}, [iz = logits.id(), k](Tape& t, std::size_t self) {
        if (!t.requires_grad(iz)) return;
        auto g = t.grad(self);
        const auto& lp = t.value(self);
        auto dz = t.grad_buffer(iz);
        for (std::size_t r = 0; r * k < dz.size(); ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < k; ++c) gs += g[r * k + c];
            for (std::size_t c = 0; c < k; ++c) dz[r * k + c] += g[r * k + c] - std::exp(lp[r * k + c]) * gs;
        }
    });
}

namespace detail {

inline void check_labels(const char* op, const Tensor& scores, std::span<const int> labels) {
    require_rank(op, scores, 2);
    if (labels.size() != scores.dim(0))
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                             " labels for scores of shape " + shape_str(scores.shape()));
    const int k = static_cast<int>(scores.dim(1));
    for (int y : labels)
        if (y < 0 || y >= k)
            throw InputError(std::string(op) + ": label " + std::to_string(y) + " outside [0," +
                             std::to_string(k) + ")");
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[y], via log-sum-exp.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const auto& z = logits.value();
    detail::check_labels("cross_entropy", z, labels);
    const std::size_t n = z.dim(0), k = z.dim(1);
    Tensor lp = log_softmax_rows(z);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) total -= lp[r * k + static_cast<std::size_t>(labels[r])];
    std::vector<int> ys(labels.begin(), labels.end());
    return logits.tape().record(
        Tensor::scalar(total / static_cast<double>(n)), {logits},
        [iz = logits.id(), ys = std::move(ys), lp = std::move(lp), n, k](Tape& t, std::size_t self) {
            if (!t.requires_grad(iz)) return;
            const double g = t.grad(self)[0] / static_cast<double>(n);
            auto dz = t.grad_buffer(iz);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < k; ++c) {
                    const double onehot = static_cast<std::size_t>(ys[r]) == c ? 1.0 : 0.0;
                    dz[r * k + c] += g * (std::exp(lp[r * k + c]) - onehot);
                }
        });
}

// Picks x[r, labels[r]] for every row: [N×K] -> [N].
inline Var select_rows(const Var& x, std::span<const int> labels) {
    const auto& xv = x.value();
    detail::check_labels("select_rows", xv, labels);
    const std::size_t n = xv.dim(0), k = xv.dim(1);
    Tensor out({n});
    for (std::size_t r = 0; r < n; ++r) out[r] = xv[r * k + static_cast<std::size_t>(labels[r])];
    std::vector<int> ys(labels.begin(), labels.end());
    return x.tape().record(std::move(out), {x}, [ix = x.id(), ys = std::move(ys), k](Tape& t, std::size_t self) {
        if (!t.requires_grad(ix)) return;
        auto g = t.grad(self);
        auto d = t.grad_buffer(ix);
        for (std::size_t r = 0; r < ys.size(); ++r) d[r * k + static_cast<std::size_t>(ys[r])] += g[r];
    });
}

// Elementwise log((1/M) Σ_m exp(a_m)) over same-shaped inputs, stabilized by
// the per-element max. Used to average member probabilities in log space.
inline Var log_mean_exp(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("log_mean_exp: no inputs");
    const auto& first = parts.front().value();
    for (const auto& p : parts) detail::require_same_shape("log_mean_exp", first, p.value());
    const double m = static_cast<double>(parts.size());
    Tensor out(first.shape());
    for (std::size_t i = 0; i < first.size(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (const auto& p : parts) mx = std::max(mx, p.value()[i]);
        double acc = 0.0;
        for (const auto& p : parts) acc += std::exp(p.value()[i] - mx);
        out[i] = mx + std::log(acc / m);
    }
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    return parts.front().tape().record(std::move(out), parts, [ids, m](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto& y = t.value(self);
        for (auto id : ids) {
            if (!t.requires_grad(id)) continue;
            const auto& a = t.value(id);
            auto d = t.grad_buffer(id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * std::exp(a[i] - y[i]) / m;
        }
    });
}

// Per-sample max(z_y - max_{j≠y} z_j, -kappa). The competing class is the
// lowest-index maximizer; clamped samples get zero gradient.
inline Var margin_loss(const Var& scores, std::span<const int> labels, double kappa) {
    const auto& z = scores.value();
    detail::check_labels("margin_loss", z, labels);
    const std::size_t n = z.dim(0), k = z.dim(1);
    if (k < 2) throw InputError("margin_loss: need at least 2 classes");
    Tensor out({n});
    std::vector<std::size_t> rival(n);
    std::vector<bool> active(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto y = static_cast<std::size_t>(labels[r]);
        std::size_t best = y == 0 ? 1 : 0;
        for (std::size_t c = 0; c < k; ++c)
            if (c != y && z[r * k + c] > z[r * k + best]) best = c;
        rival[r] = best;
        const double margin = z[r * k + y] - z[r * k + best];
        active[r] = margin > -kappa;
        out[r] = active[r] ? margin : -kappa;
    }
    std::vector<int> ys(labels.begin(), labels.end());
    return scores.tape().record(
        std::move(out), {scores},
        [iz = scores.id(), ys = std::move(ys), rival = std::move(rival), active = std::move(active), k](
            Tape& t, std::size_t self) {
            if (!t.requires_grad(iz)) return;
            auto g = t.grad(self);
            auto d = t.grad_buffer(iz);
            for (std::size_t r = 0; r < ys.size(); ++r) {
                if (!active[r]) continue;
                d[r * k + static_cast<std::size_t>(ys[r])] += g[r];
                d[r * k + rival[r]] -= g[r];
            }
        });
}

// ---------------------------------------------------------------- finite differences

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
template <class F>
Tensor finite_difference_gradient(F&& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw InputError("finite_difference_gradient: step must be positive");
    Tensor probe = x;
    Tensor grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(static_cast<const Tensor&>(probe));
        probe[i] = orig - h;
        const double down = f(static_cast<const Tensor&>(probe));
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-7) {
    detail::require_same_shape("max_relative_error", a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace ceat
