#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation as a node holding its value and a closure
// that pushes the node's gradient back to its inputs. Layers with known
// closed-form derivatives (attention, layer norm, the uncertainty loss) are
// single fused nodes. The scalar type is a template parameter so the same
// model runs in float for training and in double for gradient checks.

#include "odeinf/errors.hpp"
#include "odeinf/random.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace odeinf::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;
};

/// Ordered set of named parameters. Order is the declaration order and is the
/// order used by checkpoints.
template <typename T>
class ParameterStore {
public:
    std::size_t add(std::string name, Matrix<T> init) {
        Parameter<T> p{std::move(name), std::move(init), {}};
        p.grad = Matrix<T>::Zero(p.value.rows(), p.value.cols());
        params_.push_back(std::move(p));
        return params_.size() - 1;
    }

    Parameter<T>& operator[](std::size_t i) { return params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
    std::size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad.setZero();
    }

    T grad_norm() const {
        T acc = 0;
        for (const auto& p : params_) acc += p.grad.squaredNorm();
        return std::sqrt(acc);
    }

    void scale_grad(T factor) {
        for (auto& p : params_) p.grad *= factor;
    }

    bool all_finite() const {
        for (const auto& p : params_)
            if (!p.value.allFinite()) return false;
        return true;
    }

    /// Copy of the store in another scalar type (gradients reset).
    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
        return out;
    }

    /// Scalar at flat index `k` across all parameters in declaration order.
    T& flat(std::size_t k) {
        for (auto& p : params_) {
            const auto n = static_cast<std::size_t>(p.value.size());
            if (k < n) return p.value.data()[k];
            k -= n;
        }
        throw ContractError("ParameterStore::flat: index out of range");
    }

    T flat_grad(std::size_t k) const {
        for (const auto& p : params_) {
            const auto n = static_cast<std::size_t>(p.value.size());
            if (k < n) return p.grad.data()[k];
            k -= n;
        }
        throw ContractError("ParameterStore::flat_grad: index out of range");
    }

    /// Copies values only; shapes must agree.
    void assign_values(const ParameterStore& other) {
        ODEINF_REQUIRE(other.size() == size(), "ParameterStore::assign_values: size mismatch");
        for (std::size_t i = 0; i < size(); ++i) params_[i].value = other.params_[i].value;
    }

private:
    std::vector<Parameter<T>> params_;
};

struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

template <typename T>
class Tape {
public:
    using Mat = Matrix<T>;
    using Backward = std::function<void(Tape&, std::uint32_t)>;

    /// With record == false no backward closures are kept (inference).
    explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Mat value) { return push(std::move(value), false, {}); }

    /// Leaf bound to a parameter; repeated calls on the same tape return the same node.
    Var parameter(Parameter<T>& p) {
        if (auto it = param_cache_.find(&p); it != param_cache_.end()) return it->second;
        Node n;
        n.external = &p.value;
        n.requires_grad = record_;
        if (record_)
            n.back = [&p](Tape& t, std::uint32_t self) { p.grad += t.nodes_[self].grad; };
        nodes_.push_back(std::move(n));
        Var v{static_cast<std::uint32_t>(nodes_.size() - 1)};
        param_cache_.emplace(&p, v);
        return v;
    }

    const Mat& value(Var v) const {
        const Node& n = nodes_[v.id];
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Gradient accumulated into `v` so far (zero matrix if none).
    Mat grad(Var v) const {
        const Node& n = nodes_[v.id];
        if (!n.has_grad) return Mat::Zero(value(v).rows(), value(v).cols());
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }
    std::size_t mark() const { return nodes_.size(); }

    /// Drops every node created after `m`.
    void rewind(std::size_t m) {
        ODEINF_REQUIRE(m <= nodes_.size(), "Tape::rewind: mark beyond end");
        for (auto it = param_cache_.begin(); it != param_cache_.end();)
            it = it->second.id >= m ? param_cache_.erase(it) : std::next(it);
        nodes_.resize(m);
    }

    /// Seeds d(root)/d(root) = 1 and runs every closure in reverse order.
    void backward(Var root) {
        ODEINF_REQUIRE(record_, "Tape::backward: tape was not recording");
        ODEINF_REQUIRE(value(root).size() == 1, "Tape::backward: root must be a scalar");
        Node& r = nodes_[root.id];
        r.grad = Mat::Ones(1, 1);
        r.has_grad = true;
        for (std::int64_t i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.has_grad && n.back) n.back(*this, static_cast<std::uint32_t>(i));
        }
    }

    // -- used by op implementations ---------------------------------------

    /// Creates a node; `inputs` decide whether it needs a backward closure.
    template <typename... Vars>
    Var emit(Mat value, Backward back, Vars... inputs) {
        const bool needs = record_ && (false || ... || nodes_[inputs.id].requires_grad);
        return push(std::move(value), needs, needs ? std::move(back) : Backward{});
    }

    Var emit_list(Mat value, Backward back, const std::vector<Var>& inputs) {
        bool needs = false;
        if (record_)
            for (auto v : inputs) needs = needs || nodes_[v.id].requires_grad;
        return push(std::move(value), needs, needs ? std::move(back) : Backward{});
    }

    const Mat& out_grad(std::uint32_t self) const { return nodes_[self].grad; }

    template <typename Expr>
    void accumulate(Var v, const Expr& g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.has_grad) {
            n.grad += g;
        } else {
            n.grad = g;
            n.has_grad = true;
        }
    }

    /// Direct access for accumulations that are cheaper in place (e.g. noalias products).
    Mat& grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        if (!n.has_grad) {
            n.grad = Mat::Zero(value(v).rows(), value(v).cols());
            n.has_grad = true;
        }
        return n.grad;
    }

private:
    struct Node {
        Mat value;
        const Mat* external = nullptr;
        Mat grad;
        Backward back;
        bool requires_grad = false;
        bool has_grad = false;
    };

    Var push(Mat value, bool requires_grad, Backward back) {
        ODEINF_REQUIRE(nodes_.size() < std::numeric_limits<std::uint32_t>::max() - 1, "Tape: too many nodes");
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    bool record_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<T>*, Var> param_cache_;
};

// ---------------------------------------------------------------------------
// Elementary operations

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
    ODEINF_REQUIRE(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                   "ad::add: shape mismatch");
    return t.emit(
        t.value(a) + t.value(b),
        [a, b](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, tp.out_grad(self));
            tp.accumulate(b, tp.out_grad(self));
        },
        a, b);
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
    return t.emit(
        t.value(a) - t.value(b),
        [a, b](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, tp.out_grad(self));
            tp.accumulate(b, -tp.out_grad(self));
        },
        a, b);
}

/// Elementwise product.
template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
    return t.emit(
        t.value(a).cwiseProduct(t.value(b)),
        [a, b](Tape<T>& tp, std::uint32_t self) {
            const auto& g = tp.out_grad(self);
            if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
            if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
        },
        a, b);
}

template <typename T>
Var scale(Tape<T>& t, Var a, T c) {
    return t.emit(
        t.value(a) * c, [a, c](Tape<T>& tp, std::uint32_t self) { tp.accumulate(a, tp.out_grad(self) * c); }, a);
}

/// a (r x c) + row (1 x c) broadcast over rows.
template <typename T>
Var add_row(Tape<T>& t, Var a, Var row) {
    ODEINF_REQUIRE(t.value(row).rows() == 1 && t.value(row).cols() == t.value(a).cols(), "ad::add_row: shape mismatch");
    typename Tape<T>::Mat out = t.value(a);
    out.rowwise() += t.value(row).row(0);
    return t.emit(
        std::move(out),
        [a, row](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, tp.out_grad(self));
            if (tp.requires_grad(row)) tp.accumulate(row, tp.out_grad(self).colwise().sum());
        },
        a, row);
}

/// a (r x c) scaled per column by a constant row (1 x c).
template <typename T>
Var mul_row_const(Tape<T>& t, Var a, const Matrix<T>& row) {
    ODEINF_REQUIRE(row.rows() == 1 && row.cols() == t.value(a).cols(), "ad::mul_row_const: shape mismatch");
    typename Tape<T>::Mat out = t.value(a).array().rowwise() * row.row(0).array();
    return t.emit(
        std::move(out),
        [a, row](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, (tp.out_grad(self).array().rowwise() * row.row(0).array()).matrix());
        },
        a);
}

/// a (r x c) scaled per row by a constant column (r x 1).
template <typename T>
Var mul_col_const(Tape<T>& t, Var a, const Matrix<T>& col) {
    ODEINF_REQUIRE(col.cols() == 1 && col.rows() == t.value(a).rows(), "ad::mul_col_const: shape mismatch");
    typename Tape<T>::Mat out = t.value(a).array().colwise() * col.col(0).array();
    return t.emit(
        std::move(out),
        [a, col](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, (tp.out_grad(self).array().colwise() * col.col(0).array()).matrix());
        },
        a);
}

/// (a - shift) / scale per column with constant rows; used for instance normalization.
template <typename T>
Var affine_cols_const(Tape<T>& t, Var a, const Matrix<T>& shift, const Matrix<T>& inv_scale) {
    typename Tape<T>::Mat out = (t.value(a).rowwise() - shift.row(0)).array().rowwise() * inv_scale.row(0).array();
    return t.emit(
        std::move(out),
        [a, inv_scale](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, (tp.out_grad(self).array().rowwise() * inv_scale.row(0).array()).matrix());
        },
        a);
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
    ODEINF_REQUIRE(t.value(a).cols() == t.value(b).rows(), "ad::matmul: inner dimension mismatch");
    typename Tape<T>::Mat out(t.value(a).rows(), t.value(b).cols());
    out.noalias() = t.value(a) * t.value(b);
    return t.emit(
        std::move(out),
        [a, b](Tape<T>& tp, std::uint32_t self) {
            const auto& g = tp.out_grad(self);
            if (tp.requires_grad(a)) tp.grad_buffer(a).noalias() += g * tp.value(b).transpose();
            if (tp.requires_grad(b)) tp.grad_buffer(b).noalias() += tp.value(a).transpose() * g;
        },
        a, b);
}

/// x W + b with W (in x out) and b (1 x out).
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    ODEINF_REQUIRE(X.cols() == W.rows(), "ad::linear: input width does not match weight rows");
    typename Tape<T>::Mat out(X.rows(), W.cols());
    out.noalias() = X * W;
    out.rowwise() += t.value(b).row(0);
    return t.emit(
        std::move(out),
        [x, w, b](Tape<T>& tp, std::uint32_t self) {
            const auto& g = tp.out_grad(self);
            if (tp.requires_grad(x)) tp.grad_buffer(x).noalias() += g * tp.value(w).transpose();
            if (tp.requires_grad(w)) tp.grad_buffer(w).noalias() += tp.value(x).transpose() * g;
            if (tp.requires_grad(b)) tp.accumulate(b, g.colwise().sum());
        },
        x, w, b);
}

namespace detail {
template <typename T>
constexpr T gelu_k = static_cast<T>(0.7978845608028654); // sqrt(2/pi)
template <typename T>
constexpr T gelu_c = static_cast<T>(0.044715);
} // namespace detail

/// GELU, tanh approximation.
template <typename T>
Var gelu(Tape<T>& t, Var a) {
    const auto& x = t.value(a).array();
    const auto inner = detail::gelu_k<T> * (x + detail::gelu_c<T> * x.cube());
    typename Tape<T>::Mat th = inner.tanh().matrix();
    typename Tape<T>::Mat out = (T(0.5) * x * (T(1) + th.array())).matrix();
    return t.emit(
        std::move(out),
        [a, th = std::move(th)](Tape<T>& tp, std::uint32_t self) {
            const auto& xv = tp.value(a).array();
            const auto d = T(0.5) * (T(1) + th.array()) +
                           T(0.5) * xv * (T(1) - th.array().square()) * detail::gelu_k<T> *
                               (T(1) + T(3) * detail::gelu_c<T> * xv.square());
            tp.accumulate(a, (tp.out_grad(self).array() * d).matrix());
        },
        a);
}

/// ELU(x) + 1: strictly positive feature map for linear attention.
template <typename T>
Var elu1(Tape<T>& t, Var a) {
    const auto& x = t.value(a).array();
    typename Tape<T>::Mat out = (x > T(0)).select(x + T(1), x.min(T(0)).exp()).matrix();
    return t.emit(
        std::move(out),
        [a](Tape<T>& tp, std::uint32_t self) {
            const auto& xv = tp.value(a).array();
            const auto& y = tp.value(Var{self}).array();
            tp.accumulate(a, (xv > T(0)).select(tp.out_grad(self).array(), tp.out_grad(self).array() * y).matrix());
        },
        a);
}

template <typename T>
Var exp(Tape<T>& t, Var a) {
    typename Tape<T>::Mat out = t.value(a).array().exp().matrix();
    return t.emit(
        std::move(out),
        [a](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, tp.out_grad(self).cwiseProduct(tp.value(Var{self})));
        },
        a);
}

/// Row-wise layer normalization with affine gamma/beta (1 x c each).
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& X = t.value(x);
    const Eigen::Index c = X.cols();
    typename Tape<T>::Mat mean = X.rowwise().mean();
    typename Tape<T>::Mat centered = X.colwise() - mean.col(0);
    typename Tape<T>::Mat inv_std =
        ((centered.array().square().rowwise().sum() / static_cast<T>(c)) + eps).rsqrt().matrix();
    typename Tape<T>::Mat xhat = centered.array().colwise() * inv_std.col(0).array();
    typename Tape<T>::Mat out = (xhat.array().rowwise() * t.value(gamma).row(0).array()).matrix();
    out.rowwise() += t.value(beta).row(0);
    return t.emit(
        std::move(out),
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tp, std::uint32_t self) {
            const auto& g = tp.out_grad(self);
            if (tp.requires_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
            if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
            if (tp.requires_grad(x)) {
                const T inv_c = T(1) / static_cast<T>(xhat.cols());
                typename Tape<T>::Mat dxhat = (g.array().rowwise() * tp.value(gamma).row(0).array()).matrix();
                typename Tape<T>::Mat m1 = dxhat.rowwise().sum() * inv_c;
                typename Tape<T>::Mat m2 = dxhat.cwiseProduct(xhat).rowwise().sum() * inv_c;
                typename Tape<T>::Mat dx = dxhat;
                dx.colwise() -= m1.col(0);
                dx -= (xhat.array().colwise() * m2.col(0).array()).matrix();
                dx = (dx.array().colwise() * inv_std.col(0).array()).matrix();
                tp.accumulate(x, dx);
            }
        },
        x, gamma, beta);
}

/// Horizontal concatenation.
template <typename T>
Var concat_cols(Tape<T>& t, const std::vector<Var>& parts) {
    ODEINF_REQUIRE(!parts.empty(), "ad::concat_cols: nothing to concatenate");
    const Eigen::Index rows = t.value(parts.front()).rows();
    Eigen::Index cols = 0;
    for (auto p : parts) {
        ODEINF_REQUIRE(t.value(p).rows() == rows, "ad::concat_cols: row mismatch");
        cols += t.value(p).cols();
    }
    typename Tape<T>::Mat out(rows, cols);
    Eigen::Index off = 0;
    for (auto p : parts) {
        out.middleCols(off, t.value(p).cols()) = t.value(p);
        off += t.value(p).cols();
    }
    return t.emit_list(
        std::move(out),
        [parts](Tape<T>& tp, std::uint32_t self) {
            Eigen::Index o = 0;
            for (auto p : parts) {
                const Eigen::Index w = tp.value(p).cols();
                if (tp.requires_grad(p)) tp.accumulate(p, tp.out_grad(self).middleCols(o, w));
                o += w;
            }
        },
        parts);
}

template <typename T>
Var slice_cols(Tape<T>& t, Var a, Eigen::Index start, Eigen::Index count) {
    ODEINF_REQUIRE(start >= 0 && start + count <= t.value(a).cols(), "ad::slice_cols: out of range");
    return t.emit(
        t.value(a).middleCols(start, count),
        [a, start, count](Tape<T>& tp, std::uint32_t self) {
            tp.grad_buffer(a).middleCols(start, count) += tp.out_grad(self);
        },
        a);
}

/// Selects rows by index (indices may repeat).
template <typename T>
Var gather_rows(Tape<T>& t, Var a, std::vector<Eigen::Index> rows) {
    const auto& A = t.value(a);
    typename Tape<T>::Mat out(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        ODEINF_REQUIRE(rows[i] >= 0 && rows[i] < A.rows(), "ad::gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    }
    return t.emit(
        std::move(out),
        [a, rows = std::move(rows)](Tape<T>& tp, std::uint32_t self) {
            auto& g = tp.grad_buffer(a);
            const auto& og = tp.out_grad(self);
            for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += og.row(static_cast<Eigen::Index>(i));
        },
        a);
}

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
template <typename T>
Var dropout(Tape<T>& t, Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    const auto& A = t.value(a);
    typename Tape<T>::Mat mask(A.rows(), A.cols());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index j = 0; j < A.cols(); ++j)
        for (Eigen::Index i = 0; i < A.rows(); ++i) mask(i, j) = rng.bernoulli(p) ? T(0) : keep_scale;
    typename Tape<T>::Mat out = A.cwiseProduct(mask);
    return t.emit(
        std::move(out),
        [a, mask = std::move(mask)](Tape<T>& tp, std::uint32_t self) {
            tp.accumulate(a, tp.out_grad(self).cwiseProduct(mask));
        },
        a);
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
    typename Tape<T>::Mat out(1, 1);
    out(0, 0) = t.value(a).sum();
    return t.emit(
        std::move(out),
        [a](Tape<T>& tp, std::uint32_t self) {
            const T g = tp.out_grad(self)(0, 0);
            tp.accumulate(a, Matrix<T>::Constant(tp.value(a).rows(), tp.value(a).cols(), g));
        },
        a);
}

/// weight * sum |a - target| with a constant target of the same shape.
template <typename T>
Var weighted_l1(Tape<T>& t, Var a, Matrix<T> target, T weight) {
    ODEINF_REQUIRE(target.rows() == t.value(a).rows() && target.cols() == t.value(a).cols(), "ad::weighted_l1: shape mismatch");
    typename Tape<T>::Mat out(1, 1);
    out(0, 0) = weight * (t.value(a) - target).cwiseAbs().sum();
    return t.emit(
        std::move(out),
        [a, target = std::move(target), weight](Tape<T>& tp, std::uint32_t self) {
            const T g = tp.out_grad(self)(0, 0) * weight;
            tp.accumulate(a, ((tp.value(a) - target).array().sign() * g).matrix());
        },
        a);
}

// ---------------------------------------------------------------------------
// Attention kernels

/// Multi-head softmax cross-attention. Q is (nq x n), K and V are (nk x n);
/// heads split the width into contiguous blocks. Returns (nq x n).
template <typename T>
Var softmax_attention(Tape<T>& t, Var q, Var k, Var v, int heads) {
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    ODEINF_REQUIRE(Q.cols() == K.cols() && K.cols() == V.cols() && K.rows() == V.rows(),
                   "ad::softmax_attention: shape mismatch");
    ODEINF_REQUIRE(K.rows() >= 1, "ad::softmax_attention: no keys");
    ODEINF_REQUIRE(heads >= 1 && Q.cols() % heads == 0, "ad::softmax_attention: width not divisible by heads");
    const Eigen::Index dh = Q.cols() / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    typename Tape<T>::Mat out(Q.rows(), Q.cols());
    std::vector<typename Tape<T>::Mat> probs(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto& A = probs[static_cast<std::size_t>(h)];
        A.noalias() = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * sc;
        A.colwise() -= A.rowwise().maxCoeff();
        A = A.array().exp().matrix();
        A.array().colwise() /= A.rowwise().sum().array();
        out.middleCols(h * dh, dh).noalias() = A * V.middleCols(h * dh, dh);
    }
    if (!t.recording()) probs.clear();
    return t.emit(
        std::move(out),
        [q, k, v, heads, dh, sc, probs = std::move(probs)](Tape<T>& tp, std::uint32_t self) {
            const auto& G = tp.out_grad(self);
            const auto& Qv = tp.value(q);
            const auto& Kv = tp.value(k);
            const auto& Vv = tp.value(v);
            const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
            typename Tape<T>::Mat dQ, dK, dV;
            if (gq) dQ.setZero(Qv.rows(), Qv.cols());
            if (gk) dK.setZero(Kv.rows(), Kv.cols());
            if (gv) dV.setZero(Vv.rows(), Vv.cols());
            for (int h = 0; h < heads; ++h) {
                const auto& A = probs[static_cast<std::size_t>(h)];
                const auto Gh = G.middleCols(h * dh, dh);
                if (gv) dV.middleCols(h * dh, dh).noalias() = A.transpose() * Gh;
                if (!gq && !gk) continue;
                typename Tape<T>::Mat dA(A.rows(), A.cols());
                dA.noalias() = Gh * Vv.middleCols(h * dh, dh).transpose();
                typename Tape<T>::Mat rs = dA.cwiseProduct(A).rowwise().sum();
                dA.colwise() -= rs.col(0);
                dA = dA.cwiseProduct(A) * sc; // dS
                if (gq) dQ.middleCols(h * dh, dh).noalias() = dA * Kv.middleCols(h * dh, dh);
                if (gk) dK.middleCols(h * dh, dh).noalias() = dA.transpose() * Qv.middleCols(h * dh, dh);
            }
            if (gq) tp.accumulate(q, dQ);
            if (gk) tp.accumulate(k, dK);
            if (gv) tp.accumulate(v, dV);
        },
        q, k, v);
}

/// Multi-head non-causal linear attention with positive feature maps already
/// applied: out_i = fq_i^T (sum_j fk_j v_j^T) / (fq_i^T sum_j fk_j), per head.
template <typename T>
Var linear_attention(Tape<T>& t, Var fq, Var fk, Var v, int heads) {
    const auto& FQ = t.value(fq);
    const auto& FK = t.value(fk);
    const auto& V = t.value(v);
    ODEINF_REQUIRE(FQ.cols() == FK.cols() && FK.cols() == V.cols() && FK.rows() == V.rows(),
                   "ad::linear_attention: shape mismatch");
    ODEINF_REQUIRE(FK.rows() >= 1, "ad::linear_attention: no keys");
    ODEINF_REQUIRE(heads >= 1 && FQ.cols() % heads == 0, "ad::linear_attention: width not divisible by heads");
    const Eigen::Index dh = FQ.cols() / heads;
    typename Tape<T>::Mat out(FQ.rows(), FQ.cols());
    typename Tape<T>::Mat den(FQ.rows(), heads);
    std::vector<typename Tape<T>::Mat> kv(static_cast<std::size_t>(heads));
    std::vector<typename Tape<T>::Mat> z(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto& KV = kv[static_cast<std::size_t>(h)];
        auto& Z = z[static_cast<std::size_t>(h)];
        KV.noalias() = FK.middleCols(h * dh, dh).transpose() * V.middleCols(h * dh, dh); // dh x dh
        Z = FK.middleCols(h * dh, dh).colwise().sum().transpose();                       // dh x 1
        den.col(h).noalias() = FQ.middleCols(h * dh, dh) * Z;
        out.middleCols(h * dh, dh).noalias() = FQ.middleCols(h * dh, dh) * KV;
        out.middleCols(h * dh, dh).array().colwise() /= den.col(h).array();
    }
    return t.emit(
        std::move(out),
        [fq, fk, v, heads, dh, kv = std::move(kv), z = std::move(z), den = std::move(den)](Tape<T>& tp, std::uint32_t self) {
            const auto& G = tp.out_grad(self);
            const auto& O = tp.value(Var{self});
            const auto& FQv = tp.value(fq);
            const auto& FKv = tp.value(fk);
            const auto& Vv = tp.value(v);
            const bool gq = tp.requires_grad(fq), gk = tp.requires_grad(fk), gv = tp.requires_grad(v);
            typename Tape<T>::Mat dFQ, dFK, dV;
            if (gq) dFQ.resize(FQv.rows(), FQv.cols());
            if (gk) dFK.resize(FKv.rows(), FKv.cols());
            if (gv) dV.resize(Vv.rows(), Vv.cols());
            for (int h = 0; h < heads; ++h) {
                const auto Gh = G.middleCols(h * dh, dh);
                // numerator gradient and denominator gradient
                typename Tape<T>::Mat dNum = Gh.array().colwise() / den.col(h).array();
                typename Tape<T>::Mat dDen =
                    -(Gh.cwiseProduct(O.middleCols(h * dh, dh)).rowwise().sum().array() / den.col(h).array()).matrix();
                if (gq) {
                    dFQ.middleCols(h * dh, dh).noalias() = dNum * kv[static_cast<std::size_t>(h)].transpose();
                    dFQ.middleCols(h * dh, dh).noalias() += dDen * z[static_cast<std::size_t>(h)].transpose();
                }
                if (gk || gv) {
                    typename Tape<T>::Mat dKV(dh, dh);
                    dKV.noalias() = FQv.middleCols(h * dh, dh).transpose() * dNum;
                    if (gk) {
                        typename Tape<T>::Mat dz = FQv.middleCols(h * dh, dh).transpose() * dDen; // dh x 1
                        dFK.middleCols(h * dh, dh).noalias() = Vv.middleCols(h * dh, dh) * dKV.transpose();
                        dFK.middleCols(h * dh, dh).rowwise() += dz.col(0).transpose();
                    }
                    if (gv) dV.middleCols(h * dh, dh).noalias() = FKv.middleCols(h * dh, dh) * dKV;
                }
            }
            if (gq) tp.accumulate(fq, dFQ);
            if (gk) tp.accumulate(fk, dFK);
            if (gv) tp.accumulate(v, dV);
        },
        fq, fk, v);
}

// ---------------------------------------------------------------------------
// Loss

/// Uncertainty-weighted L1 loss: mean over rows q of exp(-U_q) r_q + U_q, where
/// r_q is the mean absolute residual over the dimensions with mask == 1.
template <typename T>
Var uncertainty_l1(Tape<T>& t, Var pred, Var log_var, Matrix<T> target, std::vector<std::uint8_t> dim_mask) {
    const auto& P = t.value(pred);
    const auto& U = t.value(log_var);
    ODEINF_REQUIRE(P.rows() == target.rows() && P.cols() == target.cols(), "ad::uncertainty_l1: target shape mismatch");
    ODEINF_REQUIRE(U.rows() == P.rows() && U.cols() == 1, "ad::uncertainty_l1: log-variance shape mismatch");
    ODEINF_REQUIRE(static_cast<Eigen::Index>(dim_mask.size()) == P.cols(), "ad::uncertainty_l1: mask length mismatch");
    int active = 0;
    for (auto m : dim_mask) active += m ? 1 : 0;
    ODEINF_REQUIRE(active > 0, "ad::uncertainty_l1: no active dimension");
    ODEINF_REQUIRE(P.allFinite() && U.allFinite() && target.allFinite(), "ad::uncertainty_l1: non-finite input");

    const Eigen::Index nq = P.rows();
    Matrix<T> r = Matrix<T>::Zero(nq, 1);
    for (Eigen::Index d = 0; d < P.cols(); ++d)
        if (dim_mask[static_cast<std::size_t>(d)]) r += (P.col(d) - target.col(d)).cwiseAbs();
    r /= static_cast<T>(active);
    Matrix<T> w = (-U.array()).exp().matrix();
    Matrix<T> out(1, 1);
    out(0, 0) = (w.cwiseProduct(r) + U).sum() / static_cast<T>(nq);
    return t.emit(
        std::move(out),
        [pred, log_var, target = std::move(target), dim_mask = std::move(dim_mask), r = std::move(r), w = std::move(w),
         active](Tape<T>& tp, std::uint32_t self) {
            const T g = tp.out_grad(self)(0, 0) / static_cast<T>(tp.value(pred).rows());
            if (tp.requires_grad(pred)) {
                const auto& Pv = tp.value(pred);
                Matrix<T> dP = Matrix<T>::Zero(Pv.rows(), Pv.cols());
                for (Eigen::Index d = 0; d < Pv.cols(); ++d)
                    if (dim_mask[static_cast<std::size_t>(d)])
                        dP.col(d) = (Pv.col(d) - target.col(d)).array().sign() * w.col(0).array() *
                                    (g / static_cast<T>(active));
                tp.accumulate(pred, dP);
            }
            if (tp.requires_grad(log_var)) tp.accumulate(log_var, ((T(1) - w.array() * r.array()) * g).matrix());
        },
        pred, log_var);
}

} // namespace odeinf::ad
