#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "hylm/error.hpp"
#include "hylm/rng.hpp"

namespace hylm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? "x" : "") + std::to_string(s[i]);
    }
    return out + "]";
}

// Boolean mask companion for softmax_rows. true = visible.
struct BoolMat {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> data;

    BoolMat() = default;
    BoolMat(std::size_t r, std::size_t c, bool fill = false)
        : rows(r), cols(c), data(r * c, fill ? 1 : 0) {}

    std::uint8_t& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    std::uint8_t at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

namespace detail {

template <class Real>
struct Node {
    Shape shape;
    std::vector<Real> val;
    std::vector<Real> grad; // allocated for leaves with requires_grad, lazily otherwise
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() != val.size()) {
            grad.assign(val.size(), Real(0));
        }
    }
};

// Thread-local depth counter for no-grad regions.
inline int& nograd_depth() {
    thread_local int depth = 0;
    return depth;
}

} // namespace detail

// Suppresses graph construction inside its scope (inference / decode loops).
struct NoGradGuard {
    NoGradGuard() { ++detail::nograd_depth(); }
    ~NoGradGuard() { --detail::nograd_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::nograd_depth() == 0; }

// Dense row-major tensor handle with reverse-mode gradient accumulation.
// 1-D and 2-D shapes only; no broadcasting beyond the explicit *_rowvec ops.
template <class Real>
class Tensor {
  public:
    using Node = detail::Node<Real>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), Real(0), requires_grad);
    }

    static Tensor filled(Shape shape, Real v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val.assign(shape_numel(n->shape), v);
        n->requires_grad = requires_grad;
        if (requires_grad) {
            n->ensure_grad();
        }
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val = std::move(data);
        n->requires_grad = requires_grad;
        if (requires_grad) {
            n->ensure_grad();
        }
        return Tensor(std::move(n));
    }

    static Tensor gaussian(Shape shape, RngStream& rng, Real stddev, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->val) {
            v = static_cast<Real>(rng.gaussian()) * stddev;
        }
        return t;
    }

    static Tensor scalar(Real v, bool requires_grad = false) {
        return filled({std::size_t(1)}, v, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->val.size(); }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t rows() const { return n_->shape.at(0); }
    std::size_t cols() const { return rank() == 2 ? n_->shape[1] : std::size_t(1); }
    bool is_scalar() const { return size() == 1; }
    bool requires_grad() const { return n_->requires_grad; }

    std::span<const Real> value() const { return n_->val; }
    // Direct mutation; only valid before the tensor participates in a graph.
    std::span<Real> value_mut() { return n_->val; }

    std::span<const Real> grad() const {
        const_cast<Node*>(n_.get())->ensure_grad();
        return n_->grad;
    }

    Real at(std::size_t i) const { return n_->val.at(i); }
    Real at(std::size_t i, std::size_t j) const { return n_->val.at(i * cols() + j); }
    Real item() const {
        if (!is_scalar()) {
            throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        }
        return n_->val[0];
    }

    void zero_grad() {
        n_->grad.assign(n_->val.size(), Real(0));
    }

    // Values-only copy, detached from any graph.
    Tensor detached() const {
        auto n = std::make_shared<Node>();
        n->shape = n_->shape;
        n->val = n_->val;
        return Tensor(std::move(n));
    }

    std::shared_ptr<Node> node() const { return n_; }

  private:
    std::shared_ptr<Node> n_;
};

namespace detail {

template <class Real>
std::shared_ptr<Node<Real>> make_result(Shape shape,
                                        std::initializer_list<Tensor<Real>> inputs) {
    auto n = std::make_shared<Node<Real>>();
    n->shape = std::move(shape);
    n->val.assign(shape_numel(n->shape), Real(0));
    if (grad_enabled()) {
        for (const auto& t : inputs) {
            if (t.defined() && t.requires_grad()) {
                n->requires_grad = true;
            }
        }
        if (n->requires_grad) {
            for (const auto& t : inputs) {
                if (t.defined()) {
                    n->parents.push_back(t.node());
                }
            }
        }
    }
    return n;
}

template <class Real>
void check_2d(const Tensor<Real>& t, const char* what) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(what) + " expects a 2-D tensor, got " + shape_str(t.shape()));
    }
}

template <class Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_2d(a, "matmul lhs");
    detail::check_2d(b, "matmul rhs");
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    auto out = detail::make_result<Real>({m, n}, {a, b});
    const Real* av = a.value().data();
    const Real* bv = b.value().data();
    Real* ov = out->val.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const Real aip = av[i * k + p];
            if (aip == Real(0)) {
                continue;
            }
            const Real* brow = bv + p * n;
            Real* orow = ov + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        out->backprop = [an, bn, m, k, n](detail::Node<Real>& self) {
            const Real* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dY * B^T
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        Real acc = 0;
                        const Real* grow = g + i * n;
                        const Real* brow = bn->val.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += grow[j] * brow[j];
                        }
                        an->grad[i * k + p] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T * dY
                for (std::size_t p = 0; p < k; ++p) {
                    for (std::size_t i = 0; i < m; ++i) {
                        const Real aip = an->val[i * k + p];
                        if (aip == Real(0)) {
                            continue;
                        }
                        const Real* grow = g + i * n;
                        Real* brow = bn->grad.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            brow[j] += aip * grow[j];
                        }
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
    detail::check_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    auto out = detail::make_result<Real>({n, m}, {a});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out->val[j * m + i] = a.at(i, j);
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, m, n](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    an->grad[i * n + j] += self.grad[j * m + i];
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = detail::make_result<Real>(a.shape(), {a, b});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = a.value()[i] + b.value()[i];
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        out->backprop = [an, bn](detail::Node<Real>& self) {
            for (auto* p : {an.get(), bn.get()}) {
                if (!p->requires_grad) {
                    continue;
                }
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    p->grad[i] += self.grad[i];
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = detail::make_result<Real>(a.shape(), {a, b});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = a.value()[i] - b.value()[i];
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        out->backprop = [an, bn](detail::Node<Real>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    an->grad[i] += self.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    bn->grad[i] -= self.grad[i];
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = detail::make_result<Real>(a.shape(), {a, b});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = a.value()[i] * b.value()[i];
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        out->backprop = [an, bn](detail::Node<Real>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    an->grad[i] += self.grad[i] * bn->val[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    bn->grad[i] += self.grad[i] * an->val[i];
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    auto out = detail::make_result<Real>(a.shape(), {a});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = a.value()[i] * c;
    }
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, c](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += self.grad[i] * c;
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    return scale(a, Real(-1));
}

// Broadcast a length-n vector across every row of an m x n matrix.
template <class Real>
Tensor<Real> mul_rowvec(const Tensor<Real>& a, const Tensor<Real>& v) {
    detail::check_2d(a, "mul_rowvec");
    if (v.size() != a.cols()) {
        throw ShapeError("mul_rowvec: vector length " + std::to_string(v.size()) +
                         " vs matrix cols " + std::to_string(a.cols()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    auto out = detail::make_result<Real>({m, n}, {a, v});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out->val[i * n + j] = a.at(i, j) * v.value()[j];
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto vn = v.node();
        out->backprop = [an, vn, m, n](detail::Node<Real>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        an->grad[i * n + j] += self.grad[i * n + j] * vn->val[j];
                    }
                }
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        vn->grad[j] += self.grad[i * n + j] * an->val[i * n + j];
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> add_rowvec(const Tensor<Real>& a, const Tensor<Real>& v) {
    detail::check_2d(a, "add_rowvec");
    if (v.size() != a.cols()) {
        throw ShapeError("add_rowvec: vector length " + std::to_string(v.size()) +
                         " vs matrix cols " + std::to_string(a.cols()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    auto out = detail::make_result<Real>({m, n}, {a, v});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out->val[i * n + j] = a.at(i, j) + v.value()[j];
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto vn = v.node();
        out->backprop = [an, vn, m, n](detail::Node<Real>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m * n; ++i) {
                    an->grad[i] += self.grad[i];
                }
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        vn->grad[j] += self.grad[i * n + j];
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> softplus(const Tensor<Real>& a) {
    auto out = detail::make_result<Real>(a.shape(), {a});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        const Real x = a.value()[i];
        // log(1+exp(x)), overflow-safe for large positive x.
        out->val[i] = x > Real(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const Real x = an->val[i];
                const Real sig = Real(1) / (Real(1) + std::exp(-x));
                an->grad[i] += self.grad[i] * sig;
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> silu(const Tensor<Real>& a) {
    auto out = detail::make_result<Real>(a.shape(), {a});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        const Real x = a.value()[i];
        out->val[i] = x / (Real(1) + std::exp(-x));
    }
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const Real x = an->val[i];
                const Real sig = Real(1) / (Real(1) + std::exp(-x));
                an->grad[i] += self.grad[i] * sig * (Real(1) + x * (Real(1) - sig));
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
    auto out = detail::make_result<Real>(a.shape(), {a});
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = std::exp(a.value()[i]);
    }
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += self.grad[i] * self.val[i];
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// Row-wise softmax with optional visibility mask. Masked entries are exactly
// zero in the output and are never read by the reduction, so outputs at
// position i are bitwise independent of masked-out inputs. A fully masked row
// throws DegenerateRowError.
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& a, const BoolMat* mask = nullptr) {
    detail::check_2d(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (mask && (mask->rows != m || mask->cols != n)) {
        throw ShapeError("softmax_rows: mask " + std::to_string(mask->rows) + "x" +
                         std::to_string(mask->cols) + " vs input " + shape_str(a.shape()));
    }
    auto out = detail::make_result<Real>({m, n}, {a});
    std::vector<std::uint8_t> vis;
    if (mask) {
        vis = mask->data;
    }
    const auto visible = [&](std::size_t i, std::size_t j) {
        return !mask || vis[i * n + j];
    };
    for (std::size_t i = 0; i < m; ++i) {
        Real mx = -std::numeric_limits<Real>::infinity();
        std::size_t count = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (visible(i, j)) {
                mx = std::max(mx, a.at(i, j));
                ++count;
            }
        }
        if (count == 0) {
            throw DegenerateRowError("softmax_rows: row " + std::to_string(i) +
                                     " is fully masked (nothing to attend to)");
        }
        Real denom = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (visible(i, j)) {
                const Real e = std::exp(a.at(i, j) - mx);
                out->val[i * n + j] = e;
                denom += e;
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (visible(i, j)) {
                out->val[i * n + j] /= denom;
            }
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        const bool masked = mask != nullptr;
        out->backprop = [an, m, n, masked, vis](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                Real dot = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += self.grad[i * n + j] * self.val[i * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    if (masked && !vis[i * n + j]) {
                        continue;
                    }
                    an->grad[i * n + j] +=
                        self.val[i * n + j] * (self.grad[i * n + j] - dot);
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// Row-wise RMS normalization over the channel (column) dimension with a
// learnable per-channel gain: y_ij = g_j * x_ij / sqrt(mean_j(x^2) + eps).
template <class Real>
Tensor<Real> rmsnorm_rows(const Tensor<Real>& a, const Tensor<Real>& gain, Real eps) {
    detail::check_2d(a, "rmsnorm_rows");
    if (gain.size() != a.cols()) {
        throw ShapeError("rmsnorm_rows: gain length " + std::to_string(gain.size()) +
                         " vs cols " + std::to_string(a.cols()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    auto out = detail::make_result<Real>({m, n}, {a, gain});
    std::vector<Real> rms(m);
    for (std::size_t i = 0; i < m; ++i) {
        Real s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const Real x = a.at(i, j);
            s += x * x;
        }
        rms[i] = std::sqrt(s / Real(n) + eps);
        for (std::size_t j = 0; j < n; ++j) {
            out->val[i * n + j] = gain.value()[j] * a.at(i, j) / rms[i];
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto gn = gain.node();
        out->backprop = [an, gn, m, n, rms](detail::Node<Real>& self) {
            for (std::size_t i = 0; i < m; ++i) {
                const Real r = rms[i];
                if (an->requires_grad) {
                    an->ensure_grad();
                    // dL/dx_j = g_j*dy_j/r - x_j * sum_k(dy_k*g_k*x_k) / (n*r^3)
                    Real dot = 0;
                    for (std::size_t k = 0; k < n; ++k) {
                        dot += self.grad[i * n + k] * gn->val[k] * an->val[i * n + k];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        an->grad[i * n + j] += gn->val[j] * self.grad[i * n + j] / r -
                                               an->val[i * n + j] * dot / (Real(n) * r * r * r);
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) {
                        gn->grad[j] += self.grad[i * n + j] * an->val[i * n + j] / r;
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
    auto out = detail::make_result<Real>({std::size_t(1)}, {a});
    Real s = 0;
    for (Real v : a.value()) {
        s += v;
    }
    out->val[0] = s;
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an](detail::Node<Real>& self) {
            an->ensure_grad();
            for (auto& g : an->grad) {
                g += self.grad[0];
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
    return scale(sum(a), Real(1) / Real(a.size()));
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, std::size_t c0, std::size_t c1) {
    detail::check_2d(a, "slice_cols");
    if (c0 >= c1 || c1 > a.cols()) {
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
    auto out = detail::make_result<Real>({m, w}, {a});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out->val[i * w + j] = a.at(i, c0 + j);
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, m, n, w, c0](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    an->grad[i * n + c0 + j] += self.grad[i * w + j];
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& a, std::size_t r0, std::size_t r1) {
    detail::check_2d(a, "slice_rows");
    if (r0 >= r1 || r1 > a.rows()) {
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_str(a.shape()));
    }
    const std::size_t n = a.cols(), h = r1 - r0;
    auto out = detail::make_result<Real>({h, n}, {a});
    std::copy_n(a.value().data() + r0 * n, h * n, out->val.data());
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, n, h, r0](detail::Node<Real>& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < h * n; ++i) {
                an->grad[r0 * n + i] += self.grad[i];
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: empty input list");
    }
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_cols");
        if (p.rows() != m) {
            throw ShapeError("concat_cols: row counts differ");
        }
        total += p.cols();
    }
    auto n = std::make_shared<detail::Node<Real>>();
    n->shape = {m, total};
    n->val.assign(m * total, Real(0));
    if (grad_enabled()) {
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                n->requires_grad = true;
            }
        }
        if (n->requires_grad) {
            for (const auto& p : parts) {
                n->parents.push_back(p.node());
            }
        }
    }
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                n->val[i * total + off + j] = p.at(i, j);
            }
        }
        off += w;
    }
    if (n->requires_grad) {
        std::vector<std::shared_ptr<detail::Node<Real>>> srcs;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            srcs.push_back(p.node());
            widths.push_back(p.cols());
        }
        n->backprop = [srcs, widths, m, total](detail::Node<Real>& self) {
            std::size_t off2 = 0;
            for (std::size_t s = 0; s < srcs.size(); ++s) {
                const std::size_t w = widths[s];
                if (srcs[s]->requires_grad) {
                    srcs[s]->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < w; ++j) {
                            srcs[s]->grad[i * w + j] += self.grad[i * total + off2 + j];
                        }
                    }
                }
                off2 += w;
            }
        };
    }
    return Tensor<Real>(std::move(n));
}

template <class Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_rows: empty input list");
    }
    const std::size_t n_cols = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_rows");
        if (p.cols() != n_cols) {
            throw ShapeError("concat_rows: column counts differ");
        }
        total += p.rows();
    }
    auto n = std::make_shared<detail::Node<Real>>();
    n->shape = {total, n_cols};
    n->val.assign(total * n_cols, Real(0));
    if (grad_enabled()) {
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                n->requires_grad = true;
            }
        }
        if (n->requires_grad) {
            for (const auto& p : parts) {
                n->parents.push_back(p.node());
            }
        }
    }
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.value().data(), p.size(), n->val.data() + off * n_cols);
        off += p.rows();
    }
    if (n->requires_grad) {
        std::vector<std::shared_ptr<detail::Node<Real>>> srcs;
        std::vector<std::size_t> heights;
        for (const auto& p : parts) {
            srcs.push_back(p.node());
            heights.push_back(p.rows());
        }
        n->backprop = [srcs, heights, n_cols](detail::Node<Real>& self) {
            std::size_t off2 = 0;
            for (std::size_t s = 0; s < srcs.size(); ++s) {
                if (srcs[s]->requires_grad) {
                    srcs[s]->ensure_grad();
                    for (std::size_t i = 0; i < heights[s] * n_cols; ++i) {
                        srcs[s]->grad[i] += self.grad[off2 * n_cols + i];
                    }
                }
                off2 += heights[s];
            }
        };
    }
    return Tensor<Real>(std::move(n));
}

// Gather rows of an embedding table by token id.
template <class Real>
Tensor<Real> embedding_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
    detail::check_2d(table, "embedding_rows");
    const std::size_t v = table.rows(), d = table.cols(), L = ids.size();
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw ContractError("embedding_rows: token id " + std::to_string(id) +
                                " out of vocab " + std::to_string(v));
        }
    }
    auto out = detail::make_result<Real>({L, d}, {table});
    for (std::size_t i = 0; i < L; ++i) {
        std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out->val.data() + i * d);
    }
    if (out->requires_grad) {
        auto tn = table.node();
        out->backprop = [tn, ids, d](detail::Node<Real>& self) {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                Real* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                const Real* src = self.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += src[j];
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// Mean masked cross-entropy over rows: sum_i w_i*(logsumexp(z_i) - z_i[t_i]) / sum_i w_i.
// Rows with weight zero contribute nothing (and their targets may be arbitrary).
template <class Real>
Tensor<Real> cross_entropy_rows(const Tensor<Real>& logits, const std::vector<int>& targets,
                                const std::vector<Real>& row_weights) {
    detail::check_2d(logits, "cross_entropy_rows");
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m || row_weights.size() != m) {
        throw ShapeError("cross_entropy_rows: need one target and weight per row");
    }
    Real wsum = 0;
    for (Real w : row_weights) {
        wsum += w;
    }
    if (wsum <= Real(0)) {
        throw ContractError("cross_entropy_rows: total row weight must be positive");
    }
    auto out = detail::make_result<Real>({std::size_t(1)}, {logits});
    std::vector<Real> lse(m);
    Real loss = 0;
    for (std::size_t i = 0; i < m; ++i) {
        if (row_weights[i] == Real(0)) {
            continue;
        }
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
            throw ContractError("cross_entropy_rows: target out of range at row " +
                                std::to_string(i));
        }
        Real mx = logits.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, logits.at(i, j));
        }
        Real denom = 0;
        for (std::size_t j = 0; j < n; ++j) {
            denom += std::exp(logits.at(i, j) - mx);
        }
        lse[i] = mx + std::log(denom);
        loss += row_weights[i] * (lse[i] - logits.at(i, static_cast<std::size_t>(targets[i])));
    }
    out->val[0] = loss / wsum;
    if (out->requires_grad) {
        auto ln = logits.node();
        out->backprop = [ln, targets, row_weights, wsum, lse, m, n](detail::Node<Real>& self) {
            ln->ensure_grad();
            const Real g = self.grad[0];
            for (std::size_t i = 0; i < m; ++i) {
                if (row_weights[i] == Real(0)) {
                    continue;
                }
                const Real coeff = g * row_weights[i] / wsum;
                for (std::size_t j = 0; j < n; ++j) {
                    const Real p = std::exp(ln->val[i * n + j] - lse[i]);
                    ln->grad[i * n + j] += coeff * p;
                }
                ln->grad[i * n + static_cast<std::size_t>(targets[i])] -= coeff;
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

// Applies rotary embedding to each head_dim-wide block of x, one block per
// head, using the half-split pairing: channel k rotates with k + head_dim/2.
// positions supplies the absolute position of each row.
template <class Real>
Tensor<Real> rope_rows(const Tensor<Real>& x, const std::vector<long>& positions,
                       std::size_t head_dim, double base) {
    detail::check_2d(x, "rope_rows");
    const std::size_t L = x.rows(), w = x.cols();
    if (positions.size() != L) {
        throw ShapeError("rope_rows: positions length vs rows mismatch");
    }
    if (head_dim == 0 || head_dim % 2 != 0 || w % head_dim != 0) {
        throw ShapeError("rope_rows: width " + std::to_string(w) +
                         " not a multiple of even head_dim " + std::to_string(head_dim));
    }
    const std::size_t heads = w / head_dim, half = head_dim / 2;
    std::vector<Real> cosv(L * half), sinv(L * half);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t k = 0; k < half; ++k) {
            const double freq =
                std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
            const double theta = static_cast<double>(positions[i]) * freq;
            cosv[i * half + k] = static_cast<Real>(std::cos(theta));
            sinv[i * half + k] = static_cast<Real>(std::sin(theta));
        }
    }
    auto out = detail::make_result<Real>({L, w}, {x});
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = i * w + h * head_dim;
            for (std::size_t k = 0; k < half; ++k) {
                const Real c = cosv[i * half + k], s = sinv[i * half + k];
                const Real a = x.value()[off + k], b = x.value()[off + half + k];
                out->val[off + k] = a * c - b * s;
                out->val[off + half + k] = a * s + b * c;
            }
        }
    }
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, cosv, sinv, L, w, heads, head_dim, half](detail::Node<Real>& self) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < L; ++i) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = i * w + h * head_dim;
                    for (std::size_t k = 0; k < half; ++k) {
                        const Real c = cosv[i * half + k], s = sinv[i * half + k];
                        const Real ga = self.grad[off + k], gb = self.grad[off + half + k];
                        // Inverse rotation (transpose of the 2x2 rotation).
                        xn->grad[off + k] += ga * c + gb * s;
                        xn->grad[off + half + k] += -ga * s + gb * c;
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// ---------------------------------------------------------------------------
// Depthwise causal convolution
// ---------------------------------------------------------------------------

// y[i,c] = b[c] + sum_k w[c,k] * xin[i-K+1+k, c], where xin is x prefixed by
// `tail` (the last K-1 rows of the previous chunk; zeros when absent).
// Gradients flow into x, w, b; the tail is carried state, not differentiable.
template <class Real>
Tensor<Real> causal_conv1d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                           const std::vector<Real>* tail = nullptr) {
    detail::check_2d(x, "causal_conv1d input");
    detail::check_2d(w, "causal_conv1d weight");
    const std::size_t L = x.rows(), C = x.cols(), K = w.cols();
    if (w.rows() != C || b.size() != C) {
        throw ShapeError("causal_conv1d: weight " + shape_str(w.shape()) + " / bias " +
                         shape_str(b.shape()) + " vs channels " + std::to_string(C));
    }
    if (tail && tail->size() != (K - 1) * C) {
        throw ShapeError("causal_conv1d: tail must hold (K-1) x C values");
    }
    auto out = detail::make_result<Real>({L, C}, {x, w, b});
    const auto xin = [&](long p, std::size_t c) -> Real {
        if (p >= 0) {
            return x.value()[static_cast<std::size_t>(p) * C + c];
        }
        if (!tail) {
            return Real(0);
        }
        const long t = p + static_cast<long>(K) - 1; // tail row index
        return (*tail)[static_cast<std::size_t>(t) * C + c];
    };
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            Real acc = b.value()[c];
            for (std::size_t k = 0; k < K; ++k) {
                const long p = static_cast<long>(i) - static_cast<long>(K) + 1 +
                               static_cast<long>(k);
                acc += w.at(c, k) * xin(p, c);
            }
            out->val[i * C + c] = acc;
        }
    }
    if (out->requires_grad) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = b.node();
        std::vector<Real> tail_copy = tail ? *tail : std::vector<Real>((K - 1) * C, Real(0));
        out->backprop = [xn, wn, bn, tail_copy, L, C, K](detail::Node<Real>& self) {
            for (std::size_t i = 0; i < L; ++i) {
                for (std::size_t c = 0; c < C; ++c) {
                    const Real g = self.grad[i * C + c];
                    if (g == Real(0)) {
                        continue;
                    }
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[c] += g;
                    }
                    for (std::size_t k = 0; k < K; ++k) {
                        const long p = static_cast<long>(i) - static_cast<long>(K) + 1 +
                                       static_cast<long>(k);
                        const Real xv =
                            p >= 0 ? xn->val[static_cast<std::size_t>(p) * C + c]
                                   : tail_copy[static_cast<std::size_t>(p + static_cast<long>(K) -
                                                                        1) *
                                                   C +
                                               c];
                        if (wn->requires_grad) {
                            wn->ensure_grad();
                            wn->grad[c * K + k] += g * xv;
                        }
                        if (p >= 0 && xn->requires_grad) {
                            xn->ensure_grad();
                            xn->grad[static_cast<std::size_t>(p) * C + c] += g * wn->val[c * K + k];
                        }
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// ---------------------------------------------------------------------------
// Selective-scan recurrence
// ---------------------------------------------------------------------------

// Per channel c and state s:
//   h_i = exp(A[c,s] * dt[i,c]) * h_{i-1} + dt[i,c] * B[i,s] * x[i,c]
//   y[i,c] = sum_s Cm[i,s] * h_i[c,s]
// Empty products are 1, so y_1 from a zero state is C_1*dt_1*B_1*x_1.
// h0 (C x S, row-major) seeds the recurrence for streaming; it is carried
// state, not differentiable. When h_final is non-null the final state is
// written there.
template <class Real>
Tensor<Real> ssm_scan(const Tensor<Real>& x, const Tensor<Real>& dt, const Tensor<Real>& B,
                      const Tensor<Real>& Cm, const Tensor<Real>& A,
                      const std::vector<Real>* h0 = nullptr,
                      std::vector<Real>* h_final = nullptr) {
    detail::check_2d(x, "ssm_scan x");
    const std::size_t L = x.rows(), C = x.cols();
    const std::size_t S = B.cols();
    if (dt.rows() != L || dt.cols() != C) {
        throw ShapeError("ssm_scan: dt " + shape_str(dt.shape()) + " vs x " +
                         shape_str(x.shape()));
    }
    if (B.rows() != L || Cm.rows() != L || Cm.cols() != S) {
        throw ShapeError("ssm_scan: B/C must be L x S");
    }
    if (A.rows() != C || A.cols() != S) {
        throw ShapeError("ssm_scan: A " + shape_str(A.shape()) + " must be " +
                         std::to_string(C) + "x" + std::to_string(S));
    }
    if (h0 && h0->size() != C * S) {
        throw ShapeError("ssm_scan: h0 must hold C x S values");
    }

    auto out = detail::make_result<Real>({L, C}, {x, dt, B, Cm, A});
    const bool need_grad = out->requires_grad;

    // h history: row i holds h after consuming token i; row layout [C x S].
    std::vector<Real> h(C * S, Real(0));
    if (h0) {
        h = *h0;
    }
    std::vector<Real> hist;
    if (need_grad) {
        hist.assign((L + 1) * C * S, Real(0));
        std::copy(h.begin(), h.end(), hist.begin());
    }
    const Real* xv_all = x.value().data();
    const Real* dt_all = dt.value().data();
    const Real* b_all = B.value().data();
    const Real* c_all = Cm.value().data();
    const Real* a_all = A.value().data();
    for (std::size_t i = 0; i < L; ++i) {
        const Real* b_row = b_all + i * S;
        const Real* c_row = c_all + i * S;
        for (std::size_t c = 0; c < C; ++c) {
            const Real dtv = dt_all[i * C + c];
            const Real xv = xv_all[i * C + c];
            const Real* a_row = a_all + c * S;
            Real* h_row = h.data() + c * S;
            Real yacc = 0;
            for (std::size_t s = 0; s < S; ++s) {
                const Real decay = std::exp(a_row[s] * dtv);
                h_row[s] = decay * h_row[s] + dtv * b_row[s] * xv;
                yacc += c_row[s] * h_row[s];
            }
            out->val[i * C + c] = yacc;
        }
        if (need_grad) {
            std::copy(h.begin(), h.end(), hist.begin() + (i + 1) * C * S);
        }
    }
    if (h_final) {
        *h_final = h;
    }

    if (need_grad) {
        auto xn = x.node();
        auto dtn = dt.node();
        auto bn = B.node();
        auto cn = Cm.node();
        auto an = A.node();
        out->backprop = [xn, dtn, bn, cn, an, hist, L, C, S](detail::Node<Real>& self) {
            if (xn->requires_grad) xn->ensure_grad();
            if (dtn->requires_grad) dtn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (cn->requires_grad) cn->ensure_grad();
            if (an->requires_grad) an->ensure_grad();
            // ghat[c*S+s] = dL/dh_i[c,s], maintained backwards over i.
            std::vector<Real> ghat(C * S, Real(0));
            for (std::size_t ii = L; ii-- > 0;) {
                const Real* h_prev = hist.data() + ii * C * S;
                const Real* h_cur = hist.data() + (ii + 1) * C * S;
                for (std::size_t c = 0; c < C; ++c) {
                    const Real dy = self.grad[ii * C + c];
                    const Real dtv = dtn->val[ii * C + c];
                    const Real xv = xn->val[ii * C + c];
                    Real ddt = 0, dx = 0;
                    for (std::size_t s = 0; s < S; ++s) {
                        const Real a = an->val[c * S + s];
                        const Real bv = bn->val[ii * S + s];
                        const Real cv = cn->val[ii * S + s];
                        const Real decay = std::exp(a * dtv);
                        // total dL/dh_i[c,s]: direct via y_i plus carry-in.
                        const Real g = ghat[c * S + s] + dy * cv;
                        if (cn->requires_grad) {
                            cn->grad[ii * S + s] += dy * h_cur[c * S + s];
                        }
                        if (an->requires_grad) {
                            an->grad[c * S + s] += g * dtv * decay * h_prev[c * S + s];
                        }
                        if (bn->requires_grad) {
                            bn->grad[ii * S + s] += g * dtv * xv;
                        }
                        ddt += g * (a * decay * h_prev[c * S + s] + bv * xv);
                        dx += g * dtv * bv;
                        // propagate to h_{i-1}
                        ghat[c * S + s] = g * decay;
                    }
                    if (dtn->requires_grad) {
                        dtn->grad[ii * C + c] += ddt;
                    }
                    if (xn->requires_grad) {
                        xn->grad[ii * C + c] += dx;
                    }
                }
            }
        };
    }
    return Tensor<Real>(std::move(out));
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode accumulation from a scalar loss. Gradients add into existing
// accumulators; call zero_grad on parameters between steps.
template <class Real>
void backward(const Tensor<Real>& loss) {
    if (!loss.is_scalar()) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) {
        return; // nothing reachable requires grad
    }
    // Iterative post-order DFS for topological order.
    std::vector<detail::Node<Real>*> order;
    std::unordered_set<detail::Node<Real>*> seen;
    std::vector<std::pair<detail::Node<Real>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            auto* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior (non-leaf) grads are scratch space for this pass; leaves keep
    // accumulating across passes until zero_grad.
    for (auto* node : order) {
        if (node->backprop) {
            node->grad.assign(node->val.size(), Real(0));
        }
    }
    root->ensure_grad();
    root->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->backprop) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

} // namespace hylm
