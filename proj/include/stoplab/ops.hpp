#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stoplab/tensor.hpp"

namespace stoplab {

namespace detail {

// Row-major accumulating GEMM kernels. ikj ordering keeps the innermost loop
// contiguous so the compiler can vectorize it.

// c[m,n] += a[m,k] * b[k,n]
template <class Real>
void gemm_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const Real* arow = a + static_cast<std::size_t>(i) * k;
        Real* crow = c + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const Real av = arow[kk];
            const Real* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <class Real>
void gemm_nt_acc(const Real* a, const Real* b, Real* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const Real* arow = a + static_cast<std::size_t>(i) * k;
        Real* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const Real* brow = b + static_cast<std::size_t>(j) * k;
            Real acc(0);
            for (int kk = 0; kk < k; ++kk) {
                acc += arow[kk] * brow[kk];
            }
            crow[j] += acc;
        }
    }
}

// c[m,n] += a[k,m]^T * b[k,n]
template <class Real>
void gemm_tn_acc(const Real* a, const Real* b, Real* c, int k, int m, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const Real* arow = a + static_cast<std::size_t>(kk) * m;
        const Real* brow = b + static_cast<std::size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const Real av = arow[i];
            Real* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

inline Shape replace_last(Shape shape, int d) {
    shape.back() = d;
    return shape;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// True when `small` equals the trailing dims of `big` (broadcast over the
// leading batch dims only).
inline bool suffix_shape(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

} // namespace detail

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

// a[..., k] x b[k, n] -> [..., n]. Leading dims of `a` collapse into one batch
// of rows; `b` is shared, so its gradient accumulates over the whole batch.
template <class Real>
TensorPtr<Real> matmul(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->ndim() < 1 || b->ndim() != 2 || a->shape.back() != b->shape.front()) {
        throw dim_error("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                        shape_str(b->shape));
    }
    const int k = a->shape.back();
    const int n = b->shape.back();
    const int m = static_cast<int>(a->numel() / k);
    auto out = make_tensor<Real>(detail::replace_last(a->shape, n));
    detail::gemm_acc(a->value.data(), b->value.data(), out->value.data(), m, k, n);
    g.record(out, {a, b}, [a, b, out, m, k, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            detail::gemm_nt_acc(out->grad.data(), b->value.data(), a->grad.data(), m, k, n);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            detail::gemm_tn_acc(a->value.data(), out->grad.data(), b->grad.data(), m, k, n);
        }
    });
    return out;
}

// a[..., k] x w[n, k] -> [..., n]: linear layer with weight stored [out, in].
template <class Real>
TensorPtr<Real> matmul_nt(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& w) {
    if (a->ndim() < 1 || w->ndim() != 2 || a->shape.back() != w->shape.back()) {
        throw dim_error("matmul_nt: incompatible shapes " + shape_str(a->shape) + " x " +
                        shape_str(w->shape) + "^T");
    }
    const int k = a->shape.back();
    const int n = w->shape.front();
    const int m = static_cast<int>(a->numel() / k);
    auto out = make_tensor<Real>(detail::replace_last(a->shape, n));
    detail::gemm_nt_acc(a->value.data(), w->value.data(), out->value.data(), m, n, k);
    g.record(out, {a, w}, [a, w, out, m, k, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            detail::gemm_acc(out->grad.data(), w->value.data(), a->grad.data(), m, n, k);
        }
        if (w->requires_grad) {
            w->ensure_grad();
            detail::gemm_tn_acc(out->grad.data(), a->value.data(), w->grad.data(), m, n, k);
        }
    });
    return out;
}

// a[..., m, k] x b[..., k, n] -> [..., m, n] with identical leading dims.
template <class Real>
TensorPtr<Real> bmm(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->ndim() < 2 || b->ndim() != a->ndim() ||
        a->shape.back() != b->shape[static_cast<std::size_t>(b->ndim() - 2)] ||
        !std::equal(a->shape.begin(), a->shape.end() - 2, b->shape.begin())) {
        throw dim_error("bmm: incompatible shapes " + shape_str(a->shape) + " x " +
                        shape_str(b->shape));
    }
    const int m = a->shape[static_cast<std::size_t>(a->ndim() - 2)];
    const int k = a->shape.back();
    const int n = b->shape.back();
    const int batches = static_cast<int>(a->numel() / (static_cast<std::int64_t>(m) * k));
    Shape out_shape = a->shape;
    out_shape.back() = n;
    auto out = make_tensor<Real>(std::move(out_shape));
    for (int e = 0; e < batches; ++e) {
        detail::gemm_acc(a->value.data() + static_cast<std::size_t>(e) * m * k,
                         b->value.data() + static_cast<std::size_t>(e) * k * n,
                         out->value.data() + static_cast<std::size_t>(e) * m * n, m, k, n);
    }
    g.record(out, {a, b}, [a, b, out, batches, m, k, n] {
        for (int e = 0; e < batches; ++e) {
            const Real* av = a->value.data() + static_cast<std::size_t>(e) * m * k;
            const Real* bv = b->value.data() + static_cast<std::size_t>(e) * k * n;
            const Real* go = out->grad.data() + static_cast<std::size_t>(e) * m * n;
            if (a->requires_grad) {
                a->ensure_grad();
                detail::gemm_nt_acc(go, bv, a->grad.data() + static_cast<std::size_t>(e) * m * k, m,
                                    k, n);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::gemm_tn_acc(av, go, b->grad.data() + static_cast<std::size_t>(e) * k * n, m,
                                    k, n);
            }
        }
    });
    return out;
}

// [..., m, n] -> [..., n, m]
template <class Real>
TensorPtr<Real> transpose_last2(Graph<Real>& g, const TensorPtr<Real>& x) {
    if (x->ndim() < 2) {
        throw dim_error("transpose_last2 needs >= 2 dims, got " + shape_str(x->shape));
    }
    const int m = x->shape[static_cast<std::size_t>(x->ndim() - 2)];
    const int n = x->shape.back();
    const int batches = static_cast<int>(x->numel() / (static_cast<std::int64_t>(m) * n));
    Shape out_shape = x->shape;
    out_shape[out_shape.size() - 2] = n;
    out_shape.back() = m;
    auto out = make_tensor<Real>(std::move(out_shape));
    for (int e = 0; e < batches; ++e) {
        const Real* src = x->value.data() + static_cast<std::size_t>(e) * m * n;
        Real* dst = out->value.data() + static_cast<std::size_t>(e) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                dst[static_cast<std::size_t>(j) * m + i] = src[static_cast<std::size_t>(i) * n + j];
            }
        }
    }
    g.record(out, {x}, [x, out, batches, m, n] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int e = 0; e < batches; ++e) {
            const Real* go = out->grad.data() + static_cast<std::size_t>(e) * m * n;
            Real* gx = x->grad.data() + static_cast<std::size_t>(e) * m * n;
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    gx[static_cast<std::size_t>(i) * n + j] += go[static_cast<std::size_t>(j) * m + i];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise family
// ---------------------------------------------------------------------------

// out = a + b. Either exact shape match, or b broadcasts over the leading
// batch dims of a (b's shape must be a suffix of a's shape).
template <class Real>
TensorPtr<Real> add(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    const bool exact = detail::same_shape(a->shape, b->shape);
    if (!exact && !detail::suffix_shape(a->shape, b->shape)) {
        throw dim_error("add: cannot broadcast " + shape_str(b->shape) + " onto " +
                        shape_str(a->shape));
    }
    const std::size_t len = b->value.size();
    const std::size_t reps = a->value.size() / len;
    auto out = make_tensor<Real>(a->shape);
    for (std::size_t r = 0; r < reps; ++r) {
        const Real* av = a->value.data() + r * len;
        Real* ov = out->value.data() + r * len;
        for (std::size_t j = 0; j < len; ++j) {
            ov[j] = av[j] + b->value[j];
        }
    }
    g.record(out, {a, b}, [a, b, out, reps, len] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->grad.size(); ++i) {
                a->grad[i] += out->grad[i];
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t r = 0; r < reps; ++r) {
                const Real* go = out->grad.data() + r * len;
                for (std::size_t j = 0; j < len; ++j) {
                    b->grad[j] += go[j];
                }
            }
        }
    });
    return out;
}

// out = a ∘ b, exact shape match only.
template <class Real>
TensorPtr<Real> mul(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (!detail::same_shape(a->shape, b->shape)) {
        throw dim_error("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                        shape_str(b->shape));
    }
    auto out = make_tensor<Real>(a->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        out->value[i] = a->value[i] * b->value[i];
    }
    g.record(out, {a, b}, [a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->grad.size(); ++i) {
                a->grad[i] += out->grad[i] * b->value[i];
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < b->grad.size(); ++i) {
                b->grad[i] += out->grad[i] * a->value[i];
            }
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> scale(Graph<Real>& g, const TensorPtr<Real>& a, Real c) {
    auto out = make_tensor<Real>(a->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        out->value[i] = a->value[i] * c;
    }
    g.record(out, {a}, [a, out, c] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i) {
            a->grad[i] += out->grad[i] * c;
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> tanh_op(Graph<Real>& g, const TensorPtr<Real>& x) {
    auto out = make_tensor<Real>(x->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        out->value[i] = std::tanh(x->value[i]);
    }
    g.record(out, {x}, [x, out] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < x->grad.size(); ++i) {
            const Real t = out->value[i];
            x->grad[i] += out->grad[i] * (Real(1) - t * t);
        }
    });
    return out;
}

// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
inline constexpr double kGeluCubicCoeff = 0.044715;

template <class Real>
TensorPtr<Real> gelu(Graph<Real>& g, const TensorPtr<Real>& x) {
    auto out = make_tensor<Real>(x->shape);
    const Real c0 = static_cast<Real>(std::sqrt(2.0 / std::numbers::pi));
    const Real c1 = static_cast<Real>(kGeluCubicCoeff);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        const Real v = x->value[i];
        const Real t = std::tanh(c0 * (v + c1 * v * v * v));
        out->value[i] = Real(0.5) * v * (Real(1) + t);
    }
    g.record(out, {x}, [x, out, c0, c1] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < x->grad.size(); ++i) {
            const Real v = x->value[i];
            const Real t = std::tanh(c0 * (v + c1 * v * v * v));
            const Real du = c0 * (Real(1) + Real(3) * c1 * v * v);
            const Real dgdx = Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * du;
            x->grad[i] += out->grad[i] * dgdx;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization, softmax, losses
// ---------------------------------------------------------------------------

namespace detail {

// Shared LN forward: fills out with x_hat, returns per-row 1/sqrt(var+eps).
template <class Real>
std::vector<Real> normalize_rows(const Tensor<Real>& x, Tensor<Real>& out, Real eps) {
    const int d = x.shape.back();
    const std::size_t rows = x.value.size() / static_cast<std::size_t>(d);
    std::vector<Real> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xv = x.value.data() + r * d;
        Real* ov = out.value.data() + r * d;
        Real mean(0);
        for (int j = 0; j < d; ++j) mean += xv[j];
        mean /= Real(d);
        Real var(0);
        for (int j = 0; j < d; ++j) {
            const Real c = xv[j] - mean;
            var += c * c;
        }
        var /= Real(d);
        const Real s = Real(1) / std::sqrt(var + eps);
        inv[r] = s;
        for (int j = 0; j < d; ++j) ov[j] = (xv[j] - mean) * s;
    }
    return inv;
}

// Shared LN backward for one row given upstream grad already multiplied by
// the affine gain (or raw for the affine-free variant).
template <class Real>
void normalize_row_backward(const Real* gy, const Real* xhat, Real inv, int d, Real* gx) {
    Real mean_g(0), mean_gx(0);
    for (int j = 0; j < d; ++j) {
        mean_g += gy[j];
        mean_gx += gy[j] * xhat[j];
    }
    mean_g /= Real(d);
    mean_gx /= Real(d);
    for (int j = 0; j < d; ++j) {
        gx[j] += inv * (gy[j] - mean_g - xhat[j] * mean_gx);
    }
}

} // namespace detail

// Layer norm over the last dim with learned gain/bias. eps sits inside sqrt.
template <class Real>
TensorPtr<Real> layer_norm(Graph<Real>& g, const TensorPtr<Real>& x, const TensorPtr<Real>& gain,
                           const TensorPtr<Real>& bias, Real eps = Real(1e-6)) {
    const int d = x->ndim() >= 1 ? x->shape.back() : 0;
    if (d < 2) {
        throw dim_error("layer_norm: last dim must be >= 2, got shape " + shape_str(x->shape));
    }
    if (gain->ndim() != 1 || bias->ndim() != 1 || gain->dim(0) != d || bias->dim(0) != d) {
        throw dim_error("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                        shape_str(gain->shape) + " and " + shape_str(bias->shape));
    }
    auto out = make_tensor<Real>(x->shape);
    auto inv = detail::normalize_rows(*x, *out, eps);
    // out currently holds x_hat; save it for backward, then apply affine.
    auto xhat = std::make_shared<std::vector<Real>>(out->value);
    const std::size_t rows = inv.size();
    for (std::size_t r = 0; r < rows; ++r) {
        Real* ov = out->value.data() + r * d;
        for (int j = 0; j < d; ++j) ov[j] = ov[j] * gain->value[j] + bias->value[j];
    }
    auto inv_saved = std::make_shared<std::vector<Real>>(std::move(inv));
    g.record(out, {x, gain, bias}, [x, gain, bias, out, xhat, inv_saved, rows, d] {
        std::vector<Real> gy(static_cast<std::size_t>(d));
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* go = out->grad.data() + r * d;
            const Real* xh = xhat->data() + r * d;
            if (gain->requires_grad) {
                gain->ensure_grad();
                for (int j = 0; j < d; ++j) gain->grad[j] += go[j] * xh[j];
            }
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (int j = 0; j < d; ++j) bias->grad[j] += go[j];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (int j = 0; j < d; ++j) gy[static_cast<std::size_t>(j)] = go[j] * gain->value[j];
                detail::normalize_row_backward(gy.data(), xh, (*inv_saved)[r], d,
                                               x->grad.data() + r * d);
            }
        }
    });
    return out;
}

// Affine-free row normalization (zero mean, unit variance per row). Used for
// target whitening before the regression loss.
template <class Real>
TensorPtr<Real> row_norm(Graph<Real>& g, const TensorPtr<Real>& x, Real eps = Real(1e-6)) {
    const int d = x->ndim() >= 1 ? x->shape.back() : 0;
    if (d < 2) {
        throw dim_error("row_norm: last dim must be >= 2, got shape " + shape_str(x->shape));
    }
    auto out = make_tensor<Real>(x->shape);
    auto inv = detail::normalize_rows(*x, *out, eps);
    auto xhat = std::make_shared<std::vector<Real>>(out->value);
    auto inv_saved = std::make_shared<std::vector<Real>>(std::move(inv));
    const std::size_t rows = inv_saved->size();
    g.record(out, {x}, [x, out, xhat, inv_saved, rows, d] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            detail::normalize_row_backward(out->grad.data() + r * d, xhat->data() + r * d,
                                           (*inv_saved)[r], d, x->grad.data() + r * d);
        }
    });
    return out;
}

// Softmax over the last dim, max-subtracted for stability.
template <class Real>
TensorPtr<Real> softmax_rows(Graph<Real>& g, const TensorPtr<Real>& x) {
    const int d = x->ndim() >= 1 ? x->shape.back() : 1;
    const std::size_t rows = x->value.size() / static_cast<std::size_t>(d);
    auto out = make_tensor<Real>(x->shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xv = x->value.data() + r * d;
        Real* ov = out->value.data() + r * d;
        Real mx = xv[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xv[j]);
        Real total(0);
        for (int j = 0; j < d; ++j) {
            ov[j] = std::exp(xv[j] - mx);
            total += ov[j];
        }
        const Real norm = Real(1) / total;
        for (int j = 0; j < d; ++j) ov[j] *= norm;
    }
    g.record(out, {x}, [x, out, rows, d] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* p = out->value.data() + r * d;
            const Real* go = out->grad.data() + r * d;
            Real* gx = x->grad.data() + r * d;
            Real dot(0);
            for (int j = 0; j < d; ++j) dot += go[j] * p[j];
            for (int j = 0; j < d; ++j) gx[j] += p[j] * (go[j] - dot);
        }
    });
    return out;
}

// Mean over all elements of squared difference.
template <class Real>
TensorPtr<Real> mse(Graph<Real>& g, const TensorPtr<Real>& pred, const TensorPtr<Real>& target) {
    if (!detail::same_shape(pred->shape, target->shape)) {
        throw dim_error("mse: shape mismatch " + shape_str(pred->shape) + " vs " +
                        shape_str(target->shape));
    }
    auto out = make_tensor<Real>(Shape{1});
    double acc = 0.0;
    for (std::size_t i = 0; i < pred->value.size(); ++i) {
        const double diff = static_cast<double>(pred->value[i]) - static_cast<double>(target->value[i]);
        acc += diff * diff;
    }
    const std::size_t n = pred->value.size();
    out->value[0] = static_cast<Real>(acc / static_cast<double>(n));
    g.record(out, {pred, target}, [pred, target, out, n] {
        const Real go = out->grad[0];
        const Real c = Real(2) / static_cast<Real>(n);
        if (pred->requires_grad) {
            pred->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                pred->grad[i] += go * c * (pred->value[i] - target->value[i]);
            }
        }
        if (target->requires_grad) {
            target->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                target->grad[i] -= go * c * (pred->value[i] - target->value[i]);
            }
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> sum(Graph<Real>& g, const TensorPtr<Real>& x) {
    auto out = make_tensor<Real>(Shape{1});
    double acc = 0.0;
    for (const Real v : x->value) acc += static_cast<double>(v);
    out->value[0] = static_cast<Real>(acc);
    g.record(out, {x}, [x, out] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real go = out->grad[0];
        for (auto& gv : x->grad) gv += go;
    });
    return out;
}

// sum |x|; subgradient sign(0) = 0.
template <class Real>
TensorPtr<Real> sum_abs(Graph<Real>& g, const TensorPtr<Real>& x) {
    auto out = make_tensor<Real>(Shape{1});
    double acc = 0.0;
    for (const Real v : x->value) acc += std::abs(static_cast<double>(v));
    out->value[0] = static_cast<Real>(acc);
    g.record(out, {x}, [x, out] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real go = out->grad[0];
        for (std::size_t i = 0; i < x->grad.size(); ++i) {
            const Real v = x->value[i];
            x->grad[i] += go * (v > Real(0) ? Real(1) : (v < Real(0) ? Real(-1) : Real(0)));
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> sum_sq(Graph<Real>& g, const TensorPtr<Real>& x) {
    auto out = make_tensor<Real>(Shape{1});
    double acc = 0.0;
    for (const Real v : x->value) acc += static_cast<double>(v) * static_cast<double>(v);
    out->value[0] = static_cast<Real>(acc);
    g.record(out, {x}, [x, out] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real go = out->grad[0];
        for (std::size_t i = 0; i < x->grad.size(); ++i) {
            x->grad[i] += go * Real(2) * x->value[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// gather / layout ops
// ---------------------------------------------------------------------------

// table[K, d] -> [t, d] selecting the given rows; backward scatter-adds.
template <class Real>
TensorPtr<Real> select_rows(Graph<Real>& g, const TensorPtr<Real>& table,
                            const std::vector<int>& idx) {
    if (table->ndim() != 2) {
        throw dim_error("select_rows: table must be 2D, got " + shape_str(table->shape));
    }
    const int rows = table->dim(0);
    const int d = table->dim(1);
    for (int i : idx) {
        if (i < 0 || i >= rows) {
            throw dim_error("select_rows: index " + std::to_string(i) + " out of range [0," +
                            std::to_string(rows) + ")");
        }
    }
    auto out = make_tensor<Real>(Shape{static_cast<int>(idx.size()), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(table->value.data() + static_cast<std::size_t>(idx[i]) * d, d,
                    out->value.data() + i * d);
    }
    auto indices = std::make_shared<std::vector<int>>(idx);
    g.record(out, {table}, [table, out, indices, d] {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (std::size_t i = 0; i < indices->size(); ++i) {
            const Real* go = out->grad.data() + i * d;
            Real* gt = table->grad.data() + static_cast<std::size_t>((*indices)[i]) * d;
            for (int j = 0; j < d; ++j) gt[j] += go[j];
        }
    });
    return out;
}

// Per-batch-element row selection: table[K, d] + idx[b][t] -> [b, t, d].
template <class Real>
TensorPtr<Real> select_rows_batched(Graph<Real>& g, const TensorPtr<Real>& table,
                                    const std::vector<std::vector<int>>& idx) {
    if (table->ndim() != 2 || idx.empty()) {
        throw dim_error("select_rows_batched: table must be 2D and idx nonempty");
    }
    const int rows = table->dim(0);
    const int d = table->dim(1);
    const int t = static_cast<int>(idx.front().size());
    for (const auto& per_image : idx) {
        if (static_cast<int>(per_image.size()) != t) {
            throw dim_error("select_rows_batched: ragged index matrix");
        }
        for (int i : per_image) {
            if (i < 0 || i >= rows) {
                throw dim_error("select_rows_batched: index " + std::to_string(i) +
                                " out of range [0," + std::to_string(rows) + ")");
            }
        }
    }
    const int b = static_cast<int>(idx.size());
    auto out = make_tensor<Real>(Shape{b, t, d});
    for (int e = 0; e < b; ++e) {
        for (int i = 0; i < t; ++i) {
            std::copy_n(table->value.data() + static_cast<std::size_t>(idx[e][i]) * d, d,
                        out->value.data() + (static_cast<std::size_t>(e) * t + i) * d);
        }
    }
    auto indices = std::make_shared<std::vector<std::vector<int>>>(idx);
    g.record(out, {table}, [table, out, indices, b, t, d] {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (int e = 0; e < b; ++e) {
            for (int i = 0; i < t; ++i) {
                const Real* go = out->grad.data() + (static_cast<std::size_t>(e) * t + i) * d;
                Real* gt = table->grad.data() + static_cast<std::size_t>((*indices)[e][i]) * d;
                for (int j = 0; j < d; ++j) gt[j] += go[j];
            }
        }
    });
    return out;
}

// Concatenate along the token axis (dim -2).
template <class Real>
TensorPtr<Real> concat_tokens(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->ndim() < 2 || b->ndim() != a->ndim() || a->shape.back() != b->shape.back() ||
        !std::equal(a->shape.begin(), a->shape.end() - 2, b->shape.begin())) {
        throw dim_error("concat_tokens: incompatible shapes " + shape_str(a->shape) + " and " +
                        shape_str(b->shape));
    }
    const int d = a->shape.back();
    const int ta = a->shape[static_cast<std::size_t>(a->ndim() - 2)];
    const int tb = b->shape[static_cast<std::size_t>(b->ndim() - 2)];
    const int batches = static_cast<int>(a->numel() / (static_cast<std::int64_t>(ta) * d));
    Shape out_shape = a->shape;
    out_shape[out_shape.size() - 2] = ta + tb;
    auto out = make_tensor<Real>(std::move(out_shape));
    for (int e = 0; e < batches; ++e) {
        std::copy_n(a->value.data() + static_cast<std::size_t>(e) * ta * d, static_cast<std::size_t>(ta) * d,
                    out->value.data() + static_cast<std::size_t>(e) * (ta + tb) * d);
        std::copy_n(b->value.data() + static_cast<std::size_t>(e) * tb * d, static_cast<std::size_t>(tb) * d,
                    out->value.data() + static_cast<std::size_t>(e) * (ta + tb) * d +
                        static_cast<std::size_t>(ta) * d);
    }
    g.record(out, {a, b}, [a, b, out, batches, ta, tb, d] {
        for (int e = 0; e < batches; ++e) {
            const Real* go = out->grad.data() + static_cast<std::size_t>(e) * (ta + tb) * d;
            if (a->requires_grad) {
                a->ensure_grad();
                Real* ga = a->grad.data() + static_cast<std::size_t>(e) * ta * d;
                for (std::size_t i = 0; i < static_cast<std::size_t>(ta) * d; ++i) ga[i] += go[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                Real* gb = b->grad.data() + static_cast<std::size_t>(e) * tb * d;
                const Real* gob = go + static_cast<std::size_t>(ta) * d;
                for (std::size_t i = 0; i < static_cast<std::size_t>(tb) * d; ++i) gb[i] += gob[i];
            }
        }
    });
    return out;
}

// Slice [lo, lo+len) along the token axis (dim -2).
template <class Real>
TensorPtr<Real> slice_tokens(Graph<Real>& g, const TensorPtr<Real>& x, int lo, int len) {
    if (x->ndim() < 2) {
        throw dim_error("slice_tokens needs >= 2 dims, got " + shape_str(x->shape));
    }
    const int t = x->shape[static_cast<std::size_t>(x->ndim() - 2)];
    const int d = x->shape.back();
    if (lo < 0 || len <= 0 || lo + len > t) {
        throw dim_error("slice_tokens: range [" + std::to_string(lo) + "," +
                        std::to_string(lo + len) + ") out of " + std::to_string(t) + " tokens");
    }
    const int batches = static_cast<int>(x->numel() / (static_cast<std::int64_t>(t) * d));
    Shape out_shape = x->shape;
    out_shape[out_shape.size() - 2] = len;
    auto out = make_tensor<Real>(std::move(out_shape));
    for (int e = 0; e < batches; ++e) {
        std::copy_n(x->value.data() + (static_cast<std::size_t>(e) * t + lo) * d,
                    static_cast<std::size_t>(len) * d,
                    out->value.data() + static_cast<std::size_t>(e) * len * d);
    }
    g.record(out, {x}, [x, out, batches, t, d, lo, len] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int e = 0; e < batches; ++e) {
            const Real* go = out->grad.data() + static_cast<std::size_t>(e) * len * d;
            Real* gx = x->grad.data() + (static_cast<std::size_t>(e) * t + lo) * d;
            for (std::size_t i = 0; i < static_cast<std::size_t>(len) * d; ++i) gx[i] += go[i];
        }
    });
    return out;
}

// [b, t, d] -> [b, h, t, d/h]
template <class Real>
TensorPtr<Real> split_heads(Graph<Real>& g, const TensorPtr<Real>& x, int heads) {
    if (x->ndim() != 3 || heads <= 0 || x->shape.back() % heads != 0) {
        throw dim_error("split_heads: need [b,t,d] with d divisible by heads, got " +
                        shape_str(x->shape) + " / " + std::to_string(heads));
    }
    const int b = x->dim(0), t = x->dim(1), d = x->dim(2);
    const int hd = d / heads;
    auto out = make_tensor<Real>(Shape{b, heads, t, hd});
    for (int e = 0; e < b; ++e) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < t; ++i) {
                std::copy_n(x->value.data() + ((static_cast<std::size_t>(e) * t + i) * d + h * hd), hd,
                            out->value.data() +
                                (((static_cast<std::size_t>(e) * heads + h) * t) + i) * hd);
            }
        }
    }
    g.record(out, {x}, [x, out, b, t, d, heads, hd] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int e = 0; e < b; ++e) {
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < t; ++i) {
                    const Real* go = out->grad.data() +
                                     (((static_cast<std::size_t>(e) * heads + h) * t) + i) * hd;
                    Real* gx = x->grad.data() + ((static_cast<std::size_t>(e) * t + i) * d + h * hd);
                    for (int j = 0; j < hd; ++j) gx[j] += go[j];
                }
            }
        }
    });
    return out;
}

// [b, h, t, hd] -> [b, t, h*hd]
template <class Real>
TensorPtr<Real> merge_heads(Graph<Real>& g, const TensorPtr<Real>& x) {
    if (x->ndim() != 4) {
        throw dim_error("merge_heads: need [b,h,t,hd], got " + shape_str(x->shape));
    }
    const int b = x->dim(0), heads = x->dim(1), t = x->dim(2), hd = x->dim(3);
    const int d = heads * hd;
    auto out = make_tensor<Real>(Shape{b, t, d});
    for (int e = 0; e < b; ++e) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < t; ++i) {
                std::copy_n(x->value.data() + (((static_cast<std::size_t>(e) * heads + h) * t) + i) * hd,
                            hd,
                            out->value.data() + ((static_cast<std::size_t>(e) * t + i) * d + h * hd));
            }
        }
    }
    g.record(out, {x}, [x, out, b, t, d, heads, hd] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int e = 0; e < b; ++e) {
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < t; ++i) {
                    const Real* go =
                        out->grad.data() + ((static_cast<std::size_t>(e) * t + i) * d + h * hd);
                    Real* gx = x->grad.data() +
                               (((static_cast<std::size_t>(e) * heads + h) * t) + i) * hd;
                    for (int j = 0; j < hd; ++j) gx[j] += go[j];
                }
            }
        }
    });
    return out;
}

// Convenience wrapper matching the mental model of Algorithm-style code.
template <class Real>
void backward(Graph<Real>& g, const TensorPtr<Real>& loss) {
    g.backward(loss);
}

} // namespace stoplab
