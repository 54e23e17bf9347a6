#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <utility>
#include <vector>

#include "dsanet/tape.hpp"
#include "dsanet/tensor.hpp"

namespace dsanet::ops {

namespace detail {

// Test fixture hook: verify --corrupt-gelu scales the analytic gelu derivative
// so the gradient-check suite must flag it.
inline double gelu_grad_scale = 1.0;

inline void axis_split(const Shape& s, int axis, std::int64_t& outer, std::int64_t& n,
                       std::int64_t& inner) {
    DSANET_CHECK(axis >= 0 && axis < static_cast<int>(s.size()), DimensionError,
                 "axis ", axis, " out of range for shape ", shape_str(s));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
bool want_grad(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> ins) {
    if (!tape.recording()) return false;
    for (auto* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    DSANET_CHECK(a.shape() == b.shape(), DimensionError, "add: shape mismatch ",
                 shape_str(a.shape()), " vs ", shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* py = y.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    if (detail::want_grad(tape, {&a, &b})) {
        y.set_requires_grad(true);
        auto ap = a.payload(), bp = b.payload(), yp = y.payload();
        tape.record(yp, [ap, bp, yp, n]() {
            const T* g = yp->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                T* ga = ap->grad.data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    DSANET_CHECK(a.shape() == b.shape(), DimensionError, "mul: shape mismatch ",
                 shape_str(a.shape()), " vs ", shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* py = y.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    if (detail::want_grad(tape, {&a, &b})) {
        y.set_requires_grad(true);
        auto ap = a.payload(), bp = b.payload(), yp = y.payload();
        tape.record(yp, [ap, bp, yp, n]() {
            const T* g = yp->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                T* ga = ap->grad.data();
                const T* vb = bp->value.data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                const T* va = ap->value.data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T s) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* py = y.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) py[i] = px[i] * s;
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, s, n]() {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            const T* g = yp->grad.data();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * s;
        });
    }
    return y;
}

// b has the rank of x with broadcast axes of size 1; grad of b sums over them.
template <typename T>
Tensor<T> add_bcast(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
    const Shape& xs = x.shape();
    const Shape& bs = b.shape();
    DSANET_CHECK(xs.size() == bs.size(), DimensionError, "add_bcast: rank mismatch");
    for (std::size_t i = 0; i < xs.size(); ++i)
        DSANET_CHECK(bs[i] == xs[i] || bs[i] == 1, DimensionError, "add_bcast: dim ", i,
                     " not broadcastable: ", shape_str(bs), " vs ", shape_str(xs));

    auto bst = detail::row_major_strides(bs);
    std::vector<std::int64_t> eff(bst.size());
    for (std::size_t i = 0; i < bs.size(); ++i) eff[i] = (bs[i] == 1) ? 0 : bst[i];

    Tensor<T> y = Tensor<T>::zeros(xs);
    const T* px = x.data();
    const T* pb = b.data();
    T* py = y.data();
    const std::int64_t n = x.numel();
    std::vector<std::int64_t> idx(xs.size(), 0);
    std::int64_t boff = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        py[i] = px[i] + pb[boff];
        for (int a = static_cast<int>(xs.size()) - 1; a >= 0; --a) {
            boff += eff[a];
            if (++idx[a] < xs[a]) break;
            idx[a] = 0;
            boff -= eff[a] * xs[a];
        }
    }
    if (detail::want_grad(tape, {&x, &b})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), bp = b.payload(), yp = y.payload();
        Shape xshape = xs;
        tape.record(yp, [xp, bp, yp, eff, xshape, n]() {
            const T* g = yp->grad.data();
            if (xp->requires_grad) {
                xp->ensure_grad();
                T* gx = xp->grad.data();
                for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                std::vector<std::int64_t> idx(xshape.size(), 0);
                std::int64_t boff = 0;
                for (std::int64_t i = 0; i < n; ++i) {
                    gb[boff] += g[i];
                    for (int a = static_cast<int>(xshape.size()) - 1; a >= 0; --a) {
                        boff += eff[a];
                        if (++idx[a] < xshape[a]) break;
                        idx[a] = 0;
                        boff -= eff[a] * xshape[a];
                    }
                }
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul_bcast(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
    const Shape& xs = x.shape();
    const Shape& bs = b.shape();
    DSANET_CHECK(xs.size() == bs.size(), DimensionError, "mul_bcast: rank mismatch");
    for (std::size_t i = 0; i < xs.size(); ++i)
        DSANET_CHECK(bs[i] == xs[i] || bs[i] == 1, DimensionError, "mul_bcast: dim ", i,
                     " not broadcastable: ", shape_str(bs), " vs ", shape_str(xs));

    auto bst = detail::row_major_strides(bs);
    std::vector<std::int64_t> eff(bst.size());
    for (std::size_t i = 0; i < bs.size(); ++i) eff[i] = (bs[i] == 1) ? 0 : bst[i];

    Tensor<T> y = Tensor<T>::zeros(xs);
    const T* px = x.data();
    const T* pb = b.data();
    T* py = y.data();
    const std::int64_t n = x.numel();
    {
        std::vector<std::int64_t> idx(xs.size(), 0);
        std::int64_t boff = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            py[i] = px[i] * pb[boff];
            for (int a = static_cast<int>(xs.size()) - 1; a >= 0; --a) {
                boff += eff[a];
                if (++idx[a] < xs[a]) break;
                idx[a] = 0;
                boff -= eff[a] * xs[a];
            }
        }
    }
    if (detail::want_grad(tape, {&x, &b})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), bp = b.payload(), yp = y.payload();
        Shape xshape = xs;
        tape.record(yp, [xp, bp, yp, eff, xshape, n]() {
            const T* g = yp->grad.data();
            std::vector<std::int64_t> idx(xshape.size(), 0);
            std::int64_t boff = 0;
            const bool gx_on = xp->requires_grad;
            const bool gb_on = bp->requires_grad;
            if (gx_on) xp->ensure_grad();
            if (gb_on) bp->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                if (gx_on) xp->grad[i] += g[i] * bp->value[boff];
                if (gb_on) bp->grad[boff] += g[i] * xp->value[i];
                for (int a = static_cast<int>(xshape.size()) - 1; a >= 0; --a) {
                    boff += eff[a];
                    if (++idx[a] < xshape[a]) break;
                    idx[a] = 0;
                    boff -= eff[a] * xshape[a];
                }
            }
        });
    }
    return y;
}

// exact erf form
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* py = y.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(px[i]);
        py[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, n]() {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            const T* g = yp->grad.data();
            const T* v = xp->value.data();
            const double corrupt = detail::gelu_grad_scale;
            for (std::int64_t i = 0; i < n; ++i) {
                const double z = static_cast<double>(v[i]);
                const double cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
                gx[i] += static_cast<T>(corrupt * (cdf + z * pdf)) * g[i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    DSANET_CHECK(w.rank() == 2, DimensionError, "linear: weight must be [d_out,d_in]");
    const std::int64_t d_in = w.dim(1);
    const std::int64_t d_out = w.dim(0);
    DSANET_CHECK(x.rank() >= 1 && x.shape().back() == d_in, DimensionError,
                 "linear: last axis of ", shape_str(x.shape()), " must be ", d_in);
    DSANET_CHECK(b.numel() == d_out, DimensionError, "linear: bias size mismatch");

    Shape ys = x.shape();
    ys.back() = d_out;
    Tensor<T> y = Tensor<T>::zeros(ys);
    const std::int64_t rows = x.numel() / d_in;
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.data();
    T* py = y.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d_in;
        T* yr = py + r * d_out;
        for (std::int64_t o = 0; o < d_out; ++o) {
            const T* wr = pw + o * d_in;
            T acc = pb[o];
            for (std::int64_t i = 0; i < d_in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    if (detail::want_grad(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), wp = w.payload(), bp = b.payload(), yp = y.payload();
        tape.record(yp, [xp, wp, bp, yp, rows, d_in, d_out]() {
            const T* g = yp->grad.data();
            if (xp->requires_grad) {
                xp->ensure_grad();
                T* gx = xp->grad.data();
                const T* pw = wp->value.data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * d_out;
                    T* xr = gx + r * d_in;
                    for (std::int64_t o = 0; o < d_out; ++o) {
                        const T go = gr[o];
                        const T* wr = pw + o * d_in;
                        for (std::int64_t i = 0; i < d_in; ++i) xr[i] += go * wr[i];
                    }
                }
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                T* gw = wp->grad.data();
                const T* px = xp->value.data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * d_out;
                    const T* xr = px + r * d_in;
                    for (std::int64_t o = 0; o < d_out; ++o) {
                        const T go = gr[o];
                        T* wr = gw + o * d_in;
                        for (std::int64_t i = 0; i < d_in; ++i) wr[i] += go * xr[i];
                    }
                }
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * d_out;
                    for (std::int64_t o = 0; o < d_out; ++o) gb[o] += gr[o];
                }
            }
        });
    }
    return y;
}

namespace detail {

// C[M,N] (+)= A[M,K] x B, with B stored [K,N] (trans=false) or [N,K] (trans=true)
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, std::int64_t M, std::int64_t N, std::int64_t K,
              bool trans_b, T alpha) {
    if (!trans_b) {
        for (std::int64_t m = 0; m < M; ++m) {
            T* cr = C + m * N;
            const T* ar = A + m * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const T a = ar[k] * alpha;
                const T* br = B + k * N;
                for (std::int64_t n = 0; n < N; ++n) cr[n] += a * br[n];
            }
        }
    } else {
        for (std::int64_t m = 0; m < M; ++m) {
            T* cr = C + m * N;
            const T* ar = A + m * K;
            for (std::int64_t n = 0; n < N; ++n) {
                const T* br = B + n * K;
                T acc = T(0);
                for (std::int64_t k = 0; k < K; ++k) acc += ar[k] * br[k];
                cr[n] += acc * alpha;
            }
        }
    }
}

// C[M,N] += A^T x B where A is [K,M], B is [K,N]
template <typename T>
void gemm_acc_ta(const T* A, const T* B, T* C, std::int64_t M, std::int64_t N, std::int64_t K,
                 T alpha) {
    for (std::int64_t k = 0; k < K; ++k) {
        const T* ar = A + k * M;
        const T* br = B + k * N;
        for (std::int64_t m = 0; m < M; ++m) {
            const T a = ar[m] * alpha;
            T* cr = C + m * N;
            for (std::int64_t n = 0; n < N; ++n) cr[n] += a * br[n];
        }
    }
}

}  // namespace detail

// Batched matmul over matching leading axes; alpha folds in attention scaling.
template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false,
              T alpha = T(1)) {
    DSANET_CHECK(a.rank() >= 2 && b.rank() == a.rank(), DimensionError, "bmm: rank mismatch");
    const std::size_t r = a.rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        DSANET_CHECK(a.dim(i) == b.dim(i), DimensionError, "bmm: batch dim mismatch at ", i);
    const std::int64_t M = a.dim(r - 2);
    const std::int64_t K = a.dim(r - 1);
    const std::int64_t N = trans_b ? b.dim(r - 2) : b.dim(r - 1);
    const std::int64_t Kb = trans_b ? b.dim(r - 1) : b.dim(r - 2);
    DSANET_CHECK(K == Kb, DimensionError, "bmm: inner dim mismatch ", K, " vs ", Kb);

    Shape ys(a.shape());
    ys[r - 2] = M;
    ys[r - 1] = N;
    Tensor<T> y = Tensor<T>::zeros(ys);
    const std::int64_t batch = a.numel() / (M * K);
    const T* pa = a.data();
    const T* pb = b.data();
    T* py = y.data();
    for (std::int64_t g = 0; g < batch; ++g)
        detail::gemm_acc(pa + g * M * K, pb + g * K * N, py + g * M * N, M, N, K, trans_b, alpha);

    if (detail::want_grad(tape, {&a, &b})) {
        y.set_requires_grad(true);
        auto ap = a.payload(), bp = b.payload(), yp = y.payload();
        tape.record(yp, [ap, bp, yp, batch, M, N, K, trans_b, alpha]() {
            const T* g = yp->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                T* ga = ap->grad.data();
                const T* vb = bp->value.data();
                // dA = dC x B^T  (or dC x B when b was transposed)
                for (std::int64_t i = 0; i < batch; ++i)
                    detail::gemm_acc(g + i * M * N, vb + i * K * N, ga + i * M * K, M, K, N,
                                     !trans_b, alpha);
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                const T* va = ap->value.data();
                if (!trans_b) {
                    // dB[K,N] = A^T x dC
                    for (std::int64_t i = 0; i < batch; ++i)
                        detail::gemm_acc_ta(va + i * M * K, g + i * M * N, gb + i * K * N, K, N, M,
                                            alpha);
                } else {
                    // dB[N,K] = dC^T x A
                    for (std::int64_t i = 0; i < batch; ++i)
                        detail::gemm_acc_ta(g + i * M * N, va + i * M * K, gb + i * N * K, N, K, M,
                                            alpha);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis) {
    std::int64_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* py = y.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const T* xr = px + o * n * inner + in;
            T* yr = py + o * n * inner + in;
            T mx = xr[0];
            for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i * inner]);
            T denom = T(0);
            for (std::int64_t i = 0; i < n; ++i) {
                const T e = std::exp(xr[i * inner] - mx);
                yr[i * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::int64_t i = 0; i < n; ++i) yr[i * inner] *= inv;
        }
    }
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, outer, n, inner]() {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            const T* g = yp->grad.data();
            const T* p = yp->value.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    T dot = T(0);
                    for (std::int64_t i = 0; i < n; ++i)
                        dot += g[base + i * inner] * p[base + i * inner];
                    for (std::int64_t i = 0; i < n; ++i) {
                        const std::int64_t k = base + i * inner;
                        gx[k] += p[k] * (g[k] - dot);
                    }
                }
            }
        });
    }
    return y;
}

// normalization over the last axis with per-feature affine
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::int64_t c = x.shape().back();
    DSANET_CHECK(gamma.numel() == c && beta.numel() == c, DimensionError,
                 "layer_norm: affine size mismatch");
    const std::int64_t rows = x.numel() / c;
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<T> istd(static_cast<std::size_t>(rows));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbeta = beta.data();
    T* py = y.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * c;
        T mean = T(0);
        for (std::int64_t i = 0; i < c; ++i) mean += xr[i];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::int64_t i = 0; i < c; ++i) {
            const T d = xr[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        istd[r] = is;
        T* hr = xhat.data() + r * c;
        T* yr = py + r * c;
        for (std::int64_t i = 0; i < c; ++i) {
            hr[i] = (xr[i] - mean) * is;
            yr[i] = pg[i] * hr[i] + pbeta[i];
        }
    }
    if (detail::want_grad(tape, {&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), gp = gamma.payload(), bp = beta.payload(), yp = y.payload();
        tape.record(yp, [xp, gp, bp, yp, xhat = std::move(xhat), istd = std::move(istd), rows,
                         c]() {
            const T* g = yp->grad.data();
            if (gp->requires_grad) gp->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            if (xp->requires_grad) xp->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * c;
                const T* hr = xhat.data() + r * c;
                if (gp->requires_grad)
                    for (std::int64_t i = 0; i < c; ++i) gp->grad[i] += gr[i] * hr[i];
                if (bp->requires_grad)
                    for (std::int64_t i = 0; i < c; ++i) bp->grad[i] += gr[i];
                if (xp->requires_grad) {
                    T sum_h = T(0), sum_hh = T(0);
                    for (std::int64_t i = 0; i < c; ++i) {
                        const T gh = gr[i] * gp->value[i];
                        sum_h += gh;
                        sum_hh += gh * hr[i];
                    }
                    const T m1 = sum_h / static_cast<T>(c);
                    const T m2 = sum_hh / static_cast<T>(c);
                    T* gx = xp->grad.data() + r * c;
                    for (std::int64_t i = 0; i < c; ++i) {
                        const T gh = gr[i] * gp->value[i];
                        gx[i] += istd[r] * (gh - m1 - hr[i] * m2);
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape new_shape) {
    DSANET_CHECK(numel(new_shape) == x.numel(), DimensionError, "reshape: element count ",
                 x.numel(), " does not fit ", shape_str(new_shape));
    Tensor<T> y = Tensor<T>::from(std::move(new_shape), x.values());
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp]() {
            xp->ensure_grad();
            const std::int64_t n = xp->numel();
            for (std::int64_t i = 0; i < n; ++i) xp->grad[i] += yp->grad[i];
        });
    }
    return y;
}

namespace detail {

template <typename T>
void permute_kernel(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& perm,
                    bool accumulate) {
    const std::size_t r = in_shape.size();
    auto in_st = row_major_strides(in_shape);
    Shape out_shape(r);
    std::vector<std::int64_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[perm[i]];
        step[i] = in_st[perm[i]];
    }
    const std::int64_t n = numel(in_shape);
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src_off = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        if (accumulate)
            dst[o] += src[src_off];
        else
            dst[o] = src[src_off];
        for (int a = static_cast<int>(r) - 1; a >= 0; --a) {
            src_off += step[a];
            if (++idx[a] < out_shape[a]) break;
            idx[a] = 0;
            src_off -= step[a] * out_shape[a];
        }
    }
}

inline std::vector<int> inverse_perm(const std::vector<int>& p) {
    std::vector<int> q(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) q[p[i]] = static_cast<int>(i);
    return q;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, std::vector<int> perm) {
    DSANET_CHECK(perm.size() == x.rank(), DimensionError, "permute: rank mismatch");
    Shape ys(x.rank());
    for (std::size_t i = 0; i < perm.size(); ++i) ys[i] = x.dim(perm[i]);
    Tensor<T> y = Tensor<T>::zeros(ys);
    detail::permute_kernel(x.data(), y.data(), x.shape(), perm, false);
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        Shape out_shape = ys;
        auto inv = detail::inverse_perm(perm);
        tape.record(yp, [xp, yp, out_shape, inv]() {
            xp->ensure_grad();
            detail::permute_kernel(yp->grad.data(), xp->grad.data(), out_shape, inv, true);
        });
    }
    return y;
}

// Axis regrouping descriptor: reshape to `split`, permute axes, merge to `merge`.
// Element mapping is deterministic row-major at every step, so a spec composed
// with its inverse() is the identity on the underlying buffer.
struct ViewSpec {
    Shape split;
    std::vector<int> perm;
    Shape merge;

    ViewSpec inverse() const {
        ViewSpec inv;
        inv.split.resize(split.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inv.split[i] = split[perm[i]];
        inv.perm = detail::inverse_perm(perm);
        inv.merge = split;
        return inv;
    }
};

template <typename T>
Tensor<T> view(Tape<T>& tape, const Tensor<T>& x, const ViewSpec& spec) {
    DSANET_CHECK(numel(spec.split) == x.numel() && numel(spec.merge) == x.numel(), DimensionError,
                 "view: element count mismatch for spec split ", shape_str(spec.split),
                 " merge ", shape_str(spec.merge), " on ", shape_str(x.shape()));
    Tensor<T> s = reshape(tape, x, spec.split);
    Tensor<T> p = permute(tape, s, spec.perm);
    return reshape(tape, p, spec.merge);
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, int axis) {
    DSANET_CHECK(!parts.empty(), UsageError, "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        DSANET_CHECK(p.rank() == s0.size(), DimensionError, "concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (static_cast<int>(i) != axis)
                DSANET_CHECK(p.dim(i) == s0[i], DimensionError, "concat: dim ", i, " mismatch");
        total += p.dim(axis);
    }
    Shape ys = s0;
    ys[axis] = total;
    Tensor<T> y = Tensor<T>::zeros(ys);

    std::int64_t outer, ny, inner;
    detail::axis_split(ys, axis, outer, ny, inner);
    T* py = y.data();
    std::int64_t off = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        const std::int64_t np = p.dim(axis);
        const T* pp = p.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(py + (o * ny + off) * inner, pp + o * np * inner,
                        static_cast<std::size_t>(np * inner) * sizeof(T));
        off += np;
        any_grad = any_grad || p.requires_grad();
    }
    if (tape.recording() && any_grad) {
        y.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData<T>>> pls;
        std::vector<std::int64_t> sizes;
        for (const auto& p : parts) {
            pls.push_back(p.payload());
            sizes.push_back(p.dim(axis));
        }
        auto yp = y.payload();
        tape.record(yp, [pls, sizes, yp, outer, ny, inner]() {
            const T* g = yp->grad.data();
            std::int64_t off = 0;
            for (std::size_t k = 0; k < pls.size(); ++k) {
                const std::int64_t np = sizes[k];
                if (pls[k]->requires_grad) {
                    pls[k]->ensure_grad();
                    T* gp = pls[k]->grad.data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* gr = g + (o * ny + off) * inner;
                        T* pr = gp + o * np * inner;
                        for (std::int64_t i = 0; i < np * inner; ++i) pr[i] += gr[i];
                    }
                }
                off += np;
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> narrow(Tape<T>& tape, const Tensor<T>& x, int axis, std::int64_t start,
                 std::int64_t len) {
    std::int64_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    DSANET_CHECK(start >= 0 && start + len <= n, DimensionError, "narrow: range [", start, ",",
                 start + len, ") out of axis size ", n);
    Shape ys = x.shape();
    ys[axis] = len;
    Tensor<T> y = Tensor<T>::zeros(ys);
    const T* px = x.data();
    T* py = y.data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(py + o * len * inner, px + (o * n + start) * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(T));
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, outer, n, inner, start, len]() {
            xp->ensure_grad();
            const T* g = yp->grad.data();
            T* gx = xp->grad.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* gr = g + o * len * inner;
                T* xr = gx + (o * n + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) xr[i] += gr[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    T acc = T(0);
    const T* px = x.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor<T> y = Tensor<T>::scalar(acc);
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, n]() {
            xp->ensure_grad();
            const T g = yp->grad[0];
            for (std::int64_t i = 0; i < n; ++i) xp->grad[i] += g;
        });
    }
    return y;
}

}  // namespace dsanet::ops
