#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dsanet/ops.hpp"

namespace dsanet::ops {

namespace detail {

// out[b,co,:,:] += w * shifted input row; stride-1 rows stay contiguous so the
// inner loops vectorize.
template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, std::int64_t B, std::int64_t C,
                    std::int64_t H, std::int64_t W, std::int64_t Co, std::int64_t k,
                    std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo) {
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t co = 0; co < Co; ++co) {
            T* yc = y + ((b * Co + co) * Ho) * Wo;
            const T bv = bias ? bias[co] : T(0);
            for (std::int64_t i = 0; i < Ho * Wo; ++i) yc[i] = bv;
            for (std::int64_t ci = 0; ci < C; ++ci) {
                const T* xc = x + ((b * C + ci) * H) * W;
                const T* wk = w + ((co * C + ci) * k) * k;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const T wv = wk[ky * k + kx];
                        if (wv == T(0)) continue;
                        if (stride == 1) {
                            const std::int64_t dy = ky - pad, dx = kx - pad;
                            const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                            const std::int64_t y1 = std::min<std::int64_t>(Ho, H - dy);
                            const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                            const std::int64_t x1 = std::min<std::int64_t>(Wo, W - dx);
                            for (std::int64_t oy = y0; oy < y1; ++oy) {
                                T* yr = yc + oy * Wo;
                                const T* xr = xc + (oy + dy) * W + dx;
                                for (std::int64_t ox = x0; ox < x1; ++ox) yr[ox] += wv * xr[ox];
                            }
                        } else {
                            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                const std::int64_t iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= H) continue;
                                T* yr = yc + oy * Wo;
                                const T* xr = xc + iy * W;
                                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                    const std::int64_t ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= W) continue;
                                    yr[ox] += wv * xr[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int padding = 0) {
    DSANET_CHECK(x.rank() == 4, DimensionError, "conv2d: input must be [B,C,H,W], got ",
                 shape_str(x.shape()));
    DSANET_CHECK(w.rank() == 4 && w.dim(2) == w.dim(3), DimensionError,
                 "conv2d: weight must be [Co,C,k,k]");
    DSANET_CHECK(x.dim(1) == w.dim(1), DimensionError, "conv2d: input channels ", x.dim(1),
                 " vs weight channels ", w.dim(1));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = w.dim(0), k = w.dim(2);
    DSANET_CHECK(b.numel() == Co, DimensionError, "conv2d: bias size mismatch");
    const std::int64_t Ho = (H + 2 * padding - k) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - k) / stride + 1;
    DSANET_CHECK(Ho > 0 && Wo > 0, DimensionError, "conv2d: empty output for input ",
                 shape_str(x.shape()));

    Tensor<T> y = Tensor<T>::zeros({B, Co, Ho, Wo});
    detail::conv2d_forward(x.data(), w.data(), b.data(), y.data(), B, C, H, W, Co, k, stride,
                           padding, Ho, Wo);

    if (detail::want_grad(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), wp = w.payload(), bp = b.payload(), yp = y.payload();
        const std::int64_t s = stride, p = padding;
        tape.record(yp, [xp, wp, bp, yp, B, C, H, W, Co, k, s, p, Ho, Wo]() {
            const T* g = yp->grad.data();
            if (xp->requires_grad) {
                xp->ensure_grad();
                T* gx = xp->grad.data();
                const T* pw = wp->value.data();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        T* xc = gx + ((b * C + ci) * H) * W;
                        for (std::int64_t co = 0; co < Co; ++co) {
                            const T* gc = g + ((b * Co + co) * Ho) * Wo;
                            const T* wk = pw + ((co * C + ci) * k) * k;
                            for (std::int64_t ky = 0; ky < k; ++ky) {
                                for (std::int64_t kx = 0; kx < k; ++kx) {
                                    const T wv = wk[ky * k + kx];
                                    if (wv == T(0)) continue;
                                    if (s == 1) {
                                        const std::int64_t dy = ky - p, dx = kx - p;
                                        const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                                        const std::int64_t y1 = std::min<std::int64_t>(Ho, H - dy);
                                        const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                                        const std::int64_t x1 = std::min<std::int64_t>(Wo, W - dx);
                                        for (std::int64_t oy = y0; oy < y1; ++oy) {
                                            const T* gr = gc + oy * Wo;
                                            T* xr = xc + (oy + dy) * W + dx;
                                            for (std::int64_t ox = x0; ox < x1; ++ox)
                                                xr[ox] += wv * gr[ox];
                                        }
                                    } else {
                                        for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                            const std::int64_t iy = oy * s + ky - p;
                                            if (iy < 0 || iy >= H) continue;
                                            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                                const std::int64_t ix = ox * s + kx - p;
                                                if (ix < 0 || ix >= W) continue;
                                                xc[iy * W + ix] += wv * gc[oy * Wo + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                T* gw = wp->grad.data();
                const T* px = xp->value.data();
                for (std::int64_t co = 0; co < Co; ++co) {
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        T* wk = gw + ((co * C + ci) * k) * k;
                        for (std::int64_t ky = 0; ky < k; ++ky) {
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                T acc = T(0);
                                for (std::int64_t b = 0; b < B; ++b) {
                                    const T* gc = g + ((b * Co + co) * Ho) * Wo;
                                    const T* xc = px + ((b * C + ci) * H) * W;
                                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                        const std::int64_t iy = oy * s + ky - p;
                                        if (iy < 0 || iy >= H) continue;
                                        const T* gr = gc + oy * Wo;
                                        const T* xr = xc + iy * W;
                                        if (s == 1) {
                                            const std::int64_t dx = kx - p;
                                            const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                                            const std::int64_t x1 =
                                                std::min<std::int64_t>(Wo, W - dx);
                                            for (std::int64_t ox = x0; ox < x1; ++ox)
                                                acc += gr[ox] * xr[ox + dx];
                                        } else {
                                            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                                const std::int64_t ix = ox * s + kx - p;
                                                if (ix < 0 || ix >= W) continue;
                                                acc += gr[ox] * xr[ix];
                                            }
                                        }
                                    }
                                }
                                wk[ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t co = 0; co < Co; ++co) {
                        const T* gc = g + ((b * Co + co) * Ho) * Wo;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += gc[i];
                        gb[co] += acc;
                    }
            }
        });
    }
    return y;
}

// weight layout [C_in, C_out, k, k]; output (H-1)*stride + k
template <typename T>
Tensor<T> conv_transpose2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, int stride) {
    DSANET_CHECK(x.rank() == 4, DimensionError, "conv_transpose2d: input must be [B,C,H,W]");
    DSANET_CHECK(w.rank() == 4 && w.dim(2) == w.dim(3), DimensionError,
                 "conv_transpose2d: weight must be [C,Co,k,k]");
    DSANET_CHECK(x.dim(1) == w.dim(0), DimensionError, "conv_transpose2d: channel mismatch ",
                 x.dim(1), " vs ", w.dim(0));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = w.dim(1), k = w.dim(2), s = stride;
    DSANET_CHECK(b.numel() == Co, DimensionError, "conv_transpose2d: bias size mismatch");
    const std::int64_t Ho = (H - 1) * s + k;
    const std::int64_t Wo = (W - 1) * s + k;

    Tensor<T> y = Tensor<T>::zeros({B, Co, Ho, Wo});
    {
        const T* px = x.data();
        const T* pw = w.data();
        const T* pb = b.data();
        T* py = y.data();
        for (std::int64_t bb = 0; bb < B; ++bb) {
            for (std::int64_t co = 0; co < Co; ++co) {
                T* yc = py + ((bb * Co + co) * Ho) * Wo;
                for (std::int64_t i = 0; i < Ho * Wo; ++i) yc[i] = pb[co];
            }
            for (std::int64_t ci = 0; ci < C; ++ci) {
                const T* xc = px + ((bb * C + ci) * H) * W;
                for (std::int64_t co = 0; co < Co; ++co) {
                    T* yc = py + ((bb * Co + co) * Ho) * Wo;
                    const T* wk = pw + ((ci * Co + co) * k) * k;
                    for (std::int64_t iy = 0; iy < H; ++iy) {
                        for (std::int64_t ix = 0; ix < W; ++ix) {
                            const T v = xc[iy * W + ix];
                            if (v == T(0)) continue;
                            T* base = yc + (iy * s) * Wo + ix * s;
                            for (std::int64_t ky = 0; ky < k; ++ky)
                                for (std::int64_t kx = 0; kx < k; ++kx)
                                    base[ky * Wo + kx] += v * wk[ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    if (detail::want_grad(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), wp = w.payload(), bp = b.payload(), yp = y.payload();
        tape.record(yp, [xp, wp, bp, yp, B, C, H, W, Co, k, s, Ho, Wo]() {
            const T* g = yp->grad.data();
            if (xp->requires_grad) {
                xp->ensure_grad();
                T* gx = xp->grad.data();
                const T* pw = wp->value.data();
                for (std::int64_t bb = 0; bb < B; ++bb)
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        T* xc = gx + ((bb * C + ci) * H) * W;
                        for (std::int64_t co = 0; co < Co; ++co) {
                            const T* gc = g + ((bb * Co + co) * Ho) * Wo;
                            const T* wk = pw + ((ci * Co + co) * k) * k;
                            for (std::int64_t iy = 0; iy < H; ++iy)
                                for (std::int64_t ix = 0; ix < W; ++ix) {
                                    const T* base = gc + (iy * s) * Wo + ix * s;
                                    T acc = T(0);
                                    for (std::int64_t ky = 0; ky < k; ++ky)
                                        for (std::int64_t kx = 0; kx < k; ++kx)
                                            acc += base[ky * Wo + kx] * wk[ky * k + kx];
                                    xc[iy * W + ix] += acc;
                                }
                        }
                    }
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                T* gw = wp->grad.data();
                const T* px = xp->value.data();
                for (std::int64_t bb = 0; bb < B; ++bb)
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        const T* xc = px + ((bb * C + ci) * H) * W;
                        for (std::int64_t co = 0; co < Co; ++co) {
                            const T* gc = g + ((bb * Co + co) * Ho) * Wo;
                            T* wk = gw + ((ci * Co + co) * k) * k;
                            for (std::int64_t iy = 0; iy < H; ++iy)
                                for (std::int64_t ix = 0; ix < W; ++ix) {
                                    const T v = xc[iy * W + ix];
                                    if (v == T(0)) continue;
                                    const T* base = gc + (iy * s) * Wo + ix * s;
                                    for (std::int64_t ky = 0; ky < k; ++ky)
                                        for (std::int64_t kx = 0; kx < k; ++kx)
                                            wk[ky * k + kx] += v * base[ky * Wo + kx];
                                }
                        }
                    }
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                for (std::int64_t bb = 0; bb < B; ++bb)
                    for (std::int64_t co = 0; co < Co; ++co) {
                        const T* gc = g + ((bb * Co + co) * Ho) * Wo;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += gc[i];
                        gb[co] += acc;
                    }
            }
        });
    }
    return y;
}

// Gradient routes to the first max in row-major window order on ties.
template <typename T>
Tensor<T> maxpool2d(Tape<T>& tape, const Tensor<T>& x, int window = 2, int stride = 2) {
    DSANET_CHECK(x.rank() == 4, DimensionError, "maxpool2d: input must be [B,C,H,W]");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    DSANET_CHECK(H % stride == 0 && W % stride == 0 && window == stride, DimensionError,
                 "maxpool2d: spatial size ", H, "x", W, " not divisible by stride ", stride);
    const std::int64_t Ho = H / stride, Wo = W / stride;
    Tensor<T> y = Tensor<T>::zeros({B, C, Ho, Wo});
    std::vector<std::int32_t> argmax(static_cast<std::size_t>(y.numel()));
    const T* px = x.data();
    T* py = y.data();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T* xc = px + bc * H * W;
        T* yc = py + bc * Ho * Wo;
        std::int32_t* am = argmax.data() + bc * Ho * Wo;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                T best = xc[(oy * stride) * W + ox * stride];
                std::int32_t besti = static_cast<std::int32_t>((oy * stride) * W + ox * stride);
                for (std::int64_t ky = 0; ky < window; ++ky)
                    for (std::int64_t kx = 0; kx < window; ++kx) {
                        const std::int64_t ii = (oy * stride + ky) * W + ox * stride + kx;
                        if (xc[ii] > best) {
                            best = xc[ii];
                            besti = static_cast<std::int32_t>(ii);
                        }
                    }
                yc[oy * Wo + ox] = best;
                am[oy * Wo + ox] = besti;
            }
        }
    }
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, argmax = std::move(argmax), B, C, H, W, Ho, Wo]() {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            const T* g = yp->grad.data();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const std::int32_t* am = argmax.data() + bc * Ho * Wo;
                const T* gc = g + bc * Ho * Wo;
                T* xc = gx + bc * H * W;
                for (std::int64_t i = 0; i < Ho * Wo; ++i) xc[am[i]] += gc[i];
            }
        });
    }
    return y;
}

enum class PoolMode { Max, Mean };

// Pools along one axis by an integral factor; factor == axis size collapses it
// to 1 (the axis is kept with size 1 only when it is interior; a full collapse
// keeps size 1 as well so shapes stay rank-stable).
template <typename T>
Tensor<T> pool_over_axis(Tape<T>& tape, const Tensor<T>& x, int axis, PoolMode mode,
                         std::int64_t factor) {
    std::int64_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    DSANET_CHECK(factor >= 1 && factor <= n, DimensionError, "pool_over_axis: factor ", factor,
                 " exceeds axis size ", n);
    DSANET_CHECK(n % factor == 0, DimensionError, "pool_over_axis: axis size ", n,
                 " not divisible by factor ", factor);
    const std::int64_t no = n / factor;
    Shape ys = x.shape();
    ys[axis] = no;
    Tensor<T> y = Tensor<T>::zeros(ys);
    std::vector<std::int32_t> argmax;
    if (mode == PoolMode::Max) argmax.assign(static_cast<std::size_t>(y.numel()), 0);
    const T* px = x.data();
    T* py = y.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < no; ++j) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t out_idx = (o * no + j) * inner + in;
                if (mode == PoolMode::Max) {
                    T best = px[(o * n + j * factor) * inner + in];
                    std::int32_t bi = 0;
                    for (std::int64_t f = 1; f < factor; ++f) {
                        const T v = px[(o * n + j * factor + f) * inner + in];
                        if (v > best) {
                            best = v;
                            bi = static_cast<std::int32_t>(f);
                        }
                    }
                    py[out_idx] = best;
                    argmax[out_idx] = bi;
                } else {
                    T acc = T(0);
                    for (std::int64_t f = 0; f < factor; ++f)
                        acc += px[(o * n + j * factor + f) * inner + in];
                    py[out_idx] = acc / static_cast<T>(factor);
                }
            }
        }
    }
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, argmax = std::move(argmax), mode, outer, n, no, inner,
                         factor]() {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            const T* g = yp->grad.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t j = 0; j < no; ++j)
                    for (std::int64_t in = 0; in < inner; ++in) {
                        const std::int64_t out_idx = (o * no + j) * inner + in;
                        if (mode == PoolMode::Max) {
                            gx[(o * n + j * factor + argmax[out_idx]) * inner + in] += g[out_idx];
                        } else {
                            const T share = g[out_idx] / static_cast<T>(factor);
                            for (std::int64_t f = 0; f < factor; ++f)
                                gx[(o * n + j * factor + f) * inner + in] += share;
                        }
                    }
        });
    }
    return y;
}

inline std::int64_t default_groups(std::int64_t channels) { return channels >= 8 ? 8 : channels; }

template <typename T>
Tensor<T> group_norm(Tape<T>& tape, const Tensor<T>& x, std::int64_t groups,
                     const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    DSANET_CHECK(x.rank() == 4, DimensionError, "group_norm: input must be [B,C,H,W]");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    DSANET_CHECK(C % groups == 0, DimensionError, "group_norm: C=", C,
                 " not divisible by groups=", groups);
    DSANET_CHECK(gamma.numel() == C && beta.numel() == C, DimensionError,
                 "group_norm: affine size mismatch");
    const std::int64_t cg = C / groups;
    const std::int64_t gsize = cg * H * W;

    Tensor<T> y = Tensor<T>::zeros(x.shape());
    std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<T> istd(static_cast<std::size_t>(B * groups));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbeta = beta.data();
    T* py = y.data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t gr = 0; gr < groups; ++gr) {
            const T* xg = px + (b * C + gr * cg) * H * W;
            T mean = T(0);
            for (std::int64_t i = 0; i < gsize; ++i) mean += xg[i];
            mean /= static_cast<T>(gsize);
            T var = T(0);
            for (std::int64_t i = 0; i < gsize; ++i) {
                const T d = xg[i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(gsize);
            const T is = T(1) / std::sqrt(var + eps);
            istd[b * groups + gr] = is;
            T* hg = xhat.data() + (b * C + gr * cg) * H * W;
            T* yg = py + (b * C + gr * cg) * H * W;
            for (std::int64_t c = 0; c < cg; ++c) {
                const T ga = pg[gr * cg + c];
                const T be = pbeta[gr * cg + c];
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const T h = (xg[c * H * W + i] - mean) * is;
                    hg[c * H * W + i] = h;
                    yg[c * H * W + i] = ga * h + be;
                }
            }
        }
    }
    if (detail::want_grad(tape, {&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), gp = gamma.payload(), bp = beta.payload(), yp = y.payload();
        tape.record(yp, [xp, gp, bp, yp, xhat = std::move(xhat), istd = std::move(istd), B, C, H,
                         W, groups, cg, gsize]() {
            const T* g = yp->grad.data();
            if (gp->requires_grad) gp->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            if (xp->requires_grad) xp->ensure_grad();
            const std::int64_t hw = H * W;
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t gr = 0; gr < groups; ++gr) {
                    const std::int64_t base = (b * C + gr * cg) * hw;
                    const T* gg = g + base;
                    const T* hg = xhat.data() + base;
                    if (gp->requires_grad || bp->requires_grad) {
                        for (std::int64_t c = 0; c < cg; ++c) {
                            T dg = T(0), db = T(0);
                            for (std::int64_t i = 0; i < hw; ++i) {
                                dg += gg[c * hw + i] * hg[c * hw + i];
                                db += gg[c * hw + i];
                            }
                            if (gp->requires_grad) gp->grad[gr * cg + c] += dg;
                            if (bp->requires_grad) bp->grad[gr * cg + c] += db;
                        }
                    }
                    if (xp->requires_grad) {
                        T sum_h = T(0), sum_hh = T(0);
                        for (std::int64_t c = 0; c < cg; ++c) {
                            const T ga = gp->value[gr * cg + c];
                            for (std::int64_t i = 0; i < hw; ++i) {
                                const T gh = gg[c * hw + i] * ga;
                                sum_h += gh;
                                sum_hh += gh * hg[c * hw + i];
                            }
                        }
                        const T m1 = sum_h / static_cast<T>(gsize);
                        const T m2 = sum_hh / static_cast<T>(gsize);
                        const T is = istd[b * groups + gr];
                        T* gx = xp->grad.data() + base;
                        for (std::int64_t c = 0; c < cg; ++c) {
                            const T ga = gp->value[gr * cg + c];
                            for (std::int64_t i = 0; i < hw; ++i) {
                                const T gh = gg[c * hw + i] * ga;
                                gx[c * hw + i] += is * (gh - m1 - hg[c * hw + i] * m2);
                            }
                        }
                    }
                }
            }
        });
    }
    return y;
}

enum class UpsampleMode { Nearest, Bilinear };

// Bilinear uses half-pixel centers: src = (dst + 0.5)/factor - 0.5, clamped.
template <typename T>
Tensor<T> upsample2d(Tape<T>& tape, const Tensor<T>& x, int factor, UpsampleMode mode) {
    DSANET_CHECK(x.rank() == 4, DimensionError, "upsample2d: input must be [B,C,h,w]");
    DSANET_CHECK(factor >= 1, DimensionError, "upsample2d: factor must be >= 1");
    const std::int64_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t Ho = h * factor, Wo = w * factor;
    Tensor<T> y = Tensor<T>::zeros({B, C, Ho, Wo});
    const T* px = x.data();
    T* py = y.data();

    struct Lerp {
        std::int64_t i0, i1;
        T w1;  // weight of i1; i0 gets 1-w1
    };
    std::vector<Lerp> ly, lx;
    if (mode == UpsampleMode::Bilinear) {
        auto make = [factor](std::int64_t out_n, std::int64_t in_n) {
            std::vector<Lerp> v(static_cast<std::size_t>(out_n));
            for (std::int64_t o = 0; o < out_n; ++o) {
                double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
                src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
                const std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
                const std::int64_t i1 = std::min(i0 + 1, in_n - 1);
                v[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
            }
            return v;
        };
        ly = make(Ho, h);
        lx = make(Wo, w);
    }

    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T* xc = px + bc * h * w;
        T* yc = py + bc * Ho * Wo;
        if (mode == UpsampleMode::Nearest) {
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                const T* xr = xc + (oy / factor) * w;
                T* yr = yc + oy * Wo;
                for (std::int64_t ox = 0; ox < Wo; ++ox) yr[ox] = xr[ox / factor];
            }
        } else {
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                const auto& ry = ly[oy];
                T* yr = yc + oy * Wo;
                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                    const auto& rx = lx[ox];
                    const T v00 = xc[ry.i0 * w + rx.i0], v01 = xc[ry.i0 * w + rx.i1];
                    const T v10 = xc[ry.i1 * w + rx.i0], v11 = xc[ry.i1 * w + rx.i1];
                    const T top = v00 + rx.w1 * (v01 - v00);
                    const T bot = v10 + rx.w1 * (v11 - v10);
                    yr[ox] = top + ry.w1 * (bot - top);
                }
            }
        }
    }
    if (detail::want_grad(tape, {&x})) {
        y.set_requires_grad(true);
        auto xp = x.payload(), yp = y.payload();
        tape.record(yp, [xp, yp, ly = std::move(ly), lx = std::move(lx), mode, B, C, h, w, Ho, Wo,
                         factor]() {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            const T* g = yp->grad.data();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                T* xc = gx + bc * h * w;
                const T* gc = g + bc * Ho * Wo;
                if (mode == UpsampleMode::Nearest) {
                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                        T* xr = xc + (oy / factor) * w;
                        const T* gr = gc + oy * Wo;
                        for (std::int64_t ox = 0; ox < Wo; ++ox) xr[ox / factor] += gr[ox];
                    }
                } else {
                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                        const auto& ry = ly[oy];
                        const T* gr = gc + oy * Wo;
                        for (std::int64_t ox = 0; ox < Wo; ++ox) {
                            const auto& rx = lx[ox];
                            const T gv = gr[ox];
                            const T wy1 = ry.w1, wx1 = rx.w1;
                            xc[ry.i0 * w + rx.i0] += (T(1) - wy1) * (T(1) - wx1) * gv;
                            xc[ry.i0 * w + rx.i1] += (T(1) - wy1) * wx1 * gv;
                            xc[ry.i1 * w + rx.i0] += wy1 * (T(1) - wx1) * gv;
                            xc[ry.i1 * w + rx.i1] += wy1 * wx1 * gv;
                        }
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace dsanet::ops
