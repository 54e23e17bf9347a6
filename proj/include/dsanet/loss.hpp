#pragma once

#include <cmath>

#include "dsanet/model.hpp"
#include "dsanet/ops.hpp"

namespace dsanet {

inline constexpr double kCeLogClamp = 1e-12;
inline constexpr double kDiceEps = 1e-6;

// labels: [B,H,W] class indices. probs: [B,M,H,W] from softmax.
// loss = -(1/N) sum_j log p_j,y_j with the log argument clamped below.
template <typename T>
Tensor<T> ce_loss(Tape<T>& tape, const Tensor<T>& probs, const IntTensor& labels) {
    DSANET_CHECK(probs.rank() == 4, DimensionError, "ce_loss: probs must be [B,M,H,W]");
    const std::int64_t B = probs.dim(0), M = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    DSANET_CHECK(labels.shape == Shape{B, H, W}, DimensionError, "ce_loss: labels ",
                 shape_str(labels.shape), " do not match probs ", shape_str(probs.shape()));
    const std::int64_t N = B * H * W;
    const std::int64_t hw = H * W;
    const T* p = probs.data();
    double acc = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < hw; ++j) {
            const std::int32_t y = labels.value[static_cast<std::size_t>(b * hw + j)];
            DSANET_CHECK(y >= 0 && y < M, FormatError, "ce_loss: class index ", y,
                         " out of range [0,", M, ")");
            const double pv =
                std::max(static_cast<double>(p[(b * M + y) * hw + j]), kCeLogClamp);
            acc -= std::log(pv);
        }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
    if (tape.recording() && probs.requires_grad()) {
        out.set_requires_grad(true);
        auto pp = probs.payload();
        auto op = out.payload();
        auto lab = labels.value;
        tape.record(op, [pp, op, lab = std::move(lab), B, M, hw, N]() {
            pp->ensure_grad();
            const T g = op->grad[0];
            const T* p = pp->value.data();
            T* gp = pp->grad.data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t j = 0; j < hw; ++j) {
                    const std::int32_t y = lab[static_cast<std::size_t>(b * hw + j)];
                    const std::int64_t k = (b * M + y) * hw + j;
                    const double pv = std::max(static_cast<double>(p[k]), kCeLogClamp);
                    gp[k] -= g / static_cast<T>(pv * static_cast<double>(N));
                }
        });
    }
    return out;
}

// Soft Dice over foreground classes present in the target batch; both sides of
// the ratio are eps-smoothed so a perfect prediction scores exactly zero.
template <typename T>
Tensor<T> dice_loss(Tape<T>& tape, const Tensor<T>& probs, const IntTensor& labels) {
    DSANET_CHECK(probs.rank() == 4, DimensionError, "dice_loss: probs must be [B,M,H,W]");
    const std::int64_t B = probs.dim(0), M = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    DSANET_CHECK(labels.shape == Shape{B, H, W}, DimensionError, "dice_loss: labels ",
                 shape_str(labels.shape), " do not match probs ", shape_str(probs.shape()));
    const std::int64_t hw = H * W;

    std::vector<std::int64_t> count_y(static_cast<std::size_t>(M), 0);
    for (std::int32_t y : labels.value) count_y[static_cast<std::size_t>(y)]++;

    std::vector<std::int64_t> present;
    for (std::int64_t c = 1; c < M; ++c)
        if (count_y[static_cast<std::size_t>(c)] > 0) present.push_back(c);
    if (present.empty()) return Tensor<T>::scalar(T(0));

    const T* p = probs.data();
    std::vector<double> sum_p(present.size(), 0.0), sum_py(present.size(), 0.0);
    for (std::size_t ci = 0; ci < present.size(); ++ci) {
        const std::int64_t c = present[ci];
        for (std::int64_t b = 0; b < B; ++b) {
            const T* pc = p + (b * M + c) * hw;
            const std::int32_t* lb = labels.value.data() + b * hw;
            double sp = 0.0, spy = 0.0;
            for (std::int64_t j = 0; j < hw; ++j) {
                sp += static_cast<double>(pc[j]);
                if (lb[j] == c) spy += static_cast<double>(pc[j]);
            }
            sum_p[ci] += sp;
            sum_py[ci] += spy;
        }
    }
    double loss = 0.0;
    for (std::size_t ci = 0; ci < present.size(); ++ci) {
        const double denom =
            sum_p[ci] + static_cast<double>(count_y[static_cast<std::size_t>(present[ci])]) +
            kDiceEps;
        loss += 1.0 - (2.0 * sum_py[ci] + kDiceEps) / denom;
    }
    loss /= static_cast<double>(present.size());
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));

    if (tape.recording() && probs.requires_grad()) {
        out.set_requires_grad(true);
        auto pp = probs.payload();
        auto op = out.payload();
        auto lab = labels.value;
        tape.record(op, [pp, op, lab = std::move(lab), present, sum_p, sum_py, count_y, B, M,
                         hw]() {
            pp->ensure_grad();
            const double g = static_cast<double>(op->grad[0]);
            T* gp = pp->grad.data();
            const double inv_n = 1.0 / static_cast<double>(present.size());
            for (std::size_t ci = 0; ci < present.size(); ++ci) {
                const std::int64_t c = present[ci];
                const double denom =
                    sum_p[ci] +
                    static_cast<double>(count_y[static_cast<std::size_t>(c)]) + kDiceEps;
                const double num = 2.0 * sum_py[ci] + kDiceEps;
                const double d2 = denom * denom;
                for (std::int64_t b = 0; b < B; ++b) {
                    T* gc = gp + (b * M + c) * hw;
                    const std::int32_t* lb = lab.data() + b * hw;
                    for (std::int64_t j = 0; j < hw; ++j) {
                        const double two_y = lb[j] == c ? 2.0 : 0.0;
                        // d(1 - num/denom)/dp = -(two_y*denom - num)/denom^2
                        gc[j] -= static_cast<T>(g * inv_n * (two_y * denom - num) / d2);
                    }
                }
            }
        });
    }
    return out;
}

inline IntTensor downsample_labels(const IntTensor& labels, int factor) {
    DSANET_CHECK(labels.shape.size() == 3, DimensionError, "labels must be [B,H,W]");
    const std::int64_t B = labels.shape[0], H = labels.shape[1], W = labels.shape[2];
    DSANET_CHECK(H % factor == 0 && W % factor == 0, DimensionError,
                 "label size not divisible by ", factor);
    IntTensor out = IntTensor::zeros({B, H / factor, W / factor});
    const std::int64_t Ho = H / factor, Wo = W / factor;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t y = 0; y < Ho; ++y)
            for (std::int64_t x = 0; x < Wo; ++x)
                out.value[static_cast<std::size_t>((b * Ho + y) * Wo + x)] =
                    labels.value[static_cast<std::size_t>((b * H + y * factor) * W + x * factor)];
    return out;
}

struct LossParts {
    double ce[3] = {0, 0, 0};
    double dice[3] = {0, 0, 0};
    double total = 0;
};

// Deep-supervised objective: sum over scales a=0,1,2 of (ce + dice)/2^a, with
// targets downsampled by nearest neighbor.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const ModelOutput<T>& out, const IntTensor& labels,
                     LossParts* parts = nullptr) {
    const Tensor<T>* logits[3] = {&out.logits_full, &out.logits_half, &out.logits_quarter};
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (int a = 0; a < 3; ++a) {
        IntTensor target = a == 0 ? labels : downsample_labels(labels, 1 << a);
        Tensor<T> probs = ops::softmax(tape, *logits[a], 1);
        Tensor<T> ce = ce_loss(tape, probs, target);
        Tensor<T> dice = dice_loss(tape, probs, target);
        if (parts) {
            parts->ce[a] = static_cast<double>(ce[0]);
            parts->dice[a] = static_cast<double>(dice[0]);
        }
        Tensor<T> scale_sum = ops::add(tape, ce, dice);
        const T weight = static_cast<T>(1.0 / static_cast<double>(1 << a));
        total = a == 0 ? scale_sum : ops::add(tape, total, ops::scale(tape, scale_sum, weight));
    }
    if (parts) parts->total = static_cast<double>(total[0]);
    return total;
}

}  // namespace dsanet
