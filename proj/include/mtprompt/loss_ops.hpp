#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mtprompt/ops.hpp"

// Pixel-map loss primitives. Each is a single tape node with an analytic
// backward. Labels and masks are plain integer/byte buffers, never tensors on
// the tape.

namespace mtp {

// Mean softmax cross-entropy over pixels whose label != ignore_index.
// logits: [rows x K], labels: rows entries in [0,K) or ignore_index.
template <typename T>
Tensor<T> cross_entropy_map(Tape<T>& tape, const Tensor<T>& logits, std::span<const int32_t> labels,
                            int32_t ignore_index = 255) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy_map: logits must be [rows x K]");
    const int rows = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != rows)
        throw ShapeError("cross_entropy_map: label count mismatch");
    int64_t valid = 0;
    T total = T(0);
    std::vector<T> probs(static_cast<size_t>(logits.numel()));
    const T* pl = logits.ptr();
    for (int r = 0; r < rows; ++r) {
        const int32_t lab = labels[static_cast<size_t>(r)];
        if (lab == ignore_index) continue;
        if (lab < 0 || lab >= k)
            throw ShapeError("cross_entropy_map: label " + std::to_string(lab) + " out of range [0," + std::to_string(k) + ")");
        const size_t o = static_cast<size_t>(r) * k;
        T mx = pl[o];
        for (int j = 1; j < k; ++j) mx = std::max(mx, pl[o + j]);
        T z = T(0);
        for (int j = 0; j < k; ++j) {
            probs[o + j] = kernels::vexp(pl[o + j] - mx);
            z += probs[o + j];
        }
        const T inv = T(1) / z;
        for (int j = 0; j < k; ++j) probs[o + j] *= inv;
        total += std::log(z) + mx - pl[o + lab];
        ++valid;
    }
    if (valid == 0) throw ContractError("cross_entropy_map: every pixel carries the ignore index");
    const T inv_valid = T(1) / static_cast<T>(valid);
    Tensor<T> out = Tensor<T>::from({1}, {total * inv_valid});
    if (needs_tape(tape, logits)) {
        std::vector<int32_t> labs(labels.begin(), labels.end());
        record(tape, out, [logits = logits, out, rows, k, ignore_index, inv_valid, labs = std::move(labs),
                           probs = std::move(probs)]() mutable {
            const T g = out.grad_ptr()[0] * inv_valid;
            T* gl = logits.grad_ptr();
            for (int r = 0; r < rows; ++r) {
                const int32_t lab = labs[static_cast<size_t>(r)];
                if (lab == ignore_index) continue;
                const size_t o = static_cast<size_t>(r) * k;
                for (int j = 0; j < k; ++j) gl[o + j] += g * (probs[o + j] - (j == lab ? T(1) : T(0)));
            }
        });
    }
    return out;
}

// Mean absolute error over unmasked elements. mask (optional) is per-pixel
// (pred rows/pixels), applied across all channels of that pixel.
template <typename T>
Tensor<T> l1_map(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& gt,
                 std::span<const uint8_t> mask = {}) {
    if (!same_shape(pred, gt))
        throw ShapeError("l1_map: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
    const int64_t n = pred.numel();
    const int channels = pred.rank() >= 1 ? pred.dim(pred.rank() - 1) : 1;
    const int64_t pixels = n / channels;
    const bool masked = !mask.empty();
    if (masked && static_cast<int64_t>(mask.size()) != pixels)
        throw ShapeError("l1_map: mask length must equal pixel count");
    int64_t valid = 0;
    T total = T(0);
    const T* pp = pred.ptr();
    const T* pg = gt.ptr();
    for (int64_t px = 0; px < pixels; ++px) {
        if (masked && !mask[static_cast<size_t>(px)]) continue;
        const size_t o = static_cast<size_t>(px) * channels;
        for (int c = 0; c < channels; ++c) total += std::abs(pp[o + c] - pg[o + c]);
        valid += channels;
    }
    if (valid == 0) throw ContractError("l1_map: empty mask");
    const T inv_valid = T(1) / static_cast<T>(valid);
    Tensor<T> out = Tensor<T>::from({1}, {total * inv_valid});
    if (needs_tape(tape, pred, gt)) {
        std::vector<uint8_t> m(mask.begin(), mask.end());
        record(tape, out, [pred = pred, gt = gt, out, pixels, channels, inv_valid, masked, m = std::move(m)]() mutable {
            const T g = out.grad_ptr()[0] * inv_valid;
            const T* pp2 = pred.ptr();
            const T* pg2 = gt.ptr();
            for (int64_t px = 0; px < pixels; ++px) {
                if (masked && !m[static_cast<size_t>(px)]) continue;
                const size_t o = static_cast<size_t>(px) * channels;
                for (int c = 0; c < channels; ++c) {
                    const T d = pp2[o + c] - pg2[o + c];
                    const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                    if (pred.requires_grad()) pred.grad_ptr()[o + c] += g * s;
                    if (gt.requires_grad()) gt.grad_ptr()[o + c] -= g * s;
                }
            }
        });
    }
    return out;
}

// Mean binary cross-entropy on logits against {0,1} targets, in the
// overflow-free max(z,0) - z*y + log1p(exp(-|z|)) form.
template <typename T>
Tensor<T> bce_logits_map(Tape<T>& tape, const Tensor<T>& logits, std::span<const uint8_t> targets) {
    const int64_t n = logits.numel();
    if (static_cast<int64_t>(targets.size()) != n)
        throw ShapeError("bce_logits_map: target count mismatch");
    T total = T(0);
    const T* pl = logits.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const T z = pl[static_cast<size_t>(i)];
        const T y = targets[static_cast<size_t>(i)] ? T(1) : T(0);
        total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    const T inv = T(1) / static_cast<T>(n);
    Tensor<T> out = Tensor<T>::from({1}, {total * inv});
    if (needs_tape(tape, logits)) {
        std::vector<uint8_t> t(targets.begin(), targets.end());
        record(tape, out, [logits = logits, out, n, inv, t = std::move(t)]() mutable {
            const T g = out.grad_ptr()[0] * inv;
            const T* pl2 = logits.ptr();
            T* gl = logits.grad_ptr();
            for (int64_t i = 0; i < n; ++i) {
                const T z = pl2[static_cast<size_t>(i)];
                const T sig = T(1) / (T(1) + kernels::vexp(-z));
                gl[static_cast<size_t>(i)] += g * (sig - (t[static_cast<size_t>(i)] ? T(1) : T(0)));
            }
        });
    }
    return out;
}

} // namespace mtp
