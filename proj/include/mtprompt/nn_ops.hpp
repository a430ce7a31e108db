#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "mtprompt/ops.hpp"

// Spatial and attention ops used by the fusion/decoder path. Feature maps are
// rank-3 [h x w x C]; token matrices [h*w x C] share the same memory layout,
// so token<->grid conversion is a plain reshape.

namespace mtp {

// Transposed convolution with kernel == stride (the only configuration this
// project needs): every input pixel paints one disjoint k x k output block.
// That makes the op a plain matmul against the flattened weight -- the
// [Cin x k x k x Cout] layout is already [Cin x (k*k*Cout)] row-major --
// followed by a block scatter. weight: [Cin x k x k x Cout], bias: [Cout],
// x: [h x w x Cin].
template <typename T>
Tensor<T> conv_transpose2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int k) {
    if (x.rank() != 3) throw ShapeError("conv_transpose2d: input must be [h x w x Cin]");
    if (weight.rank() != 4 || weight.dim(1) != k || weight.dim(2) != k)
        throw ShapeError("conv_transpose2d: weight must be [Cin x k x k x Cout]");
    const int h = x.dim(0), w = x.dim(1), cin = x.dim(2), cout = weight.dim(3);
    if (weight.dim(0) != cin) throw ShapeError("conv_transpose2d: Cin mismatch");
    if (bias.numel() != cout) throw ShapeError("conv_transpose2d: bias length mismatch");
    const int pixels = h * w, block = k * k * cout, ow = w * k;

    static thread_local std::vector<T> blocks;
    blocks.assign(static_cast<size_t>(pixels) * block, T(0));
    kernels::matmul_nn_acc(x.ptr(), weight.ptr(), blocks.data(), pixels, cin, block);

    Tensor<T> out = Tensor<T>::uninit({h * k, w * k, cout});
    const T* pb = bias.ptr();
    T* po = out.ptr();
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            const T* bp = blocks.data() + (static_cast<size_t>(y) * w + xx) * block;
            for (int dy = 0; dy < k; ++dy) {
                T* op = po + ((static_cast<size_t>(y * k + dy) * ow) + static_cast<size_t>(xx) * k) * cout;
                const T* sp = bp + static_cast<size_t>(dy) * k * cout;
                int j = 0;
                for (int dx = 0; dx < k; ++dx)
                    for (int co = 0; co < cout; ++co, ++j) op[j] = sp[j] + pb[co];
            }
        }
    if (needs_tape(tape, x, weight, bias)) {
        record(tape, out, [x = x, weight = weight, bias = bias, out, h, w, cin, cout, k, ow, pixels,
                           block]() mutable {
            const T* go = out.grad_ptr();
            // gather output grads back into block-major form
            static thread_local std::vector<T> gblocks;
            gblocks.resize(static_cast<size_t>(pixels) * block);
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    T* bp = gblocks.data() + (static_cast<size_t>(y) * w + xx) * block;
                    for (int dy = 0; dy < k; ++dy)
                        std::memcpy(bp + static_cast<size_t>(dy) * k * cout,
                                    go + ((static_cast<size_t>(y * k + dy) * ow) + static_cast<size_t>(xx) * k) * cout,
                                    static_cast<size_t>(k) * cout * sizeof(T));
                }
            if (x.requires_grad()) {
                static thread_local std::vector<T> wt;
                wt.resize(static_cast<size_t>(block) * cin);
                transpose_into(weight.ptr(), wt.data(), cin, block);
                kernels::matmul_nn_acc(gblocks.data(), wt.data(), x.grad_ptr(), pixels, block, cin);
            }
            if (weight.requires_grad())
                kernels::matmul_tn_acc(x.ptr(), gblocks.data(), weight.grad_ptr(), pixels, cin, block);
            if (bias.requires_grad()) {
                T* gb = bias.grad_ptr();
                const int64_t rows = out.numel() / cout;
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = go + r * cout;
                    for (int co = 0; co < cout; ++co) gb[co] += gr[co];
                }
            }
        });
    }
    return out;
}

namespace detail {

struct BilinearTap {
    int i0, i1;
    float w1; // weight of i1; i0 carries 1 - w1
};

// half-pixel centers with clamped edges, specialized to the x2 factor
inline std::vector<BilinearTap> bilinear2x_taps(int n) {
    std::vector<BilinearTap> taps(static_cast<size_t>(2 * n));
    for (int o = 0; o < 2 * n; ++o) {
        const double src = (o + 0.5) / 2.0 - 0.5;
        const double f = std::floor(src);
        int i0 = static_cast<int>(f);
        int i1 = i0 + 1;
        float w1 = static_cast<float>(src - f);
        if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0; }
        if (i1 > n - 1) { i1 = n - 1; i0 = n - 1; w1 = 0; }
        taps[static_cast<size_t>(o)] = BilinearTap{i0, i1, w1};
    }
    return taps;
}

} // namespace detail

// Bilinear x2 upsampling (half-pixel centers, clamped edges). Fixed weights,
// differentiable w.r.t. the input only. Separable: a vertical row-blend pass
// then a horizontal column-blend pass, both contiguous.
template <typename T>
Tensor<T> bilinear_upsample2x(Tape<T>& tape, const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("bilinear_upsample2x: input must be [h x w x C]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = h * 2, ow = w * 2;
    const auto ty = detail::bilinear2x_taps(h);
    const auto tx = detail::bilinear2x_taps(w);

    Tensor<T> out = Tensor<T>::uninit({oh, ow, c});
    {
        static thread_local std::vector<T> tmp; // vertical pass result, oh x w x c
        tmp.resize(static_cast<size_t>(oh) * w * c);
        const T* px = x.ptr();
        const size_t row = static_cast<size_t>(w) * c;
        for (int oy = 0; oy < oh; ++oy) {
            const auto& a = ty[static_cast<size_t>(oy)];
            const T w1 = static_cast<T>(a.w1), w0 = T(1) - w1;
            const T* r0 = px + static_cast<size_t>(a.i0) * row;
            const T* r1 = px + static_cast<size_t>(a.i1) * row;
            T* dst = tmp.data() + static_cast<size_t>(oy) * row;
            for (size_t j = 0; j < row; ++j) dst[j] = w0 * r0[j] + w1 * r1[j];
        }
        T* po = out.ptr();
        for (int oy = 0; oy < oh; ++oy) {
            const T* src = tmp.data() + static_cast<size_t>(oy) * row;
            T* dst = po + static_cast<size_t>(oy) * ow * c;
            for (int ox = 0; ox < ow; ++ox) {
                const auto& b = tx[static_cast<size_t>(ox)];
                const T w1 = static_cast<T>(b.w1), w0 = T(1) - w1;
                const T* c0 = src + static_cast<size_t>(b.i0) * c;
                const T* c1 = src + static_cast<size_t>(b.i1) * c;
                T* op = dst + static_cast<size_t>(ox) * c;
                for (int ch = 0; ch < c; ++ch) op[ch] = w0 * c0[ch] + w1 * c1[ch];
            }
        }
    }
    if (needs_tape(tape, x)) {
        record(tape, out, [x = x, out, h, w, c, oh, ow, ty, tx]() mutable {
            const T* go = out.grad_ptr();
            T* gx = x.grad_ptr();
            const size_t row = static_cast<size_t>(w) * c;
            static thread_local std::vector<T> gtmp; // adjoint of the vertical-pass result
            gtmp.assign(static_cast<size_t>(oh) * row, T(0));
            for (int oy = 0; oy < oh; ++oy) {
                const T* gp = go + static_cast<size_t>(oy) * ow * c;
                T* dst = gtmp.data() + static_cast<size_t>(oy) * row;
                for (int ox = 0; ox < ow; ++ox) {
                    const auto& b = tx[static_cast<size_t>(ox)];
                    const T w1 = static_cast<T>(b.w1), w0 = T(1) - w1;
                    const T* op = gp + static_cast<size_t>(ox) * c;
                    T* c0 = dst + static_cast<size_t>(b.i0) * c;
                    T* c1 = dst + static_cast<size_t>(b.i1) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        c0[ch] += w0 * op[ch];
                        c1[ch] += w1 * op[ch];
                    }
                }
            }
            for (int oy = 0; oy < oh; ++oy) {
                const auto& a = ty[static_cast<size_t>(oy)];
                const T w1 = static_cast<T>(a.w1), w0 = T(1) - w1;
                const T* src = gtmp.data() + static_cast<size_t>(oy) * row;
                T* r0 = gx + static_cast<size_t>(a.i0) * row;
                T* r1 = gx + static_cast<size_t>(a.i1) * row;
                if (a.i0 == a.i1) {
                    for (size_t j = 0; j < row; ++j) r0[j] += src[j];
                } else {
                    for (size_t j = 0; j < row; ++j) r0[j] += w0 * src[j];
                    for (size_t j = 0; j < row; ++j) r1[j] += w1 * src[j];
                }
            }
        });
    }
    return out;
}

// Multi-head scaled dot-product attention over a packed [s x 3D] qkv matrix:
// per head, softmax(Q K^T / sqrt(dh)) V with dh = D / heads, heads written
// back into a [s x D] output. One tape node covers scores, softmax and the
// value mix; the softmax matrices are retained for the backward pass and,
// when `attn_out` is given, cloned out for inspection.
template <typename T>
Tensor<T> attention_core(Tape<T>& tape, const Tensor<T>& qkv, int heads,
                         std::vector<Tensor<T>>* attn_out = nullptr) {
    if (qkv.rank() != 2 || qkv.dim(1) % 3 != 0) throw ShapeError("attention_core: qkv must be [s x 3D]");
    const int s = qkv.dim(0), d = qkv.dim(1) / 3;
    if (d % heads != 0) throw ShapeError("attention_core: D must be a multiple of heads");
    const int dh = d / heads;
    const T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
    const int row = 3 * d;

    auto gather_block = [s, row, dh](const T* base, int col0, T* dst) {
        for (int i = 0; i < s; ++i)
            std::memcpy(dst + static_cast<size_t>(i) * dh, base + static_cast<size_t>(i) * row + col0,
                        static_cast<size_t>(dh) * sizeof(T));
    };

    Tensor<T> out = Tensor<T>::uninit({s, d});
    std::vector<T> attn(static_cast<size_t>(heads) * s * s);
    {
        static thread_local std::vector<T> qh, kh, vh, oh;
        qh.resize(static_cast<size_t>(s) * dh);
        kh.resize(static_cast<size_t>(s) * dh);
        vh.resize(static_cast<size_t>(s) * dh);
        oh.resize(static_cast<size_t>(s) * dh);
        const T* pq = qkv.ptr();
        for (int h = 0; h < heads; ++h) {
            gather_block(pq, h * dh, qh.data());
            gather_block(pq, d + h * dh, kh.data());
            gather_block(pq, 2 * d + h * dh, vh.data());
            T* ah = attn.data() + static_cast<size_t>(h) * s * s;
            std::fill(ah, ah + static_cast<size_t>(s) * s, T(0));
            static thread_local std::vector<T> kt;
            kt.resize(static_cast<size_t>(s) * dh);
            transpose_into(kh.data(), kt.data(), s, dh);
            kernels::matmul_nn_acc(qh.data(), kt.data(), ah, s, dh, s);
            for (int i = 0; i < s; ++i) {
                T* arow = ah + static_cast<size_t>(i) * s;
                T mx = arow[0];
                for (int j = 1; j < s; ++j) mx = std::max(mx, arow[j]);
                for (int j = 0; j < s; ++j) arow[j] = (arow[j] - mx) * inv_sqrt;
                kernels::vexp_span(arow, arow, static_cast<size_t>(s));
                T z = T(0);
                for (int j = 0; j < s; ++j) z += arow[j];
                const T inv = T(1) / z;
                for (int j = 0; j < s; ++j) arow[j] *= inv;
            }
            std::fill(oh.begin(), oh.end(), T(0));
            kernels::matmul_nn_acc(ah, vh.data(), oh.data(), s, s, dh);
            T* po = out.ptr();
            for (int i = 0; i < s; ++i)
                std::memcpy(po + static_cast<size_t>(i) * d + h * dh, oh.data() + static_cast<size_t>(i) * dh,
                            static_cast<size_t>(dh) * sizeof(T));
        }
    }
    if (attn_out) {
        for (int h = 0; h < heads; ++h) {
            Tensor<T> a = Tensor<T>::uninit({s, s});
            std::memcpy(a.ptr(), attn.data() + static_cast<size_t>(h) * s * s,
                        static_cast<size_t>(s) * s * sizeof(T));
            attn_out->push_back(a);
        }
    }
    if (needs_tape(tape, qkv)) {
        record(tape, out, [qkv = qkv, out, heads, s, d, dh, row, inv_sqrt, gather_block,
                           attn = std::move(attn)]() mutable {
            static thread_local std::vector<T> qh, kh, vh, goh, da, ds, dqh;
            qh.resize(static_cast<size_t>(s) * dh);
            kh.resize(static_cast<size_t>(s) * dh);
            vh.resize(static_cast<size_t>(s) * dh);
            goh.resize(static_cast<size_t>(s) * dh);
            da.resize(static_cast<size_t>(s) * s);
            ds.resize(static_cast<size_t>(s) * s);
            dqh.resize(static_cast<size_t>(s) * dh);
            const T* go = out.grad_ptr();
            const T* pq = qkv.ptr();
            T* gq = qkv.grad_ptr();
            auto scatter_acc = [&](int col0, const T* src) {
                for (int i = 0; i < s; ++i) {
                    T* dst = gq + static_cast<size_t>(i) * row + col0;
                    const T* sp = src + static_cast<size_t>(i) * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += sp[j];
                }
            };
            static thread_local std::vector<T> tr;
            for (int h = 0; h < heads; ++h) {
                gather_block(pq, h * dh, qh.data());
                gather_block(pq, d + h * dh, kh.data());
                gather_block(pq, 2 * d + h * dh, vh.data());
                for (int i = 0; i < s; ++i)
                    std::memcpy(goh.data() + static_cast<size_t>(i) * dh,
                                go + static_cast<size_t>(i) * d + h * dh, static_cast<size_t>(dh) * sizeof(T));
                const T* ah = attn.data() + static_cast<size_t>(h) * s * s;
                // dA = gOut V^T
                std::fill(da.begin(), da.end(), T(0));
                tr.resize(static_cast<size_t>(s) * dh);
                transpose_into(vh.data(), tr.data(), s, dh);
                kernels::matmul_nn_acc(goh.data(), tr.data(), da.data(), s, dh, s);
                // dV = A^T gOut, scattered into the packed grad
                std::fill(dqh.begin(), dqh.end(), T(0));
                kernels::matmul_tn_acc(ah, goh.data(), dqh.data(), s, s, dh);
                scatter_acc(2 * d + h * dh, dqh.data());
                // softmax backward + score scaling
                for (int i = 0; i < s; ++i) {
                    const size_t o = static_cast<size_t>(i) * s;
                    T dot = T(0);
                    for (int j = 0; j < s; ++j) dot += da[o + j] * ah[o + j];
                    for (int j = 0; j < s; ++j) ds[o + j] = ah[o + j] * (da[o + j] - dot) * inv_sqrt;
                }
                // dQ = dS K
                std::fill(dqh.begin(), dqh.end(), T(0));
                kernels::matmul_nn_acc(ds.data(), kh.data(), dqh.data(), s, s, dh);
                scatter_acc(h * dh, dqh.data());
                // dK = dS^T Q
                std::fill(dqh.begin(), dqh.end(), T(0));
                kernels::matmul_tn_acc(ds.data(), qh.data(), dqh.data(), s, s, dh);
                scatter_acc(d + h * dh, dqh.data());
            }
            (void)tr;
        });
    }
    return out;
}

// Two-layer MLP with GELU, fused into one node: out = gelu(x W1 + b1) W2 + b2.
template <typename T>
Tensor<T> mlp_block(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                    const Tensor<T>& w2, const Tensor<T>& b2) {
    if (x.rank() != 2 || w1.rank() != 2 || w2.rank() != 2 || x.dim(1) != w1.dim(0) ||
        w1.dim(1) != w2.dim(0) || b1.numel() != w1.dim(1) || b2.numel() != w2.dim(1))
        throw ShapeError("mlp_block: inconsistent shapes");
    const int s = x.dim(0), din = x.dim(1), hid = w1.dim(1), dout = w2.dim(1);
    constexpr double kC = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kA = 0.044715;

    std::vector<T> h1(static_cast<size_t>(s) * hid, T(0)); // pre-activation
    kernels::matmul_nn_acc(x.ptr(), w1.ptr(), h1.data(), s, din, hid);
    std::vector<T> g(static_cast<size_t>(s) * hid);        // activation
    std::vector<T> tanh_u(static_cast<size_t>(s) * hid);
    const T* pb1 = b1.ptr();
    for (int i = 0; i < s; ++i) {
        T* hrow = h1.data() + static_cast<size_t>(i) * hid;
        for (int j = 0; j < hid; ++j) hrow[j] += pb1[j];
    }
    gelu_forward_span(h1.data(), g.data(), tanh_u.data(), static_cast<size_t>(s) * hid);
    Tensor<T> out = Tensor<T>::uninit({s, dout});
    const T* pb2 = b2.ptr();
    T* po = out.ptr();
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < dout; ++j) po[static_cast<size_t>(i) * dout + j] = pb2[j];
    kernels::matmul_nn_acc(g.data(), w2.ptr(), po, s, hid, dout);

    const bool rec = tape.recording() && (x.requires_grad() || w1.requires_grad() || b1.requires_grad() ||
                                          w2.requires_grad() || b2.requires_grad());
    if (rec) {
        record(tape, out, [x = x, w1 = w1, b1 = b1, w2 = w2, b2 = b2, out, s, din, hid, dout,
                           h1 = std::move(h1), g = std::move(g), tanh_u = std::move(tanh_u)]() mutable {
            const T* go = out.grad_ptr();
            static thread_local std::vector<T> dg, wt;
            dg.assign(static_cast<size_t>(s) * hid, T(0));
            // dG = gOut W2^T
            wt.resize(static_cast<size_t>(hid) * dout);
            transpose_into(w2.ptr(), wt.data(), hid, dout);
            kernels::matmul_nn_acc(go, wt.data(), dg.data(), s, dout, hid);
            if (w2.requires_grad()) kernels::matmul_tn_acc(g.data(), go, w2.grad_ptr(), s, hid, dout);
            if (b2.requires_grad()) {
                T* gb = b2.grad_ptr();
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < dout; ++j) gb[j] += go[static_cast<size_t>(i) * dout + j];
            }
            // through the GELU
            for (size_t i = 0; i < dg.size(); ++i) {
                const T v = h1[i];
                const T t = tanh_u[i];
                const T du = static_cast<T>(kC) * (T(1) + T(3) * static_cast<T>(kA) * v * v);
                dg[i] *= T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
            }
            if (b1.requires_grad()) {
                T* gb = b1.grad_ptr();
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < hid; ++j) gb[j] += dg[static_cast<size_t>(i) * hid + j];
            }
            if (w1.requires_grad()) kernels::matmul_tn_acc(x.ptr(), dg.data(), w1.grad_ptr(), s, din, hid);
            if (x.requires_grad()) {
                wt.resize(static_cast<size_t>(din) * hid);
                transpose_into(w1.ptr(), wt.data(), din, hid);
                kernels::matmul_nn_acc(dg.data(), wt.data(), x.grad_ptr(), s, hid, din);
            }
        });
    }
    return out;
}

// Attention over the task axis at every spatial site. Rows of q/k/x are
// task-major: row (t * sites + p) holds task t at site p. Per site and head,
// scores = softmax(q k^T / sqrt(dh)) over tasks, and the output is the
// score-weighted mix of the raw per-head slices of x (no value projection).
// With a single task the mix is exactly the input.
template <typename T>
Tensor<T> site_task_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& x,
                              int heads, int sites) {
    if (q.rank() != 2 || k.rank() != 2 || x.rank() != 2)
        throw ShapeError("site_task_attention: rank-2 inputs required");
    if (!same_shape(q, k)) throw ShapeError("site_task_attention: q/k shape mismatch");
    if (q.dim(0) != x.dim(0)) throw ShapeError("site_task_attention: row count mismatch");
    const int rows = x.dim(0);
    if (rows % sites != 0) throw ShapeError("site_task_attention: rows not divisible by sites");
    const int tasks = rows / sites;
    const int dq = q.dim(1), dv = x.dim(1);
    if (dq % heads != 0 || dv % heads != 0) throw ShapeError("site_task_attention: head split mismatch");
    const int dh = dq / heads, dvh = dv / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    // softmax scores per (site, head): tasks x tasks
    std::vector<T> attn(static_cast<size_t>(sites) * heads * tasks * tasks);
    const T* pq = q.ptr();
    const T* pk = k.ptr();
    const T* px = x.ptr();
    T* po = out.ptr();
    std::vector<T> logits(static_cast<size_t>(tasks));
    for (int p = 0; p < sites; ++p) {
        for (int hd = 0; hd < heads; ++hd) {
            T* ap = attn.data() + ((static_cast<size_t>(p) * heads + hd) * tasks) * tasks;
            for (int t = 0; t < tasks; ++t) {
                const T* qr = pq + (static_cast<size_t>(t) * sites + p) * dq + hd * dh;
                T mx = -std::numeric_limits<T>::infinity();
                for (int s = 0; s < tasks; ++s) {
                    const T* kr = pk + (static_cast<size_t>(s) * sites + p) * dq + hd * dh;
                    T acc = T(0);
                    for (int j = 0; j < dh; ++j) acc += qr[j] * kr[j];
                    logits[static_cast<size_t>(s)] = acc * inv_sqrt;
                    mx = std::max(mx, logits[static_cast<size_t>(s)]);
                }
                T z = T(0);
                T* arow = ap + static_cast<size_t>(t) * tasks;
                for (int s = 0; s < tasks; ++s) {
                    arow[s] = std::exp(logits[static_cast<size_t>(s)] - mx);
                    z += arow[s];
                }
                const T inv = T(1) / z;
                T* orow = po + (static_cast<size_t>(t) * sites + p) * dv + hd * dvh;
                for (int s = 0; s < tasks; ++s) {
                    arow[s] *= inv;
                    const T* xr = px + (static_cast<size_t>(s) * sites + p) * dv + hd * dvh;
                    for (int j = 0; j < dvh; ++j) orow[j] += arow[s] * xr[j];
                }
            }
        }
    }
    if (needs_tape(tape, q, k, x)) {
        record(tape, out, [q = q, k = k, x = x, out, heads, sites, tasks, dq, dv, dh, dvh, inv_sqrt,
                           attn = std::move(attn)]() mutable {
            const T* go = out.grad_ptr();
            const T* pq2 = q.ptr();
            const T* pk2 = k.ptr();
            const T* px2 = x.ptr();
            std::vector<T> dscore(static_cast<size_t>(tasks));
            for (int p = 0; p < sites; ++p)
                for (int hd = 0; hd < heads; ++hd) {
                    const T* ap = attn.data() + ((static_cast<size_t>(p) * heads + hd) * tasks) * tasks;
                    for (int t = 0; t < tasks; ++t) {
                        const T* arow = ap + static_cast<size_t>(t) * tasks;
                        const T* grow = go + (static_cast<size_t>(t) * sites + p) * dv + hd * dvh;
                        // dA[t,s] = g_row . x_s ; dX_s += A[t,s] * g_row
                        T dot = T(0);
                        for (int s = 0; s < tasks; ++s) {
                            const size_t xoff = (static_cast<size_t>(s) * sites + p) * dv + hd * dvh;
                            T da = T(0);
                            const T* xr = px2 + xoff;
                            for (int j = 0; j < dvh; ++j) da += grow[j] * xr[j];
                            dscore[static_cast<size_t>(s)] = da;
                            dot += da * arow[s];
                            if (x.requires_grad()) {
                                T* gx = x.grad_ptr() + xoff;
                                for (int j = 0; j < dvh; ++j) gx[j] += arow[s] * grow[j];
                            }
                        }
                        // softmax backward, then into q and k
                        const T* qr = pq2 + (static_cast<size_t>(t) * sites + p) * dq + hd * dh;
                        for (int s = 0; s < tasks; ++s) {
                            const T ds = arow[s] * (dscore[static_cast<size_t>(s)] - dot) * inv_sqrt;
                            const size_t koff = (static_cast<size_t>(s) * sites + p) * dq + hd * dh;
                            if (q.requires_grad()) {
                                T* gq = q.grad_ptr() + (static_cast<size_t>(t) * sites + p) * dq + hd * dh;
                                const T* kr = pk2 + koff;
                                for (int j = 0; j < dh; ++j) gq[j] += ds * kr[j];
                            }
                            if (k.requires_grad()) {
                                T* gk = k.grad_ptr() + koff;
                                for (int j = 0; j < dh; ++j) gk[j] += ds * qr[j];
                            }
                        }
                    }
                }
        });
    }
    return out;
}

} // namespace mtp
