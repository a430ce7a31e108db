#pragma once

#include <string>
#include <vector>

#include "mtprompt/config.hpp"
#include "mtprompt/fusion.hpp"
#include "mtprompt/nn_ops.hpp"

// Up-transformer decoder. Each stage adds the matching fused scale to every
// task's stream, doubles the resolution with a transposed convolution, mixes
// the T task features at every spatial site with softmax attention (a convex
// combination, so a single task passes through unchanged), and refines with
// a residual MLP. The finest fused scale joins after the last stage, then a
// bilinear chain restores the image resolution and 1x1 heads emit per-task
// prediction maps.

namespace mtp {

template <typename T>
struct DecoderStageWeights {
    Tensor<T> up_w, up_b;     // D_dec x 2 x 2 x D_dec
    Tensor<T> ln1_w, ln1_b;   // D_dec (pre-attention norm)
    Tensor<T> q_w, q_b;       // D_dec x qk_dim
    Tensor<T> k_w, k_b;
    Tensor<T> ln2_w, ln2_b;   // D_dec (pre-MLP norm)
    Tensor<T> mlp1_w, mlp1_b; // D_dec x H
    Tensor<T> mlp2_w, mlp2_b; // H x D_dec

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".up.w", up_w);
        f(prefix + ".up.b", up_b);
        f(prefix + ".ln1.w", ln1_w);
        f(prefix + ".ln1.b", ln1_b);
        f(prefix + ".q.w", q_w);
        f(prefix + ".q.b", q_b);
        f(prefix + ".k.w", k_w);
        f(prefix + ".k.b", k_b);
        f(prefix + ".ln2.w", ln2_w);
        f(prefix + ".ln2.b", ln2_b);
        f(prefix + ".mlp1.w", mlp1_w);
        f(prefix + ".mlp1.b", mlp1_b);
        f(prefix + ".mlp2.w", mlp2_w);
        f(prefix + ".mlp2.b", mlp2_b);
    }
};

// With cross-task interaction enabled the stages are shared across tasks
// (one copy). The isolation variant (cross_task = false) runs per-task
// independent stages: every task owns a full stage-weight copy, so nothing
// on one task's decode path touches another task's parameters.
template <typename T>
struct DecoderWeights {
    std::vector<std::vector<DecoderStageWeights<T>>> copies; // [1 or T][stages]

    const std::vector<DecoderStageWeights<T>>& stages_for(int task) const {
        return copies.size() == 1 ? copies[0] : copies[static_cast<size_t>(task)];
    }

    template <typename F>
    void visit(F&& f) {
        for (size_t c = 0; c < copies.size(); ++c) {
            const std::string base =
                copies.size() == 1 ? std::string("decoder") : "decoder.task" + std::to_string(c);
            for (size_t k = 0; k < copies[c].size(); ++k)
                copies[c][k].visit(base + ".stage" + std::to_string(k + 1), f);
        }
    }
};

template <typename T>
DecoderStageWeights<T> init_decoder_stage(const DecoderConfig& cfg, Rng& rng) {
    const int d = cfg.dim;
    const int hidden = static_cast<int>(cfg.mlp_ratio * d);
    DecoderStageWeights<T> s;
    s.up_w = xavier_uniform<T>({d, 2, 2, d}, d, d, rng);
    s.up_b = Tensor<T>::zeros({d}, true);
    s.ln1_w = Tensor<T>::full({d}, T(1), true);
    s.ln1_b = Tensor<T>::zeros({d}, true);
    s.q_w = xavier_uniform<T>({d, cfg.qk_dim}, d, cfg.qk_dim, rng);
    s.q_b = Tensor<T>::zeros({cfg.qk_dim}, true);
    s.k_w = xavier_uniform<T>({d, cfg.qk_dim}, d, cfg.qk_dim, rng);
    s.k_b = Tensor<T>::zeros({cfg.qk_dim}, true);
    s.ln2_w = Tensor<T>::full({d}, T(1), true);
    s.ln2_b = Tensor<T>::zeros({d}, true);
    s.mlp1_w = xavier_uniform<T>({d, hidden}, d, hidden, rng);
    s.mlp1_b = Tensor<T>::zeros({hidden}, true);
    s.mlp2_w = xavier_uniform<T>({hidden, d}, hidden, d, rng);
    s.mlp2_b = Tensor<T>::zeros({d}, true);
    return s;
}

template <typename T>
DecoderWeights<T> init_decoder(const DecoderConfig& cfg, int tasks, Rng& rng) {
    DecoderWeights<T> w;
    const int ncopies = cfg.cross_task ? 1 : tasks;
    for (int c = 0; c < ncopies; ++c) {
        std::vector<DecoderStageWeights<T>> stages;
        for (int k = 0; k < cfg.stages; ++k) stages.push_back(init_decoder_stage<T>(cfg, rng));
        w.copies.push_back(std::move(stages));
    }
    return w;
}

// Heads stay zero-initialized: an untrained model emits all-zero maps.
template <typename T>
struct HeadWeights {
    std::vector<Tensor<T>> w; // [T] D_dec x out_channels
    std::vector<Tensor<T>> b; // [T] out_channels

    template <typename F>
    void visit(const std::vector<Task>& tasks, F&& f) {
        for (size_t t = 0; t < w.size(); ++t) {
            f(std::string("head.") + task_name(tasks[t]) + ".w", w[t]);
            f(std::string("head.") + task_name(tasks[t]) + ".b", b[t]);
        }
    }
};

template <typename T>
HeadWeights<T> init_heads(const ModelConfig& cfg) {
    HeadWeights<T> h;
    for (Task t : cfg.tasks) {
        h.w.push_back(Tensor<T>::zeros({cfg.decoder.dim, cfg.out_channels(t)}, true));
        h.b.push_back(Tensor<T>::zeros({cfg.out_channels(t)}, true));
    }
    return h;
}

// One stage: per-task (x_t + fused) -> deconv x2 -> site attention over
// tasks -> residual MLP. task_feats are [h x w x D_dec]. The isolation
// variant applies each task's own stage weights and skips the mixing.
template <typename T>
std::vector<Tensor<T>> up_block(Tape<T>& tape, const std::vector<Tensor<T>>& task_feats,
                                const Tensor<T>& fused, const DecoderWeights<T>& w, int stage,
                                const DecoderConfig& cfg) {
    const int tasks = static_cast<int>(task_feats.size());
    const int h = task_feats[0].dim(0), wd = task_feats[0].dim(1), d = task_feats[0].dim(2);
    if (fused.defined() && fused.shape() != task_feats[0].shape())
        throw ShapeError("up_block: fused feature misaligned with task features");
    const int sites = 4 * h * wd;

    if (!cfg.cross_task && tasks > 1) {
        std::vector<Tensor<T>> result;
        for (int t = 0; t < tasks; ++t) {
            const auto& sw = w.stages_for(t)[static_cast<size_t>(stage)];
            Tensor<T> x = task_feats[static_cast<size_t>(t)];
            if (fused.defined()) x = add(tape, x, fused);
            auto u = reshape(tape, conv_transpose2d(tape, x, sw.up_w, sw.up_b, 2), {sites, d});
            auto hdn = mlp_block(tape, layer_norm(tape, u, sw.ln2_w, sw.ln2_b), sw.mlp1_w, sw.mlp1_b,
                                 sw.mlp2_w, sw.mlp2_b);
            auto z = add(tape, u, hdn);
            result.push_back(reshape(tape, z, {2 * h, 2 * wd, d}));
        }
        return result;
    }

    const auto& sw = w.stages_for(0)[static_cast<size_t>(stage)];
    std::vector<Tensor<T>> rows;
    for (int t = 0; t < tasks; ++t) {
        Tensor<T> x = task_feats[static_cast<size_t>(t)];
        if (fused.defined()) x = add(tape, x, fused);
        auto up = conv_transpose2d(tape, x, sw.up_w, sw.up_b, 2);
        rows.push_back(reshape(tape, up, {sites, d}));
    }

    Tensor<T> mixed;
    if (cfg.cross_task && tasks > 1) {
        auto u = concat_rows(tape, rows); // task-major (T * sites) x D_dec
        auto n = layer_norm(tape, u, sw.ln1_w, sw.ln1_b);
        auto q = add_rowvec(tape, matmul(tape, n, sw.q_w), sw.q_b);
        auto k = add_rowvec(tape, matmul(tape, n, sw.k_w), sw.k_b);
        mixed = site_task_attention(tape, q, k, u, cfg.heads, sites);
    } else {
        mixed = tasks == 1 ? rows[0] : concat_rows(tape, rows);
    }

    auto hdn = mlp_block(tape, layer_norm(tape, mixed, sw.ln2_w, sw.ln2_b), sw.mlp1_w, sw.mlp1_b,
                         sw.mlp2_w, sw.mlp2_b);
    auto out = add(tape, mixed, hdn);

    std::vector<Tensor<T>> result;
    for (int t = 0; t < tasks; ++t)
        result.push_back(reshape(tape, slice_rows(tape, out, t * sites, (t + 1) * sites), {2 * h, 2 * wd, d}));
    return result;
}

// Per-task feature maps at image resolution. Scales are ordered fine ->
// coarse; the two native-resolution scales enter the first stage, scale 1
// the second, and scale 0 is added after the stages.
template <typename T>
std::vector<Tensor<T>> decode(Tape<T>& tape, const TaskFeatureSet<T>& fs,
                              const std::vector<Tensor<T>>& fused, const DecoderWeights<T>& w,
                              const ModelConfig& cfg) {
    const int tasks = static_cast<int>(fs.features.size());
    const int scales = fs.scales();
    if (static_cast<int>(fused.size()) != scales) throw ShapeError("decode: fused scale count mismatch");
    if (scales != cfg.decoder.stages + 2)
        throw ConfigError("decode: need scales == stages + 2 (tap count + 1 == stages + 2)");

    std::vector<Tensor<T>> feats;

    if (cfg.decoder.cross_task || tasks == 1) {
        // Shared stage weights: run every stage on a task-stacked matrix.
        // Kernel == stride deconvolution is purely per-pixel, so stacking the
        // task grids vertically computes exactly the per-task result.
        const int d = fs.features[0][static_cast<size_t>(scales - 1)].dim(2);
        int h = fs.features[0][static_cast<size_t>(scales - 1)].dim(0);
        int wd = fs.features[0][static_cast<size_t>(scales - 1)].dim(1);
        std::vector<Tensor<T>> flats;
        for (int t = 0; t < tasks; ++t)
            flats.push_back(reshape(tape, fs.features[static_cast<size_t>(t)][static_cast<size_t>(scales - 1)],
                                    {h * wd, d}));
        Tensor<T> x = tasks == 1 ? flats[0] : concat_rows(tape, flats);

        for (int k = 0; k < cfg.decoder.stages; ++k) {
            Tensor<T> f = k == 0 ? add(tape, fused[static_cast<size_t>(scales - 1)], fused[static_cast<size_t>(scales - 2)])
                                 : fused[static_cast<size_t>(scales - 2 - k)];
            if (f.shape() != std::vector<int>{h, wd, d})
                throw ShapeError("decode: fused feature misaligned with task features");
            auto ftile = tile_rows(tape, reshape(tape, f, {h * wd, d}), tasks);
            x = add(tape, x, ftile);
            const auto& sw = w.stages_for(0)[static_cast<size_t>(k)];
            auto up = conv_transpose2d(tape, reshape(tape, x, {tasks * h, wd, d}), sw.up_w, sw.up_b, 2);
            h *= 2;
            wd *= 2;
            const int sites = h * wd;
            x = reshape(tape, up, {tasks * sites, d});
            if (cfg.decoder.cross_task && tasks > 1) {
                auto n = layer_norm(tape, x, sw.ln1_w, sw.ln1_b);
                auto q = add_rowvec(tape, matmul(tape, n, sw.q_w), sw.q_b);
                auto kk = add_rowvec(tape, matmul(tape, n, sw.k_w), sw.k_b);
                x = site_task_attention(tape, q, kk, x, cfg.decoder.heads, sites);
            }
            auto hdn = mlp_block(tape, layer_norm(tape, x, sw.ln2_w, sw.ln2_b), sw.mlp1_w, sw.mlp1_b,
                                 sw.mlp2_w, sw.mlp2_b);
            x = add(tape, x, hdn);
        }
        x = add(tape, x, tile_rows(tape, reshape(tape, fused[0], {h * wd, d}), tasks));
        for (int t = 0; t < tasks; ++t)
            feats.push_back(reshape(tape, slice_rows(tape, x, t * h * wd, (t + 1) * h * wd), {h, wd, d}));
    } else {
        for (int t = 0; t < tasks; ++t)
            feats.push_back(fs.features[static_cast<size_t>(t)][static_cast<size_t>(scales - 1)]);
        for (int k = 0; k < cfg.decoder.stages; ++k) {
            Tensor<T> f = k == 0 ? add(tape, fused[static_cast<size_t>(scales - 1)], fused[static_cast<size_t>(scales - 2)])
                                 : fused[static_cast<size_t>(scales - 2 - k)];
            feats = up_block(tape, feats, f, w, k, cfg.decoder);
        }
        for (int t = 0; t < tasks; ++t) feats[static_cast<size_t>(t)] = add(tape, feats[static_cast<size_t>(t)], fused[0]);
    }

    // bilinear chain up to the image resolution
    while (feats[0].dim(0) < cfg.encoder.image_h) {
        for (int t = 0; t < tasks; ++t) feats[static_cast<size_t>(t)] = bilinear_upsample2x(tape, feats[static_cast<size_t>(t)]);
    }
    if (feats[0].dim(0) != cfg.encoder.image_h || feats[0].dim(1) != cfg.encoder.image_w)
        throw ConfigError("decode: decoded grid cannot reach the image resolution by x2 steps");
    return feats;
}

// 1x1 projection to the task's output channels; no activation.
template <typename T>
Tensor<T> task_head(Tape<T>& tape, const Tensor<T>& feat, int task, const HeadWeights<T>& heads) {
    if (task < 0 || task >= static_cast<int>(heads.w.size())) throw ConfigError("task_head: unknown task");
    const int h = feat.dim(0), w = feat.dim(1), d = feat.dim(2);
    auto flat = reshape(tape, feat, {h * w, d});
    auto logits = add_rowvec(tape, matmul(tape, flat, heads.w[static_cast<size_t>(task)]),
                             heads.b[static_cast<size_t>(task)]);
    return reshape(tape, logits, {h, w, heads.w[static_cast<size_t>(task)].dim(1)});
}

} // namespace mtp
