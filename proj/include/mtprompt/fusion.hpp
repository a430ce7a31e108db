#pragma once

#include <map>
#include <string>
#include <vector>

#include "mtprompt/config.hpp"
#include "mtprompt/encoder.hpp"
#include "mtprompt/nn_ops.hpp"

// Multi-scale, multi-task feature aggregation. Encoder taps become spatial
// maps at the decoder width: the first tap is upsampled by a transposed
// convolution with kernel = stride = 4, the second with kernel = stride = 2,
// the third and the final encoder output stay at the native grid behind 1x1
// projections. Fused features per scale are the weighted sum over tasks.

namespace mtp {

// The final-scale projection is per task: it feeds the decoder's
// task-specific stream, which must stay parameter-independent across tasks
// for the isolation configurations. The tap projections are shared.
template <typename T>
struct FusionWeights {
    Tensor<T> up0_w, up0_b;     // D x 4 x 4 x D_dec
    Tensor<T> up1_w, up1_b;     // D x 2 x 2 x D_dec
    Tensor<T> proj2_w, proj2_b; // D x D_dec
    std::vector<Tensor<T>> proj3_w, proj3_b; // [T] D x D_dec
    Tensor<T> learn_w;              // S x T, learnable mode only
    std::vector<Tensor<T>> attn_q;  // [S] 1 x D_dec, cross_task_attention mode only

    template <typename F>
    void visit(F&& f) {
        f("fusion.up0.w", up0_w);
        f("fusion.up0.b", up0_b);
        f("fusion.up1.w", up1_w);
        f("fusion.up1.b", up1_b);
        f("fusion.proj2.w", proj2_w);
        f("fusion.proj2.b", proj2_b);
        for (size_t t = 0; t < proj3_w.size(); ++t) {
            f("fusion.proj3.task" + std::to_string(t) + ".w", proj3_w[t]);
            f("fusion.proj3.task" + std::to_string(t) + ".b", proj3_b[t]);
        }
        if (learn_w.defined()) f("fusion.W", learn_w);
        for (size_t s = 0; s < attn_q.size(); ++s) f("fusion.attn_q.scale" + std::to_string(s), attn_q[s]);
    }
};

template <typename T>
FusionWeights<T> init_fusion(const ModelConfig& cfg, Rng& rng) {
    const int d = cfg.encoder.dim, dd = cfg.decoder.dim;
    FusionWeights<T> w;
    w.up0_w = xavier_uniform<T>({d, 4, 4, dd}, d, dd, rng);
    w.up0_b = Tensor<T>::zeros({dd}, true);
    w.up1_w = xavier_uniform<T>({d, 2, 2, dd}, d, dd, rng);
    w.up1_b = Tensor<T>::zeros({dd}, true);
    w.proj2_w = xavier_uniform<T>({d, dd}, d, dd, rng);
    w.proj2_b = Tensor<T>::zeros({dd}, true);
    for (int t = 0; t < cfg.task_count(); ++t) {
        w.proj3_w.push_back(xavier_uniform<T>({d, dd}, d, dd, rng));
        w.proj3_b.push_back(Tensor<T>::zeros({dd}, true));
    }
    if (cfg.fusion.mode == FusionMode::learnable)
        w.learn_w = Tensor<T>::full({cfg.scales(), cfg.task_count()},
                                    T(1) / static_cast<T>(cfg.task_count()), true);
    if (cfg.fusion.mode == FusionMode::cross_task_attention)
        for (int s = 0; s < cfg.scales(); ++s)
            w.attn_q.push_back(xavier_uniform<T>({1, dd}, dd, 1, rng));
    return w;
}

// Per-task, per-scale spatial maps at decoder width. features[t][s] has the
// finest scale at s = 0 and the final encoder output at s = S-1.
template <typename T>
struct TaskFeatureSet {
    std::vector<std::vector<Tensor<T>>> features; // [T][S], rank-3 h_s x w_s x D_dec
    int scales() const { return features.empty() ? 0 : static_cast<int>(features[0].size()); }
};

// Token sequence -> spatial map at decoder width for one scale.
template <typename T>
Tensor<T> unfold_one(Tape<T>& tape, const Tensor<T>& tokens, int scale, int task, int gh, int gw,
                     const FusionWeights<T>& w) {
    const int m = tokens.dim(0);
    if (m != gh * gw) throw ShapeError("unfold_and_upsample: token count does not match grid");
    switch (scale) {
        case 0: {
            auto grid = reshape(tape, tokens, {gh, gw, tokens.dim(1)});
            return conv_transpose2d(tape, grid, w.up0_w, w.up0_b, 4);
        }
        case 1: {
            auto grid = reshape(tape, tokens, {gh, gw, tokens.dim(1)});
            return conv_transpose2d(tape, grid, w.up1_w, w.up1_b, 2);
        }
        case 2:
            return reshape(tape, add_rowvec(tape, matmul(tape, tokens, w.proj2_w), w.proj2_b),
                           {gh, gw, w.proj2_w.dim(1)});
        default:
            return reshape(tape,
                           add_rowvec(tape, matmul(tape, tokens, w.proj3_w[static_cast<size_t>(task)]),
                                      w.proj3_b[static_cast<size_t>(task)]),
                           {gh, gw, w.proj3_w[static_cast<size_t>(task)].dim(1)});
    }
}

// Spatializes every task's taps + final output. Tap tensors shared between
// task branches (layers before the first task-dependent layer) are unfolded
// once through the shared projections and the resulting node reused.
template <typename T>
TaskFeatureSet<T> unfold_and_upsample(Tape<T>& tape, const std::vector<EncodeResult<T>>& enc,
                                      const EncoderConfig& ecfg, const FusionWeights<T>& w) {
    const int tasks = static_cast<int>(enc.size());
    const int taps = static_cast<int>(ecfg.tap_layers.size());
    TaskFeatureSet<T> fs;
    fs.features.resize(static_cast<size_t>(tasks));
    std::map<std::pair<const void*, int>, Tensor<T>> cache;
    for (int t = 0; t < tasks; ++t) {
        for (int s = 0; s < taps + 1; ++s) {
            const Tensor<T>& tokens = s < taps ? enc[static_cast<size_t>(t)].taps[static_cast<size_t>(s)]
                                               : enc[static_cast<size_t>(t)].last.patches;
            if (s < taps) {
                const auto key = std::make_pair(tokens.id(), s);
                auto it = cache.find(key);
                if (it == cache.end())
                    it = cache.emplace(key, unfold_one(tape, tokens, s, t, ecfg.grid_h(), ecfg.grid_w(), w)).first;
                fs.features[static_cast<size_t>(t)].push_back(it->second);
            } else {
                fs.features[static_cast<size_t>(t)].push_back(
                    unfold_one(tape, tokens, s, t, ecfg.grid_h(), ecfg.grid_w(), w));
            }
        }
    }
    return fs;
}

template <typename T>
Tensor<T> fuse_cross_task_attention_scale(Tape<T>& tape, const TaskFeatureSet<T>& fs, int s,
                                          const FusionWeights<T>& w);

// Weighted sum over tasks per scale. Fixed weights stay off the tape;
// learnable weights participate through scale_by_entry. Mode none yields
// all-zero constants (the fusion-ablation path).
template <typename T>
std::vector<Tensor<T>> fuse(Tape<T>& tape, const TaskFeatureSet<T>& fs, const ModelConfig& cfg,
                            const FusionWeights<T>& w) {
    const int tasks = static_cast<int>(fs.features.size());
    const int scales = fs.scales();
    std::vector<Tensor<T>> out;
    for (int s = 0; s < scales; ++s) {
        switch (cfg.fusion.mode) {
            case FusionMode::none:
                out.push_back(Tensor<T>::zeros(fs.features[0][static_cast<size_t>(s)].shape()));
                break;
            case FusionMode::fixed: {
                Tensor<T> acc = scale(tape, fs.features[0][static_cast<size_t>(s)],
                                      static_cast<T>(cfg.fusion.weight(s, 0, tasks)));
                for (int t = 1; t < tasks; ++t)
                    acc = add(tape, acc,
                              scale(tape, fs.features[static_cast<size_t>(t)][static_cast<size_t>(s)],
                                    static_cast<T>(cfg.fusion.weight(s, t, tasks))));
                out.push_back(acc);
                break;
            }
            case FusionMode::learnable: {
                Tensor<T> acc = scale_by_entry(tape, w.learn_w, static_cast<int64_t>(s) * tasks,
                                               fs.features[0][static_cast<size_t>(s)]);
                for (int t = 1; t < tasks; ++t)
                    acc = add(tape, acc,
                              scale_by_entry(tape, w.learn_w, static_cast<int64_t>(s) * tasks + t,
                                             fs.features[static_cast<size_t>(t)][static_cast<size_t>(s)]));
                out.push_back(acc);
                break;
            }
            case FusionMode::cross_task_attention:
                out.push_back(fuse_cross_task_attention_scale(tape, fs, s, w));
                break;
        }
    }
    return out;
}

// Scalar gate per task: score_t = q . GAP(F_t), alpha = softmax over tasks,
// fused = sum_t alpha_t F_t.
template <typename T>
Tensor<T> fuse_cross_task_attention_scale(Tape<T>& tape, const TaskFeatureSet<T>& fs, int s,
                                          const FusionWeights<T>& w) {
    const int tasks = static_cast<int>(fs.features.size());
    std::vector<Tensor<T>> logits;
    for (int t = 0; t < tasks; ++t) {
        const Tensor<T>& f = fs.features[static_cast<size_t>(t)][static_cast<size_t>(s)];
        auto flat = reshape(tape, f, {f.dim(0) * f.dim(1), f.dim(2)});
        auto gap = mean_rows(tape, flat);
        logits.push_back(matmul(tape, gap, transpose(tape, w.attn_q[static_cast<size_t>(s)])));
    }
    auto alpha = softmax_rows(tape, concat_cols(tape, logits)); // 1 x T
    Tensor<T> acc = scale_by_entry(tape, alpha, 0, fs.features[0][static_cast<size_t>(s)]);
    for (int t = 1; t < tasks; ++t)
        acc = add(tape, acc, scale_by_entry(tape, alpha, t, fs.features[static_cast<size_t>(t)][static_cast<size_t>(s)]));
    return acc;
}

} // namespace mtp
