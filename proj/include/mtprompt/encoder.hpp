#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mtprompt/config.hpp"
#include "mtprompt/nn_ops.hpp"
#include "mtprompt/ops.hpp"

// Prompted transformer encoder. Layers 1..prompt_start-1 are plain pre-norm
// ViT blocks shared by every task; layers in [prompt_start, prompt_end]
// append per-task prompt tokens to [cls | patches] before the block and
// discard the prompt positions of the output, so each prompt layer sees
// fresh prompts from the bank (deep prompting).

namespace mtp {

template <typename T>
struct TokenState {
    Tensor<T> cls;     // 1 x D
    Tensor<T> patches; // m x D
};

template <typename T>
struct LayerWeights {
    Tensor<T> qkv_w, qkv_b;   // D x 3D, 3D
    Tensor<T> proj_w, proj_b; // D x D, D
    Tensor<T> mlp1_w, mlp1_b; // D x H, H
    Tensor<T> mlp2_w, mlp2_b; // H x D, D
    Tensor<T> ln1_w, ln1_b;   // D, D
    Tensor<T> ln2_w, ln2_b;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".qkv.w", qkv_w);
        f(prefix + ".qkv.b", qkv_b);
        f(prefix + ".proj.w", proj_w);
        f(prefix + ".proj.b", proj_b);
        f(prefix + ".mlp1.w", mlp1_w);
        f(prefix + ".mlp1.b", mlp1_b);
        f(prefix + ".mlp2.w", mlp2_w);
        f(prefix + ".mlp2.b", mlp2_b);
        f(prefix + ".ln1.w", ln1_w);
        f(prefix + ".ln1.b", ln1_b);
        f(prefix + ".ln2.w", ln2_w);
        f(prefix + ".ln2.b", ln2_b);
    }
};

template <typename T>
Tensor<T> xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    return Tensor<T>::uniform(std::move(shape), rng, static_cast<T>(-bound), static_cast<T>(bound), true);
}

template <typename T>
LayerWeights<T> init_layer_weights(int dim, int hidden, Rng& rng) {
    LayerWeights<T> w;
    w.qkv_w = xavier_uniform<T>({dim, 3 * dim}, dim, dim, rng);
    w.qkv_b = Tensor<T>::zeros({3 * dim}, true);
    w.proj_w = xavier_uniform<T>({dim, dim}, dim, dim, rng);
    w.proj_b = Tensor<T>::zeros({dim}, true);
    w.mlp1_w = xavier_uniform<T>({dim, hidden}, dim, hidden, rng);
    w.mlp1_b = Tensor<T>::zeros({hidden}, true);
    w.mlp2_w = xavier_uniform<T>({hidden, dim}, hidden, dim, rng);
    w.mlp2_b = Tensor<T>::zeros({dim}, true);
    w.ln1_w = Tensor<T>::full({dim}, T(1), true);
    w.ln1_b = Tensor<T>::zeros({dim}, true);
    w.ln2_w = Tensor<T>::full({dim}, T(1), true);
    w.ln2_b = Tensor<T>::zeros({dim}, true);
    return w;
}

template <typename T>
struct PatchEmbedWeights {
    Tensor<T> w;   // (p*p*3) x D
    Tensor<T> b;   // D
    Tensor<T> pos; // m x D, added to patch tokens only
    Tensor<T> cls; // 1 x D

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
        f(prefix + ".pos", pos);
        f(prefix + ".cls", cls);
    }
};

template <typename T>
PatchEmbedWeights<T> init_patch_embed(const EncoderConfig& cfg, Rng& rng) {
    const int in = cfg.patch_size * cfg.patch_size * 3;
    PatchEmbedWeights<T> w;
    w.w = xavier_uniform<T>({in, cfg.dim}, in, cfg.dim, rng);
    w.b = Tensor<T>::zeros({cfg.dim}, true);
    w.pos = Tensor<T>::uniform({cfg.patch_tokens(), cfg.dim}, rng, T(-0.02), T(0.02), true);
    w.cls = Tensor<T>::zeros({1, cfg.dim}, true);
    return w;
}

// one full encoder copy; unshared configurations own one branch per task
template <typename T>
struct EncoderBranch {
    PatchEmbedWeights<T> patch;
    std::vector<LayerWeights<T>> layers;

    template <typename F>
    void visit(const std::string& enc_prefix, const std::string& patch_prefix, F&& f) {
        patch.visit(patch_prefix, f);
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].visit(enc_prefix + ".layer" + std::to_string(i + 1), f);
    }
};

template <typename T>
struct EncoderWeights {
    bool shared = true;
    std::vector<EncoderBranch<T>> branches; // size 1 when shared, else T

    const EncoderBranch<T>& branch(int task) const {
        return branches[shared ? 0 : static_cast<size_t>(task)];
    }

    template <typename F>
    void visit(F&& f) {
        if (shared) {
            branches[0].visit("encoder", "patch_embed", f);
        } else {
            for (size_t t = 0; t < branches.size(); ++t) {
                const std::string ts = ".task" + std::to_string(t);
                branches[t].visit("encoder" + ts, "patch_embed" + ts, f);
            }
        }
    }
};

template <typename T>
EncoderWeights<T> init_encoder(const EncoderConfig& cfg, int tasks, Rng& rng) {
    EncoderWeights<T> w;
    w.shared = cfg.shared;
    const int hidden = static_cast<int>(cfg.mlp_ratio * cfg.dim);
    const int copies = cfg.shared ? 1 : tasks;
    for (int c = 0; c < copies; ++c) {
        EncoderBranch<T> b;
        b.patch = init_patch_embed<T>(cfg, rng);
        for (int l = 0; l < cfg.layers; ++l) b.layers.push_back(init_layer_weights<T>(cfg.dim, hidden, rng));
        w.branches.push_back(std::move(b));
    }
    return w;
}

// Learnable prompt tokens, indexed [task][prompt layer] and, for the unified
// bank, [prompt layer]. The task-specific tensors of task t sit on the tape
// only when task t's branch runs, so their gradients are exactly zero under
// every other task's loss.
template <typename T>
struct PromptBank {
    std::vector<std::vector<Tensor<T>>> specific; // [T][Lp] n x D
    std::vector<Tensor<T>> unified;               // [Lp] n_unified x D

    template <typename F>
    void visit(const EncoderConfig& cfg, F&& f) {
        for (size_t t = 0; t < specific.size(); ++t)
            for (size_t l = 0; l < specific[t].size(); ++l)
                f("prompts.task" + std::to_string(t) + ".layer" + std::to_string(cfg.prompt_start + static_cast<int>(l)),
                  specific[t][l]);
        for (size_t l = 0; l < unified.size(); ++l)
            f("prompts.unified.layer" + std::to_string(cfg.prompt_start + static_cast<int>(l)), unified[l]);
    }
};

template <typename T>
Tensor<T> init_prompt_tensor(int count, int dim, PromptInit mode, Rng& rng) {
    switch (mode) {
        case PromptInit::zeros: return Tensor<T>::zeros({count, dim}, true);
        case PromptInit::ones: return Tensor<T>::full({count, dim}, T(1), true);
        case PromptInit::random: {
            const T s = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dim)));
            Tensor<T> t = Tensor<T>::uniform({count, dim}, rng, T(-0.5), T(0.5), true);
            for (auto& v : t.data()) v *= s;
            return t;
        }
    }
    throw ConfigError("bad prompt init");
}

template <typename T>
PromptBank<T> init_prompt_bank(const EncoderConfig& cfg, int tasks, Rng& rng) {
    PromptBank<T> bank;
    const int lp = cfg.prompt_layer_count();
    if (cfg.uses_specific()) {
        bank.specific.resize(static_cast<size_t>(tasks));
        for (int t = 0; t < tasks; ++t)
            for (int l = 0; l < lp; ++l)
                bank.specific[static_cast<size_t>(t)].push_back(
                    init_prompt_tensor<T>(cfg.prompt_count, cfg.dim, cfg.prompt_init, rng));
    }
    if (cfg.uses_unified_bank())
        for (int l = 0; l < lp; ++l)
            bank.unified.push_back(init_prompt_tensor<T>(cfg.unified_count, cfg.dim, cfg.prompt_init, rng));
    return bank;
}

// ---------------------------------------------------------------------------
// forward pieces

template <typename T>
struct EncodeCapture {
    int attn_layer = 0;                   // 1-based layer whose attention to record; 0 = off
    std::vector<Tensor<T>> attn_heads;    // per-head (s x s) softmax matrices, detached values
    bool keep_layer_patches = false;      // record patch features after every layer
    std::vector<Tensor<T>> layer_patches; // detached values, index = layer-1
};

// Patches are consumed row-major by patch position, features within a patch
// row-major by (dy, dx, channel). The image is a constant input; gradients
// flow to the projection, position table and cls only.
template <typename T>
TokenState<T> patch_embed(Tape<T>& tape, const Tensor<T>& image, const PatchEmbedWeights<T>& w,
                          const EncoderConfig& cfg) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeError("patch_embed: image must be [H x W x 3]");
    if (image.dim(0) != cfg.image_h || image.dim(1) != cfg.image_w)
        throw ConfigError("patch_embed: image size differs from configuration");
    if (image.requires_grad()) throw ContractError("patch_embed: image must not require grad");
    const int p = cfg.patch_size, gh = cfg.grid_h(), gw = cfg.grid_w();
    const int m = gh * gw, in = p * p * 3;

    Tensor<T> unfolded = Tensor<T>::zeros({m, in});
    const T* src = image.ptr();
    T* dst = unfolded.ptr();
    const int iw = cfg.image_w;
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            T* row = dst + (static_cast<size_t>(pr) * gw + pc) * in;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx) {
                    const T* px = src + ((static_cast<size_t>(pr * p + dy) * iw) + (pc * p + dx)) * 3;
                    T* out = row + (static_cast<size_t>(dy) * p + dx) * 3;
                    out[0] = px[0];
                    out[1] = px[1];
                    out[2] = px[2];
                }
        }

    TokenState<T> st;
    st.patches = add(tape, add_rowvec(tape, matmul(tape, unfolded, w.w), w.b), w.pos);
    st.cls = w.cls;
    return st;
}

// Multi-head self-attention: per head, softmax(Q K^T / sqrt(d)) V with
// d = D / heads, heads concatenated and output-projected.
template <typename T>
Tensor<T> msa(Tape<T>& tape, const Tensor<T>& tokens, const LayerWeights<T>& w, int heads,
              std::vector<Tensor<T>>* attn_out = nullptr) {
    auto qkv = add_rowvec(tape, matmul(tape, tokens, w.qkv_w), w.qkv_b);
    auto mixed = attention_core(tape, qkv, heads, attn_out);
    return add_rowvec(tape, matmul(tape, mixed, w.proj_w), w.proj_b);
}

// pre-norm block: x + MSA(LN(x)), then + MLP(LN(.))
template <typename T>
Tensor<T> encoder_block(Tape<T>& tape, const Tensor<T>& tokens, const LayerWeights<T>& w, int heads,
                        std::vector<Tensor<T>>* attn_out = nullptr) {
    auto x1 = add(tape, tokens, msa(tape, layer_norm(tape, tokens, w.ln1_w, w.ln1_b), w, heads, attn_out));
    auto h = mlp_block(tape, layer_norm(tape, x1, w.ln2_w, w.ln2_b), w.mlp1_w, w.mlp1_b, w.mlp2_w, w.mlp2_b);
    return add(tape, x1, h);
}

template <typename T>
TokenState<T> vanilla_layer(Tape<T>& tape, const TokenState<T>& st, const LayerWeights<T>& w, int heads,
                            std::vector<Tensor<T>>* attn_out = nullptr) {
    auto tokens = concat_rows(tape, {st.cls, st.patches});
    auto out = encoder_block(tape, tokens, w, heads, attn_out);
    const int m = st.patches.dim(0);
    TokenState<T> r;
    r.cls = slice_rows(tape, out, 0, 1);
    r.patches = slice_rows(tape, out, 1, 1 + m);
    return r;
}

// Runs the block over [cls | patches | prompts] and discards the prompt
// positions of the output. An undefined/empty prompt tensor reduces this to
// vanilla_layer exactly.
template <typename T>
TokenState<T> prompt_layer(Tape<T>& tape, const TokenState<T>& st, const Tensor<T>& prompts,
                           const LayerWeights<T>& w, int heads, std::vector<Tensor<T>>* attn_out = nullptr) {
    if (!prompts.defined()) return vanilla_layer(tape, st, w, heads, attn_out);
    auto tokens = concat_rows(tape, {st.cls, st.patches, prompts});
    auto out = encoder_block(tape, tokens, w, heads, attn_out);
    const int m = st.patches.dim(0);
    TokenState<T> r;
    r.cls = slice_rows(tape, out, 0, 1);
    r.patches = slice_rows(tape, out, 1, 1 + m);
    return r;
}

// Prompt tokens fed to one prompt layer of one task branch, per unified mode.
// layer_index is relative to prompt_start.
template <typename T>
Tensor<T> compose_prompts(Tape<T>& tape, const PromptBank<T>& bank, const EncoderConfig& cfg, int task,
                          int layer_index, int tasks) {
    switch (cfg.unified_mode) {
        case UnifiedMode::none:
            if (!cfg.uses_specific()) return Tensor<T>();
            return bank.specific[static_cast<size_t>(task)][static_cast<size_t>(layer_index)];
        case UnifiedMode::unified_only:
            return bank.unified[static_cast<size_t>(layer_index)];
        case UnifiedMode::concat: {
            std::vector<Tensor<T>> parts;
            if (cfg.uses_specific())
                parts.push_back(bank.specific[static_cast<size_t>(task)][static_cast<size_t>(layer_index)]);
            parts.push_back(bank.unified[static_cast<size_t>(layer_index)]);
            return parts.size() == 1 ? parts[0] : concat_rows(tape, parts);
        }
        case UnifiedMode::add:
            return add(tape, bank.specific[static_cast<size_t>(task)][static_cast<size_t>(layer_index)],
                       bank.unified[static_cast<size_t>(layer_index)]);
        case UnifiedMode::cross_prompt_attention: {
            // parameter-free self-attention over all tasks' prompts of this
            // layer, averaged over tasks into a fused unified set
            std::vector<Tensor<T>> all;
            for (int t = 0; t < tasks; ++t)
                all.push_back(bank.specific[static_cast<size_t>(t)][static_cast<size_t>(layer_index)]);
            auto stacked = concat_rows(tape, all); // (T*n) x D
            const T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg.dim)));
            auto attn = softmax_rows(tape, scale(tape, matmul(tape, stacked, transpose(tape, stacked)), inv_sqrt));
            auto mixed = matmul(tape, attn, stacked);
            Tensor<T> fused = slice_rows(tape, mixed, 0, cfg.prompt_count);
            for (int t = 1; t < tasks; ++t)
                fused = add(tape, fused, slice_rows(tape, mixed, t * cfg.prompt_count, (t + 1) * cfg.prompt_count));
            fused = scale(tape, fused, T(1) / static_cast<T>(tasks));
            return add(tape, bank.specific[static_cast<size_t>(task)][static_cast<size_t>(layer_index)], fused);
        }
    }
    return Tensor<T>();
}

template <typename T>
struct EncodeResult {
    TokenState<T> last;
    std::vector<Tensor<T>> taps; // patch features at tap_layers, in order
};

namespace detail {

template <typename T>
EncodeResult<T> run_layers(Tape<T>& tape, TokenState<T> st, int first_layer, const PromptBank<T>& bank,
                           const EncoderBranch<T>& branch, const EncoderConfig& cfg, int task, int tasks,
                           std::vector<Tensor<T>>& taps, EncodeCapture<T>* cap) {
    for (int l = first_layer; l <= cfg.layers; ++l) {
        std::vector<Tensor<T>> attn;
        std::vector<Tensor<T>>* attn_sink = (cap && cap->attn_layer == l) ? &attn : nullptr;
        const bool prompted = cfg.has_prompts() && l >= cfg.prompt_start && l <= cfg.prompt_end;
        if (prompted) {
            auto prompts = compose_prompts(tape, bank, cfg, task, l - cfg.prompt_start, tasks);
            st = prompt_layer(tape, st, prompts, branch.layers[static_cast<size_t>(l - 1)], cfg.heads, attn_sink);
        } else {
            st = vanilla_layer(tape, st, branch.layers[static_cast<size_t>(l - 1)], cfg.heads, attn_sink);
        }
        if (attn_sink) cap->attn_heads = std::move(attn);
        if (cap && cap->keep_layer_patches) cap->layer_patches.push_back(st.patches.clone());
        for (int tl : cfg.tap_layers)
            if (tl == l) taps.push_back(st.patches);
    }
    EncodeResult<T> r;
    r.last = std::move(st);
    r.taps = std::move(taps);
    return r;
}

} // namespace detail

// Full per-task encoder pass.
template <typename T>
EncodeResult<T> encode(Tape<T>& tape, const Tensor<T>& image, int task, const PromptBank<T>& bank,
                       const EncoderWeights<T>& weights, const EncoderConfig& cfg, int tasks,
                       EncodeCapture<T>* cap = nullptr) {
    if (task < 0 || task >= tasks) throw ConfigError("encode: task index out of range");
    const auto& branch = weights.branch(task);
    TokenState<T> st = patch_embed(tape, image, branch.patch, cfg);
    std::vector<Tensor<T>> taps;
    return detail::run_layers(tape, std::move(st), 1, bank, branch, cfg, task, tasks, taps, cap);
}

// All task branches for one image. With a shared encoder, layers below the
// first task-dependent layer run once and the branches fan out from that
// state; values are identical to per-task encode calls because each branch
// executes the same op sequence.
template <typename T>
std::vector<EncodeResult<T>> encode_all(Tape<T>& tape, const Tensor<T>& image, const PromptBank<T>& bank,
                                        const EncoderWeights<T>& weights, const EncoderConfig& cfg, int tasks) {
    const bool task_dependent_prompts = cfg.has_prompts() && cfg.unified_mode != UnifiedMode::unified_only;
    if (!weights.shared) {
        std::vector<EncodeResult<T>> out;
        for (int t = 0; t < tasks; ++t) out.push_back(encode(tape, image, t, bank, weights, cfg, tasks));
        return out;
    }
    const int branch_layer = task_dependent_prompts ? cfg.prompt_start : cfg.layers + 1;
    const auto& branch = weights.branch(0);
    TokenState<T> st = patch_embed(tape, image, branch.patch, cfg);
    std::vector<Tensor<T>> shared_taps;
    for (int l = 1; l < branch_layer; ++l) {
        const bool prompted = cfg.has_prompts() && l >= cfg.prompt_start && l <= cfg.prompt_end;
        if (prompted) {
            auto prompts = compose_prompts(tape, bank, cfg, 0, l - cfg.prompt_start, tasks);
            st = prompt_layer(tape, st, prompts, branch.layers[static_cast<size_t>(l - 1)], cfg.heads);
        } else {
            st = vanilla_layer(tape, st, branch.layers[static_cast<size_t>(l - 1)], cfg.heads);
        }
        for (int tl : cfg.tap_layers)
            if (tl == l) shared_taps.push_back(st.patches);
    }
    std::vector<EncodeResult<T>> out;
    for (int t = 0; t < tasks; ++t) {
        std::vector<Tensor<T>> taps = shared_taps;
        out.push_back(detail::run_layers(tape, st, branch_layer, bank, branch, cfg, t, tasks, taps,
                                         static_cast<EncodeCapture<T>*>(nullptr)));
    }
    return out;
}

} // namespace mtp
