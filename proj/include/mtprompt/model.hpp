#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtprompt/config.hpp"
#include "mtprompt/decoder.hpp"
#include "mtprompt/encoder.hpp"
#include "mtprompt/fusion.hpp"
#include "mtprompt/mtt.hpp"

namespace mtp {

template <typename T>
struct Model {
    ModelConfig cfg;
    EncoderWeights<T> encoder;
    PromptBank<T> prompts;
    FusionWeights<T> fusion;
    DecoderWeights<T> decoder;
    HeadWeights<T> heads;

    static Model init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(splitmix_seed(seed));
        m.encoder = init_encoder<T>(cfg.encoder, cfg.task_count(), rng);
        m.prompts = init_prompt_bank<T>(cfg.encoder, cfg.task_count(), rng);
        m.fusion = init_fusion<T>(cfg, rng);
        m.decoder = init_decoder<T>(cfg.decoder, cfg.task_count(), rng);
        m.heads = init_heads<T>(cfg);
        return m;
    }

    // deterministic parameter order shared by the optimizer, checkpoints and
    // gradient reductions
    template <typename F>
    void visit_params(F&& f) {
        encoder.visit(f);
        prompts.visit(cfg.encoder, f);
        fusion.visit(f);
        decoder.visit(f);
        heads.visit(cfg.tasks, f);
    }

    std::vector<std::pair<std::string, Tensor<T>>> params() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit_params([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    Model clone() const {
        Model m = *this; // shallow: weight structs hold tensor handles
        m.visit_params([](const std::string&, Tensor<T>& t) { t = t.clone(); });
        return m;
    }

    void set_requires_grad(bool b) {
        visit_params([b](const std::string&, Tensor<T>& t) { t.set_requires_grad(b); });
    }

    void save(const std::string& path) {
        MttFile f;
        visit_params([&](const std::string& name, Tensor<T>& t) { f.add(name, t); });
        f.write(path);
    }

    static Model load(const std::string& path, const ModelConfig& cfg) {
        Model m = init(cfg, 0);
        MttFile f = MttFile::read(path);
        m.visit_params([&](const std::string& name, Tensor<T>& t) {
            Tensor<T> loaded = f.template tensor<T>(name);
            if (loaded.shape() != t.shape())
                throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(loaded.shape()) +
                              ", expected " + shape_str(t.shape()));
            loaded.set_requires_grad(true);
            t = loaded;
        });
        return m;
    }

private:
    static uint64_t splitmix_seed(uint64_t seed) {
        uint64_t s = seed;
        return splitmix64(s);
    }
};

// per-task prediction maps [H x W x C_task] for one image
template <typename T>
struct ForwardResult {
    std::vector<Tensor<T>> predictions;
    std::vector<EncodeResult<T>> enc;
};

template <typename T>
ForwardResult<T> forward_sample(Tape<T>& tape, const Model<T>& m, const Tensor<T>& image) {
    ForwardResult<T> r;
    r.enc = encode_all(tape, image, m.prompts, m.encoder, m.cfg.encoder, m.cfg.task_count());
    auto fs = unfold_and_upsample(tape, r.enc, m.cfg.encoder, m.fusion);
    auto fused = fuse(tape, fs, m.cfg, m.fusion);
    auto feats = decode(tape, fs, fused, m.decoder, m.cfg);
    for (int t = 0; t < m.cfg.task_count(); ++t)
        r.predictions.push_back(task_head(tape, feats[static_cast<size_t>(t)], t, m.heads));
    return r;
}

// Variant with externally supplied prompt bank (prompt-swap analysis).
template <typename T>
ForwardResult<T> forward_sample_with_prompts(Tape<T>& tape, const Model<T>& m, const PromptBank<T>& bank,
                                             const Tensor<T>& image) {
    ForwardResult<T> r;
    r.enc = encode_all(tape, image, bank, m.encoder, m.cfg.encoder, m.cfg.task_count());
    auto fs = unfold_and_upsample(tape, r.enc, m.cfg.encoder, m.fusion);
    auto fused = fuse(tape, fs, m.cfg, m.fusion);
    auto feats = decode(tape, fs, fused, m.decoder, m.cfg);
    for (int t = 0; t < m.cfg.task_count(); ++t)
        r.predictions.push_back(task_head(tape, feats[static_cast<size_t>(t)], t, m.heads));
    return r;
}

} // namespace mtp
