#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtprompt/data.hpp"
#include "mtprompt/parallel.hpp"
#include "mtprompt/rng.hpp"

namespace mtp {

enum class Task { semseg, depth, normal, edge, saliency };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::semseg: return "semseg";
        case Task::depth: return "depth";
        case Task::normal: return "normal";
        case Task::edge: return "edge";
        case Task::saliency: return "saliency";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    for (Task t : {Task::semseg, Task::depth, Task::normal, Task::edge, Task::saliency})
        if (s == task_name(t)) return t;
    throw ConfigError("unknown task '" + s + "'");
}

enum class PromptInit { zeros, random, ones };
enum class UnifiedMode { none, unified_only, concat, add, cross_prompt_attention };
enum class FusionMode { fixed, learnable, cross_task_attention, none };

inline const char* to_string(PromptInit v) {
    switch (v) {
        case PromptInit::zeros: return "zeros";
        case PromptInit::random: return "random";
        case PromptInit::ones: return "ones";
    }
    return "?";
}
inline const char* to_string(UnifiedMode v) {
    switch (v) {
        case UnifiedMode::none: return "none";
        case UnifiedMode::unified_only: return "unified_only";
        case UnifiedMode::concat: return "concat";
        case UnifiedMode::add: return "add";
        case UnifiedMode::cross_prompt_attention: return "cross_prompt_attention";
    }
    return "?";
}
inline const char* to_string(FusionMode v) {
    switch (v) {
        case FusionMode::fixed: return "fixed";
        case FusionMode::learnable: return "learnable";
        case FusionMode::cross_task_attention: return "cross_task_attention";
        case FusionMode::none: return "none";
    }
    return "?";
}

template <typename E>
E enum_from_name(const std::string& s, std::initializer_list<E> all, const char* what) {
    for (E v : all)
        if (s == to_string(v)) return v;
    throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

// ---------------------------------------------------------------------------

struct EncoderConfig {
    int image_h = 64, image_w = 64;
    int patch_size = 8;
    int dim = 64;     // token embedding width
    int heads = 4;
    double mlp_ratio = 4.0;
    int layers = 8;            // total encoder depth
    int prompt_start = 5;      // 1-based inclusive range of prompt layers
    int prompt_end = 8;
    int prompt_count = 2;      // task-specific prompts per layer
    PromptInit prompt_init = PromptInit::zeros;
    UnifiedMode unified_mode = UnifiedMode::none;
    int unified_count = 0;
    std::vector<int> tap_layers = {2, 4, 6};
    bool shared = true;

    int grid_h() const { return image_h / patch_size; }
    int grid_w() const { return image_w / patch_size; }
    int patch_tokens() const { return grid_h() * grid_w(); }
    int prompt_layer_count() const { return has_prompts() ? prompt_end - prompt_start + 1 : 0; }

    // prompt tokens fed to one prompt layer for one task
    int prompts_per_layer() const {
        switch (unified_mode) {
            case UnifiedMode::none: return prompt_count;
            case UnifiedMode::unified_only: return unified_count;
            case UnifiedMode::concat: return prompt_count + unified_count;
            case UnifiedMode::add: return prompt_count;
            case UnifiedMode::cross_prompt_attention: return prompt_count;
        }
        return 0;
    }
    bool has_prompts() const { return prompts_per_layer() > 0; }
    bool uses_specific() const { return unified_mode != UnifiedMode::unified_only && prompt_count > 0; }
    bool uses_unified_bank() const {
        return (unified_mode == UnifiedMode::unified_only || unified_mode == UnifiedMode::concat ||
                unified_mode == UnifiedMode::add) && unified_count > 0;
    }

    void validate() const {
        if (image_h <= 0 || image_w <= 0 || patch_size <= 0)
            throw ConfigError("encoder: positive image/patch sizes required");
        if (image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ConfigError("encoder: image size must be divisible by patch_size");
        if (dim <= 0 || heads <= 0 || dim % heads != 0)
            throw ConfigError("encoder: dim must be a positive multiple of heads");
        if (layers <= 0) throw ConfigError("encoder: layers must be positive");
        if (has_prompts()) {
            if (prompt_start < 1 || prompt_start > prompt_end || prompt_end > layers)
                throw ConfigError("encoder: need 1 <= prompt_start <= prompt_end <= layers");
        }
        if (prompt_count < 0 || unified_count < 0)
            throw ConfigError("encoder: prompt counts must be non-negative");
        if (unified_mode == UnifiedMode::add && prompt_count != unified_count)
            throw ConfigError("encoder: add mode requires prompt_count == unified_count");
        if (unified_mode == UnifiedMode::concat && unified_count <= 0)
            throw ConfigError("encoder: concat mode requires unified_count > 0");
        if (unified_mode == UnifiedMode::unified_only && unified_count <= 0)
            throw ConfigError("encoder: unified_only mode requires unified_count > 0");
        if (unified_mode == UnifiedMode::cross_prompt_attention && prompt_count <= 0)
            throw ConfigError("encoder: cross_prompt_attention mode requires prompt_count > 0");
        int prev = 0;
        for (int l : tap_layers) {
            if (l <= prev || l > layers)
                throw ConfigError("encoder: tap_layers must be strictly increasing within [1, layers]");
            prev = l;
        }
        if (tap_layers.empty()) throw ConfigError("encoder: at least one tap layer required");
    }
};

struct FusionConfig {
    FusionMode mode = FusionMode::fixed;
    // S x T, row-major; empty means 1/T everywhere
    std::vector<std::vector<double>> fixed_weights;

    void validate(int scales, int tasks) const {
        if (!fixed_weights.empty()) {
            if (static_cast<int>(fixed_weights.size()) != scales)
                throw ConfigError("fusion: fixed_weights must have one row per scale");
            for (const auto& row : fixed_weights)
                if (static_cast<int>(row.size()) != tasks)
                    throw ConfigError("fusion: fixed_weights rows must have one entry per task");
        }
    }
    double weight(int scale, int task, int tasks) const {
        if (fixed_weights.empty()) return 1.0 / tasks;
        return fixed_weights[static_cast<size_t>(scale)][static_cast<size_t>(task)];
    }
};

struct DecoderConfig {
    int stages = 2;     // each stage doubles the spatial resolution
    int dim = 32;
    int heads = 1;
    int qk_dim = 8;     // total query/key width across heads
    double mlp_ratio = 1.0;
    bool cross_task = true;

    void validate() const {
        if (stages < 1) throw ConfigError("decoder: stages must be >= 1");
        if (dim <= 0 || heads <= 0 || dim % heads != 0)
            throw ConfigError("decoder: dim must be a positive multiple of heads");
        if (qk_dim <= 0 || qk_dim % heads != 0)
            throw ConfigError("decoder: qk_dim must be a positive multiple of heads");
    }
};

struct LossWeights {
    double seg = 1.0;
    double depth = 1.0;
    double normals = 10.0;
    double edge = 50.0;
    double partseg = 2.0;
    double sal = 5.0;

    double for_task(Task t) const {
        switch (t) {
            case Task::semseg: return seg;
            case Task::depth: return depth;
            case Task::normal: return normals;
            case Task::edge: return edge;
            case Task::saliency: return sal;
        }
        return 0;
    }
    void validate() const {
        for (double v : {seg, depth, normals, edge, partseg, sal})
            if (v < 0) throw ConfigError("loss_weights: weights must be >= 0");
    }
};

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 4;
    double lr = 1e-3;
    double weight_decay = 1e-6;
    double poly_power = 0.9;
    uint64_t seed = 0;
    int eval_every = 0; // 0 = evaluate only at the end
    double flip_prob = 0.5;
    int threads = 0;    // 0 = hardware concurrency

    int effective_threads() const { return threads > 0 ? threads : default_threads(); }
    void validate() const {
        if (iterations <= 0) throw ConfigError("train: iterations must be positive");
        if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
        if (lr < 0) throw ConfigError("train: lr must be non-negative");
        if (weight_decay < 0 || poly_power < 0) throw ConfigError("train: negative decay/power");
        if (flip_prob < 0 || flip_prob > 1) throw ConfigError("train: flip_prob must be in [0,1]");
    }
};

struct ModelConfig {
    std::vector<Task> tasks = {Task::semseg, Task::depth, Task::normal, Task::edge};
    int classes = 5;
    int ignore_index = 255;
    EncoderConfig encoder;
    FusionConfig fusion;
    DecoderConfig decoder;
    LossWeights loss_weights;
    TrainConfig train;

    int task_count() const { return static_cast<int>(tasks.size()); }
    int scales() const { return static_cast<int>(encoder.tap_layers.size()) + 1; }
    int out_channels(Task t) const {
        switch (t) {
            case Task::semseg: return classes;
            case Task::depth: return 1;
            case Task::normal: return 3;
            case Task::edge: return 1;
            case Task::saliency: return 1;
        }
        return 0;
    }

    void validate() const {
        if (tasks.empty()) throw ConfigError("config: at least one task required");
        if (classes < 2) throw ConfigError("config: classes must be >= 2");
        encoder.validate();
        decoder.validate();
        fusion.validate(scales(), task_count());
        loss_weights.validate();
        train.validate();
    }
};

// --------------------------------------------------------------------------
// JSON round trip. Missing keys keep their defaults; unknown keys are
// rejected so ablation configs cannot silently typo a field.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("config: unknown key '" + scope + it.key() + "'");
    }
}

} // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json j;
    for (Task t : c.tasks) j["tasks"].push_back(task_name(t));
    j["classes"] = c.classes;
    j["ignore_index"] = c.ignore_index;
    auto& e = j["encoder"];
    e["image_h"] = c.encoder.image_h;
    e["image_w"] = c.encoder.image_w;
    e["patch_size"] = c.encoder.patch_size;
    e["dim"] = c.encoder.dim;
    e["heads"] = c.encoder.heads;
    e["mlp_ratio"] = c.encoder.mlp_ratio;
    e["layers"] = c.encoder.layers;
    e["prompt_start"] = c.encoder.prompt_start;
    e["prompt_end"] = c.encoder.prompt_end;
    e["prompt_count"] = c.encoder.prompt_count;
    e["prompt_init"] = to_string(c.encoder.prompt_init);
    e["unified_mode"] = to_string(c.encoder.unified_mode);
    e["unified_count"] = c.encoder.unified_count;
    e["tap_layers"] = c.encoder.tap_layers;
    e["shared"] = c.encoder.shared;
    auto& f = j["fusion"];
    f["mode"] = to_string(c.fusion.mode);
    if (!c.fusion.fixed_weights.empty()) f["fixed_weights"] = c.fusion.fixed_weights;
    auto& d = j["decoder"];
    d["stages"] = c.decoder.stages;
    d["dim"] = c.decoder.dim;
    d["heads"] = c.decoder.heads;
    d["qk_dim"] = c.decoder.qk_dim;
    d["mlp_ratio"] = c.decoder.mlp_ratio;
    d["cross_task"] = c.decoder.cross_task;
    auto& l = j["loss_weights"];
    l["seg"] = c.loss_weights.seg;
    l["depth"] = c.loss_weights.depth;
    l["normals"] = c.loss_weights.normals;
    l["edge"] = c.loss_weights.edge;
    l["partseg"] = c.loss_weights.partseg;
    l["sal"] = c.loss_weights.sal;
    auto& t = j["train"];
    t["iterations"] = c.train.iterations;
    t["batch_size"] = c.train.batch_size;
    t["lr"] = c.train.lr;
    t["weight_decay"] = c.train.weight_decay;
    t["poly_power"] = c.train.poly_power;
    t["seed"] = c.train.seed;
    t["eval_every"] = c.train.eval_every;
    t["flip_prob"] = c.train.flip_prob;
    t["threads"] = c.train.threads;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    detail::reject_unknown(j, {"tasks", "classes", "ignore_index", "encoder", "fusion", "decoder",
                               "loss_weights", "train"},
                           "");
    if (j.contains("tasks")) {
        c.tasks.clear();
        for (const auto& t : j.at("tasks")) c.tasks.push_back(task_from_name(t.get<std::string>()));
    }
    if (j.contains("classes")) c.classes = j.at("classes").get<int>();
    if (j.contains("ignore_index")) c.ignore_index = j.at("ignore_index").get<int>();
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        detail::reject_unknown(e,
                               {"image_h", "image_w", "patch_size", "dim", "heads", "mlp_ratio", "layers",
                                "prompt_start", "prompt_end", "prompt_count", "prompt_init", "unified_mode",
                                "unified_count", "tap_layers", "shared"},
                               "encoder.");
        auto& ec = c.encoder;
        if (e.contains("image_h")) ec.image_h = e.at("image_h").get<int>();
        if (e.contains("image_w")) ec.image_w = e.at("image_w").get<int>();
        if (e.contains("patch_size")) ec.patch_size = e.at("patch_size").get<int>();
        if (e.contains("dim")) ec.dim = e.at("dim").get<int>();
        if (e.contains("heads")) ec.heads = e.at("heads").get<int>();
        if (e.contains("mlp_ratio")) ec.mlp_ratio = e.at("mlp_ratio").get<double>();
        if (e.contains("layers")) ec.layers = e.at("layers").get<int>();
        if (e.contains("prompt_start")) ec.prompt_start = e.at("prompt_start").get<int>();
        if (e.contains("prompt_end")) ec.prompt_end = e.at("prompt_end").get<int>();
        if (e.contains("prompt_count")) ec.prompt_count = e.at("prompt_count").get<int>();
        if (e.contains("prompt_init"))
            ec.prompt_init = enum_from_name(e.at("prompt_init").get<std::string>(),
                                            {PromptInit::zeros, PromptInit::random, PromptInit::ones},
                                            "prompt_init");
        if (e.contains("unified_mode"))
            ec.unified_mode = enum_from_name(e.at("unified_mode").get<std::string>(),
                                             {UnifiedMode::none, UnifiedMode::unified_only, UnifiedMode::concat,
                                              UnifiedMode::add, UnifiedMode::cross_prompt_attention},
                                             "unified_mode");
        if (e.contains("unified_count")) ec.unified_count = e.at("unified_count").get<int>();
        if (e.contains("tap_layers")) ec.tap_layers = e.at("tap_layers").get<std::vector<int>>();
        if (e.contains("shared")) ec.shared = e.at("shared").get<bool>();
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        detail::reject_unknown(f, {"mode", "fixed_weights"}, "fusion.");
        if (f.contains("mode"))
            c.fusion.mode = enum_from_name(f.at("mode").get<std::string>(),
                                           {FusionMode::fixed, FusionMode::learnable,
                                            FusionMode::cross_task_attention, FusionMode::none},
                                           "fusion mode");
        if (f.contains("fixed_weights"))
            c.fusion.fixed_weights = f.at("fixed_weights").get<std::vector<std::vector<double>>>();
    }
    if (j.contains("decoder")) {
        const auto& d = j.at("decoder");
        detail::reject_unknown(d, {"stages", "dim", "heads", "qk_dim", "mlp_ratio", "cross_task"},
                               "decoder.");
        if (d.contains("stages")) c.decoder.stages = d.at("stages").get<int>();
        if (d.contains("dim")) c.decoder.dim = d.at("dim").get<int>();
        if (d.contains("heads")) c.decoder.heads = d.at("heads").get<int>();
        if (d.contains("qk_dim")) c.decoder.qk_dim = d.at("qk_dim").get<int>();
        if (d.contains("mlp_ratio")) c.decoder.mlp_ratio = d.at("mlp_ratio").get<double>();
        if (d.contains("cross_task")) c.decoder.cross_task = d.at("cross_task").get<bool>();
    }
    if (j.contains("loss_weights")) {
        const auto& l = j.at("loss_weights");
        detail::reject_unknown(l, {"seg", "depth", "normals", "edge", "partseg", "sal"}, "loss_weights.");
        if (l.contains("seg")) c.loss_weights.seg = l.at("seg").get<double>();
        if (l.contains("depth")) c.loss_weights.depth = l.at("depth").get<double>();
        if (l.contains("normals")) c.loss_weights.normals = l.at("normals").get<double>();
        if (l.contains("edge")) c.loss_weights.edge = l.at("edge").get<double>();
        if (l.contains("partseg")) c.loss_weights.partseg = l.at("partseg").get<double>();
        if (l.contains("sal")) c.loss_weights.sal = l.at("sal").get<double>();
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t,
                               {"iterations", "batch_size", "lr", "weight_decay", "poly_power", "seed",
                                "eval_every", "flip_prob", "threads"},
                               "train.");
        if (t.contains("iterations")) c.train.iterations = t.at("iterations").get<int>();
        if (t.contains("batch_size")) c.train.batch_size = t.at("batch_size").get<int>();
        if (t.contains("lr")) c.train.lr = t.at("lr").get<double>();
        if (t.contains("weight_decay")) c.train.weight_decay = t.at("weight_decay").get<double>();
        if (t.contains("poly_power")) c.train.poly_power = t.at("poly_power").get<double>();
        if (t.contains("seed")) c.train.seed = t.at("seed").get<uint64_t>();
        if (t.contains("eval_every")) c.train.eval_every = t.at("eval_every").get<int>();
        if (t.contains("flip_prob")) c.train.flip_prob = t.at("flip_prob").get<double>();
        if (t.contains("threads")) c.train.threads = t.at("threads").get<int>();
    }
    return c;
}

inline ModelConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config: parse failure in '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

inline std::string config_hash(const ModelConfig& c) {
    const std::string s = to_json(c).dump();
    const uint64_t h = fnv1a64(s.data(), s.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace mtp
