#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <future>
#include <map>
#include <string>
#include <vector>

#include "mtprompt/eval.hpp"
#include "mtprompt/train.hpp"

// Introspection and ablation procedures: attention maps from prompt tokens
// to patch tokens, cross-task feature cosine profiles over encoder depth,
// prompt swapping at inference time, and a seeded grid runner that trains
// one model per (setting, seed) and reports medians.

namespace mtp {

// ---------------------------------------------------------------------------
// prompt -> patch attention maps

template <typename T>
struct PromptAttentionMaps {
    Tensor<T> head_mean;             // n x gh x gw, renormalized over patch keys
    std::vector<Tensor<T>> per_head; // one n x gh x gw map per head
};

template <typename T>
PromptAttentionMaps<T> prompt_attention_map(const Model<T>& model, const Tensor<T>& image, int task,
                                            int layer) {
    const EncoderConfig& ec = model.cfg.encoder;
    if (!ec.has_prompts() || layer < ec.prompt_start || layer > ec.prompt_end)
        throw ConfigError("prompt_attention_map: layer outside the prompt range");
    EncodeCapture<T> cap;
    cap.attn_layer = layer;
    Tape<T> tape;
    tape.set_recording(false);
    (void)encode(tape, image, task, model.prompts, model.encoder, ec, model.cfg.task_count(), &cap);
    if (cap.attn_heads.empty()) throw std::runtime_error("prompt_attention_map: no attention captured");

    const int m = ec.patch_tokens();
    const int s = cap.attn_heads[0].dim(0);
    const int n = s - 1 - m; // prompt tokens in this layer
    if (n <= 0) throw ConfigError("prompt_attention_map: layer carries no prompt tokens");
    const int gh = ec.grid_h(), gw = ec.grid_w();

    auto renorm_rows = [&](const std::vector<Tensor<T>>& heads, int head_lo, int head_hi) {
        Tensor<T> maps = Tensor<T>::zeros({n, gh, gw});
        for (int p = 0; p < n; ++p) {
            // average raw prompt-query rows over heads, keys restricted to patches
            std::vector<double> row(static_cast<size_t>(m), 0.0);
            for (int h = head_lo; h < head_hi; ++h)
                for (int j = 0; j < m; ++j)
                    row[static_cast<size_t>(j)] += static_cast<double>(heads[static_cast<size_t>(h)].at(1 + m + p, 1 + j));
            double sum = 0;
            for (double v : row) sum += v;
            const double inv = sum > 0 ? 1.0 / sum : 0.0;
            for (int j = 0; j < m; ++j)
                maps.at(p * gh * gw + j) = static_cast<T>(row[static_cast<size_t>(j)] * inv);
        }
        return maps;
    };

    PromptAttentionMaps<T> out;
    const int heads = static_cast<int>(cap.attn_heads.size());
    out.head_mean = renorm_rows(cap.attn_heads, 0, heads);
    for (int h = 0; h < heads; ++h) out.per_head.push_back(renorm_rows(cap.attn_heads, h, h + 1));
    return out;
}

// 8-bit PGM, min-max normalized
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& map2d) {
    const int h = map2d.dim(0), w = map2d.dim(1);
    T lo = map2d.at(0), hi = map2d.at(0);
    for (int i = 0; i < map2d.numel(); ++i) {
        lo = std::min(lo, map2d.at(i));
        hi = std::max(hi, map2d.at(i));
    }
    const double scale = hi > lo ? 255.0 / (static_cast<double>(hi) - static_cast<double>(lo)) : 0.0;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_pgm: cannot open '" + path + "'");
    f << "P5\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < map2d.numel(); ++i) {
        const double v = (static_cast<double>(map2d.at(i)) - static_cast<double>(lo)) * scale;
        f.put(static_cast<char>(static_cast<int>(v + 0.5)));
    }
}

// ---------------------------------------------------------------------------
// cross-task feature correlation over encoder depth

struct CorrelationTable {
    std::vector<int> layers;
    std::vector<std::pair<int, int>> pairs; // task index pairs, a < b
    std::vector<std::vector<double>> mean_cosine; // [layer][pair]

    std::string csv(const std::vector<Task>& tasks) const {
        std::string out = "layer,task_a,task_b,mean_cosine\n";
        char buf[96];
        for (size_t l = 0; l < layers.size(); ++l)
            for (size_t p = 0; p < pairs.size(); ++p) {
                std::snprintf(buf, sizeof buf, "%d,%s,%s,%.9g\n", layers[l],
                              task_name(tasks[static_cast<size_t>(pairs[p].first)]),
                              task_name(tasks[static_cast<size_t>(pairs[p].second)]), mean_cosine[l][p]);
                out += buf;
            }
        return out;
    }
};

template <typename T>
double cosine_flat(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.same_storage(b) || bitwise_equal(a, b)) return 1.0; // identical branches
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < a.numel(); ++i) {
        const double x = a.at(i), y = b.at(i);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
}

template <typename T>
CorrelationTable task_feature_correlation(const Model<T>& model, const Dataset& ds,
                                          const std::vector<int>& layers, int threads = 1) {
    const int tasks = model.cfg.task_count();
    CorrelationTable table;
    table.layers = layers;
    for (int a = 0; a < tasks; ++a)
        for (int b = a + 1; b < tasks; ++b) table.pairs.emplace_back(a, b);
    table.mean_cosine.assign(layers.size(), std::vector<double>(table.pairs.size(), 0.0));

    std::vector<std::vector<std::vector<double>>> per_sample(ds.samples.size());
    parallel_for(static_cast<int>(ds.samples.size()), threads, [&](int i) {
        Tensor<T> image = ds.samples[static_cast<size_t>(i)].image.template cast<T>();
        std::vector<EncodeCapture<T>> caps(static_cast<size_t>(tasks));
        Tape<T> tape;
        tape.set_recording(false);
        for (int t = 0; t < tasks; ++t) {
            caps[static_cast<size_t>(t)].keep_layer_patches = true;
            (void)encode(tape, image, t, model.prompts, model.encoder, model.cfg.encoder, tasks,
                         &caps[static_cast<size_t>(t)]);
        }
        auto& rows = per_sample[static_cast<size_t>(i)];
        rows.assign(layers.size(), std::vector<double>(table.pairs.size(), 0.0));
        for (size_t l = 0; l < layers.size(); ++l) {
            const int layer = layers[l];
            for (size_t p = 0; p < table.pairs.size(); ++p) {
                const auto& fa = caps[static_cast<size_t>(table.pairs[p].first)].layer_patches[static_cast<size_t>(layer - 1)];
                const auto& fb = caps[static_cast<size_t>(table.pairs[p].second)].layer_patches[static_cast<size_t>(layer - 1)];
                rows[l][p] = cosine_flat(fa, fb);
            }
        }
    });
    for (size_t l = 0; l < layers.size(); ++l)
        for (size_t p = 0; p < table.pairs.size(); ++p) {
            double sum = 0;
            for (size_t i = 0; i < per_sample.size(); ++i) sum += per_sample[i][l][p];
            table.mean_cosine[l][p] = sum / static_cast<double>(per_sample.size());
        }
    return table;
}

// mean cross-task cosine at one layer, averaged over pairs and samples
template <typename T>
double mean_cross_task_cosine(const Model<T>& model, const Dataset& ds, int layer, int threads = 1) {
    auto table = task_feature_correlation(model, ds, {layer}, threads);
    double sum = 0;
    for (double v : table.mean_cosine[0]) sum += v;
    return table.mean_cosine[0].empty() ? 1.0 : sum / static_cast<double>(table.mean_cosine[0].size());
}

// ---------------------------------------------------------------------------
// prompt swapping (inference-time specialty probe)

// Every branch runs with source_task's trained prompts substituted at every
// prompt layer (the unified bank, when present, is left as is).
template <typename T>
PromptBank<T> swapped_bank(const PromptBank<T>& bank, int source_task) {
    PromptBank<T> out = bank;
    if (!out.specific.empty())
        for (size_t t = 0; t < out.specific.size(); ++t)
            out.specific[t] = bank.specific[static_cast<size_t>(source_task)];
    return out;
}

template <typename T>
MetricTable prompt_swap_eval(const Model<T>& model, const Dataset& ds, int source_task, int threads = 1) {
    if (source_task < 0 || source_task >= model.cfg.task_count())
        throw ConfigError("prompt_swap_eval: source task out of range");
    PromptBank<T> bank = swapped_bank(model.prompts, source_task);
    return evaluate(model, ds, threads, &bank);
}

// ---------------------------------------------------------------------------
// ablation grid

enum class AblationAxis { positions, counts, unified_mode, init, fusion_weights, shared_encoder };

inline AblationAxis axis_from_name(const std::string& s) {
    if (s == "positions") return AblationAxis::positions;
    if (s == "counts") return AblationAxis::counts;
    if (s == "unified_mode") return AblationAxis::unified_mode;
    if (s == "init") return AblationAxis::init;
    if (s == "fusion_weights") return AblationAxis::fusion_weights;
    if (s == "shared_encoder") return AblationAxis::shared_encoder;
    throw ConfigError("unknown ablation axis '" + s + "'");
}

// Applies one axis value to a copy of the base configuration. Value grammar:
//   positions:       "5-8" | "none"
//   counts:          "0" | "1" | "2" | "5" ...
//   unified_mode:    "none" | "concat[:k]" | "add[:k]" | "unified_only[:k]" |
//                    "cross_prompt_attention"
//   init:            "zeros" | "random" | "ones"
//   fusion_weights:  "w0,w1,...,w{T-1}" applied to every scale
//   shared_encoder:  "true" | "false"
inline ModelConfig apply_axis_value(const ModelConfig& base, AblationAxis axis, const std::string& value) {
    ModelConfig c = base;
    switch (axis) {
        case AblationAxis::positions: {
            if (value == "none") {
                c.encoder.prompt_count = 0;
                c.encoder.unified_mode = UnifiedMode::none;
                c.encoder.unified_count = 0;
            } else {
                const auto dash = value.find('-');
                if (dash == std::string::npos) throw ConfigError("positions value must be 'a-b' or 'none'");
                c.encoder.prompt_start = std::stoi(value.substr(0, dash));
                c.encoder.prompt_end = std::stoi(value.substr(dash + 1));
                if (c.encoder.prompt_count == 0) c.encoder.prompt_count = base.encoder.prompt_count;
            }
            break;
        }
        case AblationAxis::counts: {
            const int n = std::stoi(value);
            c.encoder.prompt_count = n;
            if (n == 0) {
                c.encoder.unified_mode = UnifiedMode::none;
                c.encoder.unified_count = 0;
            }
            break;
        }
        case AblationAxis::unified_mode: {
            std::string mode = value;
            int count = 0;
            const auto colon = value.find(':');
            if (colon != std::string::npos) {
                mode = value.substr(0, colon);
                count = std::stoi(value.substr(colon + 1));
            }
            c.encoder.unified_mode = enum_from_name(mode,
                                                    {UnifiedMode::none, UnifiedMode::unified_only,
                                                     UnifiedMode::concat, UnifiedMode::add,
                                                     UnifiedMode::cross_prompt_attention},
                                                    "unified_mode");
            if (c.encoder.unified_mode == UnifiedMode::none ||
                c.encoder.unified_mode == UnifiedMode::cross_prompt_attention) {
                c.encoder.unified_count = 0;
            } else {
                c.encoder.unified_count = count > 0 ? count : c.encoder.prompt_count;
            }
            break;
        }
        case AblationAxis::init:
            c.encoder.prompt_init =
                enum_from_name(value, {PromptInit::zeros, PromptInit::random, PromptInit::ones}, "prompt_init");
            break;
        case AblationAxis::fusion_weights: {
            std::vector<double> row;
            std::string rest = value;
            while (!rest.empty()) {
                const auto comma = rest.find(',');
                row.push_back(std::stod(rest.substr(0, comma)));
                if (comma == std::string::npos) break;
                rest = rest.substr(comma + 1);
            }
            if (static_cast<int>(row.size()) != c.task_count())
                throw ConfigError("fusion_weights value needs one weight per task");
            c.fusion.mode = FusionMode::fixed;
            c.fusion.fixed_weights.assign(static_cast<size_t>(c.scales()), row);
            break;
        }
        case AblationAxis::shared_encoder:
            if (value == "true") c.encoder.shared = true;
            else if (value == "false") c.encoder.shared = false;
            else throw ConfigError("shared_encoder value must be true or false");
            break;
    }
    c.validate();
    return c;
}

struct GridRow {
    std::string setting;
    std::string seed; // number or "median"
    std::map<Task, double> metric;
    double total_val_loss = 0;
};

struct GridResult {
    std::vector<Task> tasks;
    std::vector<GridRow> rows;

    std::string csv(const std::string& axis_name) const {
        std::string out = "axis,setting,seed";
        for (Task t : tasks) out += std::string(",") + task_name(t) + "_" + metric_name(t);
        out += ",total_val_loss\n";
        char buf[64];
        for (const auto& r : rows) {
            out += axis_name + "," + r.setting + "," + r.seed;
            for (Task t : tasks) {
                std::snprintf(buf, sizeof buf, ",%.9g", r.metric.at(t));
                out += buf;
            }
            std::snprintf(buf, sizeof buf, ",%.9g\n", r.total_val_loss);
            out += buf;
        }
        return out;
    }
};

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Trains one model per (setting, seed) with identical seeds across settings
// and appends a median row per setting.
template <typename T = float>
GridResult run_ablation_grid(const ModelConfig& base, AblationAxis axis,
                             const std::vector<std::string>& values, int seeds, const Dataset& train_ds,
                             const Dataset& val_ds, int jobs = 1) {
    // validate every value before any training starts
    std::vector<ModelConfig> configs;
    for (const auto& v : values) configs.push_back(apply_axis_value(base, axis, v));

    GridResult result;
    result.tasks = base.tasks;

    struct Job {
        size_t setting;
        int seed;
        MetricTable table;
    };
    std::vector<Job> all;
    for (size_t s = 0; s < configs.size(); ++s)
        for (int seed = 0; seed < seeds; ++seed) all.push_back(Job{s, seed, {}});

    const int workers = std::max(1, jobs);
    parallel_for(static_cast<int>(all.size()), workers, [&](int i) {
        Job& job = all[static_cast<size_t>(i)];
        ModelConfig cfg = configs[job.setting];
        cfg.train.seed = static_cast<uint64_t>(job.seed);
        if (workers > 1) cfg.train.threads = 1;
        auto model = Model<T>::init(cfg, cfg.train.seed);
        train(model, train_ds, cfg.train);
        job.table = evaluate(model, val_ds, cfg.train.effective_threads());
    });

    for (size_t s = 0; s < configs.size(); ++s) {
        std::map<Task, std::vector<double>> metric_runs;
        std::vector<double> loss_runs;
        for (const auto& job : all) {
            if (job.setting != s) continue;
            GridRow row;
            row.setting = values[s];
            row.seed = std::to_string(job.seed);
            for (Task t : base.tasks) {
                row.metric[t] = job.table.metric.at(t);
                metric_runs[t].push_back(job.table.metric.at(t));
            }
            row.total_val_loss = job.table.total_loss;
            loss_runs.push_back(job.table.total_loss);
            result.rows.push_back(std::move(row));
        }
        GridRow med;
        med.setting = values[s];
        med.seed = "median";
        for (Task t : base.tasks) med.metric[t] = median_of(metric_runs[t]);
        med.total_val_loss = median_of(loss_runs);
        result.rows.push_back(std::move(med));
    }
    return result;
}

} // namespace mtp
