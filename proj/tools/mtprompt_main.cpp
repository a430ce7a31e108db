// mtprompt command line: dataset generation, training, evaluation, ablation
// grids and analysis artifacts. Exit codes: 0 success, 1 runtime/io error,
// 2 usage/config error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mtprompt/analysis.hpp"
#include "mtprompt/config.hpp"
#include "mtprompt/data.hpp"
#include "mtprompt/eval.hpp"
#include "mtprompt/model.hpp"
#include "mtprompt/train.hpp"

namespace fs = std::filesystem;
using namespace mtp;

namespace {

struct GenArgs {
    std::string out;
    int train = 200, val = 50;
    std::string size = "64x64";
    int classes = 5;
    uint64_t seed = 0;
    std::string objects = "3-6";
    bool saliency = false;
    int threads = 0;
};

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out = ".";
    int64_t seed = -1;
    int threads = -1;
    int64_t iterations = -1;
};

struct EvalArgs {
    std::string model;
    std::string data;
    std::string split = "val";
    std::string out;
};

struct AblateArgs {
    std::string config;
    std::string data;
    std::string out = "ablation.csv";
    std::string axis;
    std::string values;
    int seeds = 3;
    int jobs = 1;
};

struct AnalyzeArgs {
    std::string mode;
    std::string model;
    std::string data;
    std::string split = "val";
    std::string out = ".";
    std::string task = "semseg";
    int layer = 0;
    int sample = 0;
    std::string layers;
};

std::pair<int, int> parse_size(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) throw ConfigError("--size must look like 64x64");
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

std::pair<int, int> parse_range(const std::string& s) {
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw ConfigError("range must look like a-b");
    return {std::stoi(s.substr(0, dash)), std::stoi(s.substr(dash + 1))};
}

std::vector<std::string> split_values(const std::string& s) {
    // semicolons separate settings; commas also work for scalar-valued axes
    const char sep = s.find(';') != std::string::npos ? ';' : ',';
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

ModelConfig load_or_default_config(const std::string& path) {
    if (path.empty()) return ModelConfig{};
    return load_config(path);
}

void write_checkpoint(const std::string& dir, Model<float>& model, int64_t iteration) {
    fs::create_directories(dir);
    model.save((fs::path(dir) / "model.mtt").string());
    nlohmann::json manifest;
    manifest["iteration"] = iteration;
    manifest["config_hash"] = config_hash(model.cfg);
    manifest["seed"] = model.cfg.train.seed;
    manifest["config"] = to_json(model.cfg);
    std::ofstream f(fs::path(dir) / "model.json");
    if (!f) throw IoError("cannot write checkpoint manifest");
    f << manifest.dump(2) << "\n";
}

Model<float> load_checkpoint(const std::string& path) {
    fs::path mtt = path, manifest;
    if (fs::is_directory(path)) {
        mtt = fs::path(path) / "model.mtt";
        manifest = fs::path(path) / "model.json";
    } else {
        manifest = fs::path(path);
        manifest.replace_extension(".json");
    }
    std::ifstream f(manifest);
    if (!f) throw IoError("checkpoint manifest not found at " + manifest.string());
    nlohmann::json j;
    f >> j;
    ModelConfig cfg = config_from_json(j.at("config"));
    cfg.validate();
    return Model<float>::load(mtt.string(), cfg);
}

int run_gen(const GenArgs& a) {
    GenOptions opt;
    opt.root = a.out;
    opt.train = a.train;
    opt.val = a.val;
    auto [h, w] = parse_size(a.size);
    opt.height = h;
    opt.width = w;
    opt.classes = a.classes;
    opt.seed = a.seed;
    auto [lo, hi] = parse_range(a.objects);
    opt.min_objects = lo;
    opt.max_objects = hi;
    opt.with_saliency = a.saliency;
    opt.threads = a.threads > 0 ? a.threads : default_threads();
    if (opt.classes < 2) throw ConfigError("--classes must be at least 2");
    if (lo < 0 || hi < lo) throw ConfigError("--objects must be a-b with 0 <= a <= b");
    generate_dataset(opt);
    std::printf("wrote %d train + %d val samples under %s\n", opt.train, opt.val, opt.root.c_str());
    return 0;
}

int run_train(const TrainArgs& a) {
    ModelConfig cfg = load_or_default_config(a.config);
    if (a.seed >= 0) cfg.train.seed = static_cast<uint64_t>(a.seed);
    if (a.threads >= 0) cfg.train.threads = a.threads;
    if (a.iterations > 0) cfg.train.iterations = static_cast<int>(a.iterations);
    cfg.validate();
    if (cfg.train.lr <= 0) throw ConfigError("train: lr must be positive");

    Dataset train_ds = load_dataset(a.data, "train");
    if (train_ds.classes() != cfg.classes)
        throw ConfigError("dataset has " + std::to_string(train_ds.classes()) + " classes, config expects " +
                          std::to_string(cfg.classes));

    auto model = Model<float>::init(cfg, cfg.train.seed);
    std::printf("model parameters: %lld\n", static_cast<long long>(model.param_count()));
    auto result = train(model, train_ds, cfg.train);

    fs::create_directories(a.out);
    write_history_csv((fs::path(a.out) / "history.csv").string(), result.history, cfg);
    write_checkpoint(a.out, model, cfg.train.iterations);

    Dataset val_ds = load_dataset(a.data, "val");
    if (!val_ds.samples.empty()) {
        auto table = evaluate(model, val_ds, cfg.train.effective_threads());
        std::ofstream mf(fs::path(a.out) / "metrics.csv");
        mf << table.csv();
        std::printf("final total val loss: %.6g\n", table.total_loss);
    }
    std::printf("checkpoint written to %s\n", a.out.c_str());
    return 0;
}

int run_eval(const EvalArgs& a) {
    auto model = load_checkpoint(a.model);
    Dataset ds = load_dataset(a.data, a.split);
    auto table = evaluate(model, ds, default_threads());
    const std::string csv = table.csv();
    if (a.out.empty()) {
        std::fputs(csv.c_str(), stdout);
    } else {
        std::ofstream f(a.out);
        if (!f) throw IoError("cannot write " + a.out);
        f << csv;
    }
    return 0;
}

int run_ablate(const AblateArgs& a) {
    ModelConfig base = load_or_default_config(a.config);
    base.validate();
    const AblationAxis axis = axis_from_name(a.axis);
    const auto values = split_values(a.values);
    if (values.empty()) throw ConfigError("--values is empty");
    if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
    if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");

    Dataset train_ds = load_dataset(a.data, "train");
    Dataset val_ds = load_dataset(a.data, "val");
    auto grid = run_ablation_grid<float>(base, axis, values, a.seeds, train_ds, val_ds, a.jobs);
    std::ofstream f(a.out);
    if (!f) throw IoError("cannot write " + a.out);
    f << grid.csv(a.axis);
    std::printf("wrote %zu rows to %s\n", grid.rows.size(), a.out.c_str());
    return 0;
}

int run_analyze(const AnalyzeArgs& a) {
    auto model = load_checkpoint(a.model);
    Dataset ds = load_dataset(a.data, a.split);
    fs::create_directories(a.out);

    if (a.mode == "attn") {
        if (a.sample < 0 || a.sample >= static_cast<int>(ds.samples.size()))
            throw ConfigError("--sample out of range");
        int task = -1;
        for (int t = 0; t < model.cfg.task_count(); ++t)
            if (task_name(model.cfg.tasks[static_cast<size_t>(t)]) == a.task) task = t;
        if (task < 0) throw ConfigError("--task '" + a.task + "' not in the configured task set");
        const int layer = a.layer > 0 ? a.layer : model.cfg.encoder.prompt_end;
        Tensor<float> image = ds.samples[static_cast<size_t>(a.sample)].image;
        auto maps = prompt_attention_map(model, image, task, layer);
        MttFile raw;
        raw.add("head_mean", maps.head_mean);
        const int n = maps.head_mean.dim(0), gh = maps.head_mean.dim(1), gw = maps.head_mean.dim(2);
        for (int p = 0; p < n; ++p) {
            Tensor<float> one = Tensor<float>::uninit({gh, gw});
            std::memcpy(one.ptr(), maps.head_mean.ptr() + static_cast<size_t>(p) * gh * gw,
                        static_cast<size_t>(gh) * gw * sizeof(float));
            char name[64];
            std::snprintf(name, sizeof name, "attn_task%d_layer%d_prompt%d.pgm", task, layer, p);
            write_pgm((fs::path(a.out) / name).string(), one);
        }
        for (size_t h = 0; h < maps.per_head.size(); ++h) raw.add("head" + std::to_string(h), maps.per_head[h]);
        raw.write((fs::path(a.out) / "attn_maps.mtt").string());
        std::printf("wrote %d prompt maps (+%zu per-head sets) to %s\n", n, maps.per_head.size(),
                    a.out.c_str());
        return 0;
    }
    if (a.mode == "corr") {
        std::vector<int> layers;
        if (a.layers.empty()) {
            for (int l = 1; l <= model.cfg.encoder.layers; ++l) layers.push_back(l);
        } else {
            for (const auto& tok : split_values(a.layers)) layers.push_back(std::stoi(tok));
        }
        for (int l : layers)
            if (l < 1 || l > model.cfg.encoder.layers) throw ConfigError("--layers entry out of range");
        auto table = task_feature_correlation(model, ds, layers, default_threads());
        std::ofstream f(fs::path(a.out) / "correlation.csv");
        f << table.csv(model.cfg.tasks);
        std::printf("wrote correlation table for %zu layers to %s/correlation.csv\n", layers.size(),
                    a.out.c_str());
        return 0;
    }
    if (a.mode == "swap") {
        std::string csv = "source,task,metric,value\n";
        char buf[128];
        auto baseline = evaluate(model, ds, default_threads());
        for (const auto& [task, v] : baseline.metric) {
            std::snprintf(buf, sizeof buf, "baseline,%s,%s,%.9g\n", task_name(task), metric_name(task), v);
            csv += buf;
        }
        for (int src = 0; src < model.cfg.task_count(); ++src) {
            auto table = prompt_swap_eval(model, ds, src, default_threads());
            for (const auto& [task, v] : table.metric) {
                std::snprintf(buf, sizeof buf, "%s,%s,%s,%.9g\n",
                              task_name(model.cfg.tasks[static_cast<size_t>(src)]), task_name(task),
                              metric_name(task), v);
                csv += buf;
            }
        }
        std::ofstream f(fs::path(a.out) / "swap.csv");
        f << csv;
        std::printf("wrote prompt-swap table to %s/swap.csv\n", a.out.c_str());
        return 0;
    }
    throw ConfigError("--mode must be one of attn, corr, swap");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task dense scene prediction with task-specific prompt tokens"};
    app.require_subcommand(1);

    GenArgs g;
    auto* gen = app.add_subcommand("gen", "generate a synthetic multi-task dataset");
    gen->add_option("--out", g.out, "dataset root directory")->required();
    gen->add_option("--train", g.train, "training samples");
    gen->add_option("--val", g.val, "validation samples");
    gen->add_option("--size", g.size, "image size HxW");
    gen->add_option("--classes", g.classes, "semantic classes incl. background");
    gen->add_option("--seed", g.seed, "generator seed");
    gen->add_option("--objects", g.objects, "objects per scene, range a-b");
    gen->add_flag("--saliency", g.saliency, "also store saliency masks");
    gen->add_option("--threads", g.threads, "generation threads");

    TrainArgs t;
    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", t.config, "JSON config (defaults apply to missing keys)");
    tr->add_option("--data", t.data, "dataset root")->required();
    tr->add_option("--out", t.out, "output directory");
    tr->add_option("--seed", t.seed, "override train.seed");
    tr->add_option("--threads", t.threads, "override train.threads");
    tr->add_option("--iterations", t.iterations, "override train.iterations");

    EvalArgs e;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--model", e.model, "checkpoint directory or model.mtt")->required();
    ev->add_option("--data", e.data, "dataset root")->required();
    ev->add_option("--split", e.split, "dataset split");
    ev->add_option("--out", e.out, "metrics CSV path (stdout when omitted)");

    AblateArgs b;
    auto* ab = app.add_subcommand("ablate", "train/evaluate a grid of settings");
    ab->add_option("--config", b.config, "base JSON config");
    ab->add_option("--data", b.data, "dataset root")->required();
    ab->add_option("--out", b.out, "output CSV path");
    ab->add_option("--axis", b.axis, "positions|counts|unified_mode|init|fusion_weights|shared_encoder")
        ->required();
    ab->add_option("--values", b.values, "axis values, ';' or ',' separated")->required();
    ab->add_option("--seeds", b.seeds, "seeds per setting");
    ab->add_option("--jobs", b.jobs, "concurrent settings");

    AnalyzeArgs n;
    auto* an = app.add_subcommand("analyze", "attention maps, correlations, prompt swaps");
    an->add_option("--mode", n.mode, "attn|corr|swap")->required();
    an->add_option("--model", n.model, "checkpoint directory or model.mtt")->required();
    an->add_option("--data", n.data, "dataset root")->required();
    an->add_option("--split", n.split, "dataset split");
    an->add_option("--out", n.out, "output directory");
    an->add_option("--task", n.task, "task for attn maps");
    an->add_option("--layer", n.layer, "encoder layer for attn maps (default prompt_end)");
    an->add_option("--sample", n.sample, "sample index for attn maps");
    an->add_option("--layers", n.layers, "layer list for corr (default all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return 2;
    }

    try {
        if (*gen) return run_gen(g);
        if (*tr) return run_train(t);
        if (*ev) return run_eval(e);
        if (*ab) return run_ablate(b);
        if (*an) return run_analyze(n);
        return 2;
    } catch (const ConfigError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 2;
    } catch (const ContractError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 2;
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
}
