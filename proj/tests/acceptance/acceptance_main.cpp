// Acceptance suite: every release criterion, one pass/fail line each.
// Training-heavy checks share the same protocol: the default synthetic
// dataset (200 train / 50 val), the default toy configuration, 2000
// iterations, seeds {0, 1, 2}.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mtprompt/analysis.hpp"
#include "mtprompt/eval.hpp"
#include "mtprompt/grad_check.hpp"
#include "mtprompt/train.hpp"
#include "support/oracles.hpp"

using namespace mtp;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

#ifndef MTPROMPT_SOURCE_DIR
#define MTPROMPT_SOURCE_DIR "."
#endif

namespace {

int g_failures = 0;

void report(int idx, const char* name, bool ok, const std::string& detail = "") {
    std::printf("[%s] criterion %d: %s%s%s\n", ok ? "PASS" : "FAIL", idx, name,
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

template <typename Fn>
void criterion(int idx, const char* name, Fn&& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        report(idx, name, false, std::string("exception: ") + e.what());
    }
}

double seconds_since(clk::time_point t0) {
    return std::chrono::duration<double>(clk::now() - t0).count();
}

// orientation-aware comparison helper: returns a value where larger = better
double quality(Task t, double metric) { return metric_higher_better(t) ? metric : -metric; }

struct ProtocolRun {
    Model<float> model;
    MetricTable table;
};

ProtocolRun run_protocol(const ModelConfig& base, uint64_t seed, const Dataset& train_ds,
                         const Dataset& val_ds) {
    ModelConfig cfg = base;
    cfg.train.seed = seed;
    cfg.validate();
    ProtocolRun r{Model<float>::init(cfg, seed), {}};
    train(r.model, train_ds, cfg.train);
    r.table = evaluate(r.model, val_ds, cfg.train.effective_threads());
    return r;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.5g", v);
    return buf;
}

} // namespace

int main() {
    const auto wall0 = clk::now();
    const fs::path data_root = fs::temp_directory_path() / ("mtp_acceptance_" + std::to_string(::getpid()));

    std::printf("generating the default synthetic dataset (200/50, 64x64, 5 classes)...\n");
    GenOptions gen;
    gen.root = data_root.string();
    gen.seed = 0;
    generate_dataset(gen);
    Dataset train_ds = load_dataset(gen.root, "train");
    Dataset val_ds = load_dataset(gen.root, "val");

    ModelConfig toy; // library defaults are the toy configuration
    toy.validate();

    // ----------------------------------------------------------------- 2
    criterion(2, "empty-prompt reduction is bitwise exact", [&] {
        ModelConfig with_range = toy;
        with_range.encoder.prompt_count = 0;
        ModelConfig vanilla = toy;
        vanilla.encoder.prompt_count = 0;
        vanilla.encoder.prompt_start = 1;
        vanilla.encoder.prompt_end = 1;
        auto ma = Model<float>::init(with_range, 7);
        auto mb = Model<float>::init(vanilla, 7);
        Tensor<float> img = train_ds.samples[0].image;
        bool ok = true;
        Tape<float> ta, tb;
        for (int t = 0; t < toy.task_count(); ++t) {
            auto ra = encode(ta, img, t, ma.prompts, ma.encoder, with_range.encoder, toy.task_count());
            auto rb = encode(tb, img, t, mb.prompts, mb.encoder, vanilla.encoder, toy.task_count());
            ok &= bitwise_equal(ra.last.patches, rb.last.patches);
            ok &= bitwise_equal(ra.last.cls, rb.last.cls);
            for (size_t s = 0; s < ra.taps.size(); ++s) ok &= bitwise_equal(ra.taps[s], rb.taps[s]);
        }
        report(2, "empty-prompt reduction is bitwise exact", ok);
    });

    // ----------------------------------------------------------------- 3
    criterion(3, "gradient isolation across task prompts", [&] {
        const Sample& s = train_ds.samples[1];
        Tensor<float> img = s.image;

        ModelConfig iso = toy;
        iso.fusion.mode = FusionMode::none;
        iso.decoder.cross_task = false;
        iso.validate();
        auto mi = Model<float>::init(iso, 11);
        bool zero_ok = true;
        for (int t = 0; t < iso.task_count() && zero_ok; ++t) {
            Tape<float> tape;
            auto fwd = forward_sample(tape, mi, img);
            auto lt = task_loss(tape, iso.tasks[static_cast<size_t>(t)],
                                fwd.predictions[static_cast<size_t>(t)], s, iso.ignore_index);
            tape.backward(lt);
            for (int other = 0; other < iso.task_count(); ++other) {
                if (other == t) continue;
                for (const auto& p : mi.prompts.specific[static_cast<size_t>(other)])
                    for (float g : p.grad_view())
                        if (g != 0.0f) zero_ok = false;
            }
            for (auto& [name, p] : mi.params()) p.zero_grad();
        }

        ModelConfig fused = toy; // fixed 1/T fusion, cross-task decoder
        auto mf = Model<float>::init(fused, 11);
        Tape<float> tape;
        auto fwd = forward_sample(tape, mf, img);
        auto l0 = task_loss(tape, fused.tasks[0], fwd.predictions[0], s, fused.ignore_index);
        tape.backward(l0);
        bool nonzero = false;
        for (size_t other = 1; other < mf.prompts.specific.size(); ++other)
            for (const auto& p : mf.prompts.specific[other])
                for (float g : p.grad_view())
                    if (g != 0.0f) nonzero = true;

        report(3, "gradient isolation across task prompts", zero_ok && nonzero,
               std::string("isolated grads all zero: ") + (zero_ok ? "yes" : "no") +
                   ", fused cross-gradients nonzero: " + (nonzero ? "yes" : "no"));
    });

    // ----------------------------------------------------------------- 8
    criterion(8, "metric implementations match brute-force oracles", [&] {
        const auto t0 = clk::now();
        Rng rng(881);
        bool ok = true;
        for (int trial = 0; trial < 100 && ok; ++trial) {
            const int h = 2 + static_cast<int>(rng.next_below(7));
            const int w = 2 + static_cast<int>(rng.next_below(7));
            const size_t n = static_cast<size_t>(h) * w;
            const int k = 2 + static_cast<int>(rng.next_below(4));
            std::vector<int32_t> gt_ids(n), pred_ids(n);
            for (auto& v : gt_ids)
                v = rng.bernoulli(0.1) ? 255 : static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(k)));
            for (auto& v : pred_ids) v = static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(k)));
            ok &= std::abs(miou(pred_ids, gt_ids, k, 255) - oracle::miou(pred_ids, gt_ids, k, 255)) < 1e-9;

            std::vector<float> pd(n), gd(n), pn(n * 3), gn(n * 3), prob(n);
            std::vector<uint8_t> bin(n);
            for (auto& v : pd) v = static_cast<float>(rng.uniform(0, 5));
            for (auto& v : gd) v = static_cast<float>(rng.uniform(0, 5));
            ok &= std::abs(rmse(pd, gd) - oracle::rmse(pd, gd, {})) < 1e-9;
            for (size_t i = 0; i < n; ++i) {
                double v[3], len = 0;
                for (int c = 0; c < 3; ++c) {
                    v[c] = rng.uniform(-1, 1);
                    len += v[c] * v[c];
                }
                len = std::sqrt(len) + 1e-12;
                for (int c = 0; c < 3; ++c) gn[3 * i + c] = static_cast<float>(v[c] / len);
                for (int c = 0; c < 3; ++c) pn[3 * i + c] = static_cast<float>(rng.uniform(-2, 2));
            }
            ok &= std::abs(mean_angular_error(pn, gn) - oracle::mean_angular_error(pn, gn, {})) < 1e-9;
            for (auto& v : prob) v = static_cast<float>(rng.next_double());
            for (auto& v : bin) v = rng.bernoulli(0.3) ? 1 : 0;
            ok &= std::abs(max_f(prob, bin) - oracle::max_f({std::span<const float>(prob)},
                                                            {std::span<const uint8_t>(bin)})) < 1e-9;
            ok &= std::abs(ods_f({std::span<const float>(prob)}, {std::span<const uint8_t>(bin)}) -
                           oracle::ods_f({std::span<const float>(prob)}, {std::span<const uint8_t>(bin)})) < 1e-9;
        }
        const double secs = seconds_since(t0);
        report(8, "metric implementations match brute-force oracles", ok && secs < 10.0,
               "100 instances in " + fmt(secs) + " s");
    });

    // ----------------------------------------------------------------- 9
    criterion(9, "determinism and serialization", [&] {
        ModelConfig shortcfg = toy;
        shortcfg.train.iterations = 25;
        auto run = [&](const std::string& tag) {
            ModelConfig c = shortcfg;
            c.train.seed = 5;
            auto model = Model<float>::init(c, 5);
            auto res = train(model, train_ds, c.train);
            const fs::path p = data_root / (tag + ".mtt");
            model.save(p.string());
            std::ifstream f(p, std::ios::binary);
            std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
            return std::make_pair(history_csv(res.history, c), bytes);
        };
        auto [h1, c1] = run("ck1");
        auto [h2, c2] = run("ck2");
        const bool train_ok = h1 == h2 && c1 == c2;

        Rng rng(9001);
        bool rt_ok = true;
        const fs::path p = data_root / "roundtrip.mtt";
        for (int batch = 0; batch < 10 && rt_ok; ++batch) {
            MttFile f;
            std::vector<Tensor<float>> kept;
            for (int i = 0; i < 100; ++i) {
                std::vector<int> shape;
                const int rank = 1 + static_cast<int>(rng.next_below(3));
                for (int r = 0; r < rank; ++r) shape.push_back(1 + static_cast<int>(rng.next_below(6)));
                auto t = Tensor<float>::uniform(shape, rng, -100, 100);
                kept.push_back(t);
                f.add("t" + std::to_string(i), t);
            }
            f.write(p.string());
            MttFile r = MttFile::read(p.string());
            for (int i = 0; i < 100; ++i)
                rt_ok &= bitwise_equal(r.tensor<float>("t" + std::to_string(i)), kept[static_cast<size_t>(i)]);
        }
        report(9, "determinism and serialization", train_ok && rt_ok,
               std::string("seeded reruns bitwise-identical: ") + (train_ok ? "yes" : "no") +
                   ", 1000-tensor round trip exact: " + (rt_ok ? "yes" : "no"));
    });

    // ----------------------------------------------------------------- 10
    criterion(10, "paper-scale configuration fidelity", [&] {
        ModelConfig c = load_config(std::string(MTPROMPT_SOURCE_DIR) + "/configs/paper_nyud.json");
        c.validate();
        bool ok = c.loss_weights.seg == 1.0 && c.loss_weights.depth == 1.0 && c.loss_weights.normals == 10.0 &&
                  c.loss_weights.edge == 50.0 && c.train.lr == 2e-5 && c.train.weight_decay == 1e-6 &&
                  c.train.batch_size == 6 && c.train.iterations == 40000 && c.encoder.layers == 24 &&
                  c.encoder.prompt_start == 13 && c.encoder.prompt_end == 24 && c.encoder.prompt_count == 5 &&
                  c.fusion.mode == FusionMode::fixed;
        for (const auto& row : c.fusion.fixed_weights)
            for (double w : row) ok &= w == 0.25;
        ok &= c.encoder.tap_layers == std::vector<int>{6, 12, 18};
        report(10, "paper-scale configuration fidelity", ok);
    });

    // ----------------------------------------------------------------- 1
    criterion(1, "full-model gradient check (64-bit)", [&] {
        const auto t0 = clk::now();
        auto model = Model<double>::init(toy, 17);
        Tensor<double> image = train_ds.samples[2].image.cast<double>();
        const Sample& s = train_ds.samples[2];

        auto params = model.params();
        std::vector<Tensor<double>> tensors;
        std::vector<bool> is_prompt;
        for (auto& [name, p] : params) {
            tensors.push_back(p);
            is_prompt.push_back(name.rfind("prompts.", 0) == 0);
        }
        Rng rng(31337);
        std::set<std::pair<size_t, int64_t>> picked;
        auto draw = [&](bool prompts_only) {
            while (true) {
                const size_t pi = static_cast<size_t>(rng.next_below(tensors.size()));
                if (prompts_only != is_prompt[pi]) continue;
                const int64_t off = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(tensors[pi].numel())));
                if (picked.emplace(pi, off).second) return;
            }
        };
        for (int i = 0; i < 60; ++i) draw(true);
        for (int i = 0; i < 460; ++i) draw(false);
        std::vector<std::pair<size_t, int64_t>> coords(picked.begin(), picked.end());

        auto build_loss = [&](Tape<double>& tape) {
            auto fwd = forward_sample(tape, model, image);
            return total_loss(tape, fwd.predictions, s, toy).value;
        };
        const double err = grad_check_params(build_loss, tensors, coords, 1e-5);
        const double secs = seconds_since(t0);
        report(1, "full-model gradient check (64-bit)", err < 1e-4 && secs < 120.0,
               "max rel err " + fmt(err) + " over " + std::to_string(coords.size()) + " coords (60 prompt) in " +
                   fmt(secs) + " s");
    });

    // ----------------------------------------------------------------- 4 (+5, 6 reuse the runs)
    std::vector<ProtocolRun> prompted;
    std::vector<MetricTable> baseline_tables;
    criterion(4, "prompts help at desk scale", [&] {
        const auto t0 = clk::now();
        ModelConfig base_cfg = toy;
        ModelConfig none_cfg = toy;
        none_cfg.encoder.prompt_count = 0;

        std::vector<double> loss_p, loss_b;
        std::map<Task, std::vector<double>> met_p, met_b;
        for (uint64_t seed : {0, 1, 2}) {
            auto rp = run_protocol(base_cfg, seed, train_ds, val_ds);
            loss_p.push_back(rp.table.total_loss);
            for (Task t : toy.tasks) met_p[t].push_back(rp.table.metric.at(t));
            prompted.push_back(std::move(rp));

            auto rb = run_protocol(none_cfg, seed, train_ds, val_ds);
            loss_b.push_back(rb.table.total_loss);
            for (Task t : toy.tasks) met_b[t].push_back(rb.table.metric.at(t));
            baseline_tables.push_back(std::move(rb.table));
        }
        const double secs = seconds_since(t0);
        const double med_p = median_of(loss_p), med_b = median_of(loss_b);
        int better = 0;
        std::string detail = "val loss " + fmt(med_p) + " vs " + fmt(med_b);
        for (Task t : toy.tasks) {
            const double qp = quality(t, median_of(met_p[t]));
            const double qb = quality(t, median_of(met_b[t]));
            if (qp > qb) ++better;
            detail += std::string(", ") + task_name(t) + " " + fmt(median_of(met_p[t])) + " vs " +
                      fmt(median_of(met_b[t]));
        }
        detail += ", better on " + std::to_string(better) + "/4, " + fmt(secs) + " s";
        report(4, "prompts help at desk scale", med_p <= med_b && better >= 2 && secs < 1800.0, detail);
    });

    // ----------------------------------------------------------------- 5
    criterion(5, "cross-task features decorrelate with depth", [&] {
        if (prompted.size() != 3) {
            report(5, "cross-task features decorrelate with depth", false, "missing trained models");
            return;
        }
        std::vector<double> at4, at8;
        for (auto& run : prompted) {
            at4.push_back(mean_cross_task_cosine(run.model, val_ds, toy.encoder.prompt_start - 1));
            at8.push_back(mean_cross_task_cosine(run.model, val_ds, toy.encoder.prompt_end));
        }
        const double m4 = median_of(at4), m8 = median_of(at8);
        report(5, "cross-task features decorrelate with depth", m8 < m4,
               "mean cosine at layer 8: " + fmt(m8) + " < layer 4: " + fmt(m4));
    });

    // ----------------------------------------------------------------- 6
    criterion(6, "own prompts beat swapped-in prompts", [&] {
        if (prompted.size() != 3) {
            report(6, "own prompts beat swapped-in prompts", false, "missing trained models");
            return;
        }
        bool identity_ok = true;
        std::map<Task, std::vector<double>> own, cross_med;
        for (auto& run : prompted) {
            PromptBank<float> same = run.model.prompts;
            auto identity = evaluate(run.model, val_ds, 1, &same);
            identity_ok &= identity.csv() == run.table.csv();

            std::vector<MetricTable> swaps;
            for (int src = 0; src < toy.task_count(); ++src)
                swaps.push_back(prompt_swap_eval(run.model, val_ds, src));
            for (int t = 0; t < toy.task_count(); ++t) {
                const Task task = toy.tasks[static_cast<size_t>(t)];
                own[task].push_back(quality(task, run.table.metric.at(task)));
                std::vector<double> cross;
                for (int src = 0; src < toy.task_count(); ++src)
                    if (src != t) cross.push_back(quality(task, swaps[static_cast<size_t>(src)].metric.at(task)));
                cross_med[task].push_back(median_of(cross));
            }
        }
        bool specialty = true;
        std::string detail = std::string("identity swap bitwise: ") + (identity_ok ? "yes" : "no");
        for (Task t : toy.tasks) {
            const double o = median_of(own[t]), c = median_of(cross_med[t]);
            if (o < c) specialty = false;
            detail += std::string(", ") + task_name(t) + " own " + fmt(o) + " vs cross " + fmt(c);
        }
        report(6, "own prompts beat swapped-in prompts", identity_ok && specialty, detail);
    });

    // ----------------------------------------------------------------- 7
    criterion(7, "fixed fusion beats no fusion", [&] {
        if (prompted.size() != 3) {
            report(7, "fixed fusion beats no fusion", false, "missing trained models");
            return;
        }
        ModelConfig none_fusion = toy;
        none_fusion.fusion.mode = FusionMode::none;
        std::vector<double> loss_fixed, loss_none;
        for (size_t i = 0; i < prompted.size(); ++i) loss_fixed.push_back(prompted[i].table.total_loss);
        for (uint64_t seed : {0, 1, 2}) {
            auto r = run_protocol(none_fusion, seed, train_ds, val_ds);
            loss_none.push_back(r.table.total_loss);
        }
        const double mf = median_of(loss_fixed), mn = median_of(loss_none);
        report(7, "fixed fusion beats no fusion", mf < mn,
               "median val loss fixed " + fmt(mf) + " < none " + fmt(mn));
    });

    fs::remove_all(data_root);
    std::printf("acceptance total wall time: %.1f s\n", seconds_since(wall0));
    if (g_failures) {
        std::printf("%d criterion(s) FAILED\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
