#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mtprompt/losses.hpp"
#include "mtprompt/model.hpp"
#include "mtprompt/parallel.hpp"

namespace mtp {

inline double poly_lr(int64_t iter, const TrainConfig& cfg) {
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.iterations);
    return cfg.lr * std::pow(frac, cfg.poly_power);
}

// Adam with bias correction and decoupled weight decay (applied as a direct
// multiplicative shrink before the moment update).
template <typename T>
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t step = 0;
    std::vector<std::vector<T>> m, v;
};

template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& st, double lr,
               double weight_decay) {
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(static_cast<size_t>(params[i].second.numel()), T(0));
            st.v[i].assign(static_cast<size_t>(params[i].second.numel()), T(0));
        }
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = params[i].second;
        auto g = p.grad();
        T gsum = T(0);
        for (size_t j = 0; j < g.size(); ++j) gsum += g[j];
        if (!std::isfinite(static_cast<double>(gsum)))
            throw std::runtime_error("adam_step: non-finite gradient in tensor '" + params[i].first + "'");
        auto d = p.data();
        T* __restrict mp = st.m[i].data();
        T* __restrict vp = st.v[i].data();
        const T* __restrict gp = g.data();
        T* __restrict dp = d.data();
        const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
        const T lrT = static_cast<T>(lr);
        const T wdshrink = static_cast<T>(1.0 - lr * weight_decay);
        const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(st.eps);
        const size_t count = d.size();
        for (size_t j = 0; j < count; ++j) {
            dp[j] *= wdshrink;
            mp[j] = b1 * mp[j] + (T(1) - b1) * gp[j];
            vp[j] = b2 * vp[j] + (T(1) - b2) * gp[j] * gp[j];
            const T mhat = mp[j] * inv_bc1;
            const T vhat = vp[j] * inv_bc2;
            dp[j] -= lrT * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

inline Sample hflip(const Sample& s) {
    const int h = s.image.dim(0), w = s.image.dim(1);
    Sample f;
    f.image = Tensor<float>::zeros({h, w, 3});
    f.semseg = Tensor<int32_t>::zeros({h, w});
    f.depth = Tensor<float>::zeros({h, w});
    f.normal = Tensor<float>::zeros({h, w, 3});
    f.edge = Tensor<uint8_t>::zeros({h, w});
    if (s.saliency.defined()) f.saliency = Tensor<uint8_t>::zeros({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int sx = w - 1 - x;
            for (int c = 0; c < 3; ++c) f.image.at(y, x, c) = s.image.at(y, sx, c);
            f.semseg.at(y * w + x) = s.semseg.at(y * w + sx);
            f.depth.at(y, x) = s.depth.at(y, sx);
            f.normal.at(y, x, 0) = -s.normal.at(y, sx, 0); // x component flips sign
            f.normal.at(y, x, 1) = s.normal.at(y, sx, 1);
            f.normal.at(y, x, 2) = s.normal.at(y, sx, 2);
            f.edge.at(y * w + x) = s.edge.at(y * w + sx);
            if (s.saliency.defined()) f.saliency.at(y * w + x) = s.saliency.at(y * w + sx);
        }
    return f;
}

struct HistoryRow {
    int64_t iteration; // 1-based
    double lr;
    double total;
    std::vector<double> per_task; // unweighted, task order of the config
};

template <typename T>
struct TrainResult {
    std::vector<HistoryRow> history;
};

// One optimization run. Per iteration the batch samples form independent
// units: each unit forwards and backwards against its own deep copy of the
// weights, and the per-unit gradients are reduced into the master weights in
// sample order. That keeps histories bit-identical for every thread count.
template <typename T>
TrainResult<T> train(Model<T>& model, const Dataset& train_ds, const TrainConfig& tc) {
    if (train_ds.samples.empty()) throw ContractError("train: empty dataset");
    const ModelConfig& cfg = model.cfg;
    const int batch = tc.batch_size;
    const int threads = tc.effective_threads();

    uint64_t sb = tc.seed ^ 0x746261746368ull; // batch stream
    uint64_t sa = tc.seed ^ 0x74666c6970ull;   // augmentation stream
    Rng rng_batch(splitmix64(sb));
    Rng rng_aug(splitmix64(sa));

    auto master = model.params();
    AdamState<T> opt;
    TrainResult<T> result;

    std::vector<Model<T>> unit_models(static_cast<size_t>(batch));
    std::vector<std::vector<std::pair<std::string, Tensor<T>>>> unit_params(static_cast<size_t>(batch));
    std::vector<TotalLoss<T>> unit_losses(static_cast<size_t>(batch));
    std::vector<int> indices(static_cast<size_t>(batch));
    std::vector<uint8_t> flips(static_cast<size_t>(batch));

    for (int64_t iter = 0; iter < tc.iterations; ++iter) {
        const double lr = poly_lr(iter, tc);
        for (int i = 0; i < batch; ++i) {
            indices[static_cast<size_t>(i)] =
                static_cast<int>(rng_batch.next_below(train_ds.samples.size()));
            flips[static_cast<size_t>(i)] = rng_aug.bernoulli(tc.flip_prob) ? 1 : 0;
        }

        parallel_for(batch, threads, [&](int i) {
            Model<T> local = model.clone();
            unit_params[static_cast<size_t>(i)] = local.params();
            const Sample& base = train_ds.samples[static_cast<size_t>(indices[static_cast<size_t>(i)])];
            Sample flipped;
            const Sample& s = flips[static_cast<size_t>(i)] ? (flipped = hflip(base)) : base;
            Tape<T> tape;
            Tensor<T> image = s.image.template cast<T>();
            auto fwd = forward_sample(tape, local, image);
            auto tl = total_loss(tape, fwd.predictions, s, cfg);
            if (!std::isfinite(static_cast<double>(tl.value.item())))
                throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(iter));
            tape.backward(tl.value, T(1) / static_cast<T>(batch));
            unit_losses[static_cast<size_t>(i)] = std::move(tl);
            unit_models[static_cast<size_t>(i)] = std::move(local);
        });

        for (int i = 0; i < batch; ++i) {
            auto& up = unit_params[static_cast<size_t>(i)];
            for (size_t k = 0; k < master.size(); ++k) {
                if (!up[k].second.grad_allocated()) continue;
                auto src = up[k].second.grad_view();
                auto dst = master[k].second.grad();
                for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
        }

        adam_step(master, opt, lr, tc.weight_decay);
        for (auto& [name, p] : master) p.zero_grad();

        HistoryRow row;
        row.iteration = iter + 1;
        row.lr = lr;
        row.total = 0;
        row.per_task.assign(cfg.tasks.size(), 0.0);
        for (int i = 0; i < batch; ++i) {
            row.total += static_cast<double>(unit_losses[static_cast<size_t>(i)].value.item()) / batch;
            for (size_t t = 0; t < cfg.tasks.size(); ++t)
                row.per_task[t] += unit_losses[static_cast<size_t>(i)].per_task.at(cfg.tasks[t]) / batch;
        }
        result.history.push_back(std::move(row));
    }
    return result;
}

inline std::string history_csv(const std::vector<HistoryRow>& rows, const ModelConfig& cfg) {
    std::string out = "iteration,lr,total_loss";
    for (Task t : cfg.tasks) out += std::string(",") + task_name(t) + "_loss";
    out += "\n";
    char buf[64];
    for (const auto& r : rows) {
        out += std::to_string(r.iteration);
        std::snprintf(buf, sizeof buf, ",%.12g,%.12g", r.lr, r.total);
        out += buf;
        for (double v : r.per_task) {
            std::snprintf(buf, sizeof buf, ",%.12g", v);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

inline void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows,
                              const ModelConfig& cfg) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("history: cannot write '" + path + "'");
    f << history_csv(rows, cfg);
}

} // namespace mtp
