#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "mtprompt/losses.hpp"
#include "mtprompt/metrics.hpp"
#include "mtprompt/model.hpp"
#include "mtprompt/parallel.hpp"

// Dataset evaluation: one headline metric per task (semseg -> mIoU, depth ->
// RMSE, normal -> mErr, edge -> odsF, saliency -> maxF) plus the weighted
// validation loss. Per-sample statistics are accumulated in sample order, so
// results are identical for every thread count.

namespace mtp {

inline const char* metric_name(Task t) {
    switch (t) {
        case Task::semseg: return "miou";
        case Task::depth: return "rmse";
        case Task::normal: return "merr";
        case Task::edge: return "odsf";
        case Task::saliency: return "maxf";
    }
    return "?";
}

// true when larger values of the task's headline metric are better
inline bool metric_higher_better(Task t) {
    return t == Task::semseg || t == Task::edge || t == Task::saliency;
}

struct MetricTable {
    std::map<Task, double> metric;
    std::map<Task, double> loss; // unweighted per-task means
    double total_loss = 0;       // weighted, mean over samples

    std::string csv(const std::string& seed_label = "") const {
        std::string out = seed_label.empty() ? "task,metric,value\n" : "task,metric,value,seed\n";
        char buf[128];
        for (const auto& [task, v] : metric) {
            std::snprintf(buf, sizeof buf, "%s,%s,%.9g%s%s\n", task_name(task), metric_name(task), v,
                          seed_label.empty() ? "" : ",", seed_label.c_str());
            out += buf;
        }
        for (const auto& [task, v] : loss) {
            std::snprintf(buf, sizeof buf, "%s,loss,%.9g%s%s\n", task_name(task), v,
                          seed_label.empty() ? "" : ",", seed_label.c_str());
            out += buf;
        }
        std::snprintf(buf, sizeof buf, "all,total_loss,%.9g%s%s\n", total_loss,
                      seed_label.empty() ? "" : ",", seed_label.c_str());
        out += buf;
        return out;
    }
};

template <typename T>
struct SamplePredictions {
    std::vector<Tensor<T>> maps; // per task, H x W x C
    std::map<Task, double> per_task_loss;
    double total_loss = 0;
};

template <typename T>
SamplePredictions<T> predict_sample(const Model<T>& model, const Sample& s, const PromptBank<T>* bank = nullptr) {
    Tape<T> tape;
    tape.set_recording(false);
    Tensor<T> image = s.image.template cast<T>();
    auto fwd = bank ? forward_sample_with_prompts(tape, model, *bank, image)
                    : forward_sample(tape, model, image);
    SamplePredictions<T> out;
    auto tl = total_loss(tape, fwd.predictions, s, model.cfg);
    out.per_task_loss = tl.per_task;
    out.total_loss = static_cast<double>(tl.value.item());
    out.maps = std::move(fwd.predictions);
    return out;
}

template <typename T>
MetricTable evaluate_predictions(const std::vector<SamplePredictions<T>>& preds, const Dataset& ds,
                                 const ModelConfig& cfg) {
    MiouAccum seg(cfg.classes, cfg.ignore_index);
    RmseAccum dep;
    AngularAccum ang;
    FSweepAccum edge = make_odsf_accum();
    FSweepAccum sal = make_maxf_accum();
    MetricTable table;
    std::map<Task, double> loss_sums;

    for (size_t i = 0; i < preds.size(); ++i) {
        const Sample& gt = ds.samples[i];
        const int h = gt.image.dim(0), w = gt.image.dim(1);
        const size_t pixels = static_cast<size_t>(h) * w;
        for (size_t t = 0; t < cfg.tasks.size(); ++t) {
            const Tensor<T>& map = preds[i].maps[t];
            switch (cfg.tasks[t]) {
                case Task::semseg: {
                    std::vector<int32_t> ids(pixels);
                    const int k = map.dim(2);
                    for (size_t p = 0; p < pixels; ++p) {
                        const T* row = map.ptr() + p * static_cast<size_t>(k);
                        int best = 0;
                        for (int c = 1; c < k; ++c)
                            if (row[c] > row[best]) best = c;
                        ids[p] = best;
                    }
                    seg.add(ids, std::span<const int32_t>(gt.semseg.ptr(), pixels));
                    break;
                }
                case Task::depth: {
                    std::vector<float> d(pixels);
                    for (size_t p = 0; p < pixels; ++p) d[p] = static_cast<float>(map.ptr()[p]);
                    dep.add(d, std::span<const float>(gt.depth.ptr(), pixels));
                    break;
                }
                case Task::normal: {
                    std::vector<float> n(pixels * 3);
                    for (size_t p = 0; p < pixels * 3; ++p) n[p] = static_cast<float>(map.ptr()[p]);
                    const auto mask = normal_valid_mask(gt.edge);
                    ang.add(n, std::span<const float>(gt.normal.ptr(), pixels * 3), mask);
                    break;
                }
                case Task::edge: {
                    std::vector<float> prob(pixels);
                    for (size_t p = 0; p < pixels; ++p)
                        prob[p] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(map.ptr()[p]))));
                    edge.add(prob, std::span<const uint8_t>(gt.edge.ptr(), pixels));
                    break;
                }
                case Task::saliency: {
                    std::vector<float> prob(pixels);
                    for (size_t p = 0; p < pixels; ++p)
                        prob[p] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(map.ptr()[p]))));
                    sal.add(prob, std::span<const uint8_t>(gt.saliency.ptr(), pixels));
                    break;
                }
            }
        }
        table.total_loss += preds[i].total_loss / static_cast<double>(preds.size());
        for (const auto& [task, v] : preds[i].per_task_loss)
            loss_sums[task] += v / static_cast<double>(preds.size());
    }
    for (Task t : cfg.tasks) {
        table.loss[t] = loss_sums[t];
        switch (t) {
            case Task::semseg: table.metric[t] = seg.value(); break;
            case Task::depth: table.metric[t] = dep.value(); break;
            case Task::normal: table.metric[t] = ang.value(); break;
            case Task::edge: table.metric[t] = edge.value(); break;
            case Task::saliency: table.metric[t] = sal.value(); break;
        }
    }
    return table;
}

template <typename T>
MetricTable evaluate(const Model<T>& model, const Dataset& ds, int threads,
                     const PromptBank<T>* bank = nullptr) {
    std::vector<SamplePredictions<T>> preds(ds.samples.size());
    parallel_for(static_cast<int>(ds.samples.size()), threads, [&](int i) {
        preds[static_cast<size_t>(i)] = predict_sample(model, ds.samples[static_cast<size_t>(i)], bank);
    });
    return evaluate_predictions(preds, ds, model.cfg);
}

} // namespace mtp
