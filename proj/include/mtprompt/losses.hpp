#pragma once

#include <map>
#include <vector>

#include "mtprompt/config.hpp"
#include "mtprompt/data.hpp"
#include "mtprompt/loss_ops.hpp"
#include "mtprompt/model.hpp"

// Weighted multi-task objective: semantic maps take softmax cross-entropy,
// depth and normals take L1, edge/saliency take binary cross-entropy on
// logits. The normal losses skip pixels whose finite-difference stencil
// crosses an object boundary (the edge band), where depth-derived normals
// are undefined.

namespace mtp {

template <typename T>
struct TotalLoss {
    Tensor<T> value;                 // scalar on the tape
    std::map<Task, double> per_task; // unweighted per-task values
};

inline std::vector<uint8_t> normal_valid_mask(const Tensor<uint8_t>& edge) {
    std::vector<uint8_t> mask(static_cast<size_t>(edge.numel()));
    for (int64_t i = 0; i < edge.numel(); ++i) mask[static_cast<size_t>(i)] = edge.at(static_cast<int>(i)) ? 0 : 1;
    return mask;
}

template <typename T>
Tensor<T> task_loss(Tape<T>& tape, Task task, const Tensor<T>& pred, const Sample& gt, int ignore_index) {
    const int h = pred.dim(0), w = pred.dim(1), c = pred.dim(2);
    switch (task) {
        case Task::semseg: {
            auto flat = reshape(tape, pred, {h * w, c});
            return cross_entropy_map(tape, flat, std::span<const int32_t>(gt.semseg.ptr(), static_cast<size_t>(h) * w),
                                     ignore_index);
        }
        case Task::depth: {
            Tensor<T> target = gt.depth.template cast<T>();
            return l1_map(tape, pred, reshape(tape, target, {h, w, 1}));
        }
        case Task::normal: {
            Tensor<T> target = gt.normal.template cast<T>();
            const auto mask = normal_valid_mask(gt.edge);
            return l1_map(tape, pred, target, mask);
        }
        case Task::edge:
            return bce_logits_map(tape, pred, std::span<const uint8_t>(gt.edge.ptr(), static_cast<size_t>(h) * w));
        case Task::saliency: {
            if (!gt.saliency.defined()) throw ContractError("task_loss: sample lacks saliency ground truth");
            return bce_logits_map(tape, pred,
                                  std::span<const uint8_t>(gt.saliency.ptr(), static_cast<size_t>(h) * w));
        }
    }
    throw ConfigError("task_loss: unknown task");
}

// Weighted sum over the configured task set; every configured task must have
// both a prediction and ground truth.
template <typename T>
TotalLoss<T> total_loss(Tape<T>& tape, const std::vector<Tensor<T>>& preds, const Sample& gt,
                        const ModelConfig& cfg) {
    if (preds.size() != cfg.tasks.size())
        throw ContractError("total_loss: prediction count does not cover the task set");
    TotalLoss<T> out;
    Tensor<T> acc;
    for (size_t t = 0; t < cfg.tasks.size(); ++t) {
        const Task task = cfg.tasks[t];
        auto l = task_loss(tape, task, preds[t], gt, cfg.ignore_index);
        out.per_task[task] = static_cast<double>(l.item());
        auto weighted = scale(tape, l, static_cast<T>(cfg.loss_weights.for_task(task)));
        acc = acc.defined() ? add(tape, acc, weighted) : weighted;
    }
    out.value = acc;
    return out;
}

} // namespace mtp
