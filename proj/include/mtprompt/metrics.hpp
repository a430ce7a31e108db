#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mtprompt/tensor.hpp"

// Evaluation metrics, all computed in double regardless of training
// precision. Accumulator structs aggregate dataset-level statistics with an
// associative merge; the single-map helpers below wrap them for one
// prediction/ground-truth pair.

namespace mtp {

// mean intersection-over-union, averaged over classes present in the ground
// truth; pixels with the ignore index drop out entirely
struct MiouAccum {
    int classes = 0;
    int32_t ignore_index = 255;
    std::vector<int64_t> intersection, pred_count, gt_count;

    explicit MiouAccum(int k = 2, int32_t ignore = 255)
        : classes(k), ignore_index(ignore), intersection(static_cast<size_t>(k), 0),
          pred_count(static_cast<size_t>(k), 0), gt_count(static_cast<size_t>(k), 0) {}

    void add(std::span<const int32_t> pred, std::span<const int32_t> gt) {
        for (size_t i = 0; i < gt.size(); ++i) {
            const int32_t g = gt[i];
            if (g == ignore_index) continue;
            const int32_t p = pred[i];
            ++gt_count[static_cast<size_t>(g)];
            ++pred_count[static_cast<size_t>(p)];
            if (p == g) ++intersection[static_cast<size_t>(g)];
        }
    }

    double value() const {
        double sum = 0;
        int present = 0;
        for (int c = 0; c < classes; ++c) {
            if (gt_count[static_cast<size_t>(c)] == 0) continue;
            const int64_t uni = gt_count[static_cast<size_t>(c)] + pred_count[static_cast<size_t>(c)] -
                                intersection[static_cast<size_t>(c)];
            sum += uni == 0 ? 0.0 : static_cast<double>(intersection[static_cast<size_t>(c)]) / static_cast<double>(uni);
            ++present;
        }
        return present == 0 ? 0.0 : sum / present;
    }
};

struct RmseAccum {
    double sq = 0;
    int64_t n = 0;
    void add(std::span<const float> pred, std::span<const float> gt, std::span<const uint8_t> mask = {}) {
        for (size_t i = 0; i < gt.size(); ++i) {
            if (!mask.empty() && !mask[i]) continue;
            const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
            sq += d * d;
            ++n;
        }
    }
    double value() const {
        if (n == 0) throw ContractError("rmse: empty mask");
        return std::sqrt(sq / static_cast<double>(n));
    }
};

// mean angular error in degrees; predictions are unit-normalized with an
// epsilon guard, ground truth is assumed unit length
struct AngularAccum {
    double sum = 0;
    int64_t n = 0;
    void add(std::span<const float> pred3, std::span<const float> gt3, std::span<const uint8_t> mask = {}) {
        const size_t pixels = gt3.size() / 3;
        for (size_t i = 0; i < pixels; ++i) {
            if (!mask.empty() && !mask[i]) continue;
            const double px = pred3[3 * i], py = pred3[3 * i + 1], pz = pred3[3 * i + 2];
            const double len = std::max(std::sqrt(px * px + py * py + pz * pz), 1e-8);
            double dot = (px * gt3[3 * i] + py * gt3[3 * i + 1] + pz * gt3[3 * i + 2]) / len;
            dot = std::min(1.0, std::max(-1.0, dot));
            sum += std::acos(dot) * 180.0 / M_PI;
            ++n;
        }
    }
    double value() const {
        if (n == 0) throw ContractError("mean_angular_error: empty mask");
        return sum / static_cast<double>(n);
    }
};

// Threshold-sweep F-measure. maxF uses 255 uniform thresholds and beta^2 =
// 0.3 (saliency convention); the simplified odsF uses 99 shared thresholds,
// pixel-exact matching and F1, aggregated over the whole dataset.
struct FSweepAccum {
    int nthr;
    double beta2;
    std::vector<int64_t> tp, fp, fn;
    bool saw_positive = false;

    explicit FSweepAccum(int thresholds, double b2)
        : nthr(thresholds), beta2(b2), tp(static_cast<size_t>(thresholds), 0),
          fp(static_cast<size_t>(thresholds), 0), fn(static_cast<size_t>(thresholds), 0) {}

    double threshold(int j) const { return static_cast<double>(j + 1) / (nthr + 1); }

    void add(std::span<const float> pred, std::span<const uint8_t> gt) {
        for (size_t i = 0; i < gt.size(); ++i)
            if (gt[i]) saw_positive = true;
        for (int j = 0; j < nthr; ++j) {
            const double t = threshold(j);
            int64_t vtp = 0, vfp = 0, vfn = 0;
            for (size_t i = 0; i < gt.size(); ++i) {
                const bool p = pred[i] > t;
                if (p && gt[i]) ++vtp;
                else if (p) ++vfp;
                else if (gt[i]) ++vfn;
            }
            tp[static_cast<size_t>(j)] += vtp;
            fp[static_cast<size_t>(j)] += vfp;
            fn[static_cast<size_t>(j)] += vfn;
        }
    }

    // max over thresholds of F_beta; all-negative ground truth yields 0
    double value(bool* undefined_flag = nullptr) const {
        if (undefined_flag) *undefined_flag = !saw_positive;
        if (!saw_positive) return 0.0;
        double best = 0;
        for (int j = 0; j < nthr; ++j) {
            const int64_t vtp = tp[static_cast<size_t>(j)];
            const int64_t denom_p = vtp + fp[static_cast<size_t>(j)];
            const int64_t denom_r = vtp + fn[static_cast<size_t>(j)];
            if (denom_p == 0 || denom_r == 0) continue;
            const double p = static_cast<double>(vtp) / static_cast<double>(denom_p);
            const double r = static_cast<double>(vtp) / static_cast<double>(denom_r);
            if (p + r == 0) continue;
            const double f = (1.0 + beta2) * p * r / (beta2 * p + r);
            best = std::max(best, f);
        }
        return best;
    }
};

inline FSweepAccum make_maxf_accum() { return FSweepAccum(255, 0.3); }
inline FSweepAccum make_odsf_accum() { return FSweepAccum(99, 1.0); }

// single-instance wrappers

inline double miou(std::span<const int32_t> pred, std::span<const int32_t> gt, int classes,
                   int32_t ignore_index = 255) {
    MiouAccum a(classes, ignore_index);
    a.add(pred, gt);
    return a.value();
}

inline double rmse(std::span<const float> pred, std::span<const float> gt,
                   std::span<const uint8_t> mask = {}) {
    RmseAccum a;
    a.add(pred, gt, mask);
    return a.value();
}

inline double mean_angular_error(std::span<const float> pred3, std::span<const float> gt3,
                                 std::span<const uint8_t> mask = {}) {
    AngularAccum a;
    a.add(pred3, gt3, mask);
    return a.value();
}

inline double max_f(std::span<const float> pred, std::span<const uint8_t> gt, bool* undefined_flag = nullptr) {
    FSweepAccum a = make_maxf_accum();
    a.add(pred, gt);
    return a.value(undefined_flag);
}

inline double ods_f(const std::vector<std::span<const float>>& preds,
                    const std::vector<std::span<const uint8_t>>& gts) {
    FSweepAccum a = make_odsf_accum();
    for (size_t i = 0; i < preds.size(); ++i) a.add(preds[i], gts[i]);
    return a.value();
}

} // namespace mtp
