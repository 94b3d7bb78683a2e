#pragma once

// Training loss (BCE + soft Jaccard) and the five segmentation metrics,
// plus confusion counting and corpus aggregation.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "lssf/autodiff.hpp"
#include "lssf/ops.hpp"
#include "lssf/tensor.hpp"

namespace lssf {

struct LossConfig {
    double bce_weight = 1.0;
    double jaccard_weight = 1.0;
    double smooth_eps = 1.0;
    double prob_clamp = 1e-7;
};

// mean over all pixels of -[g ln p + (1-g) ln(1-p)], p clamped away from 0/1
template <typename T>
Var bce_loss(Tape<T>& tape, Var p, Var g, T prob_clamp = T(1e-7)) {
    detail::require(tape.val(p).shape == tape.val(g).shape, "bce_loss: shape mismatch");
    detail::require(prob_clamp > 0 && prob_clamp < T(0.5), "bce_loss: prob_clamp must lie in (0, 0.5)");
    Var pc = clamp(tape, p, prob_clamp, T(1) - prob_clamp);
    Var pos = mul(tape, g, log_op(tape, pc));
    Var neg_term = mul(tape, add_const(tape, neg(tape, g), T(1)), log_op(tape, add_const(tape, neg(tape, pc), T(1))));
    return neg(tape, mean_all(tape, add(tape, pos, neg_term)));
}

// soft IoU loss: 1 - (sum pg + eps) / (sum p + sum g - sum pg + eps)
template <typename T>
Var jaccard_loss(Tape<T>& tape, Var p, Var g, T eps = T(1)) {
    detail::require(tape.val(p).shape == tape.val(g).shape, "jaccard_loss: shape mismatch");
    detail::require(eps > 0, "jaccard_loss: eps must be positive");
    Var inter = sum_all(tape, mul(tape, p, g));
    Var uni = sub(tape, add(tape, sum_all(tape, p), sum_all(tape, g)), inter);
    Var iou = div(tape, add_const(tape, inter, eps), add_const(tape, uni, eps));
    return add_const(tape, neg(tape, iou), T(1));
}

template <typename T>
Var combined_loss(Tape<T>& tape, Var p, Var g, const LossConfig& cfg = {}) {
    detail::require(cfg.bce_weight >= 0 && cfg.jaccard_weight >= 0 && cfg.bce_weight + cfg.jaccard_weight > 0,
                    "combined_loss: weights must be nonnegative and not both zero");
    Var total{};
    if (cfg.bce_weight > 0)
        total = mul_const(tape, bce_loss(tape, p, g, T(cfg.prob_clamp)), T(cfg.bce_weight));
    if (cfg.jaccard_weight > 0) {
        Var j = mul_const(tape, jaccard_loss(tape, p, g, T(cfg.smooth_eps)), T(cfg.jaccard_weight));
        total = total.valid() ? add(tape, total, j) : j;
    }
    return total;
}

struct ConfusionCounts {
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    int64_t total() const { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

inline ConfusionCounts confusion(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt) {
    if (pred.shape != gt.shape) throw std::invalid_argument("confusion: shape mismatch");
    ConfusionCounts c;
    for (int64_t i = 0; i < pred.size(); ++i) {
        uint8_t p = pred[i], g = gt[i];
        if (p > 1 || g > 1) throw std::invalid_argument("confusion: masks must be binary");
        if (p && g)
            ++c.tp;
        else if (!p && !g)
            ++c.tn;
        else if (p)
            ++c.fp;
        else
            ++c.fn;
    }
    return c;
}

struct Metrics {
    double accuracy = 1.0;
    double sensitivity = 1.0;
    double jaccard = 1.0;
    double dice = 1.0;
    double specificity = 1.0;
    bool degenerate = false;  // some denominator was empty and defaulted to 1
};

// Degenerate denominators (e.g. no positives anywhere) score 1.0 and raise
// the degenerate flag.
inline Metrics metrics(const ConfusionCounts& c) {
    Metrics m;
    auto ratio = [&m](int64_t num, int64_t den) {
        if (den == 0) {
            m.degenerate = true;
            return 1.0;
        }
        return double(num) / double(den);
    };
    m.accuracy = ratio(c.tp + c.tn, c.total());
    m.sensitivity = ratio(c.tp, c.tp + c.fn);
    m.jaccard = ratio(c.tp, c.tp + c.fp + c.fn);
    m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    m.specificity = ratio(c.tn, c.tn + c.fp);
    return m;
}

// Per-image averaging (the default reporting mode).
inline Metrics aggregate_mean(const std::vector<Metrics>& per_image) {
    if (per_image.empty()) throw std::invalid_argument("aggregate_mean: empty corpus");
    Metrics out;
    out.accuracy = out.sensitivity = out.jaccard = out.dice = out.specificity = 0.0;
    for (const auto& m : per_image) {
        out.accuracy += m.accuracy;
        out.sensitivity += m.sensitivity;
        out.jaccard += m.jaccard;
        out.dice += m.dice;
        out.specificity += m.specificity;
        out.degenerate = out.degenerate || m.degenerate;
    }
    double n = double(per_image.size());
    out.accuracy /= n;
    out.sensitivity /= n;
    out.jaccard /= n;
    out.dice /= n;
    out.specificity /= n;
    return out;
}

// Micro averaging: pool the confusion tables, then score once.
inline Metrics aggregate_micro(const std::vector<ConfusionCounts>& per_image) {
    if (per_image.empty()) throw std::invalid_argument("aggregate_micro: empty corpus");
    ConfusionCounts sum;
    for (const auto& c : per_image) sum += c;
    return metrics(sum);
}

struct MetricsReport {
    Metrics m;
    double loss_bce = 0.0;
    double loss_jaccard = 0.0;
    int n_images = 0;

    nlohmann::json to_json() const {
        return {{"jaccard", m.jaccard},
                {"dice", m.dice},
                {"accuracy", m.accuracy},
                {"sensitivity", m.sensitivity},
                {"specificity", m.specificity},
                {"degenerate", m.degenerate},
                {"loss_bce", loss_bce},
                {"loss_jaccard", loss_jaccard},
                {"n_images", n_images}};
    }
};

}  // namespace lssf
