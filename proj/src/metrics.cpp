#include "flipshield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flipshield/errors.hpp"

namespace flipshield {

float iou(float ax0, float ay0, float ax1, float ay1, float bx0, float by0, float bx1,
          float by1) {
    const float coords[] = {ax0, ay0, ax1, ay1, bx0, by0, bx1, by1};
    for (float c : coords) {
        if (!std::isfinite(c)) return 0.0f; // corrupt box: zero overlap
    }
    const float ix0 = std::max(ax0, bx0);
    const float iy0 = std::max(ay0, by0);
    const float ix1 = std::min(ax1, bx1);
    const float iy1 = std::min(ay1, by1);
    if (ix1 <= ix0 || iy1 <= iy0) return 0.0f;
    const double inter = static_cast<double>(ix1 - ix0) * static_cast<double>(iy1 - iy0);
    const double area_a = static_cast<double>(ax1 - ax0) * static_cast<double>(ay1 - ay0);
    const double area_b = static_cast<double>(bx1 - bx0) * static_cast<double>(by1 - by0);
    const double uni = area_a + area_b - inter;
    if (uni <= 0.0) return 0.0f;
    return static_cast<float>(inter / uni);
}

float iou(const Detection& d, const GtObject& g) {
    return iou(d.x_min, d.y_min, d.x_max, d.y_max, g.x_min, g.y_min, g.x_max, g.y_max);
}

MatchOutcome match_detections(const std::vector<Detection>& preds, const GroundTruth& gts,
                              float iou_threshold, float score_threshold) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].score >= score_threshold) order.push_back(i); // NaN scores fail
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds[a].score > preds[b].score;
    });

    MatchOutcome out;
    std::vector<bool> taken(gts.size(), false);
    for (std::size_t i : order) {
        float best_iou = 0.0f;
        std::size_t best_j = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (taken[j] || gts[j].class_id != preds[i].class_id) continue;
            const float v = iou(preds[i], gts[j]);
            if (v >= iou_threshold && v > best_iou) {
                best_iou = v;
                best_j = j;
            }
        }
        if (best_j < gts.size()) {
            taken[best_j] = true;
            out.matches.emplace_back(i, best_j);
            ++out.tp;
        } else {
            ++out.fp;
        }
    }
    out.fn = gts.size() - out.tp;
    return out;
}

IvmodReport ivmod(const std::vector<MatchOutcome>& golden,
                  const std::vector<std::pair<MatchOutcome, bool>>& faulty) {
    if (golden.size() != faulty.size()) {
        throw PairingError("ivmod needs equal-length golden/faulty lists, got " +
                           std::to_string(golden.size()) + " vs " +
                           std::to_string(faulty.size()));
    }
    IvmodReport r;
    r.n = golden.size();
    if (r.n == 0) return r;
    std::size_t sdc = 0, due = 0, fd = 0;
    for (std::size_t i = 0; i < r.n; ++i) {
        const bool is_sdc = faulty[i].first.fp != golden[i].fp ||
                            faulty[i].first.fn != golden[i].fn;
        const bool is_due = faulty[i].second;
        sdc += is_sdc;
        due += is_due;
        fd += (is_sdc || is_due);
    }
    r.sdc_rate = static_cast<double>(sdc) / static_cast<double>(r.n);
    r.due_rate = static_cast<double>(due) / static_cast<double>(r.n);
    r.fd_rate = static_cast<double>(fd) / static_cast<double>(r.n);
    return r;
}

Ap50Result ap50(const std::vector<std::vector<Detection>>& preds_per_image,
                const std::vector<GroundTruth>& gts_per_image, float iou_threshold) {
    if (preds_per_image.size() != gts_per_image.size()) {
        throw PairingError("ap50 needs equal-length prediction/ground-truth lists");
    }
    std::size_t total_gt = 0;
    for (const auto& g : gts_per_image) total_gt += g.size();
    if (total_gt == 0) return {0.0, true};

    struct Pooled {
        float score; // NaN sanitized to -inf so ordering stays strict-weak
        std::size_t img, idx;
    };
    std::vector<Pooled> pool;
    for (std::size_t img = 0; img < preds_per_image.size(); ++img) {
        for (std::size_t idx = 0; idx < preds_per_image[img].size(); ++idx) {
            const float s = preds_per_image[img][idx].score;
            pool.push_back({std::isnan(s) ? -std::numeric_limits<float>::infinity() : s, img,
                            idx});
        }
    }
    std::sort(pool.begin(), pool.end(), [](const Pooled& a, const Pooled& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.img != b.img) return a.img < b.img;
        return a.idx < b.idx;
    });

    std::vector<std::vector<bool>> taken;
    taken.reserve(gts_per_image.size());
    for (const auto& g : gts_per_image) taken.emplace_back(g.size(), false);

    // One PR point per tie group of equal scores.
    std::vector<double> recalls, precisions;
    std::size_t cum_tp = 0, cum_fp = 0;
    for (std::size_t i = 0; i < pool.size();) {
        std::size_t j = i;
        while (j < pool.size() && pool[j].score == pool[i].score) ++j;
        for (std::size_t k = i; k < j; ++k) {
            const Detection& d = preds_per_image[pool[k].img][pool[k].idx];
            const GroundTruth& gts = gts_per_image[pool[k].img];
            auto& flags = taken[pool[k].img];
            float best_iou = 0.0f;
            std::size_t best = gts.size();
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (flags[g] || gts[g].class_id != d.class_id) continue;
                const float v = iou(d, gts[g]);
                if (v >= iou_threshold && v > best_iou) {
                    best_iou = v;
                    best = g;
                }
            }
            if (best < gts.size()) {
                flags[best] = true;
                ++cum_tp;
            } else {
                ++cum_fp;
            }
        }
        recalls.push_back(static_cast<double>(cum_tp) / static_cast<double>(total_gt));
        precisions.push_back(static_cast<double>(cum_tp) /
                             static_cast<double>(cum_tp + cum_fp));
        i = j;
    }

    // All-point interpolation: integrate the precision envelope over recall,
    // walking right-to-left so env carries max precision at recall >= r_i.
    double area = 0.0;
    double env = 0.0;
    for (std::size_t i = precisions.size(); i-- > 0;) {
        env = std::max(env, precisions[i]);
        const double prev_recall = i == 0 ? 0.0 : recalls[i - 1];
        area += (recalls[i] - prev_recall) * env;
    }
    return {area, false};
}

std::vector<TraceDelta> compare_traces(const LayerTrace& golden, const LayerTrace& faulty,
                                       const BoundsProfile* bounds) {
    if (golden.entries.size() != faulty.entries.size()) {
        throw PairingError("trace comparison needs traces from the same registry");
    }
    std::vector<TraceDelta> out;
    out.reserve(golden.entries.size());
    for (std::size_t i = 0; i < golden.entries.size(); ++i) {
        const TraceEntry& g = golden.entries[i];
        const TraceEntry& f = faulty.entries[i];
        if (g.layer_id != f.layer_id) {
            throw PairingError("trace layer_id mismatch at position " + std::to_string(i));
        }
        TraceDelta d;
        d.layer_id = g.layer_id;
        d.mean_delta = f.mean - g.mean;
        d.var_delta = f.variance - g.variance;
        if (bounds && bounds->contains(g.layer_id)) {
            const Bounds b = bounds->at(g.layer_id);
            d.bound_violation = !f.all_finite || f.min < b.lower || f.max > b.upper;
        }
        out.push_back(d);
    }
    return out;
}

} // namespace flipshield
