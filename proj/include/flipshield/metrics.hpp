#ifndef FLIPSHIELD_METRICS_HPP
#define FLIPSHIELD_METRICS_HPP

#include <cstddef>
#include <utility>
#include <vector>

#include "flipshield/mitigation.hpp"
#include "flipshield/model.hpp"

namespace flipshield {

/// One annotated object: normalized box + class.
struct GtObject {
    float x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    int class_id = 0;
};

/// All annotations of one image.
using GroundTruth = std::vector<GtObject>;

/// Intersection-over-union of two boxes given as (x_min, y_min, x_max, y_max).
/// NaN coordinates score 0 (corrupt detections never match).
float iou(float ax0, float ay0, float ax1, float ay1, float bx0, float by0, float bx1,
          float by1);
float iou(const Detection& d, const GtObject& g);

struct MatchOutcome {
    std::size_t tp = 0, fp = 0, fn = 0;
    /// (index into preds, index into gts) for each true positive.
    std::vector<std::pair<std::size_t, std::size_t>> matches;
};

/// Greedy matching: predictions with score >= score_threshold, in descending
/// score order (ties by input order), each taking the highest-IoU unmatched
/// same-class ground truth with IoU >= iou_threshold.
MatchOutcome match_detections(const std::vector<Detection>& preds, const GroundTruth& gts,
                              float iou_threshold = 0.5f, float score_threshold = 0.5f);

struct IvmodReport {
    double sdc_rate = 0.0;
    double due_rate = 0.0;
    double fd_rate = 0.0;
    std::size_t n = 0;
};

/// Per-inference comparison against the paired golden outcome:
///   sdc  = FP or FN count differs from golden
///   due  = raw outputs contained NaN/Inf
///   fd   = sdc OR due, per inference, then averaged.
IvmodReport ivmod(const std::vector<MatchOutcome>& golden,
                  const std::vector<std::pair<MatchOutcome, bool>>& faulty);

struct Ap50Result {
    double value = 0.0;
    bool no_ground_truth = false; // set when the gt pool is empty (value forced to 0)
};

/// Area under the precision-recall curve at the given IoU threshold,
/// predictions pooled across images, all-point interpolation, equal scores
/// entering as one group.
Ap50Result ap50(const std::vector<std::vector<Detection>>& preds_per_image,
                const std::vector<GroundTruth>& gts_per_image, float iou_threshold = 0.5f);

struct TraceDelta {
    int layer_id = 0;
    float mean_delta = 0;
    float var_delta = 0;
    /// Faulty stats exited the profiled bounds (or went non-finite).
    bool bound_violation = false;
};

/// Pairwise per-layer trace comparison; `bounds` (optional) drives the
/// violation flags.
std::vector<TraceDelta> compare_traces(const LayerTrace& golden, const LayerTrace& faulty,
                                       const BoundsProfile* bounds = nullptr);

} // namespace flipshield

#endif // FLIPSHIELD_METRICS_HPP
