#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "spda/instances.hpp"

namespace spda {

// |a ∩ b| / |a ∪ b|; both-empty is defined as 0.
double mask_iou(const Mask& a, const Mask& b);

struct PredInstance {
    int image_id = 0;
    int category = 1;
    double score = 0.0;
    Mask mask;
    BoxF box;
};

struct GtInstance {
    int image_id = 0;
    int category = 1;
    Mask mask;
    BoxF box;
};

struct ApResult {
    double ap = 0.0;
    bool undefined = false;  // no ground truth and no predictions
};

// COCO-style AP at one IoU threshold: predictions greedily matched in
// descending score order, each GT used at most once, 101-point interpolation.
// Ties on IoU break toward the lower GT index.
ApResult average_precision(std::vector<PredInstance> preds, const std::vector<GtInstance>& gts,
                           double iou_thresh, bool use_box_iou = false);

struct EvalReport {
    double mAP = 0.0;   // mean over IoU 0.50:0.05:0.95
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::map<int, std::array<double, 3>> per_class;  // class -> {mAP, AP50, AP75}
    int n_images = 0, n_gt = 0, n_pred = 0;
};

// class_agnostic merges all categories before matching. Throws if predictions
// reference image ids absent from the ground-truth set.
EvalReport evaluate(const std::vector<PredInstance>& preds, const std::vector<GtInstance>& gts,
                    bool class_agnostic, bool use_box_iou = false);

std::string eval_report_table(const EvalReport& r);
std::string eval_report_json(const EvalReport& r);

inline const std::vector<double>& coco_iou_thresholds() {
    static const std::vector<double> t = {0.50, 0.55, 0.60, 0.65, 0.70,
                                          0.75, 0.80, 0.85, 0.90, 0.95};
    return t;
}

}  // namespace spda
