#include "spda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "spda/errors.hpp"

namespace spda {

double mask_iou(const Mask& a, const Mask& b) {
    if (a.h != b.h || a.w != b.w)
        throw ShapeError("mask_iou: " + std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                         std::to_string(b.h) + "x" + std::to_string(b.w));
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        bool av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += av && bv;
        uni += av || bv;
    }
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

ApResult average_precision(std::vector<PredInstance> preds, const std::vector<GtInstance>& gts,
                           double iou_thresh, bool use_box_iou) {
    if (preds.empty() && gts.empty()) return {0.0, true};
    if (gts.empty()) return {0.0, false};

    std::stable_sort(preds.begin(), preds.end(),
                     [](const PredInstance& a, const PredInstance& b) { return a.score > b.score; });

    std::vector<char> gt_used(gts.size(), 0);
    int n = static_cast<int>(preds.size());
    std::vector<char> is_tp(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        const PredInstance& p = preds[static_cast<size_t>(i)];
        int best = -1;
        double best_iou = 0.0;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (gt_used[j] || gts[j].image_id != p.image_id) continue;
            double iou = use_box_iou ? box_iou(p.box, gts[j].box) : mask_iou(p.mask, gts[j].mask);
            if (iou >= iou_thresh && iou > best_iou) {  // IoU ties keep the lower GT index
                best_iou = iou;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) {
            gt_used[static_cast<size_t>(best)] = 1;
            is_tp[static_cast<size_t>(i)] = 1;
        }
    }

    int n_gt = static_cast<int>(gts.size());
    std::vector<double> recall(static_cast<size_t>(n)), precision(static_cast<size_t>(n));
    int tp = 0;
    for (int i = 0; i < n; ++i) {
        tp += is_tp[static_cast<size_t>(i)];
        recall[static_cast<size_t>(i)] = static_cast<double>(tp) / n_gt;
        precision[static_cast<size_t>(i)] = static_cast<double>(tp) / (i + 1);
    }
    // monotone precision envelope from the right
    for (int i = n - 2; i >= 0; --i)
        precision[static_cast<size_t>(i)] =
            std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i + 1)]);

    double sum = 0.0;
    for (int k = 0; k <= 100; ++k) {
        double r = k / 100.0;
        // first index with recall >= r
        double p_at = 0.0;
        for (int i = 0; i < n; ++i)
            if (recall[static_cast<size_t>(i)] >= r - 1e-12) {
                p_at = precision[static_cast<size_t>(i)];
                break;
            }
        sum += p_at;
    }
    return {sum / 101.0, false};
}

EvalReport evaluate(const std::vector<PredInstance>& preds, const std::vector<GtInstance>& gts,
                    bool class_agnostic, bool use_box_iou) {
    std::set<int> gt_images;
    for (const auto& g : gts) gt_images.insert(g.image_id);
    std::set<int> orphans;
    for (const auto& p : preds)
        if (!gt_images.count(p.image_id)) orphans.insert(p.image_id);
    if (!orphans.empty()) {
        std::ostringstream os;
        os << "evaluate: predictions reference image ids with no ground truth:";
        for (int id : orphans) os << " " << id;
        throw ConfigError(os.str());
    }

    auto cat_of = [&](int c) { return class_agnostic ? 1 : c; };
    std::set<int> classes;
    for (const auto& g : gts) classes.insert(cat_of(g.category));
    for (const auto& p : preds) classes.insert(cat_of(p.category));

    EvalReport rep;
    rep.n_images = static_cast<int>(gt_images.size());
    rep.n_gt = static_cast<int>(gts.size());
    rep.n_pred = static_cast<int>(preds.size());

    const auto& thresholds = coco_iou_thresholds();
    // ap[class][threshold]
    std::map<int, std::vector<double>> ap;
    for (int cls : classes) {
        std::vector<PredInstance> cp;
        std::vector<GtInstance> cg;
        for (const auto& p : preds)
            if (cat_of(p.category) == cls) cp.push_back(p);
        for (const auto& g : gts)
            if (cat_of(g.category) == cls) cg.push_back(g);
        std::vector<double> row;
        for (double t : thresholds)
            row.push_back(average_precision(cp, cg, t, use_box_iou).ap);
        ap[cls] = std::move(row);
    }
    if (classes.empty()) return rep;

    size_t i50 = 0, i75 = 5;
    for (size_t t = 0; t < thresholds.size(); ++t) {
        double mean_c = 0.0;
        for (int cls : classes) mean_c += ap[cls][t];
        mean_c /= static_cast<double>(classes.size());
        rep.mAP += mean_c;
        if (t == i50) rep.ap50 = mean_c;
        if (t == i75) rep.ap75 = mean_c;
    }
    rep.mAP /= static_cast<double>(thresholds.size());

    for (int cls : classes) {
        double m = std::accumulate(ap[cls].begin(), ap[cls].end(), 0.0) /
                   static_cast<double>(thresholds.size());
        rep.per_class[cls] = {m, ap[cls][i50], ap[cls][i75]};
    }
    return rep;
}

std::string eval_report_table(const EvalReport& r) {
    std::ostringstream os;
    char line[128];
    std::snprintf(line, sizeof(line), "%-12s %8s %8s %8s\n", "", "mAP", "AP50", "AP75");
    os << line;
    std::snprintf(line, sizeof(line), "%-12s %8.3f %8.3f %8.3f\n", "all", r.mAP, r.ap50, r.ap75);
    os << line;
    for (const auto& [cls, v] : r.per_class) {
        std::string name = "class " + std::to_string(cls);
        std::snprintf(line, sizeof(line), "%-12s %8.3f %8.3f %8.3f\n", name.c_str(), v[0], v[1],
                      v[2]);
        os << line;
    }
    std::snprintf(line, sizeof(line), "images %d  gt %d  predictions %d\n", r.n_images, r.n_gt,
                  r.n_pred);
    os << line;
    return os.str();
}

std::string eval_report_json(const EvalReport& r) {
    nlohmann::json per;
    for (const auto& [cls, v] : r.per_class)
        per[std::to_string(cls)] = {{"mAP", v[0]}, {"AP50", v[1]}, {"AP75", v[2]}};
    nlohmann::json j{{"mAP", r.mAP},         {"AP50", r.ap50},   {"AP75", r.ap75},
                     {"per_class", per},     {"n_images", r.n_images},
                     {"n_gt", r.n_gt},       {"n_pred", r.n_pred}};
    return j.dump(2) + "\n";
}

}  // namespace spda
