#pragma once

#include <functional>
#include <string>
#include <vector>

#include "spda/data.hpp"
#include "spda/model.hpp"

namespace spda {

struct TrainConfig {
    double base_lr = 2e-4;
    double weight_decay = 0.05;
    int warmup_iters = 50;
    double final_lr_ratio = 1e-3;
    int batch_size = 2;
    int max_iters = 0;
    double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
    double iou_loss_weight = 1.0;  // auxiliary mask-quality regression
    double cls_loss_weight = 1.0;  // only with the class head
    uint64_t seed = 0;
    int log_every = 10;
    int eval_every = 0;  // 0 disables periodic evaluation
    int workers = 0;     // 0 = min(batch_size, hardware threads)
    bool add_gt_proposals = true;
    bool hflip = false;

    void validate() const;
};

// Warmup is linear from base_lr/warmup_iters at step 0 to base_lr at step
// warmup_iters; then cosine decay to final_lr_ratio*base_lr at max_iters.
// Both branches yield exactly base_lr at the boundary. Steps beyond max_iters
// clamp to the final value.
double lr_at(int64_t step, const TrainConfig& cfg);

// Anchor-side targets for the RPN loss.
struct AnchorAssignment {
    std::vector<int> sampled;        // indices with a defined objectness target
    std::vector<double> obj_targets; // aligned with `sampled`
    std::vector<int> positive;       // indices with box targets
    std::vector<std::array<double, 4>> box_targets;  // aligned with `positive`
};
AnchorAssignment assign_anchors(const std::vector<BoxF>& anchors,
                                const std::vector<InstanceAnnotation>& gts,
                                double pos_iou = 0.5, double neg_iou = 0.3);

// Proposal -> ground-truth matching at IoU >= 0.5 (ties to the lower GT index).
// matched_gt[i] = GT index or -1 for background.
std::vector<int> match_proposals(const std::vector<Proposal>& proposals,
                                 const std::vector<InstanceAnnotation>& gts,
                                 double iou_thresh = 0.5);

struct LossTerms {
    Var total = Graph::kNoVar;
    double total_value = 0.0;
    double rpn = 0.0, rpn_obj = 0.0, rpn_box = 0.0;
    double coarse = 0.0, refined = 0.0;
    int n_pos_anchors = 0, n_matched = 0;
};

// Eq.-style combined objective: lambda1*L_RPN + lambda2*L_Coarse +
// lambda3*L_Refined. Mask terms average per-pixel cross-entropy over matched
// proposals only; with no positive anchors the box term is 0.
LossTerms combined_loss(Graph& g, const RpnHead::Output& rpn_out,
                        const std::vector<Proposal>& proposals, Var coarse_logits,
                        Var refined_logits, const std::vector<InstanceAnnotation>& targets,
                        double lambda1, double lambda2, double lambda3);

// Auxiliary heads: mask-quality regression targets are the measured IoU of the
// thresholded predicted mask against its matched GT (0 for background), and
// class targets are the matched GT category (0 for background).
Var iou_quality_loss(Graph& g, Var iou_pred, Var mask_logits, const std::vector<int>& matched_gt,
                     const std::vector<InstanceAnnotation>& targets);
Var class_head_loss(Graph& g, Var cls_logits, const std::vector<int>& matched_gt,
                    const std::vector<InstanceAnnotation>& targets);

// Decoupled-weight-decay adaptive-moment optimizer.
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    std::vector<ParamTensor*> params;
    std::vector<Tensor> m, v;
    int64_t t = 0;

    explicit AdamW(std::vector<ParamTensor*> ps, double wd);
    // grads aligned with params; empty tensors mean zero gradient.
    void step(const std::vector<Tensor>& grads, double lr);
};

struct FitResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int64_t steps = 0;
};

// Trains in place. Writes one NDJSON record per log interval to
// metrics_log_path (empty string disables) and a checkpoint to
// checkpoint_path (empty string disables). Deterministic for a fixed seed.
FitResult fit(SpdaSam& model, const Dataset& train, const TrainConfig& cfg,
              const std::string& checkpoint_path = "", const std::string& metrics_log_path = "",
              const Dataset* eval_set = nullptr);

}  // namespace spda
