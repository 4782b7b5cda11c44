#pragma once

#include <memory>
#include <string>
#include <vector>

#include "spda/backbone.hpp"
#include "spda/c2ffm.hpp"
#include "spda/decoder.hpp"
#include "spda/instances.hpp"
#include "spda/ssspm.hpp"

namespace spda {

struct ModelConfig {
    BackboneConfig backbone;
    int decoder_dim = 64;      // decoder embedding width == prompt width
    int decoder_heads = 4;
    int decoder_layers = 2;
    int decoder_mlp_dim = 128;
    bool use_c2ffm = true;
    bool use_semantic_prompt = true;
    bool use_spatial_prompt = true;
    bool resupply_sparse = true;  // second pass re-receives the box tokens
    bool class_head = false;      // per-proposal classification (multi-class mode)
    int num_classes = 3;
    int rpn_topk = 16;
    double rpn_nms_iou = 0.7;
    double mask_nms_iou = 0.5;
    uint64_t seed = 0;

    void validate() const;
    bool two_pass() const { return use_semantic_prompt || use_spatial_prompt; }
};

// Everything one forward pass produces; graph vars stay valid as long as the
// graph does.
struct ForwardOutputs {
    EncoderOutput enc;
    RpnHead::Output rpn;
    std::vector<Proposal> proposals;  // decoder inputs (may include appended GT boxes)
    int num_rpn_proposals = 0;        // proposals[0..n) come from the RPN, the rest are GT
    Var coarse_logits = Graph::kNoVar;   // (1, K, S, S)
    Var refined_logits = Graph::kNoVar;  // kNoVar when the model is single-pass
    Var iou_coarse = Graph::kNoVar;      // (K)
    Var iou_refined = Graph::kNoVar;
    Var cls_coarse = Graph::kNoVar;
    Var cls_refined = Graph::kNoVar;
    Var p_out = Graph::kNoVar;  // dense prompt consumed verbatim by pass 2
};

struct SpdaSam {
    ModelConfig cfg;
    DualPathEncoder encoder;
    std::unique_ptr<C2FFM> fusion;
    RpnHead rpn;
    PromptEncoder prompt_encoder;
    MaskDecoder mask_decoder;
    SSSPM ssspm;
    ParamList params;

    void init(const ModelConfig& cfg);

    // rgb (1,3,S,S), depth3 (1,3,S,S); extra_boxes are appended to the RPN
    // proposals (training uses the ground-truth boxes here).
    ForwardOutputs forward_full(Graph& g, const Tensor& rgb, const Tensor& depth3,
                                const std::vector<BoxF>* extra_boxes = nullptr) const;

    // Full inference pipeline on one registered rgb/depth pair at native
    // resolution; returns refined instances at that resolution.
    std::vector<InstanceAnnotation> segment(const Tensor& rgb_hw3, const Tensor& depth_hw) const;

    std::vector<ParamTensor*> trainable_params() const;

    void save_checkpoint(const std::string& path, int64_t step) const;
    static std::unique_ptr<SpdaSam> load_checkpoint(const std::string& path,
                                                    int64_t* step_out = nullptr);
};

// Replicates a single-channel map (h, w) to a (1, 3, h, w) batch tensor.
Tensor replicate3(const Tensor& depth_hw);

// Plain-tensor bilinear resize helpers used outside any training graph.
Tensor resize_bilinear_hw(const Tensor& hw, int out_h, int out_w);
Tensor resize_bilinear_chw(const Tensor& chw, int out_h, int out_w);

}  // namespace spda
