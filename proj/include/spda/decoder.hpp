#pragma once

#include <array>
#include <vector>

#include "spda/instances.hpp"
#include "spda/nn.hpp"

namespace spda {

struct Proposal {
    BoxF box;
    double objectness = 0.0;  // in [0,1]
};

// Minimal single-scale anchor head: shared 3x3 conv, then 1x1 objectness and
// 1x1 box-delta branches. Three square anchor scales per cell.
struct RpnHead {
    Conv2d conv;  // 3x3 pad 1
    Conv2d obj;   // 1x1 -> A
    Conv2d reg;   // 1x1 -> 4A
    std::vector<double> anchor_scales{0.25, 0.5, 0.75};  // fractions of image size
    double nms_iou = 0.7;
    int topk = 16;

    struct Output {
        Var obj_logits = Graph::kNoVar;  // (n_anchors)
        Var deltas = Graph::kNoVar;      // (n_anchors, 4)
        std::vector<BoxF> anchors;
    };

    void init(int in_c, Rng& rng);
    int anchors_per_cell() const { return static_cast<int>(anchor_scales.size()); }
    std::vector<BoxF> make_anchors(int grid_h, int grid_w, int image_size) const;
    Output fwd(Graph& g, Var embedding, int image_size) const;  // embedding (1, C, h, w)
    // Decode + clip + NMS + top-k on the current graph values (no gradient
    // flows through proposal boxes; supervision reaches the head via the loss).
    std::vector<Proposal> propose(const Graph& g, const Output& out, int image_size) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Greedy box NMS; keeps highest-scoring box of any overlapping pair.
std::vector<int> nms_boxes(const std::vector<BoxF>& boxes, const std::vector<double>& scores,
                           double iou_thresh);

// Faster-R-CNN-style box delta encoding between an anchor and a target box.
std::array<double, 4> encode_box_delta(const BoxF& anchor, const BoxF& target);
BoxF decode_box_delta(const BoxF& anchor, const double* delta);

// Sparse and dense prompt machinery (random Fourier positional encoding,
// corner-type embeddings, the learned no-mask dense embedding).
struct PromptEncoder {
    ParamTensor pe_freq;        // (2, C_p/2) Gaussian frequency bank, fixed
    ParamTensor corner_embed;   // (2, C_p): top-left, bottom-right
    ParamTensor no_mask_embed;  // (C_p)
    int prompt_dim = 0;

    void init(int prompt_dim, Rng& rng);
    // Positional encoding of a point in [0,1]^2 -> (C_p) values.
    std::vector<double> encode_point(double x01, double y01) const;
    Tensor pe_grid(int h, int w) const;  // (1, h*w, C_p), fixed per grid
    // (K, 2, C_p) corner tokens; throws ConfigError on degenerate boxes.
    Var boxes_to_sparse(Graph& g, const std::vector<Proposal>& proposals, int image_size) const;
    Var no_mask_dense(Graph& g, int k, int h, int w) const;  // (K, C_p, h, w)
    void collect(const std::string& prefix, ParamList& out);
};

struct TwoWayLayer {
    Attention self_attn;
    LayerNorm ln1;
    Attention cross_token_to_image;
    LayerNorm ln2;
    Mlp mlp;
    LayerNorm ln3;
    Attention cross_image_to_token;
    LayerNorm ln4;
    bool skip_first_layer_pe = false;

    void init(int dim, int heads, int mlp_dim, Rng& rng);
    // tokens (K, nt, C), src (K, N, C); returns updated (tokens, src)
    std::pair<Var, Var> fwd(Graph& g, Var tokens, Var src, Var token_pe, Var src_pe) const;
    void collect(const std::string& prefix, ParamList& out);
};

struct DecodeResult {
    Var mask_logits = Graph::kNoVar;  // (1, K, S, S)
    Var iou_pred = Graph::kNoVar;     // (K)
    Var f_src = Graph::kNoVar;        // (K, C_p, 4h, 4w) upscaled features
    Var cls_logits = Graph::kNoVar;   // (K, n_classes + 1) when the class head is on
};

struct MaskDecoder {
    ParamTensor iou_token, mask_token;  // (1, 1, C_p)
    std::vector<TwoWayLayer> layers;
    Attention final_token_to_image;
    LayerNorm final_ln;
    ConvT2d up1, up2;  // two stride-2 upscaling deconvs, C_p -> C_p
    LayerNorm2d up_ln;
    Mlp3 mask_mlp;  // mask token -> per-pixel classifier weights
    Mlp3 iou_mlp;   // iou token -> predicted mask quality
    Linear cls_head;
    bool use_cls_head = false;
    int prompt_dim = 0, heads = 4;

    void init(int prompt_dim, int heads, int num_layers, int mlp_dim, bool cls_head,
              int num_classes, Rng& rng);
    // embedding (1, C_p, h, w); sparse (K, n_sparse, C_p); dense kNoVar or
    // (K, C_p, h, w); out_size: the mask logit resolution S.
    DecodeResult decode(Graph& g, Var embedding, Var sparse, Var dense, const Tensor& pe_grid,
                        int out_size) const;
    void collect(const std::string& prefix, ParamList& out);
};

}  // namespace spda
