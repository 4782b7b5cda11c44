#include "spda/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "spda/errors.hpp"

namespace spda {

using json = nlohmann::json;

void ModelConfig::validate() const {
    backbone.validate();
    if (decoder_dim <= 0 || decoder_dim % 2 != 0)
        throw ConfigError("decoder_dim must be positive and even");
    if (decoder_dim % decoder_heads != 0)
        throw ConfigError("decoder_dim not divisible by decoder_heads");
    if (decoder_layers < 1) throw ConfigError("decoder_layers must be >= 1");
    if (backbone.grid() % 2 != 0)
        throw ConfigError("embedding grid must be even for the coarse fusion downsampling");
    if (rpn_topk < 1) throw ConfigError("rpn_topk must be >= 1");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (mask_nms_iou <= 0.0 || mask_nms_iou > 1.0) throw ConfigError("mask_nms_iou out of range");
}

void SpdaSam::init(const ModelConfig& c) {
    cfg = c;
    cfg.validate();
    Rng root(cfg.seed);
    // Forked streams per component: shared modules get identical init across
    // ablation flag combinations under one seed.
    Rng enc_rng = root.fork(1);
    Rng fus_rng = root.fork(2);
    Rng rpn_rng = root.fork(3);
    Rng prm_rng = root.fork(4);
    Rng dec_rng = root.fork(5);
    Rng ssp_rng = root.fork(6);

    encoder.init(cfg.backbone, cfg.decoder_dim, enc_rng);
    if (cfg.use_c2ffm) {
        fusion = std::make_unique<C2FFM>();
        fusion->init(cfg.backbone.embed_dim, cfg.backbone.heads, fus_rng);
    }
    rpn.topk = cfg.rpn_topk;
    rpn.nms_iou = cfg.rpn_nms_iou;
    rpn.init(cfg.decoder_dim, rpn_rng);
    prompt_encoder.init(cfg.decoder_dim, prm_rng);
    mask_decoder.init(cfg.decoder_dim, cfg.decoder_heads, cfg.decoder_layers, cfg.decoder_mlp_dim,
                      cfg.class_head, cfg.num_classes, dec_rng);
    ssspm.init(cfg.use_semantic_prompt, cfg.use_spatial_prompt, cfg.backbone.embed_dim,
               cfg.decoder_dim, cfg.decoder_dim, ssp_rng);

    params = ParamList{};
    encoder.collect("encoder", params);
    if (fusion) fusion->collect("c2ffm", params);
    rpn.collect("rpn", params);
    prompt_encoder.collect("prompts", params);
    mask_decoder.collect("decoder", params);
    ssspm.collect("ssspm", params);

    if (cfg.backbone.freeze_base) {
        for (ParamTensor* p : params.items) {
            bool in_encoder = p->name.rfind("encoder.", 0) == 0;
            bool is_lora = p->name.find(".lora_") != std::string::npos;
            bool is_neck = p->name.rfind("encoder.neck", 0) == 0;
            if (in_encoder && !is_lora && !is_neck) p->trainable = false;
        }
    }
}

std::vector<ParamTensor*> SpdaSam::trainable_params() const {
    std::vector<ParamTensor*> out;
    for (ParamTensor* p : params.items)
        if (p->trainable) out.push_back(p);
    return out;
}

ForwardOutputs SpdaSam::forward_full(Graph& g, const Tensor& rgb, const Tensor& depth3,
                                     const std::vector<BoxF>* extra_boxes) const {
    int s = cfg.backbone.image_size;
    int grid = cfg.backbone.grid();
    Var rgb_v = g.constant(rgb);
    Var depth_v = g.constant(depth3);

    ForwardOutputs out;
    out.enc = encoder.run(g, rgb_v, depth_v, fusion.get(), cfg.use_c2ffm);
    out.rpn = rpn.fwd(g, out.enc.final_rgb, s);
    out.proposals = rpn.propose(g, out.rpn, s);
    out.num_rpn_proposals = static_cast<int>(out.proposals.size());
    if (extra_boxes)
        for (const BoxF& b : *extra_boxes)
            if (b.valid()) out.proposals.push_back({b.clipped(s, s), 1.0});
    if (out.proposals.empty()) return out;

    int k = static_cast<int>(out.proposals.size());
    Var sparse = prompt_encoder.boxes_to_sparse(g, out.proposals, s);
    Tensor pe = prompt_encoder.pe_grid(grid, grid);

    Var dense0 = prompt_encoder.no_mask_dense(g, k, grid, grid);
    DecodeResult pass1 = mask_decoder.decode(g, out.enc.final_rgb, sparse, dense0, pe, s);
    out.coarse_logits = pass1.mask_logits;
    out.iou_coarse = pass1.iou_pred;
    out.cls_coarse = pass1.cls_logits;

    if (!cfg.two_pass()) return out;

    Var p_semantic = Graph::kNoVar;
    if (ssspm.semantic) {
        Var f_sem = ssspm.semantic->align_features(g, out.enc.tap_block2_rgb,
                                                   out.enc.tap_fine4_rgb);  // (1,Cd,4g,4g)
        if (k > 1) f_sem = g.repeat_outer(f_sem, k);
        p_semantic = ssspm.semantic->enhance_prompt(g, pass1.f_src, f_sem);
    }
    Var p_spatial = Graph::kNoVar;
    if (ssspm.spatial) {
        // Coarse probability map, resized onto the mask-encoder input grid
        // (4x the embedding grid) so the encoded prompt lands on (grid, grid).
        Var probs = g.sigmoid(g.reshape(out.coarse_logits, {k, 1, s, s}));
        Var resized = g.upsample_bilinear(probs, 4 * grid, 4 * grid);
        p_spatial = ssspm.spatial->encode_mask(g, resized);
    }
    if (ssspm.fusion)
        out.p_out = ssspm.fusion->fuse_prompts(g, p_semantic, p_spatial);
    else
        out.p_out = ssspm.semantic ? p_semantic : p_spatial;

    Var sparse2 = sparse;
    if (!cfg.resupply_sparse) sparse2 = g.constant(Tensor({k, 0, cfg.decoder_dim}));
    DecodeResult pass2 = mask_decoder.decode(g, out.enc.final_rgb, sparse2, out.p_out, pe, s);
    out.refined_logits = pass2.mask_logits;
    out.iou_refined = pass2.iou_pred;
    out.cls_refined = pass2.cls_logits;
    return out;
}

namespace {
double mask_iou_local(const Mask& a, const Mask& b) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        bool av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += av && bv;
        uni += av || bv;
    }
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}
}  // namespace

std::vector<InstanceAnnotation> SpdaSam::segment(const Tensor& rgb_hw3,
                                                 const Tensor& depth_hw) const {
    if (rgb_hw3.rank() != 3 || rgb_hw3.dim(0) != 3)
        throw ConfigError("segment: rgb must be (3,H,W), got " + shape_str(rgb_hw3.shape));
    if (depth_hw.rank() != 2)
        throw ConfigError("segment: depth must be (H,W), got " + shape_str(depth_hw.shape));
    if (depth_hw.dim(0) != rgb_hw3.dim(1) || depth_hw.dim(1) != rgb_hw3.dim(2))
        throw ConfigError("segment: rgb and depth are not spatially registered: rgb " +
                          shape_str(rgb_hw3.shape) + " vs depth " + shape_str(depth_hw.shape));

    int native_h = rgb_hw3.dim(1), native_w = rgb_hw3.dim(2);
    int s = cfg.backbone.image_size;

    Tensor rgb_in = resize_bilinear_chw(rgb_hw3, s, s);
    rgb_in.shape = {1, 3, s, s};
    Tensor depth_in = resize_bilinear_hw(depth_hw, s, s);
    Tensor depth3 = replicate3(depth_in);

    Graph g(false);
    ForwardOutputs fwd = forward_full(g, rgb_in, depth3);
    if (fwd.proposals.empty()) return {};

    int k = static_cast<int>(fwd.proposals.size());
    Var logits = fwd.refined_logits != Graph::kNoVar ? fwd.refined_logits : fwd.coarse_logits;
    Var iou_v = fwd.refined_logits != Graph::kNoVar ? fwd.iou_refined : fwd.iou_coarse;
    Var cls_v = fwd.refined_logits != Graph::kNoVar ? fwd.cls_refined : fwd.cls_coarse;

    // Upsample the refined logits to native resolution before thresholding.
    Var native_logits = g.reshape(logits, {k, 1, s, s});
    if (native_h != s || native_w != s)
        native_logits = g.upsample_bilinear(native_logits, native_h, native_w);
    const Tensor& lg = g.value(native_logits);
    const Tensor& iou = g.value(iou_v);

    std::vector<InstanceAnnotation> anns;
    for (int i = 0; i < k; ++i) {
        Mask m(native_h, native_w);
        const double* p = lg.ptr() + static_cast<int64_t>(i) * native_h * native_w;
        for (int64_t j = 0; j < static_cast<int64_t>(native_h) * native_w; ++j)
            m.data[static_cast<size_t>(j)] = p[j] > 0.0 ? 1 : 0;  // logit > 0 <=> prob > 0.5
        if (m.empty_mask()) continue;
        InstanceAnnotation ann;
        ann.mask = std::move(m);
        ann.box = tight_box(ann.mask);
        ann.score = fwd.proposals[static_cast<size_t>(i)].objectness *
                    std::clamp(iou[i], 0.0, 1.0);
        ann.category = 1;
        if (cfg.class_head && cls_v != Graph::kNoVar) {
            const Tensor& cl = g.value(cls_v);
            int n = cl.dim(1);
            int best = 1;
            for (int c = 2; c < n; ++c)
                if (cl.at2(i, c) > cl.at2(i, best)) best = c;
            ann.category = best;
        }
        anns.push_back(std::move(ann));
    }

    // mask NMS, highest score wins
    std::stable_sort(anns.begin(), anns.end(),
                     [](const auto& a, const auto& b) { return a.score > b.score; });
    std::vector<InstanceAnnotation> kept;
    for (auto& a : anns) {
        bool dup = false;
        for (const auto& kpt : kept)
            if (mask_iou_local(a.mask, kpt.mask) > cfg.mask_nms_iou) {
                dup = true;
                break;
            }
        if (!dup) kept.push_back(std::move(a));
    }
    return kept;
}

Tensor replicate3(const Tensor& depth_hw) {
    if (depth_hw.rank() != 2) throw ShapeError("replicate3 expects (H,W)");
    int h = depth_hw.dim(0), w = depth_hw.dim(1);
    Tensor out({1, 3, h, w});
    for (int c = 0; c < 3; ++c)
        std::copy(depth_hw.data.begin(), depth_hw.data.end(),
                  out.data.begin() + static_cast<int64_t>(c) * h * w);
    return out;
}

Tensor resize_bilinear_hw(const Tensor& hw, int out_h, int out_w) {
    Tensor in = hw;
    in.shape = {1, 1, hw.dim(0), hw.dim(1)};
    Graph g(false);
    Tensor out = g.value(g.upsample_bilinear(g.constant(in), out_h, out_w));
    out.shape = {out_h, out_w};
    return out;
}

Tensor resize_bilinear_chw(const Tensor& chw, int out_h, int out_w) {
    Tensor in = chw;
    in.shape = {1, chw.dim(0), chw.dim(1), chw.dim(2)};
    Graph g(false);
    Tensor out = g.value(g.upsample_bilinear(g.constant(in), out_h, out_w));
    out.shape = {chw.dim(0), out_h, out_w};
    return out;
}

// ---------------- checkpoint io ----------------

namespace {
constexpr char kMagic[8] = {'S', 'P', 'D', 'A', 'C', 'K', 'P', '1'};

json config_to_json(const ModelConfig& c) {
    return json{{"image_size", c.backbone.image_size},
                {"patch_size", c.backbone.patch_size},
                {"embed_dim", c.backbone.embed_dim},
                {"depth", c.backbone.depth},
                {"heads", c.backbone.heads},
                {"lora_rank", c.backbone.lora_rank},
                {"lora_alpha", c.backbone.lora_alpha},
                {"freeze_base", c.backbone.freeze_base},
                {"mlp_ratio", c.backbone.mlp_ratio},
                {"decoder_dim", c.decoder_dim},
                {"decoder_heads", c.decoder_heads},
                {"decoder_layers", c.decoder_layers},
                {"decoder_mlp_dim", c.decoder_mlp_dim},
                {"use_c2ffm", c.use_c2ffm},
                {"use_semantic_prompt", c.use_semantic_prompt},
                {"use_spatial_prompt", c.use_spatial_prompt},
                {"resupply_sparse", c.resupply_sparse},
                {"class_head", c.class_head},
                {"num_classes", c.num_classes},
                {"rpn_topk", c.rpn_topk},
                {"rpn_nms_iou", c.rpn_nms_iou},
                {"mask_nms_iou", c.mask_nms_iou},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.backbone.image_size = j.at("image_size").get<int>();
    c.backbone.patch_size = j.at("patch_size").get<int>();
    c.backbone.embed_dim = j.at("embed_dim").get<int>();
    c.backbone.depth = j.at("depth").get<int>();
    c.backbone.heads = j.at("heads").get<int>();
    c.backbone.lora_rank = j.at("lora_rank").get<int>();
    c.backbone.lora_alpha = j.at("lora_alpha").get<double>();
    c.backbone.freeze_base = j.at("freeze_base").get<bool>();
    c.backbone.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.decoder_dim = j.at("decoder_dim").get<int>();
    c.decoder_heads = j.at("decoder_heads").get<int>();
    c.decoder_layers = j.at("decoder_layers").get<int>();
    c.decoder_mlp_dim = j.at("decoder_mlp_dim").get<int>();
    c.use_c2ffm = j.at("use_c2ffm").get<bool>();
    c.use_semantic_prompt = j.at("use_semantic_prompt").get<bool>();
    c.use_spatial_prompt = j.at("use_spatial_prompt").get<bool>();
    c.resupply_sparse = j.at("resupply_sparse").get<bool>();
    c.class_head = j.at("class_head").get<bool>();
    c.num_classes = j.at("num_classes").get<int>();
    c.rpn_topk = j.at("rpn_topk").get<int>();
    c.rpn_nms_iou = j.at("rpn_nms_iou").get<double>();
    c.mask_nms_iou = j.at("mask_nms_iou").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}
}  // namespace

void SpdaSam::save_checkpoint(const std::string& path, int64_t step) const {
    json header;
    header["format"] = 1;
    header["config"] = config_to_json(cfg);
    header["step"] = step;
    header["seed"] = cfg.seed;
    json plist = json::array();
    for (const ParamTensor* p : params.items)
        plist.push_back(json{{"name", p->name}, {"shape", p->value.shape}});
    header["params"] = plist;
    std::string htext = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 8);
    uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const ParamTensor* p : params.items)
        f.write(reinterpret_cast<const char*>(p->value.ptr()),
                static_cast<std::streamsize>(p->value.numel() * 8));
    if (!f) throw IngestError("failed writing checkpoint: " + path);
}

std::unique_ptr<SpdaSam> SpdaSam::load_checkpoint(const std::string& path, int64_t* step_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw IngestError("not a checkpoint file: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string htext(hlen, '\0');
    f.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IngestError("truncated checkpoint header: " + path);

    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw IngestError("bad checkpoint header in " + path + ": " + e.what());
    }
    auto model = std::make_unique<SpdaSam>();
    model->init(config_from_json(header.at("config")));
    if (step_out) *step_out = header.at("step").get<int64_t>();

    const json& plist = header.at("params");
    if (plist.size() != model->params.items.size())
        throw IngestError("checkpoint parameter count " + std::to_string(plist.size()) +
                          " does not match model (" + std::to_string(model->params.items.size()) +
                          ")");
    for (size_t i = 0; i < plist.size(); ++i) {
        ParamTensor* p = model->params.items[i];
        std::string name = plist[i].at("name").get<std::string>();
        Shape shape = plist[i].at("shape").get<Shape>();
        if (name != p->name || shape != p->value.shape)
            throw IngestError("checkpoint/config mismatch at parameter " + std::to_string(i) +
                              ": file has " + name + shape_str(shape) + ", model expects " +
                              p->name + shape_str(p->value.shape));
        f.read(reinterpret_cast<char*>(p->value.ptr()),
               static_cast<std::streamsize>(p->value.numel() * 8));
    }
    if (!f) throw IngestError("truncated checkpoint data: " + path);
    return model;
}

}  // namespace spda
