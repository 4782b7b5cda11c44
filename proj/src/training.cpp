#include "spda/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"
#include "spda/errors.hpp"
#include "spda/metrics.hpp"

namespace spda {

using json = nlohmann::json;

void TrainConfig::validate() const {
    if (warmup_iters < 1) throw ConfigError("warmup_iters must be >= 1");
    if (final_lr_ratio <= 0.0 || final_lr_ratio >= 1.0)
        throw ConfigError("final_lr_ratio must lie in (0, 1)");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
        throw ConfigError("loss weights must be non-negative");
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    double base = cfg.base_lr;
    double final_lr = cfg.base_lr * cfg.final_lr_ratio;
    int64_t w = cfg.warmup_iters;
    if (step < 0) step = 0;
    if (step <= w) {
        // integer-ratio form so lr_at(w) == base_lr exactly
        double num = static_cast<double>(step * (w - 1) + w);
        double den = static_cast<double>(w * w);
        return base * (num / den);
    }
    if (cfg.max_iters <= w || step >= cfg.max_iters) return final_lr;
    double t = static_cast<double>(step - w) / static_cast<double>(cfg.max_iters - w);
    double c = 0.5 * (1.0 + std::cos(M_PI * t));
    return base * c + final_lr * (1.0 - c);
}

AnchorAssignment assign_anchors(const std::vector<BoxF>& anchors,
                                const std::vector<InstanceAnnotation>& gts, double pos_iou,
                                double neg_iou) {
    AnchorAssignment out;
    int n = static_cast<int>(anchors.size());
    std::vector<double> best_iou(static_cast<size_t>(n), 0.0);
    std::vector<int> best_gt(static_cast<size_t>(n), -1);
    for (int i = 0; i < n; ++i)
        for (size_t j = 0; j < gts.size(); ++j) {
            double iou = box_iou(anchors[static_cast<size_t>(i)], gts[j].box);
            if (iou > best_iou[static_cast<size_t>(i)]) {
                best_iou[static_cast<size_t>(i)] = iou;
                best_gt[static_cast<size_t>(i)] = static_cast<int>(j);
            }
        }
    std::vector<char> is_pos(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i)
        if (best_gt[static_cast<size_t>(i)] >= 0 && best_iou[static_cast<size_t>(i)] >= pos_iou)
            is_pos[static_cast<size_t>(i)] = 1;
    // force the best anchor per GT positive so every object supervises the head
    for (size_t j = 0; j < gts.size(); ++j) {
        int arg = -1;
        double best = -1.0;
        for (int i = 0; i < n; ++i) {
            double iou = box_iou(anchors[static_cast<size_t>(i)], gts[j].box);
            if (iou > best) {
                best = iou;
                arg = i;
            }
        }
        if (arg >= 0 && best > 0.0) {
            is_pos[static_cast<size_t>(arg)] = 1;
            best_gt[static_cast<size_t>(arg)] = static_cast<int>(j);
        }
    }
    for (int i = 0; i < n; ++i) {
        if (is_pos[static_cast<size_t>(i)]) {
            out.sampled.push_back(i);
            out.obj_targets.push_back(1.0);
            out.positive.push_back(i);
            out.box_targets.push_back(
                encode_box_delta(anchors[static_cast<size_t>(i)],
                                 gts[static_cast<size_t>(best_gt[static_cast<size_t>(i)])].box));
        } else if (best_iou[static_cast<size_t>(i)] < neg_iou) {
            out.sampled.push_back(i);
            out.obj_targets.push_back(0.0);
        }
        // anchors between the thresholds are ignored
    }
    return out;
}

std::vector<int> match_proposals(const std::vector<Proposal>& proposals,
                                 const std::vector<InstanceAnnotation>& gts, double iou_thresh) {
    std::vector<int> matched(proposals.size(), -1);
    for (size_t i = 0; i < proposals.size(); ++i) {
        int best = -1;
        double best_iou = 0.0;
        for (size_t j = 0; j < gts.size(); ++j) {
            double iou = box_iou(proposals[i].box, gts[j].box);
            if (iou > best_iou) {  // ties keep the lower GT index
                best_iou = iou;
                best = static_cast<int>(j);
            }
        }
        matched[i] = best_iou >= iou_thresh ? best : -1;
    }
    return matched;
}

namespace {
Tensor mask_to_tensor_row(const Mask& m) {
    Tensor t({1, m.h * m.w});
    for (int64_t i = 0; i < static_cast<int64_t>(m.data.size()); ++i)
        t[i] = m.data[static_cast<size_t>(i)] ? 1.0 : 0.0;
    return t;
}

// Mean per-pixel BCE over matched proposals; kNoVar when none are matched.
Var matched_mask_ce(Graph& g, Var logits_1kss, const std::vector<int>& matched_gt,
                    const std::vector<InstanceAnnotation>& targets) {
    if (logits_1kss == Graph::kNoVar) return Graph::kNoVar;
    const Tensor& lg = g.value(logits_1kss);
    int k = lg.dim(1), s_h = lg.dim(2), s_w = lg.dim(3);
    std::vector<int> rows;
    for (int i = 0; i < k; ++i)
        if (matched_gt[static_cast<size_t>(i)] >= 0) rows.push_back(i);
    if (rows.empty()) return Graph::kNoVar;
    Tensor target({static_cast<int>(rows.size()), s_h * s_w});
    for (size_t r = 0; r < rows.size(); ++r) {
        const Mask& m = targets[static_cast<size_t>(matched_gt[static_cast<size_t>(rows[r])])].mask;
        if (m.h != s_h || m.w != s_w)
            throw ShapeError("mask target " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                             " does not match logits " + std::to_string(s_h) + "x" +
                             std::to_string(s_w));
        for (int64_t i = 0; i < static_cast<int64_t>(m.data.size()); ++i)
            target[static_cast<int64_t>(r) * s_h * s_w + i] = m.data[static_cast<size_t>(i)] ? 1.0 : 0.0;
    }
    Var flat = g.reshape(logits_1kss, {k, s_h * s_w});
    Var sel = g.gather_rows(flat, rows);
    return g.bce_logits_mean(sel, std::move(target));
}
}  // namespace

LossTerms combined_loss(Graph& g, const RpnHead::Output& rpn_out,
                        const std::vector<Proposal>& proposals, Var coarse_logits,
                        Var refined_logits, const std::vector<InstanceAnnotation>& targets,
                        double lambda1, double lambda2, double lambda3) {
    LossTerms out;
    AnchorAssignment aa = assign_anchors(rpn_out.anchors, targets);
    out.n_pos_anchors = static_cast<int>(aa.positive.size());

    Var rpn_total = Graph::kNoVar;
    if (!aa.sampled.empty()) {
        Var obj_sel = g.gather_rows(rpn_out.obj_logits, aa.sampled);
        Tensor obj_t({static_cast<int>(aa.obj_targets.size())});
        std::copy(aa.obj_targets.begin(), aa.obj_targets.end(), obj_t.data.begin());
        Var obj_loss = g.bce_logits_mean(obj_sel, std::move(obj_t));
        out.rpn_obj = g.value(obj_loss)[0];
        rpn_total = obj_loss;
    }
    if (!aa.positive.empty()) {
        Var reg_sel = g.gather_rows(rpn_out.deltas, aa.positive);
        Tensor box_t({static_cast<int>(aa.positive.size()), 4});
        for (size_t i = 0; i < aa.box_targets.size(); ++i)
            for (int j = 0; j < 4; ++j) box_t.at2(static_cast<int>(i), j) = aa.box_targets[i][static_cast<size_t>(j)];
        Var box_loss = g.smooth_l1_mean(reg_sel, std::move(box_t));
        out.rpn_box = g.value(box_loss)[0];
        rpn_total = rpn_total == Graph::kNoVar ? box_loss : g.add(rpn_total, box_loss);
    }
    out.rpn = out.rpn_obj + out.rpn_box;

    std::vector<int> matched = match_proposals(proposals, targets);
    for (int m : matched) out.n_matched += m >= 0;
    Var coarse_ce = matched_mask_ce(g, coarse_logits, matched, targets);
    Var refined_ce = matched_mask_ce(g, refined_logits, matched, targets);
    out.coarse = coarse_ce == Graph::kNoVar ? 0.0 : g.value(coarse_ce)[0];
    out.refined = refined_ce == Graph::kNoVar ? 0.0 : g.value(refined_ce)[0];

    Var total = Graph::kNoVar;
    auto acc = [&](Var term, double lambda) {
        if (term == Graph::kNoVar) return;
        Var scaled = g.scale(term, lambda);
        total = total == Graph::kNoVar ? scaled : g.add(total, scaled);
    };
    acc(rpn_total, lambda1);
    acc(coarse_ce, lambda2);
    acc(refined_ce, lambda3);
    if (total == Graph::kNoVar) total = g.constant(Tensor::scalar(0.0));
    out.total = total;
    out.total_value = g.value(total)[0];
    return out;
}

Var iou_quality_loss(Graph& g, Var iou_pred, Var mask_logits, const std::vector<int>& matched_gt,
                     const std::vector<InstanceAnnotation>& targets) {
    if (iou_pred == Graph::kNoVar || mask_logits == Graph::kNoVar) return Graph::kNoVar;
    const Tensor& lg = g.value(mask_logits);
    int k = lg.dim(1), s_h = lg.dim(2), s_w = lg.dim(3);
    Tensor iou_t({k});
    for (int i = 0; i < k; ++i) {
        int m = matched_gt[static_cast<size_t>(i)];
        if (m < 0) continue;  // background proposals regress to 0
        const Mask& gt = targets[static_cast<size_t>(m)].mask;
        int64_t inter = 0, uni = 0;
        const double* p = lg.ptr() + static_cast<int64_t>(i) * s_h * s_w;
        for (int64_t j = 0; j < static_cast<int64_t>(s_h) * s_w; ++j) {
            bool pv = p[j] > 0.0;
            bool gv = gt.data[static_cast<size_t>(j)] != 0;
            inter += pv && gv;
            uni += pv || gv;
        }
        iou_t[i] = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    }
    return g.mse_mean(iou_pred, std::move(iou_t));
}

Var class_head_loss(Graph& g, Var cls_logits, const std::vector<int>& matched_gt,
                    const std::vector<InstanceAnnotation>& targets) {
    if (cls_logits == Graph::kNoVar) return Graph::kNoVar;
    std::vector<int> labels(matched_gt.size(), 0);
    for (size_t i = 0; i < matched_gt.size(); ++i)
        if (matched_gt[i] >= 0) labels[i] = targets[static_cast<size_t>(matched_gt[i])].category;
    return g.softmax_ce_mean(cls_logits, labels);
}

AdamW::AdamW(std::vector<ParamTensor*> ps, double wd) : weight_decay(wd), params(std::move(ps)) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (ParamTensor* p : params) {
        m.push_back(Tensor::zeros(p->value.shape));
        v.push_back(Tensor::zeros(p->value.shape));
    }
}

void AdamW::step(const std::vector<Tensor>& grads, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        ParamTensor* p = params[i];
        if (grads[i].numel() == 0) {
            // still decay parameters that received no gradient this step
            if (!p->no_decay && weight_decay > 0.0)
                for (auto& w : p->value.data) w -= lr * weight_decay * w;
            continue;
        }
        const Tensor& gr = grads[i];
        for (int64_t j = 0; j < gr.numel(); ++j) {
            double gj = gr[j];
            m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * gj;
            v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * gj * gj;
            double mhat = m[i][j] / bc1;
            double vhat = v[i][j] / bc2;
            double upd = mhat / (std::sqrt(vhat) + eps);
            if (!p->no_decay && weight_decay > 0.0) upd += weight_decay * p->value[j];
            p->value[j] -= lr * upd;
        }
    }
}

namespace {
struct SampleResult {
    std::vector<Tensor> grads;  // aligned with trainable params; empty = zero
    LossTerms terms;
    double aux_iou = 0.0, aux_cls = 0.0;
    double sample_total = 0.0;
};

SampleResult run_sample(const SpdaSam& model, const Scene& scene, const TrainConfig& cfg,
                        const std::vector<ParamTensor*>& tparams,
                        const std::unordered_map<const ParamTensor*, size_t>& pindex) {
    SampleResult res;
    Graph g(true);
    std::vector<BoxF> gt_boxes;
    if (cfg.add_gt_proposals)
        for (const auto& inst : scene.instances) gt_boxes.push_back(inst.box);
    Tensor depth3 = replicate3(scene.depth);
    Tensor rgb = scene.rgb;
    rgb.shape = {1, 3, scene.rgb.dim(1), scene.rgb.dim(2)};
    ForwardOutputs fwd =
        model.forward_full(g, rgb, depth3, cfg.add_gt_proposals ? &gt_boxes : nullptr);

    std::vector<int> matched = match_proposals(fwd.proposals, scene.instances);
    LossTerms terms = combined_loss(g, fwd.rpn, fwd.proposals, fwd.coarse_logits,
                                    fwd.refined_logits, scene.instances, cfg.lambda1, cfg.lambda2,
                                    cfg.lambda3);
    Var total = terms.total;
    if (cfg.iou_loss_weight > 0.0) {
        Var li1 = iou_quality_loss(g, fwd.iou_coarse, fwd.coarse_logits, matched, scene.instances);
        Var li2 =
            iou_quality_loss(g, fwd.iou_refined, fwd.refined_logits, matched, scene.instances);
        for (Var li : {li1, li2})
            if (li != Graph::kNoVar) {
                res.aux_iou += g.value(li)[0];
                total = g.add(total, g.scale(li, cfg.iou_loss_weight));
            }
    }
    if (model.cfg.class_head && cfg.cls_loss_weight > 0.0) {
        for (Var lc : {class_head_loss(g, fwd.cls_coarse, matched, scene.instances),
                       class_head_loss(g, fwd.cls_refined, matched, scene.instances)})
            if (lc != Graph::kNoVar) {
                res.aux_cls += g.value(lc)[0];
                total = g.add(total, g.scale(lc, cfg.cls_loss_weight));
            }
    }
    res.terms = terms;
    res.sample_total = g.value(total)[0];
    if (!std::isfinite(res.sample_total)) {
        std::ostringstream os;
        os << "non-finite loss: total=" << res.sample_total << " rpn_obj=" << terms.rpn_obj
           << " rpn_box=" << terms.rpn_box << " coarse=" << terms.coarse
           << " refined=" << terms.refined << " iou_aux=" << res.aux_iou
           << " cls_aux=" << res.aux_cls;
        throw NumericError(os.str());
    }
    g.backward(total);

    res.grads.resize(tparams.size());
    for (const auto& [pt, var] : g.param_vars()) {
        auto it = pindex.find(pt);
        if (it != pindex.end()) res.grads[it->second] = g.grad_of(var);
    }
    return res;
}
}  // namespace

FitResult fit(SpdaSam& model, const Dataset& train, const TrainConfig& cfg,
              const std::string& checkpoint_path, const std::string& metrics_log_path,
              const Dataset* eval_set) {
    cfg.validate();
    if (train.scenes.empty()) throw ConfigError("fit: training dataset is empty");

    int s = model.cfg.backbone.image_size;
    std::vector<Scene> scenes;
    scenes.reserve(train.scenes.size());
    for (const Scene& sc : train.scenes) scenes.push_back(resize_scene(sc, s));

    std::vector<ParamTensor*> tparams = model.trainable_params();
    std::unordered_map<const ParamTensor*, size_t> pindex;
    for (size_t i = 0; i < tparams.size(); ++i) pindex[tparams[i]] = i;
    AdamW opt(tparams, cfg.weight_decay);
    Rng rng(cfg.seed ^ 0x7261696e64ull);

    std::ofstream log;
    if (!metrics_log_path.empty()) {
        log.open(metrics_log_path);
        if (!log) throw IngestError("cannot open metrics log for writing: " + metrics_log_path);
    }

    int n = static_cast<int>(scenes.size());
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    auto reshuffle = [&]() {
        for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(0, i))]);
    };
    reshuffle();
    int cursor = 0;

    int workers = cfg.workers > 0 ? cfg.workers
                                  : std::max(1, std::min<int>(cfg.batch_size,
                                                              static_cast<int>(std::thread::hardware_concurrency())));

    FitResult result;
    result.steps = cfg.max_iters;
    for (int64_t step = 1; step <= cfg.max_iters; ++step) {
        // assemble batch
        std::vector<const Scene*> batch;
        std::vector<bool> flip;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= n) {
                reshuffle();
                cursor = 0;
            }
            batch.push_back(&scenes[static_cast<size_t>(perm[static_cast<size_t>(cursor++)])]);
            flip.push_back(cfg.hflip && rng.uniform() < 0.5);
        }

        std::vector<SampleResult> results(batch.size());
        std::vector<Scene> flipped(batch.size());
        std::exception_ptr worker_error;
        std::mutex error_mu;
        auto work = [&](int i) {
            try {
                const Scene* sc = batch[static_cast<size_t>(i)];
                if (flip[static_cast<size_t>(i)]) {
                    flipped[static_cast<size_t>(i)] = hflip_scene(*sc);
                    sc = &flipped[static_cast<size_t>(i)];
                }
                results[static_cast<size_t>(i)] = run_sample(model, *sc, cfg, tparams, pindex);
            } catch (...) {
                std::lock_guard<std::mutex> lk(error_mu);
                if (!worker_error) worker_error = std::current_exception();
            }
        };
        if (workers <= 1 || batch.size() == 1) {
            for (size_t i = 0; i < batch.size(); ++i) work(static_cast<int>(i));
        } else {
            std::vector<std::thread> pool;
            std::atomic<int> next{0};
            for (int w = 0; w < std::min<int>(workers, static_cast<int>(batch.size())); ++w)
                pool.emplace_back([&]() {
                    for (int i = next.fetch_add(1); i < static_cast<int>(batch.size());
                         i = next.fetch_add(1))
                        work(i);
                });
            for (auto& th : pool) th.join();
        }
        if (worker_error) std::rethrow_exception(worker_error);

        // reduce gradients in sample order (deterministic)
        double inv_b = 1.0 / static_cast<double>(batch.size());
        std::vector<Tensor> grads(tparams.size());
        double loss_sum = 0, rpn_sum = 0, coarse_sum = 0, refined_sum = 0, iou_sum = 0, cls_sum = 0;
        for (const SampleResult& r : results) {
            loss_sum += r.sample_total;
            rpn_sum += r.terms.rpn;
            coarse_sum += r.terms.coarse;
            refined_sum += r.terms.refined;
            iou_sum += r.aux_iou;
            cls_sum += r.aux_cls;
            for (size_t i = 0; i < tparams.size(); ++i) {
                if (r.grads[i].numel() == 0) continue;
                if (grads[i].numel() == 0) grads[i] = Tensor::zeros(r.grads[i].shape);
                for (int64_t j = 0; j < r.grads[i].numel(); ++j)
                    grads[i][j] += r.grads[i][j] * inv_b;
            }
        }
        double lr = lr_at(step, cfg);
        opt.step(grads, lr);

        double mean_loss = loss_sum * inv_b;
        if (step == 1) result.initial_loss = mean_loss;
        result.final_loss = mean_loss;

        if (log && (step == 1 || step == cfg.max_iters ||
                    (cfg.log_every > 0 && step % cfg.log_every == 0))) {
            json rec{{"step", step},
                     {"lr", lr},
                     {"loss", mean_loss},
                     {"loss_rpn", rpn_sum * inv_b},
                     {"loss_coarse", coarse_sum * inv_b},
                     {"loss_refined", refined_sum * inv_b},
                     {"loss_iou", iou_sum * inv_b}};
            if (model.cfg.class_head) rec["loss_cls"] = cls_sum * inv_b;
            log << rec.dump() << "\n";
        }
        if (eval_set && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            std::vector<PredInstance> preds;
            std::vector<GtInstance> gts;
            for (const Scene& sc : eval_set->scenes) {
                for (const auto& inst : sc.instances)
                    gts.push_back({sc.image_id, inst.category, inst.mask, inst.box});
                for (const auto& ann : model.segment(sc.rgb, sc.depth))
                    preds.push_back({sc.image_id, ann.category, ann.score, ann.mask, ann.box});
            }
            EvalReport rep = evaluate(preds, gts, /*class_agnostic=*/!model.cfg.class_head);
            if (log)
                log << json{{"step", step}, {"eval_mAP", rep.mAP}, {"eval_AP50", rep.ap50},
                            {"eval_AP75", rep.ap75}}
                           .dump()
                    << "\n";
        }
    }

    if (!checkpoint_path.empty()) model.save_checkpoint(checkpoint_path, cfg.max_iters);
    return result;
}

}  // namespace spda
