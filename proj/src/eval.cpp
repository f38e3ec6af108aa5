#include "mrdetr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include "mrdetr/losses.hpp"

namespace mrdetr::eval {

using geometry::Box;

std::vector<double> coco_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(static_cast<double>(50 + 5 * i) / 100.0);
    return t;
}

namespace {

auto rank_key(const Detection& d) {
    const Box b = geometry::to_cxcywh(d.box);
    return std::make_tuple(-d.score, d.scene, b.a, b.b, b.c, b.d, d.label);
}

}  // namespace

std::optional<double> class_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, int label,
                               double iou_thresh) {
    std::vector<const GroundTruth*> cls_gts;
    for (auto& g : gts)
        if (g.label == label) cls_gts.push_back(&g);
    if (cls_gts.empty()) return std::nullopt;

    std::vector<const Detection*> cls_dets;
    for (auto& d : dets)
        if (d.label == label) cls_dets.push_back(&d);
    std::stable_sort(cls_dets.begin(), cls_dets.end(),
                     [](const Detection* a, const Detection* b) { return rank_key(*a) < rank_key(*b); });

    std::map<std::size_t, std::vector<std::size_t>> by_scene;
    for (std::size_t g = 0; g < cls_gts.size(); ++g) by_scene[cls_gts[g]->scene].push_back(g);
    static const std::vector<std::size_t> none;

    std::vector<bool> used(cls_gts.size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const Detection* d : cls_dets) {
        int best = -1;
        double best_iou = -1.0;
        auto it = by_scene.find(d->scene);
        for (std::size_t g : it == by_scene.end() ? none : it->second) {
            if (used[g]) continue;
            const double v = geometry::iou(d->box, cls_gts[g]->box);
            if (v >= iou_thresh && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used[best] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(cls_gts.size()));
    }
    // Precision envelope, then sample at 101 recall levels.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    std::size_t idx = 0;
    for (int r = 0; r <= 100; ++r) {
        const double level = static_cast<double>(r) / 100.0;
        while (idx < recall.size() && recall[idx] < level) ++idx;
        if (idx < recall.size()) sum += precision[idx];
    }
    return sum / 101.0;
}

std::optional<double> mean_ap_at(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                 double iou_thresh) {
    std::set<int> labels;
    for (auto& g : gts) labels.insert(g.label);
    if (labels.empty()) return std::nullopt;
    double sum = 0.0;
    for (int l : labels) sum += *class_ap(dets, gts, l, iou_thresh);
    return sum / static_cast<double>(labels.size());
}

std::optional<ApResult> compute_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                   const std::vector<double>& iou_thresholds) {
    if (gts.empty()) return std::nullopt;
    if (iou_thresholds.empty()) throw std::invalid_argument("compute_ap: no IoU thresholds");
    for (auto& d : dets)
        if (!(d.score >= 0 && d.score <= 1)) throw std::invalid_argument("compute_ap: detection score outside [0, 1]");
    ApResult r;
    double sum = 0.0;
    for (double t : iou_thresholds) sum += *mean_ap_at(dets, gts, t);
    r.ap = sum / static_cast<double>(iou_thresholds.size());
    r.ap50 = *mean_ap_at(dets, gts, 0.5);
    r.ap75 = *mean_ap_at(dets, gts, 0.75);
    return r;
}

std::vector<Detection> decode_heads(const model::HeadOutputs& heads, std::size_t scene, const DecodeOptions& opts) {
    const std::size_t n = heads.logits.dim(0), c = heads.logits.dim(1);
    const std::size_t top_n = opts.top_n == 0 ? std::min<std::size_t>(100, n * c) : opts.top_n;
    const auto boxes = loss::boxes_from_tensor(heads.boxes);
    std::vector<double> scores(n * c);
    for (std::size_t i = 0; i < n * c; ++i) {
        const double s_cls = 1.0 / (1.0 + std::exp(-heads.logits.at(i)));
        const double s_iou = 1.0 / (1.0 + std::exp(-heads.iou_logits.at(i)));
        scores[i] = loss::calibrate_score(s_cls, s_iou, opts.phi);
    }
    std::vector<std::size_t> order;
    if (opts.use_nms) {
        std::vector<Box> cell_boxes(n * c);
        std::vector<int> labels(n * c);
        for (std::size_t i = 0; i < n * c; ++i) {
            cell_boxes[i] = boxes[i / c];
            labels[i] = static_cast<int>(i % c);
        }
        order = geometry::nms_per_class(cell_boxes, scores, labels, opts.nms_thresh);
    } else {
        order.resize(n * c);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    }
    if (order.size() > top_n) order.resize(top_n);
    std::vector<Detection> out;
    out.reserve(order.size());
    for (auto flat : order) out.push_back({scene, static_cast<int>(flat % c), scores[flat], boxes[flat / c]});
    return out;
}

std::vector<GroundTruth> ground_truths(const std::vector<data::SceneSample>& scenes) {
    std::vector<GroundTruth> gts;
    for (std::size_t s = 0; s < scenes.size(); ++s)
        for (auto& g : scenes[s].gts) gts.push_back({s, g.label, g.box});
    return gts;
}

std::size_t route_index(const model::ModelConfig& cfg, const std::string& route) {
    if (route.empty()) return cfg.primary_route();
    std::string valid;
    for (std::size_t i = 0; i < cfg.routes.size(); ++i) {
        if (cfg.routes[i].name == route) return i;
        valid += (i ? ", " : "") + cfg.routes[i].name;
    }
    throw model::ConfigError("unknown route '" + route + "' (model routes: " + valid + ")");
}

RouteMetrics evaluate_model(const model::Model& m, const std::vector<data::SceneSample>& scenes,
                            const EvalOptions& opts) {
    std::vector<model::SceneInput> inputs;
    inputs.reserve(scenes.size());
    for (auto& s : scenes) inputs.push_back({data::patchify_all(s, m.config().strides)});
    return evaluate_model(m, inputs, ground_truths(scenes), opts);
}

RouteMetrics evaluate_model(const model::Model& m, const std::vector<model::SceneInput>& inputs,
                            const std::vector<GroundTruth>& gts, const EvalOptions& opts) {
    const auto& cfg = m.config();
    const std::size_t r = route_index(cfg, opts.route);
    ad::NoGradGuard ng;
    std::vector<std::vector<Detection>> per_layer(cfg.n_dec_layers);
    model::ForwardOptions fo;
    fo.routes = {r};
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        const auto fwd = m.forward(inputs[s], fo);
        for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
            auto dets = decode_heads(fwd.outputs[r][l].heads, s, opts.decode);
            per_layer[l].insert(per_layer[l].end(), dets.begin(), dets.end());
        }
    }
    RouteMetrics res;
    res.route = cfg.routes[r].name;
    res.use_nms = opts.decode.use_nms;
    for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
        auto ap = compute_ap(per_layer[l], gts);
        res.layer_ap.push_back(ap ? std::optional<double>(ap->ap) : std::nullopt);
        if (l + 1 == cfg.n_dec_layers) res.final_layer = ap;
    }
    return res;
}

}  // namespace mrdetr::eval
