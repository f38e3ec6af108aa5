#include "mrdetr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "mrdetr/ops.hpp"

namespace mrdetr::loss {

using geometry::Box;

namespace {

double norm_count(const Positives& pos) { return std::max<double>(1.0, static_cast<double>(pos.size())); }

void check_pairs(const Positives& pos, std::size_t n_preds, std::size_t n_gts, const char* who) {
    for (auto& [p, g] : pos)
        if (p >= n_preds || g >= n_gts)
            throw std::out_of_range(std::string(who) + ": positive pair (" + std::to_string(p) + ", " +
                                    std::to_string(g) + ") out of range");
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
    for (auto& [k, v] : j.items())
        if (!known.count(k)) throw std::invalid_argument(std::string(what) + ": unknown key '" + k + "'");
}

// Corner coordinates of a [k × 4] cxcywh tensor, with sides floored at kMinSide.
struct Corners {
    Tensor x1, y1, x2, y2, area;
};

Corners corners(const Tensor& b) {
    const double big = std::numeric_limits<double>::max();
    const Tensor cx = ad::slice(b, 1, 0, 1), cy = ad::slice(b, 1, 1, 2);
    const Tensor w = ad::clamp(ad::slice(b, 1, 2, 3), geometry::kMinSide, big);
    const Tensor h = ad::clamp(ad::slice(b, 1, 3, 4), geometry::kMinSide, big);
    return {cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5, w * h};
}

}  // namespace

void LossWeights::validate() const {
    for (double v : {lambda_cls, lambda_l1, lambda_giou, lambda_iou, lambda_aux, vfl_alpha, vfl_gamma, focal_alpha,
                     focal_gamma, iou_target_power})
        if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
    if (!(phi >= 0 && phi <= 1)) throw std::invalid_argument("phi must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda_cls", w.lambda_cls},   {"lambda_l1", w.lambda_l1},   {"lambda_giou", w.lambda_giou},
         {"lambda_iou", w.lambda_iou},   {"lambda_aux", w.lambda_aux}, {"phi", w.phi},
         {"vfl_alpha", w.vfl_alpha},     {"vfl_gamma", w.vfl_gamma},   {"focal_alpha", w.focal_alpha},
         {"focal_gamma", w.focal_gamma}, {"iou_target_power", w.iou_target_power}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
    check_keys(j,
               {"lambda_cls", "lambda_l1", "lambda_giou", "lambda_iou", "lambda_aux", "phi", "vfl_alpha", "vfl_gamma",
                "focal_alpha", "focal_gamma", "iou_target_power"},
               "loss config");
    w.lambda_cls = j.value("lambda_cls", w.lambda_cls);
    w.lambda_l1 = j.value("lambda_l1", w.lambda_l1);
    w.lambda_giou = j.value("lambda_giou", w.lambda_giou);
    w.lambda_iou = j.value("lambda_iou", w.lambda_iou);
    w.lambda_aux = j.value("lambda_aux", w.lambda_aux);
    w.phi = j.value("phi", w.phi);
    w.vfl_alpha = j.value("vfl_alpha", w.vfl_alpha);
    w.vfl_gamma = j.value("vfl_gamma", w.vfl_gamma);
    w.focal_alpha = j.value("focal_alpha", w.focal_alpha);
    w.focal_gamma = j.value("focal_gamma", w.focal_gamma);
    w.iou_target_power = j.value("iou_target_power", w.iou_target_power);
}

void to_json(nlohmann::json& j, const AssignerConfig& a) {
    j = {{"alpha", a.o2m.alpha},      {"k", a.o2m.k},           {"tau", a.o2m.tau},
         {"w_cls", a.match.w_cls},    {"w_l1", a.match.w_l1},   {"w_giou", a.match.w_giou},
         {"primary_o2m", a.primary_o2m}};
}

void from_json(const nlohmann::json& j, AssignerConfig& a) {
    check_keys(j, {"alpha", "k", "tau", "w_cls", "w_l1", "w_giou", "primary_o2m"}, "assigner config");
    a.o2m.alpha = j.value("alpha", a.o2m.alpha);
    a.o2m.k = j.value("k", a.o2m.k);
    a.o2m.tau = j.value("tau", a.o2m.tau);
    a.match.w_cls = j.value("w_cls", a.match.w_cls);
    a.match.w_l1 = j.value("w_l1", a.match.w_l1);
    a.match.w_giou = j.value("w_giou", a.match.w_giou);
    a.primary_o2m = j.value("primary_o2m", a.primary_o2m);
}

Tensor focal_cls_loss(const Tensor& logits, const Positives& pos, const std::vector<int>& gt_labels, double alpha,
                      double gamma) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    check_pairs(pos, n, gt_labels.size(), "focal_cls_loss");
    std::vector<double> wpos(n * c, 0.0), wneg(n * c, 1.0 - alpha);
    for (auto& [p, g] : pos) {
        const std::size_t cell = p * c + static_cast<std::size_t>(gt_labels[g]);
        wpos[cell] = alpha;
        wneg[cell] = 0.0;
    }
    const Tensor prob = ad::sigmoid(logits);
    const Tensor pos_term = Tensor::leaf({n, c}, std::move(wpos)) * ad::pow(1.0 - prob, gamma) * ad::softplus(-1.0 * logits);
    const Tensor neg_term = Tensor::leaf({n, c}, std::move(wneg)) * ad::pow(prob, gamma) * ad::softplus(logits);
    return ad::sum(pos_term + neg_term) * (1.0 / norm_count(pos));
}

Tensor box_loss(const Tensor& boxes, const Positives& pos, const std::vector<Box>& gt_boxes, double lambda_l1,
                double lambda_giou) {
    check_pairs(pos, boxes.dim(0), gt_boxes.size(), "box_loss");
    if (pos.empty()) return ad::sum(boxes) * 0.0;
    std::vector<std::size_t> rows;
    std::vector<double> gv;
    for (auto& [p, g] : pos) {
        rows.push_back(p);
        const Box b = geometry::to_cxcywh(gt_boxes[g]);
        gv.insert(gv.end(), {b.a, b.b, b.c, b.d});
    }
    const std::size_t k = rows.size();
    const Tensor pred = ad::index_select_rows(boxes, rows);
    const Tensor gt = Tensor::leaf({k, 4}, std::move(gv));
    const Tensor l1 = ad::sum(ad::abs(pred - gt));

    const Corners a = corners(pred), b = corners(gt);
    const Tensor iw = ad::relu(ad::minimum(a.x2, b.x2) - ad::maximum(a.x1, b.x1));
    const Tensor ih = ad::relu(ad::minimum(a.y2, b.y2) - ad::maximum(a.y1, b.y1));
    const Tensor inter = iw * ih;
    const Tensor uni = a.area + b.area - inter;
    const Tensor hull = (ad::maximum(a.x2, b.x2) - ad::minimum(a.x1, b.x1)) *
                        (ad::maximum(a.y2, b.y2) - ad::minimum(a.y1, b.y1));
    const Tensor giou = inter / uni - (hull - uni) / hull;
    const Tensor giou_term = ad::sum(1.0 - giou);
    return (l1 * lambda_l1 + giou_term * lambda_giou) * (1.0 / norm_count(pos));
}

Tensor vfl_iou_loss(const Tensor& iou_logits, const Positives& pos, const std::vector<int>& gt_labels,
                    const std::vector<double>& realized_iou, double alpha, double gamma, double power) {
    const std::size_t n = iou_logits.dim(0), c = iou_logits.dim(1);
    check_pairs(pos, n, gt_labels.size(), "vfl_iou_loss");
    if (realized_iou.size() != pos.size()) throw std::invalid_argument("vfl_iou_loss: one IoU per positive required");
    std::vector<double> wa(n * c, 0.0), wb(n * c, 0.0), wneg(n * c, alpha);
    for (std::size_t i = 0; i < pos.size(); ++i) {
        const auto [p, g] = pos[i];
        const std::size_t cell = p * c + static_cast<std::size_t>(gt_labels[g]);
        const double q = std::pow(std::clamp(realized_iou[i], 0.0, 1.0), power);
        wa[cell] = q * q;
        wb[cell] = q * (1.0 - q);
        wneg[cell] = 0.0;
    }
    const Tensor sp_pos = ad::softplus(-1.0 * iou_logits);  // −log p
    const Tensor sp_neg = ad::softplus(iou_logits);         // −log(1 − p)
    const Tensor prob = ad::sigmoid(iou_logits);
    const Tensor total = Tensor::leaf({n, c}, std::move(wa)) * sp_pos + Tensor::leaf({n, c}, std::move(wb)) * sp_neg +
                         Tensor::leaf({n, c}, std::move(wneg)) * ad::pow(prob, gamma) * sp_neg;
    return ad::sum(total) * (1.0 / norm_count(pos));
}

double calibrate_score(double s_cls, double s_iou, double phi) {
    if (!(s_cls >= 0 && s_cls <= 1) || !(s_iou >= 0 && s_iou <= 1))
        throw std::domain_error("calibrate_score: scores must lie in [0, 1]");
    if (!(phi >= 0 && phi <= 1)) throw std::domain_error("calibrate_score: phi must lie in [0, 1]");
    return std::pow(s_cls, phi) * std::pow(s_iou, 1.0 - phi);
}

std::vector<Box> boxes_from_tensor(const Tensor& boxes) {
    std::vector<Box> out;
    for (std::size_t i = 0; i < boxes.dim(0); ++i)
        out.push_back(geometry::clamp_degenerate(
            Box::cxcywh(boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3))));
    return out;
}

Matrix sigmoid_matrix(const Tensor& logits) {
    Matrix m(logits.dim(0), logits.dim(1));
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = 1.0 / (1.0 + std::exp(-logits.at(i)));
    return m;
}

std::vector<double> realized_ious(const Tensor& boxes, const Positives& pos, const std::vector<Box>& gts) {
    check_pairs(pos, boxes.dim(0), gts.size(), "realized_ious");
    std::vector<double> out;
    for (auto& [p, g] : pos) {
        const Box b = geometry::clamp_degenerate(
            Box::cxcywh(boxes.at(p, 0), boxes.at(p, 1), boxes.at(p, 2), boxes.at(p, 3)));
        out.push_back(geometry::iou(b, gts[g]));
    }
    return out;
}

Positives assign_route(const model::HeadOutputs& heads, const GtSet& gts, model::Target target,
                       const AssignerConfig& cfg) {
    if (gts.size() == 0) return {};
    const Matrix probs = sigmoid_matrix(heads.logits);
    const auto pred_boxes = boxes_from_tensor(heads.boxes);
    Positives pos;
    if (target == model::Target::O2O) {
        const auto cost = assign::o2o_cost_matrix(probs, pred_boxes, gts.labels, gts.boxes, cfg.match);
        const auto a = assign::hungarian_match(cost);
        for (std::size_t g = 0; g < a.gt_to_pred.size(); ++g) pos.emplace_back(a.gt_to_pred[g], g);
    } else {
        Matrix scores(probs.rows, gts.size());
        for (std::size_t i = 0; i < probs.rows; ++i)
            for (std::size_t j = 0; j < gts.size(); ++j)
                scores(i, j) = probs(i, static_cast<std::size_t>(gts.labels[j]));
        const Matrix ious = geometry::iou_pairwise(pred_boxes, gts.boxes);
        pos = assign::o2m_assign(scores, ious, cfg.o2m).positives;
    }
    return pos;
}

Tensor route_loss(const model::HeadOutputs& heads, const Positives& pos, const GtSet& gts, const LossWeights& w,
                  RouteLoss* record, const std::vector<double>* given_ious) {
    const Tensor cls = focal_cls_loss(heads.logits, pos, gts.labels, w.focal_alpha, w.focal_gamma);
    const Tensor box = box_loss(heads.boxes, pos, gts.boxes, w.lambda_l1, w.lambda_giou);
    const auto ious = given_ious ? *given_ious : realized_ious(heads.boxes, pos, gts.boxes);
    const Tensor iou =
        vfl_iou_loss(heads.iou_logits, pos, gts.labels, ious, w.vfl_alpha, w.vfl_gamma, w.iou_target_power);
    const Tensor total = cls * w.lambda_cls + box + iou * w.lambda_iou;
    if (record) {
        record->cls = cls.item() * w.lambda_cls;
        record->box = box.item();
        record->iou = iou.item() * w.lambda_iou;
        record->total = total.item();
        record->positives = pos.size();
    }
    return total;
}

MultiRouteLoss multi_route_loss(const model::ModelConfig& cfg, const model::ForwardResult& fwd, const GtSet& gts,
                                const LossWeights& w, const AssignerConfig& assigner,
                                const std::vector<RouteTargets>* frozen) {
    w.validate();
    const std::size_t primary = cfg.primary_route();
    MultiRouteLoss res;
    Tensor total;
    for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
        for (std::size_t r = 0; r < cfg.routes.size(); ++r) {
            if (r >= fwd.outputs.size() || fwd.outputs[r].size() <= l) continue;
            const auto& spec = cfg.routes[r];
            const auto& heads = fwd.outputs[r][l].heads;
            auto target = spec.target;
            if (r == primary && assigner.primary_o2m) target = model::Target::O2M;
            RouteTargets tg;
            if (frozen) {
                if (res.targets.size() >= frozen->size())
                    throw std::invalid_argument("multi_route_loss: frozen targets do not match the routes");
                tg = (*frozen)[res.targets.size()];
            } else {
                tg.positives = assign_route(heads, gts, target, assigner);
                tg.ious = realized_ious(heads.boxes, tg.positives, gts.boxes);
            }
            RouteLoss rec;
            rec.route = spec.name;
            rec.layer = l;
            Tensor t = route_loss(heads, tg.positives, gts, w, &rec, &tg.ious);
            if (r != primary) {
                t = t * w.lambda_aux;
                rec.total *= w.lambda_aux;
            }
            total = total.defined() ? total + t : t;
            res.breakdown.push_back(rec);
            res.targets.push_back(std::move(tg));
        }
    }
    if (!total.defined()) throw std::invalid_argument("multi_route_loss: forward result holds no route outputs");
    if (fwd.balance_loss.defined()) total = total + fwd.balance_loss;
    res.total = total;
    return res;
}

}  // namespace mrdetr::loss
