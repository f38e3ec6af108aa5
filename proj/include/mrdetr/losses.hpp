#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrdetr/assignment.hpp"
#include "mrdetr/geometry.hpp"
#include "mrdetr/model.hpp"
#include "mrdetr/tensor.hpp"

namespace mrdetr::loss {

using ad::Tensor;
using Positives = std::vector<std::pair<std::size_t, std::size_t>>;  // (prediction, gt)

struct LossWeights {
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;
    double lambda_iou = 1.0;
    double lambda_aux = 1.0;
    double phi = 0.0;
    double vfl_alpha = 0.75;
    double vfl_gamma = 2.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    // Exponent lifting realized IoU into the IoU-score target.
    double iou_target_power = 0.75;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct AssignerConfig {
    assign::MatchWeights match;
    assign::O2MParams o2m;
    // Supervise the primary route with one-to-many assignment instead
    // (oracle pretraining for probing).
    bool primary_o2m = false;
};

void to_json(nlohmann::json& j, const AssignerConfig& a);
void from_json(const nlohmann::json& j, AssignerConfig& a);

struct GtSet {
    std::vector<geometry::Box> boxes;  // cxcywh
    std::vector<int> labels;
    std::size_t size() const { return boxes.size(); }
};

// Sigmoid focal loss over every (prediction, class) cell; positives are the
// assigned (prediction, gt-class) cells. Normalized by max(1, #positives).
Tensor focal_cls_loss(const Tensor& logits, const Positives& pos, const std::vector<int>& gt_labels,
                      double alpha = 0.25, double gamma = 2.0);

// Σ λ_l1·‖b − b̄‖₁ + λ_giou·(1 − GIoU) over positives, normalized by max(1, #positives).
Tensor box_loss(const Tensor& boxes, const Positives& pos, const std::vector<geometry::Box>& gt_boxes,
                double lambda_l1, double lambda_giou);

// Varifocal loss on class-aware IoU logits. Positive cells target
// q = IoU^power (IoU treated as a constant); all other cells target 0.
Tensor vfl_iou_loss(const Tensor& iou_logits, const Positives& pos, const std::vector<int>& gt_labels,
                    const std::vector<double>& realized_iou, double alpha = 0.75, double gamma = 2.0,
                    double power = 0.75);

// s_cls^φ · s_iou^(1−φ) with 0⁰ = 1.
double calibrate_score(double s_cls, double s_iou, double phi);

// Realized IoU between (clamped) predicted boxes and their matched GTs.
std::vector<double> realized_ious(const Tensor& boxes, const Positives& pos, const std::vector<geometry::Box>& gts);

std::vector<geometry::Box> boxes_from_tensor(const Tensor& boxes);
Matrix sigmoid_matrix(const Tensor& logits);

// Runs the route's assigner on its own predictions.
Positives assign_route(const model::HeadOutputs& heads, const GtSet& gts, model::Target target,
                       const AssignerConfig& cfg);

struct RouteLoss {
    std::string route;
    std::size_t layer = 0;
    double cls = 0, box = 0, iou = 0, total = 0;
    std::size_t positives = 0;
};

// Non-differentiable supervision of one (layer, route): its positives and the
// realized IoU of each positive.
struct RouteTargets {
    Positives positives;
    std::vector<double> ious;
};

struct MultiRouteLoss {
    Tensor total;
    std::vector<RouteLoss> breakdown;
    std::vector<RouteTargets> targets;  // aligned with breakdown
};

Tensor route_loss(const model::HeadOutputs& heads, const Positives& pos, const GtSet& gts, const LossWeights& w,
                  RouteLoss* record = nullptr, const std::vector<double>* ious = nullptr);

// Σ_layers [L(primary) + λ_aux·Σ_aux L(route)] over routes present in `fwd`.
// With `frozen`, assignments and IoU targets are taken from it instead of
// being recomputed (finite-difference checks of the stop-gradient loss).
MultiRouteLoss multi_route_loss(const model::ModelConfig& cfg, const model::ForwardResult& fwd, const GtSet& gts,
                                const LossWeights& w, const AssignerConfig& assigner,
                                const std::vector<RouteTargets>* frozen = nullptr);

}  // namespace mrdetr::loss
