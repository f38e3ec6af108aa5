#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mrdetr/data.hpp"
#include "mrdetr/geometry.hpp"
#include "mrdetr/model.hpp"

namespace mrdetr::eval {

struct Detection {
    std::size_t scene = 0;
    int label = 0;
    double score = 0.0;
    geometry::Box box;
};

struct GroundTruth {
    std::size_t scene = 0;
    int label = 0;
    geometry::Box box;
};

struct ApResult {
    double ap = 0.0;    // mean over 0.50:0.05:0.95
    double ap50 = 0.0;
    double ap75 = 0.0;
};

// 0.50, 0.55, …, 0.95.
std::vector<double> coco_thresholds();

// Single-class, single-threshold 101-point interpolated AP. Detections are
// ranked by score, then scene, then box coordinates, so the result does not
// depend on input order. Returns nullopt when the class has no ground truth.
std::optional<double> class_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, int label,
                               double iou_thresh);

// Mean over classes with at least one GT; nullopt when there are no GTs at all.
std::optional<double> mean_ap_at(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                 double iou_thresh);

std::optional<ApResult> compute_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                   const std::vector<double>& iou_thresholds = coco_thresholds());

struct DecodeOptions {
    double phi = 0.0;          // calibration exponent
    bool use_nms = false;
    double nms_thresh = 0.7;   // class-aware
    std::size_t top_n = 0;     // 0 → min(100, n·C)
};

// Ranks every (query, class) cell by calibrated score, optionally applies
// class-aware NMS, and keeps the top N.
std::vector<Detection> decode_heads(const model::HeadOutputs& heads, std::size_t scene, const DecodeOptions& opts);

struct EvalOptions {
    std::string route;  // empty → primary route
    DecodeOptions decode;
};

struct RouteMetrics {
    std::string route;
    bool use_nms = false;
    std::optional<ApResult> final_layer;
    std::vector<std::optional<double>> layer_ap;  // AP per decoder layer
};

std::vector<GroundTruth> ground_truths(const std::vector<data::SceneSample>& scenes);

std::size_t route_index(const model::ModelConfig& cfg, const std::string& route);

RouteMetrics evaluate_model(const model::Model& m, const std::vector<data::SceneSample>& scenes,
                            const EvalOptions& opts);

// Variant over precomputed model inputs (avoids re-patchifying).
RouteMetrics evaluate_model(const model::Model& m, const std::vector<model::SceneInput>& inputs,
                            const std::vector<GroundTruth>& gts, const EvalOptions& opts);

}  // namespace mrdetr::eval
