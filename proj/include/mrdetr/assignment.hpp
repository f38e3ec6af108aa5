#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "mrdetr/geometry.hpp"
#include "mrdetr/matrix.hpp"

namespace mrdetr::assign {

// Rows are predictions, columns are ground truths; lower is better.
using CostMatrix = Matrix;

struct O2OAssignment {
    // gt index → prediction index.
    std::vector<std::size_t> gt_to_pred;
    double total_cost = 0.0;

    // prediction index → gt index, -1 for background.
    std::vector<int> pred_to_gt(std::size_t n_preds) const;
};

struct O2MAssignment {
    // (prediction, gt) pairs ordered by prediction index.
    std::vector<std::pair<std::size_t, std::size_t>> positives;

    std::vector<int> pred_to_gt(std::size_t n_preds) const;
};

struct MatchWeights {
    double w_cls = 2.0;
    double w_l1 = 5.0;
    double w_giou = 2.0;
};

struct O2MParams {
    double alpha = 0.3;
    std::size_t k = 6;
    double tau = 0.4;
};

// Focal-style matching cost of probability p for the target class.
double focal_match_cost(double p, double alpha = 0.25, double gamma = 2.0);

// probs: n_preds × n_classes; pred_boxes / gt_boxes in cxcywh.
CostMatrix o2o_cost_matrix(const Matrix& probs, std::span<const geometry::Box> pred_boxes,
                           std::span<const int> gt_labels, std::span<const geometry::Box> gt_boxes,
                           const MatchWeights& w = {});

// Minimum-cost injective GT→prediction map. Among optimal maps the
// lexicographically smallest (σ(0), σ(1), …) is returned.
O2OAssignment hungarian_match(const CostMatrix& cost);

// Plain shortest-augmenting-path solver without tie refinement. Returns
// gt→pred for a (preds × gts) matrix with preds ≥ gts.
std::vector<std::size_t> solve_assignment(const CostMatrix& cost);

// scores(i, j): prediction i's probability for GT j's class; ious(i, j).
O2MAssignment o2m_assign(const Matrix& scores, const Matrix& ious, const O2MParams& p);

}  // namespace mrdetr::assign
