#include "mrdetr/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mrdetr::assign {

std::vector<int> O2OAssignment::pred_to_gt(std::size_t n_preds) const {
    std::vector<int> out(n_preds, -1);
    for (std::size_t g = 0; g < gt_to_pred.size(); ++g) out.at(gt_to_pred[g]) = static_cast<int>(g);
    return out;
}

std::vector<int> O2MAssignment::pred_to_gt(std::size_t n_preds) const {
    std::vector<int> out(n_preds, -1);
    for (auto [p, g] : positives) out.at(p) = static_cast<int>(g);
    return out;
}

double focal_match_cost(double p, double alpha, double gamma) {
    const double pos = alpha * std::pow(1.0 - p, gamma) * -std::log(p + 1e-8);
    const double neg = (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + 1e-8);
    return pos - neg;
}

CostMatrix o2o_cost_matrix(const Matrix& probs, std::span<const geometry::Box> pred_boxes,
                           std::span<const int> gt_labels, std::span<const geometry::Box> gt_boxes,
                           const MatchWeights& w) {
    if (probs.rows == 0) throw std::invalid_argument("o2o_cost_matrix: no predictions");
    if (pred_boxes.size() != probs.rows || gt_labels.size() != gt_boxes.size())
        throw std::invalid_argument("o2o_cost_matrix: size mismatch");
    if (w.w_cls < 0 || w.w_l1 < 0 || w.w_giou < 0) throw std::invalid_argument("o2o_cost_matrix: negative weight");
    for (double p : probs.data)
        if (!std::isfinite(p)) throw std::invalid_argument("o2o_cost_matrix: non-finite probability");
    CostMatrix c(probs.rows, gt_boxes.size());
    if (gt_boxes.empty()) return c;
    const Matrix g = geometry::giou_pairwise(pred_boxes, gt_boxes);
    for (std::size_t i = 0; i < probs.rows; ++i) {
        const auto pb = geometry::to_cxcywh(pred_boxes[i]);
        for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
            const auto gb = geometry::to_cxcywh(gt_boxes[j]);
            const auto label = static_cast<std::size_t>(gt_labels[j]);
            if (label >= probs.cols) throw std::invalid_argument("o2o_cost_matrix: label out of range");
            const double l1 = std::fabs(pb.a - gb.a) + std::fabs(pb.b - gb.b) + std::fabs(pb.c - gb.c) +
                              std::fabs(pb.d - gb.d);
            c(i, j) = w.w_cls * focal_match_cost(probs(i, label)) + w.w_l1 * l1 + w.w_giou * (1.0 - g(i, j));
        }
    }
    return c;
}

std::vector<std::size_t> solve_assignment(const CostMatrix& cost) {
    // Rows of the working problem are GTs (n), columns predictions (m ≥ n).
    const std::size_t n = cost.cols, m = cost.rows;
    if (n == 0) return {};
    if (m < n)
        throw std::invalid_argument("hungarian_match: " + std::to_string(m) + " predictions for " + std::to_string(n) +
                                    " ground truths");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> gt_to_pred(n);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) gt_to_pred[p[j] - 1] = j - 1;
    return gt_to_pred;
}

namespace {

double assignment_cost(const CostMatrix& c, const std::vector<std::size_t>& gt_to_pred) {
    double s = 0.0;
    for (std::size_t g = 0; g < gt_to_pred.size(); ++g) s += c(gt_to_pred[g], g);
    return s;
}

// Optimal cost over GT columns [from, n) with some prediction rows removed.
double residual_optimum(const CostMatrix& c, std::size_t from, const std::vector<char>& row_used) {
    const std::size_t n = c.cols;
    if (from >= n) return 0.0;
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < c.rows; ++r)
        if (!row_used[r]) rows.push_back(r);
    CostMatrix sub(rows.size(), n - from);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = from; j < n; ++j) sub(i, j - from) = c(rows[i], j);
    return assignment_cost(sub, solve_assignment(sub));
}

}  // namespace

O2OAssignment hungarian_match(const CostMatrix& cost) {
    for (double x : cost.data)
        if (!std::isfinite(x)) throw std::invalid_argument("hungarian_match: non-finite cost");
    O2OAssignment out;
    const std::size_t n = cost.cols;
    if (n == 0) return out;
    const auto first = solve_assignment(cost);
    const double best = assignment_cost(cost, first);
    double scale_ref = 1.0;
    for (double x : cost.data) scale_ref = std::max(scale_ref, std::fabs(x));
    const double tol = 1e-10 * scale_ref * static_cast<double>(n);

    // Fix GTs in order to the smallest prediction index that keeps the optimum.
    std::vector<char> row_used(cost.rows, 0);
    std::vector<std::size_t> fixed;
    double fixed_cost = 0.0;
    for (std::size_t g = 0; g < n; ++g) {
        bool placed = false;
        for (std::size_t r = 0; r < cost.rows && !placed; ++r) {
            if (row_used[r]) continue;
            row_used[r] = 1;
            const double total = fixed_cost + cost(r, g) + residual_optimum(cost, g + 1, row_used);
            if (total <= best + tol) {
                fixed.push_back(r);
                fixed_cost += cost(r, g);
                placed = true;
            } else {
                row_used[r] = 0;
            }
        }
        if (!placed) {
            // Only reachable if tolerance rejects every candidate.
            out.gt_to_pred = first;
            out.total_cost = best;
            return out;
        }
    }
    out.gt_to_pred = std::move(fixed);
    out.total_cost = assignment_cost(cost, out.gt_to_pred);
    return out;
}

O2MAssignment o2m_assign(const Matrix& scores, const Matrix& ious, const O2MParams& p) {
    if (!(p.alpha >= 0.0 && p.alpha <= 1.0)) throw std::invalid_argument("o2m_assign: alpha outside [0,1]");
    if (p.k < 1) throw std::invalid_argument("o2m_assign: K must be >= 1");
    if (!(p.tau >= 0.0 && p.tau <= 1.0)) throw std::invalid_argument("o2m_assign: tau outside [0,1]");
    if (scores.rows != ious.rows || scores.cols != ious.cols)
        throw std::invalid_argument("o2m_assign: score/IoU shape mismatch");
    O2MAssignment out;
    const std::size_t n = scores.rows, g = scores.cols;
    if (g == 0 || n == 0) return out;

    Matrix match(n, g);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < g; ++j) match(i, j) = p.alpha * scores(i, j) + (1.0 - p.alpha) * ious(i, j);

    // best[i] = (gt, M) of the winning candidate pair for prediction i.
    std::vector<int> best_gt(n, -1);
    std::vector<double> best_m(n, 0.0);
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < g; ++j) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return match(a, j) > match(b, j); });
        const std::size_t take = std::min(p.k, n);
        for (std::size_t r = 0; r < take; ++r) {
            const std::size_t i = order[r];
            if (ious(i, j) < p.tau) continue;
            if (best_gt[i] < 0 || match(i, j) > best_m[i]) {
                best_gt[i] = static_cast<int>(j);
                best_m[i] = match(i, j);
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        if (best_gt[i] >= 0) out.positives.emplace_back(i, static_cast<std::size_t>(best_gt[i]));
    return out;
}

}  // namespace mrdetr::assign
