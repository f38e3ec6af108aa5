#include "mrdetr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mrdetr::geometry {

namespace {

struct Corners {
    double x1, y1, x2, y2;
};

Corners corners(const Box& b) {
    if (b.form == BoxForm::XYXY) return {b.a, b.b, b.c, b.d};
    return {b.a - 0.5 * b.c, b.b - 0.5 * b.d, b.a + 0.5 * b.c, b.b + 0.5 * b.d};
}

double iou_corners(const Corners& p, const Corners& q) {
    const double iw = std::max(0.0, std::min(p.x2, q.x2) - std::max(p.x1, q.x1));
    const double ih = std::max(0.0, std::min(p.y2, q.y2) - std::max(p.y1, q.y1));
    const double inter = iw * ih;
    const double uni = (p.x2 - p.x1) * (p.y2 - p.y1) + (q.x2 - q.x1) * (q.y2 - q.y1) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double giou_corners(const Corners& p, const Corners& q) {
    const double iw = std::max(0.0, std::min(p.x2, q.x2) - std::max(p.x1, q.x1));
    const double ih = std::max(0.0, std::min(p.y2, q.y2) - std::max(p.y1, q.y1));
    const double inter = iw * ih;
    const double uni = (p.x2 - p.x1) * (p.y2 - p.y1) + (q.x2 - q.x1) * (q.y2 - q.y1) - inter;
    const double hull = (std::max(p.x2, q.x2) - std::min(p.x1, q.x1)) * (std::max(p.y2, q.y2) - std::min(p.y1, q.y1));
    return inter / uni - (hull - uni) / hull;
}

std::vector<Corners> validated_corners(std::span<const Box> boxes) {
    std::vector<Corners> out;
    out.reserve(boxes.size());
    for (auto& b : boxes) {
        validate(b);
        out.push_back(corners(b));
    }
    return out;
}

}  // namespace

void validate(const Box& b) {
    const double w = b.width(), h = b.height();
    if (!(w > 0) || !(h > 0) || !std::isfinite(b.a) || !std::isfinite(b.b) || !std::isfinite(b.c) ||
        !std::isfinite(b.d))
        throw BoxError("invalid box: non-positive extent (w=" + std::to_string(w) + ", h=" + std::to_string(h) + ")");
}

Box box_convert(const Box& b, BoxForm target) {
    validate(b);
    if (b.form == target) return b;
    if (target == BoxForm::XYXY) {
        const auto c = corners(b);
        return Box::xyxy(c.x1, c.y1, c.x2, c.y2);
    }
    return Box::cxcywh(0.5 * (b.a + b.c), 0.5 * (b.b + b.d), b.c - b.a, b.d - b.b);
}

Box clamp_degenerate(const Box& b) {
    Box c = b.form == BoxForm::CxCyWH ? b : Box::cxcywh(0.5 * (b.a + b.c), 0.5 * (b.b + b.d), b.c - b.a, b.d - b.b);
    c.c = std::max(c.c, kMinSide);
    c.d = std::max(c.d, kMinSide);
    return b.form == BoxForm::CxCyWH ? c : box_convert(c, BoxForm::XYXY);
}

double iou(const Box& a, const Box& b) {
    validate(a);
    validate(b);
    return iou_corners(corners(a), corners(b));
}

double giou(const Box& a, const Box& b) {
    validate(a);
    validate(b);
    return giou_corners(corners(a), corners(b));
}

Matrix iou_pairwise(std::span<const Box> a, std::span<const Box> b) {
    const auto ca = validated_corners(a);
    const auto cb = validated_corners(b);
    Matrix m(a.size(), b.size());
    for (std::size_t i = 0; i < ca.size(); ++i)
        for (std::size_t j = 0; j < cb.size(); ++j) m(i, j) = iou_corners(ca[i], cb[j]);
    return m;
}

Matrix giou_pairwise(std::span<const Box> a, std::span<const Box> b) {
    const auto ca = validated_corners(a);
    const auto cb = validated_corners(b);
    Matrix m(a.size(), b.size());
    for (std::size_t i = 0; i < ca.size(); ++i)
        for (std::size_t j = 0; j < cb.size(); ++j) m(i, j) = giou_corners(ca[i], cb[j]);
    return m;
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_thresh) {
    if (boxes.size() != scores.size())
        throw std::invalid_argument("nms: " + std::to_string(boxes.size()) + " boxes but " +
                                    std::to_string(scores.size()) + " scores");
    if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0)) throw std::invalid_argument("nms: iou_thresh outside [0,1]");
    for (double s : scores)
        if (!std::isfinite(s)) throw std::invalid_argument("nms: non-finite score");
    const auto cs = validated_corners(boxes);
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
    std::vector<std::size_t> kept;
    for (auto i : order) {
        bool keep = true;
        for (auto k : kept)
            if (iou_corners(cs[i], cs[k]) > iou_thresh) {
                keep = false;
                break;
            }
        if (keep) kept.push_back(i);
    }
    return kept;
}

std::vector<std::size_t> nms_per_class(std::span<const Box> boxes, std::span<const double> scores,
                                       std::span<const int> labels, double iou_thresh) {
    if (labels.size() != boxes.size()) throw std::invalid_argument("nms_per_class: label count mismatch");
    std::vector<int> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    std::vector<std::size_t> kept;
    for (int c : classes) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) idx.push_back(i);
        std::vector<Box> bs;
        std::vector<double> ss;
        for (auto i : idx) {
            bs.push_back(boxes[i]);
            ss.push_back(scores[i]);
        }
        for (auto k : nms(bs, ss, iou_thresh)) kept.push_back(idx[k]);
    }
    std::stable_sort(kept.begin(), kept.end(), [&](std::size_t x, std::size_t y) {
        if (scores[x] != scores[y]) return scores[x] > scores[y];
        return x < y;
    });
    return kept;
}

}  // namespace mrdetr::geometry
