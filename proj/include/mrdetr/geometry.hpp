#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "mrdetr/matrix.hpp"

namespace mrdetr::geometry {

class BoxError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class BoxForm { CxCyWH, XYXY };

// Axis-aligned box tagged with the form its four numbers are in.
struct Box {
    double a = 0, b = 0, c = 0, d = 0;
    BoxForm form = BoxForm::CxCyWH;

    static Box cxcywh(double cx, double cy, double w, double h) { return {cx, cy, w, h, BoxForm::CxCyWH}; }
    static Box xyxy(double x1, double y1, double x2, double y2) { return {x1, y1, x2, y2, BoxForm::XYXY}; }

    double width() const { return form == BoxForm::CxCyWH ? c : c - a; }
    double height() const { return form == BoxForm::CxCyWH ? d : d - b; }
    double area() const { return width() * height(); }

    bool operator==(const Box&) const = default;
};

// Smallest side for predicted boxes; degenerate predictions are clamped here.
inline constexpr double kMinSide = 1e-6;

void validate(const Box& b);
Box box_convert(const Box& b, BoxForm target);
inline Box to_xyxy(const Box& b) { return box_convert(b, BoxForm::XYXY); }
inline Box to_cxcywh(const Box& b) { return box_convert(b, BoxForm::CxCyWH); }

// Widens w/h below kMinSide about the center instead of rejecting.
Box clamp_degenerate(const Box& b);

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);
Matrix iou_pairwise(std::span<const Box> a, std::span<const Box> b);
Matrix giou_pairwise(std::span<const Box> a, std::span<const Box> b);

// Greedy class-agnostic suppression. Keeps a box iff its IoU with every kept
// box is ≤ iou_thresh; returns indices by descending score, ties to lower index.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_thresh);

// Per-label NMS; result sorted by descending score (ties to lower index).
std::vector<std::size_t> nms_per_class(std::span<const Box> boxes, std::span<const double> scores,
                                       std::span<const int> labels, double iou_thresh);

}  // namespace mrdetr::geometry
