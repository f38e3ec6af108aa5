#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mrdetr/geometry.hpp"
#include "oracles.hpp"

using namespace mrdetr::geometry;

namespace {

void expect_box_near(const Box& a, const Box& b, double tol) {
    EXPECT_EQ(a.form, b.form);
    EXPECT_NEAR(a.a, b.a, tol);
    EXPECT_NEAR(a.b, b.b, tol);
    EXPECT_NEAR(a.c, b.c, tol);
    EXPECT_NEAR(a.d, b.d, tol);
}

}  // namespace

TEST(BoxConvert, FullImage) { expect_box_near(to_xyxy(Box::cxcywh(0.5, 0.5, 1, 1)), Box::xyxy(0, 0, 1, 1), 0); }

TEST(BoxConvert, RoundTrip) {
    const Box c = to_cxcywh(Box::xyxy(0, 0, 2, 2));
    expect_box_near(c, Box::cxcywh(1, 1, 2, 2), 0);
    expect_box_near(to_xyxy(c), Box::xyxy(0, 0, 2, 2), 0);
}

TEST(BoxConvert, QuarterBox) { expect_box_near(to_xyxy(Box::cxcywh(0.25, 0.25, 0.5, 0.5)), Box::xyxy(0, 0, 0.5, 0.5), 1e-15); }

TEST(BoxConvert, RandomRoundTripIsLossless) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 1000; ++t) {
        const Box b = oracle::random_box(rng);
        expect_box_near(to_cxcywh(to_xyxy(b)), b, 1e-12);
    }
}

TEST(BoxConvert, NonPositiveSideIsAnError) {
    EXPECT_THROW(to_xyxy(Box::cxcywh(0.5, 0.5, 0, 0.2)), BoxError);
    EXPECT_THROW(to_cxcywh(Box::xyxy(0.5, 0.5, 0.4, 0.7)), BoxError);
}

TEST(BoxConvert, DegenerateClampWidensAboutCenter) {
    const Box b = clamp_degenerate(Box::cxcywh(0.3, 0.4, 0.0, 1e-9));
    EXPECT_EQ(b.a, 0.3);
    EXPECT_EQ(b.b, 0.4);
    EXPECT_EQ(b.c, kMinSide);
    EXPECT_EQ(b.d, kMinSide);
}

TEST(Iou, Examples) {
    const Box a = Box::xyxy(0, 0, 2, 2);
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(iou(a, Box::xyxy(5, 5, 6, 6)), 0.0);
    EXPECT_NEAR(iou(a, Box::xyxy(1, 1, 3, 3)), 1.0 / 7.0, 1e-12);
    EXPECT_NEAR(oracle::raster_iou(a, Box::xyxy(1, 1, 3, 3), 0, 3, 600), 1.0 / 7.0, 1e-3);
}

TEST(Iou, MatchesRasterOracle) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        const Box a = oracle::random_box(rng, 0.1, 0.7), b = oracle::random_box(rng, 0.1, 0.7);
        EXPECT_NEAR(iou(a, b), oracle::raster_iou(a, b, 0, 1, 500), 5e-3);
    }
}

TEST(Iou, PropertiesOnRandomPairs) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 2000; ++t) {
        const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
        const double v = iou(a, b);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_DOUBLE_EQ(v, iou(b, a));
        EXPECT_NEAR(iou(a, a), 1.0, 1e-12);
        EXPECT_NEAR(v, oracle::naive_iou(a, b), 1e-12);
        const double g = giou(a, b);
        EXPECT_LE(g, v + 1e-15);
        EXPECT_GT(g, -1.0);
        EXPECT_NEAR(giou(a, a), 1.0, 1e-12);
    }
}

TEST(Iou, PairwiseShapesAndTransposeSymmetry) {
    std::mt19937_64 rng(4);
    std::vector<Box> a, b;
    for (int i = 0; i < 3; ++i) a.push_back(oracle::random_box(rng));
    for (int i = 0; i < 5; ++i) b.push_back(oracle::random_box(rng));
    const auto m = iou_pairwise(a, b), mt = iou_pairwise(b, a);
    ASSERT_EQ(m.rows, 3u);
    ASSERT_EQ(m.cols, 5u);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m(i, j), mt(j, i));
    const auto g = giou_pairwise(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(g(i, j), giou(a[i], b[j]));
}

TEST(Giou, Examples) {
    EXPECT_NEAR(giou(Box::xyxy(0, 0, 1, 1), Box::xyxy(2, 2, 3, 3)), -7.0 / 9.0, 1e-12);
    EXPECT_NEAR(giou(Box::xyxy(0, 0, 1, 1), Box::xyxy(1, 0, 2, 1)), 0.0, 1e-12);
}

TEST(Nms, Examples) {
    const std::vector<Box> dup{Box::cxcywh(0.5, 0.5, 0.2, 0.2), Box::cxcywh(0.5, 0.5, 0.2, 0.2)};
    const std::vector<double> s{0.9, 0.8};
    EXPECT_EQ(nms(dup, s, 0.5), (std::vector<std::size_t>{0}));
    const std::vector<Box> disjoint{Box::xyxy(0, 0, 0.1, 0.1), Box::xyxy(0.5, 0.5, 0.6, 0.6),
                                    Box::xyxy(0.8, 0, 0.9, 0.1)};
    EXPECT_EQ(nms(disjoint, std::vector<double>{0.1, 0.7, 0.4}, 0.5), (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Nms, LengthMismatchIsAnError) {
    const std::vector<Box> b{Box::cxcywh(0.5, 0.5, 0.2, 0.2)};
    EXPECT_THROW(nms(b, std::vector<double>{0.1, 0.2}, 0.5), std::invalid_argument);
}

TEST(Nms, MatchesNaiveOracle) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (int i = 0; i < 8; ++i) {
            boxes.push_back(oracle::random_box(rng, 0.1, 0.5));
            scores.push_back(u(rng));
        }
        const double thresh = u(rng);
        EXPECT_EQ(nms(boxes, scores, thresh), oracle::naive_nms(boxes, scores, thresh));
    }
}

TEST(Nms, TieBreakToLowerIndex) {
    const std::vector<Box> b{Box::cxcywh(0.5, 0.5, 0.2, 0.2), Box::cxcywh(0.5, 0.5, 0.2, 0.2)};
    EXPECT_EQ(nms(b, std::vector<double>{0.5, 0.5}, 0.5), (std::vector<std::size_t>{0}));
}

TEST(Nms, Properties) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 300; ++t) {
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (int i = 0; i < 10; ++i) {
            boxes.push_back(oracle::random_box(rng, 0.1, 0.5));
            scores.push_back(u(rng));
        }
        const double thresh = u(rng);
        const auto kept = nms(boxes, scores, thresh);
        for (std::size_t i = 0; i < kept.size(); ++i)
            for (std::size_t j = i + 1; j < kept.size(); ++j) EXPECT_LE(iou(boxes[kept[i]], boxes[kept[j]]), thresh);
        // Permuting inputs (distinct scores) permutes indices only.
        std::vector<std::size_t> perm(boxes.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<Box> pb;
        std::vector<double> ps;
        for (auto p : perm) {
            pb.push_back(boxes[p]);
            ps.push_back(scores[p]);
        }
        auto kept_p = nms(pb, ps, thresh);
        for (auto& k : kept_p) k = perm[k];
        EXPECT_EQ(kept_p, kept);
        EXPECT_EQ(nms(boxes, scores, 1.0).size(), boxes.size());
        for (auto i : nms(boxes, scores, 0.0))
            for (auto j : nms(boxes, scores, 0.0))
                if (i != j) EXPECT_EQ(iou(boxes[i], boxes[j]), 0.0);
    }
}

TEST(Nms, PerClassOnlySuppressesWithinALabel) {
    const std::vector<Box> b{Box::cxcywh(0.5, 0.5, 0.2, 0.2), Box::cxcywh(0.5, 0.5, 0.2, 0.2),
                             Box::cxcywh(0.5, 0.5, 0.2, 0.2)};
    const std::vector<double> s{0.9, 0.8, 0.7};
    const std::vector<int> labels{0, 1, 0};
    EXPECT_EQ(nms_per_class(b, s, labels, 0.5), (std::vector<std::size_t>{0, 1}));
}
