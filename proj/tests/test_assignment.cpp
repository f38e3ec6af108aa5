#include <gtest/gtest.h>

#include <random>
#include <set>

#include "mrdetr/assignment.hpp"
#include "oracles.hpp"

using namespace mrdetr;
using namespace mrdetr::assign;
using geometry::Box;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo, double hi) {
    Matrix m(r, c);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : m.data) v = u(rng);
    return m;
}

std::set<std::pair<std::size_t, std::size_t>> as_set(const O2MAssignment& a) {
    return {a.positives.begin(), a.positives.end()};
}

}  // namespace

TEST(CostMatrix, PerfectPredictionIsRowMinimum) {
    Matrix probs(2, 3, 0.01);
    probs(0, 1) = 1.0;
    const std::vector<Box> preds{Box::cxcywh(0.3, 0.3, 0.2, 0.2), Box::cxcywh(0.7, 0.6, 0.3, 0.1)};
    const std::vector<Box> gts{Box::cxcywh(0.3, 0.3, 0.2, 0.2), Box::cxcywh(0.6, 0.7, 0.2, 0.3)};
    const std::vector<int> labels{1, 2};
    const auto c = o2o_cost_matrix(probs, preds, labels, gts);
    EXPECT_LT(c(0, 0), c(0, 1));
}

TEST(CostMatrix, ZeroClassWeightIdenticalBoxesCostZero) {
    Matrix probs(1, 2, 0.3);
    const std::vector<Box> b{Box::cxcywh(0.4, 0.5, 0.2, 0.3)};
    const auto c = o2o_cost_matrix(probs, b, std::vector<int>{1}, b, {0.0, 5.0, 2.0});
    EXPECT_NEAR(c(0, 0), 0.0, 1e-15);
}

TEST(CostMatrix, HandL1Case) {
    Matrix probs(2, 1, 0.5);
    const std::vector<Box> preds{Box::cxcywh(0.5, 0.5, 0.2, 0.2), Box::cxcywh(0.2, 0.3, 0.1, 0.4)};
    const std::vector<Box> gts{Box::cxcywh(0.4, 0.5, 0.2, 0.3), Box::cxcywh(0.25, 0.25, 0.1, 0.1)};
    const auto c = o2o_cost_matrix(probs, preds, std::vector<int>{0, 0}, gts, {0.0, 1.0, 0.0});
    EXPECT_NEAR(c(0, 0), 0.1 + 0.0 + 0.0 + 0.1, 1e-12);
    EXPECT_NEAR(c(0, 1), 0.25 + 0.25 + 0.1 + 0.1, 1e-12);
    EXPECT_NEAR(c(1, 0), 0.2 + 0.2 + 0.1 + 0.1, 1e-12);
    EXPECT_NEAR(c(1, 1), 0.05 + 0.05 + 0.0 + 0.3, 1e-12);
}

TEST(CostMatrix, EmptyGtSetGivesEmptyMatrix) {
    Matrix probs(3, 2, 0.5);
    const std::vector<Box> preds(3, Box::cxcywh(0.5, 0.5, 0.2, 0.2));
    const auto c = o2o_cost_matrix(probs, preds, std::vector<int>{}, std::vector<Box>{});
    EXPECT_EQ(c.rows, 3u);
    EXPECT_EQ(c.cols, 0u);
}

TEST(CostMatrix, NonFiniteProbabilityIsAnError) {
    Matrix probs(1, 1, std::nan(""));
    const std::vector<Box> b{Box::cxcywh(0.5, 0.5, 0.2, 0.2)};
    EXPECT_THROW(o2o_cost_matrix(probs, b, std::vector<int>{0}, b), std::invalid_argument);
}

TEST(Hungarian, TwoByTwo) {
    Matrix c(2, 2);
    c.data = {1, 2, 2, 1};
    const auto a = hungarian_match(c);
    EXPECT_EQ(a.gt_to_pred, (std::vector<std::size_t>{0, 1}));
    EXPECT_DOUBLE_EQ(a.total_cost, 2.0);
}

TEST(Hungarian, AllZeroTieBreak) {
    const auto a = hungarian_match(Matrix(4, 4, 0.0));
    EXPECT_EQ(a.gt_to_pred, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Hungarian, FewerPredictionsThanGtsIsAnError) {
    EXPECT_THROW(hungarian_match(Matrix(2, 3, 1.0)), std::invalid_argument);
}

TEST(Hungarian, EmptyGtSet) { EXPECT_TRUE(hungarian_match(Matrix(3, 0)).gt_to_pred.empty()); }

TEST(Hungarian, MatchesBruteForceOnRandomSquareMatrices) {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + t % 6;
        const Matrix c = random_matrix(rng, n, n, -5, 5);
        const auto got = hungarian_match(c);
        const auto want = oracle::brute_force_assignment(c);
        EXPECT_NEAR(got.total_cost, want.total, 1e-9);
    }
}

TEST(Hungarian, RectangularAndLexicographicTies) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> small(0, 2);
    for (int t = 0; t < 500; ++t) {
        const std::size_t g = 1 + t % 4, n = g + t % 3;
        Matrix c(n, g);
        for (auto& v : c.data) v = small(rng);  // integer costs → many exact ties
        const auto got = hungarian_match(c);
        const auto want = oracle::brute_force_assignment(c);
        EXPECT_DOUBLE_EQ(got.total_cost, want.total);
        EXPECT_EQ(got.gt_to_pred, want.gt_to_pred);
    }
}

TEST(Hungarian, ScalingCostsKeepsAssignment) {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 200; ++t) {
        const Matrix c = random_matrix(rng, 6, 4, 0, 3);
        Matrix s = c;
        for (auto& v : s.data) v *= 7.5;
        EXPECT_EQ(hungarian_match(c).gt_to_pred, hungarian_match(s).gt_to_pred);
    }
}

TEST(Hungarian, PredToGtInverse) {
    Matrix c(3, 2);
    c.data = {5, 1, 1, 5, 3, 3};
    const auto a = hungarian_match(c);
    EXPECT_EQ(a.pred_to_gt(3), (std::vector<int>{1, 0, -1}));
}

TEST(O2M, MatchingScoreExample) {
    // alpha=0.3, s=0.8, IoU=0.5 → M = 0.59; with two predictions the higher M wins K=1.
    Matrix s(2, 1), iou(2, 1);
    s(0, 0) = 0.8;
    iou(0, 0) = 0.5;
    s(1, 0) = 0.0;
    iou(1, 0) = 0.84;  // M = 0.588
    const auto a = o2m_assign(s, iou, {0.3, 1, 0.0});
    EXPECT_EQ(a.positives, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}}));
}

TEST(O2M, TauFiltersCandidates) {
    // Candidates given as (M, IoU): p0 (0.9, 0.8), p1 (0.7, 0.35), p2 (0.6, 0.5).
    const double alpha = 0.3;
    const double m[3] = {0.9, 0.7, 0.6}, io[3] = {0.8, 0.35, 0.5};
    Matrix s(3, 1), iou(3, 1);
    for (int i = 0; i < 3; ++i) {
        iou(i, 0) = io[i];
        s(i, 0) = (m[i] - (1 - alpha) * io[i]) / alpha;
    }
    const auto a = o2m_assign(s, iou, {alpha, 6, 0.4});
    EXPECT_EQ(a.positives, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {2, 0}}));
}

TEST(O2M, ZeroGroundTruths) { EXPECT_TRUE(o2m_assign(Matrix(5, 0), Matrix(5, 0), {}).positives.empty()); }

TEST(O2M, InvalidParameters) {
    EXPECT_THROW(o2m_assign(Matrix(1, 1), Matrix(1, 1), {1.5, 6, 0.4}), std::invalid_argument);
    EXPECT_THROW(o2m_assign(Matrix(1, 1), Matrix(1, 1), {0.3, 0, 0.4}), std::invalid_argument);
    EXPECT_THROW(o2m_assign(Matrix(1, 1), Matrix(1, 1), {0.3, 6, -0.1}), std::invalid_argument);
}

TEST(O2M, MatchesBruteForceAndInvariants) {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<std::size_t> kd(1, 6);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 500; ++t) {
        const std::size_t n = 1 + t % 12, g = 1 + t % 5;
        const Matrix s = random_matrix(rng, n, g, 0, 1), iou = random_matrix(rng, n, g, 0, 1);
        const O2MParams p{u(rng), kd(rng), u(rng)};
        const auto a = o2m_assign(s, iou, p);
        EXPECT_EQ(as_set(a), oracle::brute_force_o2m(s, iou, p.alpha, p.k, p.tau));
        std::vector<std::size_t> per_gt(g, 0);
        std::set<std::size_t> preds;
        for (auto [i, j] : a.positives) {
            EXPECT_GE(iou(i, j), p.tau);
            EXPECT_TRUE(preds.insert(i).second);
            ++per_gt[j];
        }
        for (auto c : per_gt) EXPECT_LE(c, p.k);
    }
}

TEST(O2M, DegeneratesToArgmaxIou) {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 200; ++t) {
        const Matrix s = random_matrix(rng, 8, 1, 0, 1), iou = random_matrix(rng, 8, 1, 0, 1);
        const auto a = o2m_assign(s, iou, {0.0, 1, 0.0});
        std::size_t best = 0;
        for (std::size_t i = 1; i < 8; ++i)
            if (iou(i, 0) > iou(best, 0)) best = i;
        ASSERT_EQ(a.positives.size(), 1u);
        EXPECT_EQ(a.positives[0].first, best);
    }
}
