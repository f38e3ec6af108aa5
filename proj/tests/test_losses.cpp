#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mrdetr/data.hpp"
#include "mrdetr/harness.hpp"
#include "mrdetr/losses.hpp"
#include "oracles.hpp"

using namespace mrdetr;
using ad::Tensor;
using geometry::Box;
using loss::Positives;

namespace {

Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor::leaf({1, n}, std::move(v));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct per-cell evaluation of the focal loss.
double focal_oracle(const std::vector<double>& logits, std::size_t c, const Positives& pos,
                    const std::vector<int>& labels) {
    std::vector<bool> positive(logits.size(), false);
    for (auto [p, g] : pos) positive[p * c + static_cast<std::size_t>(labels[g])] = true;
    double s = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double p = sigmoid(logits[i]);
        s += positive[i] ? -0.25 * (1 - p) * (1 - p) * std::log(p) : -0.75 * p * p * std::log(1 - p);
    }
    return s / std::max<double>(1.0, static_cast<double>(pos.size()));
}

}  // namespace

TEST(Focal, HalfProbabilityPositive) {
    const double l = loss::focal_cls_loss(row({0.0}), {{0, 0}}, {0}).item();
    EXPECT_NEAR(l, -0.25 * 0.25 * std::log(0.5), 1e-15);
    EXPECT_NEAR(l, 0.04333, 1e-5);
}

TEST(Focal, ConfidentPositiveVanishes) {
    EXPECT_LT(loss::focal_cls_loss(row({30.0}), {{0, 0}}, {0}).item(), 1e-25);
}

TEST(Focal, EmptySceneDecreasesTowardZeroProbability) {
    double prev = INFINITY;
    for (double logit : {1.0, -1.0, -3.0, -6.0, -12.0}) {
        const double l = loss::focal_cls_loss(Tensor::full({4, 3}, logit), {}, {}).item();
        EXPECT_LT(l, prev);
        EXPECT_GE(l, 0.0);
        prev = l;
    }
}

TEST(Focal, MatchesDirectEvaluation) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = oracle::rand_dim(rng, 1, 6), c = oracle::rand_dim(rng, 1, 4);
        const auto logits = oracle::random_values(rng, n * c, -6, 6);
        std::vector<int> labels;
        Positives pos;
        for (std::size_t p = 0; p < n; ++p)
            if (rng() % 2) {
                pos.push_back({p, labels.size()});
                labels.push_back(static_cast<int>(rng() % c));
            }
        const double got = loss::focal_cls_loss(Tensor::leaf({n, c}, logits), pos, labels).item();
        EXPECT_NEAR(got, focal_oracle(logits, c, pos, labels), 1e-12);
    }
}

TEST(Focal, OutOfRangePairIsAnError) {
    EXPECT_THROW(loss::focal_cls_loss(row({0.0}), {{1, 0}}, {0}), std::out_of_range);
}

TEST(BoxLoss, Examples) {
    const Tensor pred = Tensor::leaf({1, 4}, {0.5, 0.5, 0.5, 0.5});
    EXPECT_NEAR(loss::box_loss(pred, {{0, 0}}, {Box::cxcywh(0.5, 0.5, 0.25, 0.25)}, 1.0, 0.0).item(), 0.5, 1e-15);
    EXPECT_NEAR(loss::box_loss(pred, {{0, 0}}, {Box::cxcywh(0.5, 0.5, 0.5, 0.5)}, 5.0, 2.0).item(), 0.0, 1e-15);
    // GIoU term alone equals 1 − GIoU.
    const Box g = Box::cxcywh(0.6, 0.4, 0.3, 0.2);
    EXPECT_NEAR(loss::box_loss(pred, {{0, 0}}, {g}, 0.0, 1.0).item(),
                1.0 - geometry::giou(Box::cxcywh(0.5, 0.5, 0.5, 0.5), g), 1e-12);
}

TEST(BoxLoss, PermutingPairsLeavesLossUnchanged) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 5;
        const Tensor pred = Tensor::leaf({n, 4}, oracle::random_values(rng, n * 4, 0.2, 0.6));
        std::vector<Box> gts;
        for (int i = 0; i < 4; ++i) gts.push_back(oracle::random_box(rng, 0.1, 0.4));
        Positives pos{{0, 2}, {3, 0}, {1, 1}, {4, 3}};
        const double a = loss::box_loss(pred, pos, gts, 5.0, 2.0).item();
        std::shuffle(pos.begin(), pos.end(), rng);
        EXPECT_NEAR(loss::box_loss(pred, pos, gts, 5.0, 2.0).item(), a, 1e-12);
        EXPECT_GT(a, 0.0);
    }
}

TEST(Vfl, TargetExponent) {
    // IoU = 2⁻⁴ lifts to q = 2⁻³.
    EXPECT_NEAR(std::pow(0.0625, 0.75), 0.125, 1e-15);
    const double logit = 0.4, p = sigmoid(logit), q = 0.125;
    const double got = loss::vfl_iou_loss(row({logit}), {{0, 0}}, {0}, {0.0625}).item();
    EXPECT_NEAR(got, -q * (q * std::log(p) + (1 - q) * std::log(1 - p)), 1e-14);
}

TEST(Vfl, NegativeAtHalfProbability) {
    const double l = loss::vfl_iou_loss(row({0.0}), {}, {}, {}).item();
    EXPECT_NEAR(l, -0.75 * 0.25 * std::log(0.5), 1e-15);
    EXPECT_NEAR(l, 0.1300, 5e-5);
}

TEST(Vfl, PerfectPositiveVanishes) {
    EXPECT_LT(loss::vfl_iou_loss(row({40.0}), {{0, 0}}, {0}, {1.0}).item(), 1e-15);
    EXPECT_THROW(loss::vfl_iou_loss(row({0.0}), {{0, 0}}, {0}, {}), std::invalid_argument);
}

TEST(Calibrate, BoundariesAreExact) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
        const double a = u(rng), b = u(rng);
        EXPECT_EQ(loss::calibrate_score(a, b, 0.0), b);
        EXPECT_EQ(loss::calibrate_score(a, b, 1.0), a);
    }
    EXPECT_EQ(loss::calibrate_score(0.0, 0.3, 0.0), 0.3);
    EXPECT_EQ(loss::calibrate_score(0.3, 0.0, 1.0), 0.3);
    EXPECT_NEAR(loss::calibrate_score(0.64, 0.25, 0.5), 0.4, 1e-15);
}

TEST(Calibrate, BoundedAndMonotone) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 10000; ++t) {
        const double a = u(rng), b = u(rng), phi = u(rng);
        const double s = loss::calibrate_score(a, b, phi);
        EXPECT_GE(s, std::min(a, b) * (1 - 1e-12));
        EXPECT_LE(s, std::max(a, b) * (1 + 1e-12));
        const double a2 = a + (1 - a) * u(rng), b2 = b + (1 - b) * u(rng);
        EXPECT_GE(loss::calibrate_score(a2, b, phi), s);
        EXPECT_GE(loss::calibrate_score(a, b2, phi), s);
    }
}

TEST(Calibrate, OutOfRangeIsAnError) {
    EXPECT_THROW(loss::calibrate_score(1.2, 0.5, 0.5), std::domain_error);
    EXPECT_THROW(loss::calibrate_score(0.5, -0.1, 0.5), std::domain_error);
    EXPECT_THROW(loss::calibrate_score(0.5, 0.5, 1.5), std::domain_error);
}

TEST(Weights, Validation) {
    loss::LossWeights w;
    EXPECT_NO_THROW(w.validate());
    w.phi = 1.5;
    EXPECT_THROW(w.validate(), std::invalid_argument);
    w = {};
    w.lambda_aux = -1;
    EXPECT_THROW(w.validate(), std::invalid_argument);
}

TEST(Assignment, IouLogitsNeverChangeAssignments) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 10, c = 3;
        model::HeadOutputs h;
        h.logits = Tensor::leaf({n, c}, oracle::random_values(rng, n * c, -4, 4));
        h.boxes = Tensor::leaf({n, 4}, oracle::random_values(rng, n * 4, 0.15, 0.6));
        h.iou_logits = Tensor::leaf({n, c}, oracle::random_values(rng, n * c, -4, 4));
        loss::GtSet gts;
        for (std::size_t g = 0; g < 1 + t % 4; ++g) {
            gts.boxes.push_back(oracle::random_box(rng, 0.1, 0.4));
            gts.labels.push_back(static_cast<int>(rng() % c));
        }
        model::HeadOutputs perturbed = h;
        perturbed.iou_logits = Tensor::leaf({n, c}, oracle::random_values(rng, n * c, -20, 20));
        for (auto target : {model::Target::O2O, model::Target::O2M})
            EXPECT_EQ(loss::assign_route(h, gts, target, {}), loss::assign_route(perturbed, gts, target, {}));
    }
}

namespace {

struct SceneCase {
    model::SceneInput input;
    loss::GtSet gts;
};

SceneCase scene_case(const model::Model& m, std::uint64_t seed) {
    const auto s = data::generate_scene(seed, {});
    SceneCase sc{m.prepare(s.image, s.height, s.width), {}};
    for (auto& g : s.gts) {
        sc.gts.boxes.push_back(g.box);
        sc.gts.labels.push_back(g.label);
    }
    return sc;
}

}  // namespace

TEST(MultiRoute, PrimaryRouteAloneEqualsBaselineLoss) {
    const model::Model multi(harness::preset_model("mrdetr"), 6);
    const model::Model base(harness::preset_model("o2o-only"), 6);
    const auto sc = scene_case(base, 7);
    model::ForwardOptions only_primary;
    only_primary.routes = {multi.config().primary_route()};
    const auto a = loss::multi_route_loss(multi.config(), multi.forward(sc.input, only_primary), sc.gts, {}, {});
    const auto b = loss::multi_route_loss(base.config(), base.forward(sc.input), sc.gts, {}, {});
    EXPECT_EQ(a.total.item(), b.total.item());

    // The baseline total is the sum of per-layer single-route losses.
    const auto fwd = base.forward(sc.input);
    double manual = 0;
    for (const auto& out : fwd.outputs[0])
        manual += loss::route_loss(out.heads, loss::assign_route(out.heads, sc.gts, model::Target::O2O, {}), sc.gts, {})
                      .item();
    EXPECT_NEAR(b.total.item(), manual, 1e-12);
}

TEST(MultiRoute, BreakdownCoversEveryLayerAndRoute) {
    const model::Model m(harness::preset_model("mrdetr"), 8);
    const auto sc = scene_case(m, 9);
    const auto r = loss::multi_route_loss(m.config(), m.forward(sc.input), sc.gts, {}, {});
    EXPECT_EQ(r.breakdown.size(), m.config().n_dec_layers * 3);
    double sum = 0;
    for (const auto& b : r.breakdown) {
        EXPECT_GE(b.cls, 0.0);
        EXPECT_GE(b.box, 0.0);
        EXPECT_GE(b.iou, 0.0);
        sum += b.total;
        if (b.route == "route-2") EXPECT_EQ(b.positives, sc.gts.size());
    }
    EXPECT_NEAR(sum, r.total.item(), 1e-9);
}

TEST(MultiRoute, AuxWeightScalesAuxiliaryTerms) {
    const model::Model m(harness::preset_model("mrdetr"), 10);
    const auto sc = scene_case(m, 11);
    const auto fwd = m.forward(sc.input);
    loss::LossWeights w0, w2;
    w0.lambda_aux = 0.0;
    w2.lambda_aux = 2.0;
    const double l0 = loss::multi_route_loss(m.config(), fwd, sc.gts, w0, {}).total.item();
    const double l1 = loss::multi_route_loss(m.config(), fwd, sc.gts, {}, {}).total.item();
    const double l2 = loss::multi_route_loss(m.config(), fwd, sc.gts, w2, {}).total.item();
    EXPECT_NEAR(l2 - l1, l1 - l0, 1e-9);
    EXPECT_GT(l1, l0);
}

TEST(MultiRoute, GradientMatchesFiniteDifferences) {
    for (const std::string preset : {"mrdetr", "mrdetr-pp"}) {
        const auto rep = harness::gradcheck_model(harness::gradcheck_config(preset), 3, 4);
        EXPECT_LE(rep.result.max_rel_error, 1e-4) << preset << " worst " << rep.result.worst_param;
        EXPECT_GT(rep.result.coords_checked, 0u);
    }
}
