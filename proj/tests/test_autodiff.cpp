#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mrdetr/ops.hpp"
#include "mrdetr/param.hpp"
#include "mrdetr/tensor.hpp"
#include "oracles.hpp"

using namespace mrdetr;
using ad::Tensor;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
    return Tensor::leaf({r, c}, std::move(v), grad);
}

}  // namespace

TEST(Tensor, LeafRejectsMismatchedValueCount) {
    EXPECT_THROW(Tensor::leaf({2, 3}, std::vector<double>(5)), ad::ShapeError);
}

TEST(Ops, MatmulIdentity) {
    const Tensor a = mat(2, 2, {1, 2, 3, 4});
    const Tensor y = ad::matmul(a, mat(2, 2, {1, 0, 0, 1}));
    EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
    const Tensor y = ad::softmax(Tensor::leaf({3}, {0, 0, 0}), 0);
    for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, ConcatThenSliceRecoversOperand) {
    const Tensor a = mat(2, 3, {1, 2, 3, 4, 5, 6});
    const Tensor b = mat(1, 3, {7, 8, 9});
    const Tensor back = ad::slice(ad::concat({a, b}, 0), 0, 0, 2);
    EXPECT_EQ(back.shape(), a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(back.at(i), a.at(i));
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
    try {
        ad::matmul(mat(2, 3, std::vector<double>(6)), mat(2, 3, std::vector<double>(6)));
        FAIL() << "expected ShapeError";
    } catch (const ad::ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
    EXPECT_THROW(ad::add(mat(2, 3, std::vector<double>(6)), mat(3, 2, std::vector<double>(6))), ad::ShapeError);
}

TEST(Ops, StrictModeRejectsNonFiniteInput) {
    ad::set_strict(true);
    const Tensor bad = Tensor::leaf({2}, {1.0, std::nan("")});
    EXPECT_THROW(ad::exp(bad), ad::NumericError);
    ad::set_strict(false);
    EXPECT_NO_THROW(ad::exp(bad));
}

TEST(Ops, StrictModeRejectsNonFiniteGradient) {
    ad::set_strict(true);
    const Tensor x = Tensor::leaf({1}, {0.0}, true);
    EXPECT_THROW(ad::backward(ad::sum(ad::sqrt(x))), ad::NumericError);
    ad::set_strict(false);
}

TEST(Backward, SquareAtThree) {
    const Tensor x = Tensor::scalar(3.0, true);
    ad::backward(x * x);
    EXPECT_NEAR(x.grad()[0], 6.0, 1e-12);
    // Central-difference oracle.
    const double eps = 1e-5;
    const double numeric = ((3 + eps) * (3 + eps) - (3 - eps) * (3 - eps)) / (2 * eps);
    EXPECT_NEAR(x.grad()[0], numeric, 1e-6);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
    const Tensor v = Tensor::leaf({5}, {0.3, -1.0, 2.0, 0.0, 0.7}, true);
    ad::backward(ad::sum(ad::softmax(v, 0)));
    for (double g : v.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, MatmulPartialsMatchFiniteDifferences) {
    std::mt19937_64 rng(3);
    ad::ParamStore s;
    s.add("a", {3, 3}, oracle::random_values(rng, 9, -1, 1));
    s.add("b", {3, 3}, oracle::random_values(rng, 9, -1, 1));
    const Tensor w = mat(3, 3, oracle::random_values(rng, 9, -1, 1));
    auto f = [&] { return ad::sum(ad::matmul(s.tensor("a"), s.tensor("b")) * w); };
    EXPECT_LE(ad::grad_check(f, s).max_rel_error, 1e-6);
}

TEST(Backward, NonScalarLossIsAnError) {
    const Tensor x = Tensor::leaf({2}, {1, 2}, true);
    EXPECT_THROW(ad::backward(x * 2.0), ad::ShapeError);
}

TEST(Backward, UnreachableLeafGetsExactZero) {
    ad::ParamStore s;
    s.add("used", {2}, {1, 2});
    s.add("unused", {3}, {1, 2, 3});
    const auto grads = ad::backward(ad::sum(s.tensor("used") * s.tensor("used")), s);
    EXPECT_EQ(grads.at("unused"), std::vector<double>(3, 0.0));
    EXPECT_EQ(grads.at("used"), (std::vector<double>{2, 4}));
}

TEST(Backward, RepeatedCallsAccumulate) {
    const Tensor x = Tensor::leaf({2}, {1, -2}, true);
    const Tensor loss = ad::sum(x * x);
    ad::backward(loss);
    ad::backward(loss);
    EXPECT_EQ(x.grad(), (std::vector<double>{4, -8}));
    const_cast<Tensor&>(x).zero_grad();
    ad::backward(loss);
    EXPECT_EQ(x.grad(), (std::vector<double>{2, -4}));
}

TEST(Backward, NoGradGuardRecordsNothing) {
    const Tensor x = Tensor::leaf({2}, {1, 2}, true);
    Tensor y;
    {
        ad::NoGradGuard ng;
        y = ad::sum(x * x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(ad::grad_enabled());
}

TEST(Backward, FrozenParamsReceiveNoGradient) {
    ad::ParamStore s;
    s.add("w", {2}, {1, 2});
    s.set_trainable("w", false);
    const auto grads = ad::backward(ad::sum(s.tensor("w") * s.tensor("w")), s);
    EXPECT_EQ(grads.at("w"), std::vector<double>(2, 0.0));
}

TEST(Backward, MacCounterCountsMatmul) {
    ad::MacCounter mc;
    ad::matmul(mat(2, 3, std::vector<double>(6, 1)), mat(3, 4, std::vector<double>(12, 1)));
    EXPECT_EQ(mc.count(), 24u);
}

TEST(GradCheck, LinearFunctionIsExact) {
    std::mt19937_64 rng(1);
    ad::ParamStore s;
    s.add("x", {4, 3}, oracle::random_values(rng, 12, -2, 2));
    const Tensor w = mat(4, 3, oracle::random_values(rng, 12, -1, 1));
    auto f = [&] { return ad::sum(s.tensor("x") * w) + 0.5; };
    EXPECT_LE(ad::grad_check(f, s).max_rel_error, 1e-9);
}

TEST(GradCheck, PlantedSignFlipIsFlagged) {
    ad::ParamStore s;
    s.add("x", {3}, {0.5, -1.0, 2.0});
    auto f = [&] { return ad::sum(ad::mul(s.tensor("x"), s.tensor("x"))); };
    ad::set_fault_injection(ad::OpKind::Mul);
    const double err = ad::grad_check(f, s).max_rel_error;
    ad::set_fault_injection(ad::OpKind::Leaf);
    EXPECT_GT(err, 0.1);
    EXPECT_LE(ad::grad_check(f, s).max_rel_error, 1e-8);
}

TEST(GradCheck, NonFiniteProbeIsAnError) {
    ad::ParamStore s;
    s.add("x", {1}, {0.0});
    auto f = [&] { return ad::sum(ad::log(s.tensor("x"))); };
    EXPECT_THROW(ad::grad_check(f, s), ad::NumericError);
}

TEST(GradCheck, EveryOpOnRandomShapes) {
    const auto res = oracle::run_op_suite(100, 2024);
    for (auto& [op, err] : res.worst) EXPECT_LE(err, 1e-4) << op;
}

TEST(Properties, SoftmaxIsADistribution) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t r = oracle::rand_dim(rng, 1, 6), c = oracle::rand_dim(rng, 1, 6);
        const Tensor x = mat(r, c, oracle::random_values(rng, r * c, -30, 30));
        const Tensor y = ad::softmax(x, 1);
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < c; ++j) {
                EXPECT_GE(y.at(i, j), 0.0);
                s += y.at(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Properties, LayerNormStandardizes) {
    std::mt19937_64 rng(6);
    auto moments = [](const std::vector<double>& v) {
        double m = 0, s = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, s / static_cast<double>(v.size())};
    };
    for (int t = 0; t < 100; ++t) {
        const std::size_t r = oracle::rand_dim(rng, 1, 5), c = oracle::rand_dim(rng, 2, 8);
        const auto x = oracle::random_values(rng, r * c, -5, 5);
        const Tensor y = ad::layer_norm(mat(r, c, x), -1);
        for (std::size_t i = 0; i < r; ++i) {
            const auto [xm, xv] = moments({x.begin() + i * c, x.begin() + (i + 1) * c});
            const auto [m, v] = moments({y.values().begin() + i * c, y.values().begin() + (i + 1) * c});
            EXPECT_LE(std::fabs(m), 1e-10);
            // Exact up to the stabilizer: var(y) = var(x) / (var(x) + eps).
            EXPECT_NEAR(v, xv / (xv + 1e-10), 1e-12);
            if (xv >= 1e-2) EXPECT_NEAR(v, 1.0, 1e-8);
        }
    }
}

TEST(Properties, TapeIdsIncrease) {
    const Tensor a = Tensor::leaf({1}, {1}, true);
    const Tensor b = a * 2.0;
    const Tensor c = b + a;
    EXPECT_LT(b.tape_id(), c.tape_id());
}
