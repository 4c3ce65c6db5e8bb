#include "odeinf/context.hpp"
#include "odeinf/random.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace odeinf;

namespace {

ContextTrajectory uniform_trajectory(int n, double dt, Eigen::Index d, std::uint64_t seed) {
    ContextTrajectory t;
    Rng rng(seed);
    t.values.resize(n, d);
    for (int i = 0; i < n; ++i) {
        t.times.push_back(dt * i);
        for (Eigen::Index k = 0; k < d; ++k) t.values(i, k) = rng.normal(1.0 + k, 2.0);
    }
    return t;
}

} // namespace

TEST(Normalization, GammaUnitForTargetGap) {
    const auto s = fit_normalization({uniform_trajectory(50, 0.01, 1, 1)});
    EXPECT_EQ(s.gamma, 1.0);
}

TEST(Normalization, GammaForCoarseGrid) {
    const auto s = fit_normalization({uniform_trajectory(200, 0.05, 2, 2)});
    EXPECT_NEAR(s.gamma, 0.2, 1e-12);
}

TEST(Normalization, GammaUsesGeometricMean) {
    ContextTrajectory t;
    t.times = {0.0, 0.01, 0.05};
    t.values = Eigen::MatrixXd::Random(3, 1);
    const auto s = fit_normalization({t});
    EXPECT_NEAR(s.gamma, 0.01 / std::sqrt(0.01 * 0.04), 1e-12);
}

TEST(Normalization, StatisticsExcludeLastObservation) {
    ContextTrajectory a, b;
    a.times = {0, 1, 2};
    a.values.resize(3, 1);
    a.values << 1, 3, 100;
    b.times = {0, 1};
    b.values.resize(2, 1);
    b.values << 5, -100;
    const auto s = fit_normalization({a, b});
    // used: 1, 3, 5 -> mean 3, population variance 8/3
    EXPECT_NEAR(s.mu[0], 3.0, 1e-14);
    EXPECT_NEAR(s.sigma[0], std::sqrt(8.0 / 3.0), 1e-14);
    EXPECT_FALSE(s.any_floored());
}

TEST(Normalization, ConstantDimensionFloored) {
    ContextTrajectory t = uniform_trajectory(20, 0.1, 2, 3);
    t.values.col(1).setConstant(4.0);
    const auto s = fit_normalization({t});
    EXPECT_EQ(s.floored[0], 0);
    EXPECT_EQ(s.floored[1], 1);
    EXPECT_EQ(s.sigma[1], kSigmaFloor);
}

TEST(Normalization, RoundTrips) {
    const auto s = fit_normalization({uniform_trajectory(30, 0.07, 3, 4)});
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd x(3);
        for (int k = 0; k < 3; ++k) x[k] = rng.normal(0.0, 50.0);
        EXPECT_LE((s.denormalize_state(s.normalize_state(x)) - x).cwiseAbs().maxCoeff(), 1e-9 * (1.0 + x.cwiseAbs().maxCoeff()));
        EXPECT_LE((s.denormalize_field(s.normalize_field(x)) - x).cwiseAbs().maxCoeff(), 1e-9 * (1.0 + x.cwiseAbs().maxCoeff()));
    }
}

TEST(Context, ValidationRejectsBadInput) {
    EXPECT_THROW(validate_context({}), ContractError);
    ContextTrajectory t = uniform_trajectory(5, 0.1, 1, 0);
    t.times[2] = t.times[1];
    EXPECT_THROW(validate_context({t}), ContractError);
    ContextTrajectory single = uniform_trajectory(1, 0.1, 1, 0);
    EXPECT_THROW(validate_context({single}), ContractError);
    ContextTrajectory wide = uniform_trajectory(5, 0.1, 4, 0);
    EXPECT_THROW(validate_context({wide}), ContractError);
}

TEST(Transitions, PairsAcrossTrajectories) {
    ContextTrajectory a, b;
    a.times = {0.0, 0.5, 1.5};
    a.values.resize(3, 1);
    a.values << 1, 2, 4;
    b.times = {2.0, 3.0};
    b.values.resize(2, 1);
    b.values << -1, -3;
    const auto tr = extract_transitions({a, b});
    ASSERT_EQ(tr.size(), 3);
    EXPECT_EQ(tr.y(2, 0), -1);
    EXPECT_EQ(tr.dy(1, 0), 2);
    EXPECT_EQ(tr.dy(2, 0), -2);
    EXPECT_EQ(tr.dtau[1], 1.0);
}

TEST(Features, LayoutAndPadding) {
    const Context ctx{uniform_trajectory(10, 0.05, 2, 5)};
    const auto norm = fit_normalization(ctx);
    const auto tr = extract_transitions(ctx);
    const auto f = transition_features(tr, norm);
    ASSERT_EQ(f.rows(), 9);
    ASSERT_EQ(f.cols(), kFeatureWidth);
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
        for (Eigen::Index k = 0; k < 2; ++k) {
            EXPECT_NEAR(f(r, k), (tr.y(r, k) - norm.mu[k]) / norm.sigma[k], 1e-12);
            const double dz = tr.dy(r, k) / norm.sigma[k] / kTargetGap;
            EXPECT_NEAR(f(r, 3 + k), dz, 1e-9 * (1.0 + std::abs(dz)));
            EXPECT_NEAR(f(r, 6 + k), dz * dz, 1e-9 * (1.0 + dz * dz));
        }
        EXPECT_EQ(f(r, 2), 0.0);
        EXPECT_EQ(f(r, 5), 0.0);
        EXPECT_EQ(f(r, 8), 0.0);
        EXPECT_NEAR(f(r, 9), 1.0, 1e-12);
    }
}

TEST(Queries, NormalizedAndPadded) {
    const Context ctx{uniform_trajectory(10, 0.05, 1, 6)};
    const auto norm = fit_normalization(ctx);
    Eigen::MatrixXd x(2, 1);
    x << norm.mu[0], norm.mu[0] + 2.0 * norm.sigma[0];
    const auto q = normalize_queries(x, norm);
    ASSERT_EQ(q.cols(), 3);
    EXPECT_NEAR(q(0, 0), 0.0, 1e-12);
    EXPECT_NEAR(q(1, 0), 2.0, 1e-12);
    EXPECT_EQ(q(1, 1), 0.0);
    EXPECT_EQ(q(1, 2), 0.0);
    EXPECT_EQ(dimension_mask(2), (std::vector<std::uint8_t>{1, 1, 0}));
}
