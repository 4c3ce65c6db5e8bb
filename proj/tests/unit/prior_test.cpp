#include "odeinf/json_io.hpp"
#include "odeinf/prior.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace odeinf;

namespace {

std::uint64_t choose(int n, int k) {
    std::uint64_t r = 1;
    for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
    return r;
}

} // namespace

TEST(Monomials, CountsMatchBinomial) {
    for (int d = 1; d <= 3; ++d)
        for (int p = 0; p <= 6; ++p) EXPECT_EQ(enumerate_monomials(d, p).size(), choose(d + p, p)) << "d=" << d << " p=" << p;
}

TEST(Monomials, DistinctAndGraded) {
    const auto all = enumerate_monomials(3, 4);
    std::set<Exponents> seen(all.begin(), all.end());
    EXPECT_EQ(seen.size(), all.size());
    int prev = 0;
    for (const auto& e : all) {
        int deg = 0;
        for (int v : e) {
            EXPECT_GE(v, 0);
            deg += v;
        }
        EXPECT_GE(deg, prev);
        prev = deg;
    }
}

TEST(Monomials, DegreeTwoOrderInTwoDimensions) {
    const auto m = monomials_of_degree(2, 2);
    ASSERT_EQ(m.size(), 3u);
    EXPECT_EQ(m[0], (Exponents{2, 0}));
    EXPECT_EQ(m[1], (Exponents{1, 1}));
    EXPECT_EQ(m[2], (Exponents{0, 2}));
}

TEST(Prior, EveryComponentNonEmpty) {
    Rng rng(7);
    for (int d = 1; d <= 3; ++d) {
        PriorConfig c;
        c.dimension = d;
        for (int n = 0; n < 3000; ++n) {
            const auto vf = sample_vector_field(c, rng);
            ASSERT_EQ(vf.components.size(), static_cast<std::size_t>(d));
            for (const auto& comp : vf.components) ASSERT_FALSE(comp.terms.empty());
            EXPECT_GE(vf.scale, c.scale_low);
            EXPECT_LE(vf.scale, c.scale_high);
        }
    }
}

TEST(Prior, TermsWithinDegreeAndUnique) {
    Rng rng(3);
    PriorConfig c;
    c.dimension = 2;
    c.max_degree = 3;
    for (int n = 0; n < 500; ++n) {
        const auto vf = sample_vector_field(c, rng);
        for (const auto& comp : vf.components) {
            std::set<Exponents> seen;
            for (const auto& t : comp.terms) {
                int deg = 0;
                for (int e : t.exponents) deg += e;
                EXPECT_LE(deg, 3);
                EXPECT_TRUE(seen.insert(t.exponents).second);
            }
        }
    }
}

TEST(Prior, KeepAllProbabilityKeepsEveryMonomial) {
    PriorConfig c;
    c.dimension = 2;
    c.max_degree = 3;
    c.degree_keep_probability = 1.0;
    c.monomial_keep_probability = 1.0;
    Rng rng(1);
    const auto vf = sample_vector_field(c, rng);
    for (const auto& comp : vf.components) EXPECT_EQ(comp.terms.size(), choose(5, 3));
}

TEST(Prior, CoefficientMomentsMatchConfig) {
    PriorConfig c;
    c.dimension = 1;
    c.max_degree = 1;
    c.degree_keep_probability = 1.0;
    c.monomial_keep_probability = 1.0;
    c.coefficient_mean = 0.5;
    c.coefficient_stddev = 2.0;
    Rng rng(11);
    double s = 0.0, s2 = 0.0;
    int n = 0;
    for (int i = 0; i < 20000; ++i) {
        const auto vf = sample_vector_field(c, rng);
        for (const auto& t : vf.components[0].terms) {
            s += t.coefficient;
            s2 += t.coefficient * t.coefficient;
            ++n;
        }
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    EXPECT_NEAR(mean, 0.5, 4.0 * 2.0 / std::sqrt(n));
    EXPECT_NEAR(var, 4.0, 0.15);
}

TEST(Prior, SameSeedSameField) {
    PriorConfig c;
    c.dimension = 3;
    Rng a(42), b(42);
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_vector_field(c, a), sample_vector_field(c, b));
}

TEST(Prior, InvalidConfigRejected) {
    PriorConfig c;
    c.max_degree = 0;
    Rng rng(0);
    EXPECT_THROW(sample_vector_field(c, rng), ContractError);
    c = {};
    c.coefficient_stddev = 0.0;
    EXPECT_THROW(sample_vector_field(c, rng), ContractError);
}

TEST(Field, EvaluatesByHand) {
    // f1 = 2 x1 x2 - 1, f2 = x1^2
    auto vf = make_field({{{{1, 1}, 2.0}, {{0, 0}, -1.0}}, {{{2, 0}, 1.0}}}, 0.5);
    const Eigen::VectorXd f = evaluate_field(vf, Eigen::Vector2d(3.0, -2.0));
    EXPECT_DOUBLE_EQ(f[0], 0.5 * (2.0 * 3.0 * -2.0 - 1.0));
    EXPECT_DOUBLE_EQ(f[1], 0.5 * 9.0);
}

TEST(Field, WrongDimensionThrows) {
    auto vf = make_field({{{{1}, 1.0}}});
    EXPECT_THROW(evaluate_field(vf, Eigen::Vector2d(1.0, 2.0)), ContractError);
    EXPECT_THROW(evaluate_field(vf, Eigen::VectorXd::Constant(1, std::nan(""))), ContractError);
}

TEST(Field, JsonRoundTrip) {
    PriorConfig c;
    c.dimension = 3;
    Rng rng(5);
    const auto vf = sample_vector_field(c, rng);
    const auto back = field_from_json(Json::parse(field_to_json(vf).dump()), "vf");
    EXPECT_EQ(back, vf);
}

TEST(Field, JsonUnknownKeyNamed) {
    Json j = field_to_json(make_field({{{{1}, 1.0}}}));
    j["bogus"] = 1;
    try {
        field_from_json(j, "vf");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.key(), "vf.bogus");
    }
}
