#pragma once

// Prior over sparse polynomial vector fields.

#include "odeinf/errors.hpp"
#include "odeinf/random.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace odeinf {

using Exponents = std::vector<int>;

struct Term {
    Exponents exponents;
    double coefficient = 0.0;

    friend bool operator==(const Term&, const Term&) = default;
};

/// One component f_i of the field; only terms that survived masking are stored.
struct PolynomialComponent {
    std::vector<Term> terms;

    template <typename Vec>
    double evaluate(const Vec& x) const {
        double acc = 0.0;
        for (const auto& term : terms) {
            double mono = term.coefficient;
            for (std::size_t k = 0; k < term.exponents.size(); ++k)
                for (int e = 0; e < term.exponents[k]; ++e) mono *= x[static_cast<Eigen::Index>(k)];
            acc += mono;
        }
        return acc;
    }

    friend bool operator==(const PolynomialComponent&, const PolynomialComponent&) = default;
};

struct PolynomialVectorField {
    int dimension = 1;
    std::vector<PolynomialComponent> components;
    double scale = 1.0;

    void validate() const {
        ODEINF_REQUIRE(dimension >= 1, "vector field dimension must be >= 1");
        ODEINF_REQUIRE(components.size() == static_cast<std::size_t>(dimension),
                       "vector field component count does not match its dimension");
        for (const auto& c : components)
            for (const auto& t : c.terms) {
                ODEINF_REQUIRE(t.exponents.size() == static_cast<std::size_t>(dimension),
                               "monomial exponent length does not match dimension");
                ODEINF_REQUIRE(std::isfinite(t.coefficient), "non-finite coefficient");
            }
    }

    friend bool operator==(const PolynomialVectorField&, const PolynomialVectorField&) = default;
};

/// Evaluates s * f(x). Throws ContractError on dimension mismatch or non-finite x.
inline Eigen::VectorXd evaluate_field(const PolynomialVectorField& vf, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != vf.dimension)
        throw ContractError("evaluate_field: state has " + std::to_string(x.size()) + " entries, field has dimension " +
                            std::to_string(vf.dimension));
    ODEINF_REQUIRE(x.allFinite(), "evaluate_field: non-finite state");
    Eigen::VectorXd out(vf.dimension);
    for (int i = 0; i < vf.dimension; ++i) out[i] = vf.scale * vf.components[static_cast<std::size_t>(i)].evaluate(x);
    return out;
}

/// Type-erased field used by the integrators, evaluation and the model wrappers.
using VectorFieldFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

inline VectorFieldFn as_function(PolynomialVectorField vf) {
    return [vf = std::move(vf)](const Eigen::VectorXd& x) { return evaluate_field(vf, x); };
}

struct PriorConfig {
    int dimension = 1;
    int max_degree = 3;
    double degree_keep_probability = 0.5;
    double monomial_keep_probability = 0.5;
    double scale_low = 0.0;
    double scale_high = 2.0;
    double coefficient_mean = 0.0;
    double coefficient_stddev = 1.0;

    void validate() const {
        ODEINF_REQUIRE(dimension >= 1, "prior: dimension must be >= 1");
        ODEINF_REQUIRE(max_degree >= 1, "prior: max_degree must be >= 1");
        ODEINF_REQUIRE(degree_keep_probability > 0.0 && degree_keep_probability <= 1.0,
                       "prior: degree keep probability must lie in (0, 1]");
        ODEINF_REQUIRE(monomial_keep_probability > 0.0 && monomial_keep_probability <= 1.0,
                       "prior: monomial keep probability must lie in (0, 1]");
        ODEINF_REQUIRE(scale_low >= 0.0 && scale_high >= scale_low, "prior: scale range must be non-negative and ordered");
        ODEINF_REQUIRE(coefficient_stddev > 0.0, "prior: coefficient stddev must be positive");
    }
};

namespace detail {

inline void compositions(int d, int remaining, int pos, Exponents& cur, std::vector<Exponents>& out) {
    if (pos == d - 1) {
        cur[static_cast<std::size_t>(pos)] = remaining;
        out.push_back(cur);
        return;
    }
    // Largest power of the earliest variable first: x1^2 before x1 x2 before x2^2.
    for (int e = remaining; e >= 0; --e) {
        cur[static_cast<std::size_t>(pos)] = e;
        compositions(d, remaining - e, pos + 1, cur, out);
    }
}

} // namespace detail

/// All exponent vectors of total degree exactly `degree`, in lexicographic-descending order.
inline std::vector<Exponents> monomials_of_degree(int d, int degree) {
    std::vector<Exponents> out;
    Exponents cur(static_cast<std::size_t>(d), 0);
    detail::compositions(d, degree, 0, cur, out);
    return out;
}

/// Graded lexicographic enumeration of every monomial with total degree <= p.
/// Size is binomial(d + p, p).
inline std::vector<Exponents> enumerate_monomials(int d, int p) {
    std::vector<Exponents> out;
    for (int j = 0; j <= p; ++j) {
        auto level = monomials_of_degree(d, j);
        out.insert(out.end(), level.begin(), level.end());
    }
    return out;
}

/// Draws one field from the prior. Per component: one Bernoulli mask per
/// degree and one per monomial, rejection-resampled until at least one
/// monomial survives both; surviving coefficients are i.i.d. normal. The
/// global scale is drawn last.
inline PolynomialVectorField sample_vector_field(const PriorConfig& config, Rng& rng) {
    config.validate();
    std::vector<std::vector<Exponents>> by_degree;
    for (int j = 0; j <= config.max_degree; ++j) by_degree.push_back(monomials_of_degree(config.dimension, j));

    PolynomialVectorField vf;
    vf.dimension = config.dimension;
    for (int i = 0; i < config.dimension; ++i) {
        std::vector<const Exponents*> kept;
        while (kept.empty()) {
            for (const auto& level : by_degree) {
                const bool degree_on = rng.bernoulli(config.degree_keep_probability);
                for (const auto& mono : level) {
                    const bool mono_on = rng.bernoulli(config.monomial_keep_probability);
                    if (degree_on && mono_on) kept.push_back(&mono);
                }
            }
        }
        PolynomialComponent comp;
        comp.terms.reserve(kept.size());
        for (const auto* mono : kept)
            comp.terms.push_back({*mono, rng.normal(config.coefficient_mean, config.coefficient_stddev)});
        vf.components.push_back(std::move(comp));
    }
    vf.scale = rng.uniform(config.scale_low, config.scale_high);
    return vf;
}

/// Builds a field from dense (exponent, coefficient) lists; handy for tests and demo systems.
inline PolynomialVectorField make_field(std::vector<std::vector<Term>> components, double scale = 1.0) {
    PolynomialVectorField vf;
    vf.dimension = static_cast<int>(components.size());
    for (auto& terms : components) vf.components.push_back({std::move(terms)});
    vf.scale = scale;
    vf.validate();
    return vf;
}

} // namespace odeinf
