#pragma once

// Context handling: per-context instance normalization, time rescaling and
// transition feature extraction.

#include "odeinf/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <vector>

namespace odeinf {

inline constexpr int kMaxDimension = 3;
inline constexpr double kTargetGap = 0.01;
inline constexpr double kSigmaFloor = 1e-6;

/// One observed trajectory: strictly increasing times and the states seen at them.
struct ContextTrajectory {
    std::vector<double> times;
    Eigen::MatrixXd values; // rows = observations

    Eigen::Index length() const { return values.rows(); }
    Eigen::Index dimension() const { return values.cols(); }
};

using Context = std::vector<ContextTrajectory>;

inline void validate_context(const Context& context) {
    ODEINF_REQUIRE(!context.empty(), "context: no trajectories");
    const Eigen::Index d = context.front().dimension();
    ODEINF_REQUIRE(d >= 1 && d <= kMaxDimension, "context: dimension must lie in [1, 3]");
    bool any_transition = false;
    for (const auto& tr : context) {
        ODEINF_REQUIRE(tr.dimension() == d, "context: trajectories have different dimensions");
        ODEINF_REQUIRE(static_cast<Eigen::Index>(tr.times.size()) == tr.length(), "context: times/values length mismatch");
        ODEINF_REQUIRE(tr.values.allFinite(), "context: non-finite observation");
        for (std::size_t i = 1; i < tr.times.size(); ++i)
            ODEINF_REQUIRE(tr.times[i] > tr.times[i - 1], "context: observation times must be strictly increasing");
        any_transition = any_transition || tr.length() >= 2;
    }
    ODEINF_REQUIRE(any_transition, "context: need at least one transition");
}

struct NormalizationState {
    Eigen::VectorXd mu;
    Eigen::VectorXd sigma;
    double gamma = 1.0;
    std::vector<std::uint8_t> floored; // per dimension: sigma hit the floor

    Eigen::Index dimension() const { return mu.size(); }

    Eigen::VectorXd normalize_state(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        return (x - mu).cwiseQuotient(sigma);
    }
    Eigen::VectorXd denormalize_state(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        return z.cwiseProduct(sigma) + mu;
    }
    /// Field in normalized units -> field in original units.
    Eigen::VectorXd denormalize_field(const Eigen::Ref<const Eigen::VectorXd>& g) const {
        return g.cwiseProduct(sigma) * gamma;
    }
    Eigen::VectorXd normalize_field(const Eigen::Ref<const Eigen::VectorXd>& f) const {
        return f.cwiseQuotient(sigma) / gamma;
    }
    bool any_floored() const {
        for (auto f : floored)
            if (f) return true;
        return false;
    }
};

/// mu/sigma over every observation except each trajectory's last; gamma maps
/// the geometric mean gap onto kTargetGap.
inline NormalizationState fit_normalization(const Context& context) {
    validate_context(context);
    const Eigen::Index d = context.front().dimension();
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    Eigen::Index count = 0;
    double log_gap_sum = 0.0;
    Eigen::Index gaps = 0;
    for (const auto& tr : context) {
        const Eigen::Index n = tr.length() - 1;
        if (n <= 0) continue;
        sum += tr.values.topRows(n).colwise().sum().transpose();
        count += n;
        for (std::size_t i = 1; i < tr.times.size(); ++i) log_gap_sum += std::log((tr.times[i] - tr.times[i - 1]) / kTargetGap);
        gaps += n;
    }
    NormalizationState s;
    s.mu = sum / static_cast<double>(count);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(d);
    for (const auto& tr : context) {
        const Eigen::Index n = tr.length() - 1;
        if (n <= 0) continue;
        sq += (tr.values.topRows(n).rowwise() - s.mu.transpose()).array().square().colwise().sum().matrix().transpose();
    }
    s.sigma = (sq / static_cast<double>(count)).cwiseSqrt();
    s.floored.assign(static_cast<std::size_t>(d), 0);
    for (Eigen::Index i = 0; i < d; ++i)
        if (!(s.sigma[i] >= kSigmaFloor)) {
            s.sigma[i] = kSigmaFloor;
            s.floored[static_cast<std::size_t>(i)] = 1;
        }
    s.gamma = std::exp(-log_gap_sum / static_cast<double>(gaps));
    return s;
}

/// Raw transition tuples in original units.
struct Transitions {
    Eigen::MatrixXd y;    // J x d
    Eigen::MatrixXd dy;   // J x d
    Eigen::VectorXd dtau; // J

    Eigen::Index size() const { return y.rows(); }
};

inline Transitions extract_transitions(const Context& context) {
    validate_context(context);
    const Eigen::Index d = context.front().dimension();
    Eigen::Index j = 0;
    for (const auto& tr : context) j += std::max<Eigen::Index>(tr.length() - 1, 0);
    Transitions out;
    out.y.resize(j, d);
    out.dy.resize(j, d);
    out.dtau.resize(j);
    Eigen::Index r = 0;
    for (const auto& tr : context) {
        for (Eigen::Index i = 0; i + 1 < tr.length(); ++i, ++r) {
            out.y.row(r) = tr.values.row(i);
            out.dy.row(r) = tr.values.row(i + 1) - tr.values.row(i);
            out.dtau[r] = tr.times[static_cast<std::size_t>(i + 1)] - tr.times[static_cast<std::size_t>(i)];
        }
    }
    return out;
}

inline constexpr int kFeatureWidth = 3 * kMaxDimension + 1;

/// Model input rows (J x 10): normalized state, displacement and squared
/// displacement in units of kTargetGap, and the normalized gap over
/// kTargetGap. Dimensions above d are zero.
inline Eigen::MatrixXd transition_features(const Transitions& tr, const NormalizationState& norm) {
    const Eigen::Index d = norm.dimension();
    ODEINF_REQUIRE(tr.y.cols() == d, "transition_features: dimension mismatch");
    const Eigen::Index j = tr.size();
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(j, kFeatureWidth);
    for (Eigen::Index r = 0; r < j; ++r) {
        for (Eigen::Index i = 0; i < d; ++i) {
            const double z = (tr.y(r, i) - norm.mu[i]) / norm.sigma[i];
            const double dz = tr.dy(r, i) / norm.sigma[i] / kTargetGap;
            f(r, i) = z;
            f(r, kMaxDimension + i) = dz;
            f(r, 2 * kMaxDimension + i) = dz * dz;
        }
        f(r, 3 * kMaxDimension) = norm.gamma * tr.dtau[r] / kTargetGap;
    }
    return f;
}

/// Query rows (Q x 3) in normalized coordinates, zero-padded above d.
inline Eigen::MatrixXd normalize_queries(const Eigen::MatrixXd& x, const NormalizationState& norm) {
    const Eigen::Index d = norm.dimension();
    ODEINF_REQUIRE(x.cols() == d, "normalize_queries: dimension mismatch");
    ODEINF_REQUIRE(x.allFinite(), "normalize_queries: non-finite query");
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), kMaxDimension);
    for (Eigen::Index i = 0; i < d; ++i) out.col(i) = (x.col(i).array() - norm.mu[i]) / norm.sigma[i];
    return out;
}

inline std::vector<std::uint8_t> dimension_mask(Eigen::Index d) {
    std::vector<std::uint8_t> m(kMaxDimension, 0);
    for (Eigen::Index i = 0; i < d; ++i) m[static_cast<std::size_t>(i)] = 1;
    return m;
}

} // namespace odeinf
