#pragma once

// Observation model used during pretraining: multiplicative Gaussian noise
// followed by independent Bernoulli subsampling.

#include "odeinf/errors.hpp"
#include "odeinf/random.hpp"
#include "odeinf/simulation.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace odeinf {

struct CorruptionConfig {
    double sigma = 0.0; // relative noise scale
    double rho = 0.0;   // drop probability

    void validate() const {
        ODEINF_REQUIRE(sigma >= 0.0, "corruption: sigma must be >= 0");
        ODEINF_REQUIRE(rho >= 0.0 && rho < 1.0, "corruption: rho must lie in [0, 1)");
    }
};

/// Ranges from which per-system corruption levels are drawn.
struct CorruptionRanges {
    double sigma_max = 0.06;
    double rho_max = 0.5;

    CorruptionConfig sample(Rng& rng) const { return {rng.uniform(0.0, sigma_max), rng.uniform(0.0, rho_max)}; }
};

struct CorruptedTrajectory {
    std::vector<double> times;
    Eigen::MatrixXd observations;
    std::vector<std::uint8_t> keep_mask; // over the original grid

    Eigen::Index length() const { return observations.rows(); }
};

/// y = (1 + eps) x with eps ~ N(0, sigma^2) drawn per entry (row-major order).
/// One normal is consumed per entry even when sigma == 0, so the stream
/// position does not depend on sigma.
inline Eigen::MatrixXd apply_noise(const Eigen::MatrixXd& states, double sigma, Rng& rng) {
    ODEINF_REQUIRE(sigma >= 0.0, "apply_noise: sigma must be >= 0");
    Eigen::MatrixXd out = states;
    for (Eigen::Index i = 0; i < states.rows(); ++i)
        for (Eigen::Index j = 0; j < states.cols(); ++j) {
            const double eps = rng.normal();
            if (sigma > 0.0) out(i, j) = (1.0 + sigma * eps) * states(i, j);
        }
    return out;
}

/// Drops each of L observations with probability rho. If fewer than two
/// survive, the first and last are forced back in.
inline std::vector<std::uint8_t> subsample(Eigen::Index length, double rho, Rng& rng) {
    ODEINF_REQUIRE(rho >= 0.0 && rho < 1.0, "subsample: rho must lie in [0, 1)");
    ODEINF_REQUIRE(length >= 2, "subsample: need at least two observations");
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(length));
    int kept = 0;
    for (auto& k : keep) {
        k = rng.bernoulli(rho) ? 0 : 1;
        kept += k;
    }
    if (kept < 2) {
        keep.front() = 1;
        keep.back() = 1;
    }
    return keep;
}

inline CorruptedTrajectory apply_mask(const std::vector<double>& times, const Eigen::MatrixXd& states,
                                      std::vector<std::uint8_t> keep) {
    CorruptedTrajectory out;
    Eigen::Index n = 0;
    for (auto k : keep) n += k;
    out.observations.resize(n, states.cols());
    out.times.reserve(static_cast<std::size_t>(n));
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) continue;
        out.times.push_back(times[i]);
        out.observations.row(r++) = states.row(static_cast<Eigen::Index>(i));
    }
    out.keep_mask = std::move(keep);
    return out;
}

/// One shared sigma for every trajectory of the system; one independent mask per trajectory.
inline std::vector<CorruptedTrajectory> corrupt_system(const TrajectorySet& trajectories, const CorruptionConfig& config,
                                                       Rng& rng) {
    config.validate();
    std::vector<CorruptedTrajectory> out;
    out.reserve(trajectories.size());
    for (const auto& t : trajectories) {
        Eigen::MatrixXd noisy = apply_noise(t.states, config.sigma, rng);
        auto keep = subsample(t.length(), config.rho, rng);
        out.push_back(apply_mask(t.times, noisy, std::move(keep)));
    }
    return out;
}

/// Additive observation noise y = x + N(0, variance); used by the oscillator benchmarks.
inline Eigen::MatrixXd apply_additive_noise(const Eigen::MatrixXd& states, double variance, Rng& rng) {
    ODEINF_REQUIRE(variance >= 0.0, "apply_additive_noise: variance must be >= 0");
    const double sd = std::sqrt(variance);
    Eigen::MatrixXd out = states;
    for (Eigen::Index i = 0; i < states.rows(); ++i)
        for (Eigen::Index j = 0; j < states.cols(); ++j) out(i, j) += sd * rng.normal();
    return out;
}

} // namespace odeinf
