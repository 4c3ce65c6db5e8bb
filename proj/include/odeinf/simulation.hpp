#pragma once

// Fixed-step Euler integration, divergence filtering, bounding boxes and
// vector-field target sampling.

#include "odeinf/errors.hpp"
#include "odeinf/prior.hpp"
#include "odeinf/random.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <variant>
#include <vector>

namespace odeinf {

/// Observation grid: n_points equidistant times on [t_start, t_end], with
/// `substeps` Euler steps between consecutive observations.
struct TimeGrid {
    double t_start = 0.0;
    double t_end = 9.95;
    int n_points = 200;
    int substeps = 20;

    void validate() const {
        ODEINF_REQUIRE(t_end > t_start, "time grid: t_end must exceed t_start");
        ODEINF_REQUIRE(n_points >= 2, "time grid: need at least two points");
        ODEINF_REQUIRE(substeps >= 1, "time grid: substeps must be >= 1");
    }

    double spacing() const { return (t_end - t_start) / static_cast<double>(n_points - 1); }
    double time(int i) const { return t_start + spacing() * static_cast<double>(i); }

    std::vector<double> times() const {
        std::vector<double> t(static_cast<std::size_t>(n_points));
        for (int i = 0; i < n_points; ++i) t[static_cast<std::size_t>(i)] = time(i);
        return t;
    }

    friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

struct Trajectory {
    std::vector<double> times;
    Eigen::MatrixXd states; // rows = observations, cols = dimensions

    Eigen::Index length() const { return states.rows(); }
    Eigen::Index dimension() const { return states.cols(); }
};

using TrajectorySet = std::vector<Trajectory>;

/// Returned instead of a trajectory when a state leaves the admissible region.
struct Diverged {
    std::size_t step = 0; // index of the first offending Euler substep (1-based; 0 is x0)
    bool non_finite = false;
};

using EulerResult = std::variant<Trajectory, Diverged>;

/// Integrates dx/dt = field(x) with `grid.substeps` equal Euler steps between
/// grid points. Any non-finite state, or (when `bound` is finite) any
/// coordinate with |x| > bound at any substep, yields Diverged.
template <typename Field>
EulerResult integrate_euler(const Field& field, const Eigen::VectorXd& x0, const TimeGrid& grid,
                            double bound = std::numeric_limits<double>::infinity()) {
    grid.validate();
    ODEINF_REQUIRE(x0.allFinite(), "integrate_euler: non-finite initial condition");
    const double h = grid.spacing() / static_cast<double>(grid.substeps);

    Trajectory traj;
    traj.times = grid.times();
    traj.states.resize(grid.n_points, x0.size());
    traj.states.row(0) = x0.transpose();

    Eigen::VectorXd x = x0;
    std::size_t step = 0;
    for (int i = 1; i < grid.n_points; ++i) {
        for (int s = 0; s < grid.substeps; ++s) {
            ++step;
            x += h * field(x);
            if (!x.allFinite()) return Diverged{step, true};
            if (x.cwiseAbs().maxCoeff() > bound) return Diverged{step, false};
        }
        traj.states.row(i) = x.transpose();
    }
    return traj;
}

struct Rejection {
    std::size_t trajectory = 0;
    Diverged cause;
};

using SimulationResult = std::variant<TrajectorySet, Rejection>;

/// Integrates the field from each given initial condition; the whole system is
/// rejected as soon as one trajectory diverges or crosses `reject_threshold`.
inline SimulationResult simulate_from(const PolynomialVectorField& vf, const std::vector<Eigen::VectorXd>& initial_conditions,
                                      const TimeGrid& grid, double reject_threshold = 1e2) {
    TrajectorySet out;
    out.reserve(initial_conditions.size());
    auto f = [&vf](const Eigen::VectorXd& x) { return evaluate_field(vf, x); };
    for (std::size_t k = 0; k < initial_conditions.size(); ++k) {
        auto res = integrate_euler(f, initial_conditions[k], grid, reject_threshold);
        if (auto* d = std::get_if<Diverged>(&res)) return Rejection{k, *d};
        out.push_back(std::move(std::get<Trajectory>(res)));
    }
    return out;
}

/// Draws n_trajectories standard-normal initial conditions, then simulates.
inline SimulationResult simulate_system(const PolynomialVectorField& vf, int n_trajectories, const TimeGrid& grid,
                                        double reject_threshold, Rng& rng) {
    ODEINF_REQUIRE(n_trajectories >= 1, "simulate_system: need at least one trajectory");
    std::vector<Eigen::VectorXd> ics;
    for (int k = 0; k < n_trajectories; ++k) {
        Eigen::VectorXd x0(vf.dimension);
        for (int i = 0; i < vf.dimension; ++i) x0[i] = rng.normal();
        ics.push_back(std::move(x0));
    }
    return simulate_from(vf, ics, grid, reject_threshold);
}

struct BoundingBox {
    Eigen::VectorXd low;
    Eigen::VectorXd high;

    Eigen::Index dimension() const { return low.size(); }

    bool contains(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        return (x.array() >= low.array()).all() && (x.array() <= high.array()).all();
    }

    /// min over dimensions of the distance to the nearest face, relative to the side length; in [0, 0.5].
    double relative_boundary_distance(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        double best = 0.5;
        for (Eigen::Index i = 0; i < low.size(); ++i) {
            const double side = high[i] - low[i];
            if (side <= 0.0) return 0.0;
            best = std::min(best, std::min(x[i] - low[i], high[i] - x[i]) / side);
        }
        return std::max(best, 0.0);
    }
};

inline constexpr double kDegenerateBoxPad = 0.1;

/// Box around every state of every trajectory, grown by expand*range per side.
/// A dimension with zero range is padded by a fixed 0.1 per side instead.
inline BoundingBox bounding_box(const TrajectorySet& trajectories, double expand) {
    ODEINF_REQUIRE(!trajectories.empty(), "bounding_box: no trajectories");
    Eigen::Index d = -1;
    Eigen::VectorXd lo, hi;
    for (const auto& t : trajectories) {
        if (t.states.rows() == 0) continue;
        if (d < 0) {
            d = t.states.cols();
            lo = t.states.colwise().minCoeff().transpose();
            hi = t.states.colwise().maxCoeff().transpose();
        } else {
            ODEINF_REQUIRE(t.states.cols() == d, "bounding_box: mixed dimensions");
            lo = lo.cwiseMin(t.states.colwise().minCoeff().transpose());
            hi = hi.cwiseMax(t.states.colwise().maxCoeff().transpose());
        }
    }
    ODEINF_REQUIRE(d > 0, "bounding_box: all trajectories are empty");
    BoundingBox box{lo, hi};
    for (Eigen::Index i = 0; i < d; ++i) {
        const double range = hi[i] - lo[i];
        const double pad = range > 0.0 ? expand * range : kDegenerateBoxPad;
        box.low[i] = lo[i] - pad;
        box.high[i] = hi[i] + pad;
    }
    return box;
}

/// Vector-field targets: n locations uniform on the box and the field values there.
struct VectorFieldSamples {
    Eigen::MatrixXd locations; // n x d
    Eigen::MatrixXd values;    // n x d

    Eigen::Index size() const { return locations.rows(); }
};

inline Eigen::VectorXd uniform_in_box(const BoundingBox& box, Rng& rng) {
    Eigen::VectorXd x(box.dimension());
    for (Eigen::Index i = 0; i < box.dimension(); ++i) x[i] = rng.uniform(box.low[i], box.high[i]);
    return x;
}

inline VectorFieldSamples sample_vf_targets(const PolynomialVectorField& vf, const BoundingBox& box, int n, Rng& rng) {
    ODEINF_REQUIRE(n >= 1, "sample_vf_targets: n must be >= 1");
    ODEINF_REQUIRE(box.dimension() == vf.dimension, "sample_vf_targets: box/field dimension mismatch");
    ODEINF_REQUIRE((box.low.array() <= box.high.array()).all(), "sample_vf_targets: invalid box");
    VectorFieldSamples out;
    out.locations.resize(n, vf.dimension);
    out.values.resize(n, vf.dimension);
    for (int j = 0; j < n; ++j) {
        const Eigen::VectorXd x = uniform_in_box(box, rng);
        out.locations.row(j) = x.transpose();
        out.values.row(j) = evaluate_field(vf, x).transpose();
    }
    return out;
}

} // namespace odeinf
