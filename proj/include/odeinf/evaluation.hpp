#pragma once

// Scoring: R2, reconstruction/generalization rollouts, vector-field metrics,
// success rates and the oscillator forecasting/imputation suite.

#include "odeinf/context.hpp"
#include "odeinf/corruption.hpp"
#include "odeinf/dataset.hpp"
#include "odeinf/errors.hpp"
#include "odeinf/json_io.hpp"
#include "odeinf/model.hpp"
#include "odeinf/prior.hpp"
#include "odeinf/random.hpp"
#include "odeinf/simulation.hpp"
#include "odeinf/training.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace odeinf {

// ---------------------------------------------------------------------------
// R2

struct R2Result {
    std::vector<double> per_dimension;     // NaN where the truth is constant
    std::vector<std::uint8_t> constant;    // flagged dimensions
    double weighted = std::numeric_limits<double>::quiet_NaN();

    bool defined() const { return std::isfinite(weighted); }
};

/// Per-dimension 1 - SSE/SST and the variance-weighted average over non-constant dimensions.
inline R2Result r2_score(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth) {
    ODEINF_REQUIRE(predicted.rows() == truth.rows() && predicted.cols() == truth.cols(), "r2_score: shape mismatch");
    ODEINF_REQUIRE(truth.rows() >= 2, "r2_score: need at least two points");
    const Eigen::Index d = truth.cols();
    R2Result r;
    r.per_dimension.assign(static_cast<std::size_t>(d), std::numeric_limits<double>::quiet_NaN());
    r.constant.assign(static_cast<std::size_t>(d), 0);
    double var_total = 0.0;
    std::vector<double> var(static_cast<std::size_t>(d), 0.0);
    for (Eigen::Index i = 0; i < d; ++i) {
        const double mean = truth.col(i).mean();
        const double sst = (truth.col(i).array() - mean).square().sum();
        const double sse = (predicted.col(i) - truth.col(i)).squaredNorm();
        if (!(sst > 0.0)) {
            r.constant[static_cast<std::size_t>(i)] = 1;
            continue;
        }
        r.per_dimension[static_cast<std::size_t>(i)] = 1.0 - sse / sst;
        var[static_cast<std::size_t>(i)] = sst / static_cast<double>(truth.rows());
        var_total += var[static_cast<std::size_t>(i)];
    }
    if (var_total > 0.0) {
        double w = 0.0;
        for (Eigen::Index i = 0; i < d; ++i)
            if (!r.constant[static_cast<std::size_t>(i)]) w += var[static_cast<std::size_t>(i)] / var_total * r.per_dimension[static_cast<std::size_t>(i)];
        r.weighted = w;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Integration helpers

/// Classic fourth-order Runge-Kutta on an arbitrary increasing time list, `substeps` per interval.
inline std::optional<Eigen::MatrixXd> integrate_rk4(const VectorFieldFn& f, const Eigen::VectorXd& x0, const std::vector<double>& times,
                                                    int substeps) {
    ODEINF_REQUIRE(!times.empty() && substeps >= 1, "integrate_rk4: need times and substeps >= 1");
    Eigen::MatrixXd out(static_cast<Eigen::Index>(times.size()), x0.size());
    Eigen::VectorXd x = x0;
    out.row(0) = x.transpose();
    for (std::size_t i = 1; i < times.size(); ++i) {
        const double h = (times[i] - times[i - 1]) / substeps;
        for (int s = 0; s < substeps; ++s) {
            const Eigen::VectorXd k1 = f(x);
            const Eigen::VectorXd k2 = f(x + 0.5 * h * k1);
            const Eigen::VectorXd k3 = f(x + 0.5 * h * k2);
            const Eigen::VectorXd k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (!x.allFinite()) return std::nullopt;
        }
        out.row(static_cast<Eigen::Index>(i)) = x.transpose();
    }
    return out;
}

inline constexpr double kRolloutBound = 1e6;

/// Euler with `substeps` equal steps per interval of an arbitrary increasing time list.
/// Non-finite states or |x| > bound give nullopt (a failed rollout).
inline std::optional<Eigen::MatrixXd> integrate_at_times(const VectorFieldFn& f, const Eigen::VectorXd& x0, const std::vector<double>& times,
                                                         int substeps, double bound = kRolloutBound) {
    ODEINF_REQUIRE(!times.empty() && substeps >= 1, "integrate_at_times: need times and substeps >= 1");
    Eigen::MatrixXd out(static_cast<Eigen::Index>(times.size()), x0.size());
    Eigen::VectorXd x = x0;
    out.row(0) = x.transpose();
    for (std::size_t i = 1; i < times.size(); ++i) {
        const double h = (times[i] - times[i - 1]) / substeps;
        for (int s = 0; s < substeps; ++s) {
            x += h * f(x);
            if (!x.allFinite() || x.cwiseAbs().maxCoeff() > bound) return std::nullopt;
        }
        out.row(static_cast<Eigen::Index>(i)) = x.transpose();
    }
    return out;
}

inline std::vector<double> linspace(double a, double b, int n) {
    ODEINF_REQUIRE(n >= 2, "linspace: need at least two points");
    std::vector<double> t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
    return t;
}

// ---------------------------------------------------------------------------
// Systems and tasks

struct EvalSystem {
    std::string name;
    int dimension = 1;
    VectorFieldFn field;
    std::vector<Eigen::VectorXd> initial_conditions; // [0] builds the context; the rest are held out
    double t_start = 0.0;
    double t_end = 10.0;
    bool chaotic = false;
    std::optional<PolynomialVectorField> polynomial;
};

enum class TaskKind { Reconstruction, Generalization };

inline const char* to_string(TaskKind k) { return k == TaskKind::Reconstruction ? "reconstruction" : "generalization"; }

struct EvalTask {
    TaskKind kind = TaskKind::Reconstruction;
    double sigma = 0.0;
    double rho = 0.0;
    int eval_points = 512;
    int context_points = 512;
    int substeps = 20;
    int reference_substeps = 50;
    std::uint64_t seed = 0;

    void validate() const {
        CorruptionConfig{sigma, rho}.validate();
        ODEINF_REQUIRE(eval_points >= 2 && context_points >= 2, "eval task: grids need at least two points");
        ODEINF_REQUIRE(substeps >= 1 && reference_substeps >= 1, "eval task: substeps must be >= 1");
    }
};

/// Given a context, returns the inferred field in original coordinates.
using FieldProvider = std::function<VectorFieldFn(const Context&)>;

inline FieldProvider oracle_provider(VectorFieldFn f) {
    return [f = std::move(f)](const Context&) { return f; };
}

inline FieldProvider zero_provider(int dimension) {
    return [dimension](const Context&) -> VectorFieldFn {
        return [dimension](const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(dimension); };
    };
}

template <typename T>
FieldProvider model_provider(FieldModel<T>& model) {
    return [&model](const Context& context) -> VectorFieldFn {
        auto est = std::make_shared<FieldEstimator<T>>(model, context);
        return [est](const Eigen::VectorXd& x) { return est->predict(x); };
    };
}

struct TaskScore {
    std::string system;
    TaskKind kind = TaskKind::Reconstruction;
    double sigma = 0.0, rho = 0.0;
    std::uint64_t seed = 0;
    bool diverged = false;
    bool chaotic = false;
    double r2 = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> r2_per_dimension;

    /// Divergent or undefined scores count as failures.
    bool success(double threshold) const { return !diverged && std::isfinite(r2) && r2 > threshold; }
};

inline Json to_json(const TaskScore& s) {
    Json per = Json::array();
    for (double v : s.r2_per_dimension) per.push_back(std::isfinite(v) ? Json(v) : Json(nullptr));
    return Json{{"system", s.system}, {"task", to_string(s.kind)}, {"sigma", s.sigma}, {"rho", s.rho}, {"seed", s.seed},
                {"diverged", s.diverged}, {"chaotic", s.chaotic}, {"r2", std::isfinite(s.r2) ? Json(s.r2) : Json(nullptr)},
                {"r2_per_dimension", per}};
}

/// Reference and predicted paths of one task, kept for plotting.
struct TaskTrace {
    std::vector<double> times;
    Eigen::MatrixXd reference;
    Eigen::MatrixXd predicted; // empty when the rollout failed
    Context context;
};

/// Corrupted context from initial condition 0: reference solution on the
/// context grid, multiplicative noise and Bernoulli subsampling.
inline Context build_context(const EvalSystem& sys, const EvalTask& task, Rng& rng) {
    const auto times = linspace(sys.t_start, sys.t_end, task.context_points);
    const auto clean = integrate_rk4(sys.field, sys.initial_conditions.at(0), times, task.reference_substeps);
    ODEINF_REQUIRE(clean.has_value(), "build_context: reference solution diverged for " + sys.name);
    TrajectorySet ts{Trajectory{times, *clean}};
    const auto corrupted = corrupt_system(ts, {task.sigma, task.rho}, rng);
    return {ContextTrajectory{corrupted[0].times, corrupted[0].observations}};
}

/// Infers a field from the corrupted context and integrates it from the task's
/// initial condition (IC 0 for reconstruction, IC 1 for generalization).
inline TaskScore run_task(const FieldProvider& provider, const EvalSystem& sys, const EvalTask& task, TaskTrace* trace = nullptr) {
    task.validate();
    const std::size_t ic = task.kind == TaskKind::Reconstruction ? 0 : 1;
    ODEINF_REQUIRE(sys.initial_conditions.size() > ic, "run_task: system lacks the required initial condition");
    TaskScore s;
    s.system = sys.name;
    s.kind = task.kind;
    s.sigma = task.sigma;
    s.rho = task.rho;
    s.seed = task.seed;
    s.chaotic = sys.chaotic;
    Rng rng(task.seed);
    const Context context = build_context(sys, task, rng);
    const auto times = linspace(sys.t_start, sys.t_end, task.eval_points);
    const auto reference = integrate_rk4(sys.field, sys.initial_conditions[ic], times, task.reference_substeps);
    ODEINF_REQUIRE(reference.has_value(), "run_task: reference solution diverged for " + sys.name);
    if (trace) *trace = TaskTrace{times, *reference, {}, context};
    VectorFieldFn field;
    try {
        field = provider(context);
    } catch (const ContractError&) {
        s.diverged = true;
        return s;
    }
    std::optional<Eigen::MatrixXd> pred;
    try {
        pred = integrate_at_times(field, sys.initial_conditions[ic], times, task.substeps);
    } catch (const ContractError&) {
        pred.reset();
    }
    if (!pred) {
        s.diverged = true;
        return s;
    }
    if (trace) trace->predicted = *pred;
    const R2Result r = r2_score(*pred, *reference);
    s.r2 = r.weighted;
    s.r2_per_dimension = r.per_dimension;
    return s;
}

inline TaskScore run_reconstruction(const FieldProvider& provider, const EvalSystem& sys, EvalTask task, TaskTrace* trace = nullptr) {
    task.kind = TaskKind::Reconstruction;
    return run_task(provider, sys, task, trace);
}

inline TaskScore run_generalization(const FieldProvider& provider, const EvalSystem& sys, EvalTask task, TaskTrace* trace = nullptr) {
    task.kind = TaskKind::Generalization;
    return run_task(provider, sys, task, trace);
}

/// Task on a stored record: context = the record's trajectory 0 on its own
/// grid (clean when sigma = rho = 0, else corrupted afresh); reference and
/// rollout on an eval_points grid over the record's window, from the initial
/// state of trajectory 0 (reconstruction) or trajectory 1 (generalization).
inline TaskScore run_record_task(const FieldProvider& provider, const SystemRecord& rec, const EvalTask& task, TaskTrace* trace = nullptr) {
    task.validate();
    const std::size_t ic = task.kind == TaskKind::Reconstruction ? 0 : 1;
    ODEINF_REQUIRE(rec.clean.size() > ic, "run_record_task: record lacks the required trajectory");
    TaskScore s;
    s.system = "record-" + std::to_string(rec.provenance.index);
    s.kind = task.kind;
    s.sigma = task.sigma;
    s.rho = task.rho;
    s.seed = task.seed;
    Rng rng(task.seed);
    const auto corrupted = corrupt_system({rec.clean.at(0)}, {task.sigma, task.rho}, rng);
    const Context context{ContextTrajectory{corrupted[0].times, corrupted[0].observations}};
    const auto f = as_function(rec.vf);
    const Eigen::VectorXd x0 = rec.clean[ic].states.row(0).transpose();
    const auto times = linspace(rec.grid.t_start, rec.grid.t_end, task.eval_points);
    const auto reference = integrate_rk4(f, x0, times, task.reference_substeps);
    ODEINF_REQUIRE(reference.has_value(), "run_record_task: reference solution diverged");
    if (trace) *trace = TaskTrace{times, *reference, {}, context};
    std::optional<Eigen::MatrixXd> pred;
    try {
        pred = integrate_at_times(provider(context), x0, times, task.substeps);
    } catch (const ContractError&) {
        pred.reset();
    }
    if (!pred) {
        s.diverged = true;
        return s;
    }
    if (trace) trace->predicted = *pred;
    const R2Result r = r2_score(*pred, *reference);
    s.r2 = r.weighted;
    s.r2_per_dimension = r.per_dimension;
    return s;
}

inline double success_rate(const std::vector<TaskScore>& scores, double threshold) {
    if (scores.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& s : scores) n += s.success(threshold) ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Vector-field metrics

inline constexpr double kCosineFloor = 1e-12;

struct VfMetrics {
    double rmse = 0.0;
    double cosine = std::numeric_limits<double>::quiet_NaN();
    std::size_t samples = 0;
    std::size_t excluded = 0; // pairs with a (near) zero vector
};

inline Json to_json(const VfMetrics& m) {
    return Json{{"rmse", m.rmse}, {"cosine", std::isfinite(m.cosine) ? Json(m.cosine) : Json(nullptr)}, {"samples", m.samples}, {"excluded", m.excluded}};
}

/// RMSE = sqrt(mean over samples of ||p - t||^2); cosine averaged over pairs with both norms >= 1e-12.
inline VfMetrics vf_metrics(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth) {
    ODEINF_REQUIRE(predicted.rows() == truth.rows() && predicted.cols() == truth.cols(), "vf_metrics: shape mismatch");
    ODEINF_REQUIRE(truth.rows() >= 1, "vf_metrics: no samples");
    VfMetrics m;
    m.samples = static_cast<std::size_t>(truth.rows());
    m.rmse = std::sqrt((predicted - truth).rowwise().squaredNorm().mean());
    double cos_sum = 0.0;
    std::size_t used = 0;
    for (Eigen::Index i = 0; i < truth.rows(); ++i) {
        const double a = predicted.row(i).norm(), b = truth.row(i).norm();
        if (a < kCosineFloor || b < kCosineFloor) {
            ++m.excluded;
            continue;
        }
        cos_sum += predicted.row(i).dot(truth.row(i)) / (a * b);
        ++used;
    }
    if (used) m.cosine = cos_sum / static_cast<double>(used);
    return m;
}

/// Predicted field at every stored vf target of a record, compared with the stored values.
inline VfMetrics record_vf_metrics(const VectorFieldFn& field, const SystemRecord& rec) {
    Eigen::MatrixXd p(rec.vf_targets.size(), rec.dimension());
    for (Eigen::Index i = 0; i < rec.vf_targets.size(); ++i) p.row(i) = field(rec.vf_targets.locations.row(i).transpose()).transpose();
    return vf_metrics(p, rec.vf_targets.values);
}

// ---------------------------------------------------------------------------
// Reports

struct AggregateRow {
    TaskKind kind = TaskKind::Reconstruction;
    double rho = 0.0, sigma = 0.0;
    std::size_t systems = 0;
    std::size_t diverged = 0;
    double success_09 = 0.0;
    double success_08 = 0.0;
};

struct SystemVfMetrics {
    std::string system;
    VfMetrics metrics;
};

struct EvaluationReport {
    std::vector<TaskScore> scores;
    std::vector<AggregateRow> aggregates;
    std::vector<SystemVfMetrics> vf;
    Json runtime = Json::object();
};

/// Groups scores by (task, rho, sigma) in order of first appearance.
inline std::vector<AggregateRow> aggregate(const std::vector<TaskScore>& scores) {
    std::vector<AggregateRow> rows;
    std::vector<std::vector<TaskScore>> groups;
    for (const auto& s : scores) {
        auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& r) { return r.kind == s.kind && r.rho == s.rho && r.sigma == s.sigma; });
        if (it == rows.end()) {
            rows.push_back({s.kind, s.rho, s.sigma});
            groups.emplace_back();
            it = rows.end() - 1;
        }
        groups[static_cast<std::size_t>(it - rows.begin())].push_back(s);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].systems = groups[i].size();
        rows[i].diverged = static_cast<std::size_t>(std::count_if(groups[i].begin(), groups[i].end(), [](const TaskScore& s) { return s.diverged; }));
        rows[i].success_09 = success_rate(groups[i], 0.9);
        rows[i].success_08 = success_rate(groups[i], 0.8);
    }
    return rows;
}

inline Json to_json(const EvaluationReport& r) {
    Json scores = Json::array();
    for (const auto& s : r.scores) scores.push_back(to_json(s));
    Json aggs = Json::array();
    for (const auto& a : r.aggregates)
        aggs.push_back(Json{{"task", to_string(a.kind)}, {"rho", a.rho}, {"sigma", a.sigma}, {"systems", a.systems}, {"diverged", a.diverged},
                            {"success_r2_gt_0.9", a.success_09}, {"success_r2_gt_0.8", a.success_08}});
    Json vf = Json::array();
    for (const auto& v : r.vf) {
        Json j = to_json(v.metrics);
        j["system"] = v.system;
        vf.push_back(j);
    }
    return Json{{"aggregates", aggs}, {"scores", scores}, {"vf_metrics", vf}, {"runtime", r.runtime}};
}

/// Success-rate table: one row per (task, threshold), one column per (rho, sigma).
inline std::string success_table(const EvaluationReport& r) {
    std::vector<std::pair<double, double>> cols;
    for (const auto& a : r.aggregates)
        if (std::find(cols.begin(), cols.end(), std::make_pair(a.rho, a.sigma)) == cols.end()) cols.emplace_back(a.rho, a.sigma);
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(28) << "task / threshold";
    for (const auto& [rho, sigma] : cols) {
        std::ostringstream h;
        h << std::setprecision(2) << "rho=" << rho << " sigma=" << sigma;
        os << " | " << std::setw(20) << h.str();
    }
    os << "\n";
    for (TaskKind kind : {TaskKind::Reconstruction, TaskKind::Generalization}) {
        for (double thr : {0.9, 0.8}) {
            bool any = false;
            std::ostringstream line;
            line << std::fixed << std::setprecision(3) << std::left;
            std::ostringstream label;
            label << to_string(kind) << " R2>" << std::setprecision(1) << std::fixed << thr;
            line << std::setw(28) << label.str();
            for (const auto& [rho, sigma] : cols) {
                auto it = std::find_if(r.aggregates.begin(), r.aggregates.end(),
                                       [&](const AggregateRow& a) { return a.kind == kind && a.rho == rho && a.sigma == sigma; });
                line << " | " << std::setw(20);
                if (it == r.aggregates.end()) {
                    line << "-";
                } else {
                    line << (thr == 0.9 ? it->success_09 : it->success_08);
                    any = true;
                }
            }
            if (any) os << line.str() << "\n";
        }
    }
    return os.str();
}

/// Per-system detail rows.
inline std::string scores_csv(const std::vector<TaskScore>& scores) {
    std::ostringstream os;
    os << "system,task,rho,sigma,seed,diverged,chaotic,r2\n" << std::setprecision(17);
    for (const auto& s : scores) {
        os << s.system << "," << to_string(s.kind) << "," << s.rho << "," << s.sigma << "," << s.seed << "," << (s.diverged ? 1 : 0) << ","
           << (s.chaotic ? 1 : 0) << ",";
        if (std::isfinite(s.r2)) os << s.r2;
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Demo systems

inline PolynomialVectorField vdp_field() {
    // x1' = x2;  x2' = -x1 + 0.5 x2 - 0.5 x1^2 x2
    return make_field({{{{0, 1}, 1.0}}, {{{1, 0}, -1.0}, {{0, 1}, 0.5}, {{2, 1}, -0.5}}});
}

inline PolynomialVectorField fhn_field() {
    // x1' = 3 x1 - x1^3 + 3 x2;  x2' = (0.2 - 3 x1 - 0.2 x2) / 3
    return make_field({{{{1, 0}, 3.0}, {{3, 0}, -1.0}, {{0, 1}, 3.0}},
                       {{{0, 0}, 0.2 / 3.0}, {{1, 0}, -1.0}, {{0, 1}, -0.2 / 3.0}}});
}

inline std::vector<EvalSystem> demo_systems() {
    std::vector<EvalSystem> out;
    {
        EvalSystem s;
        s.name = "van-der-pol";
        s.dimension = 2;
        s.polynomial = vdp_field();
        s.field = as_function(*s.polynomial);
        s.initial_conditions = {Eigen::Vector2d(-1.5, 2.5), Eigen::Vector2d(1.0, 0.0)};
        s.t_end = 14.0;
        out.push_back(s);
    }
    {
        EvalSystem s;
        s.name = "fitzhugh-nagumo";
        s.dimension = 2;
        s.polynomial = fhn_field();
        s.field = as_function(*s.polynomial);
        s.initial_conditions = {Eigen::Vector2d(-1.0, 1.0), Eigen::Vector2d(1.5, -0.5)};
        s.t_end = 5.0;
        out.push_back(s);
    }
    {
        EvalSystem s;
        s.name = "pendulum";
        s.dimension = 2;
        s.field = [](const Eigen::VectorXd& x) { return Eigen::Vector2d(x[1], -std::sin(x[0])).eval(); };
        s.initial_conditions = {Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(0.5, 0.5)};
        s.t_end = 10.0;
        out.push_back(s);
    }
    {
        EvalSystem s;
        s.name = "lorenz";
        s.dimension = 3;
        s.polynomial = make_field({{{{1, 0, 0}, -10.0}, {{0, 1, 0}, 10.0}},
                                   {{{1, 0, 0}, 28.0}, {{0, 1, 0}, -1.0}, {{1, 0, 1}, -1.0}},
                                   {{{1, 1, 0}, 1.0}, {{0, 0, 1}, -8.0 / 3.0}}});
        s.field = as_function(*s.polynomial);
        s.initial_conditions = {Eigen::Vector3d(1.0, 1.0, 1.0), Eigen::Vector3d(-1.0, 2.0, 20.0)};
        s.t_end = 5.0;
        s.chaotic = true;
        out.push_back(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Oscillator forecasting / imputation suite

struct SummaryStats {
    std::size_t count = 0;
    double mean = 0.0, median = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
};

/// Summary over finite values; stddev with ddof = 0.
inline SummaryStats summarize(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
    SummaryStats s;
    s.count = v.size();
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    double sq = 0.0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(v.size()));
    s.min = v.front();
    s.max = v.back();
    return s;
}

inline Json to_json(const SummaryStats& s) {
    return Json{{"count", s.count}, {"mean", s.mean}, {"median", s.median}, {"std", s.stddev}, {"min", s.min}, {"max", s.max}};
}

enum class OscillatorTask { VdpForecast, FhnImputation };

inline const char* to_string(OscillatorTask t) { return t == OscillatorTask::VdpForecast ? "vdp-forecast" : "fhn-imputation"; }

/// Observation layout of one oscillator task; `noise_variance` is additive.
struct OscillatorLayout {
    OscillatorTask task = OscillatorTask::VdpForecast;
    PolynomialVectorField field;
    Eigen::VectorXd x0;
    std::vector<double> context_times;
    std::vector<double> target_times;
    double noise_variance = 0.05;
    bool remove_quadrant = false;
    int reference_substeps = 100;

    static OscillatorLayout vdp_task1() {
        OscillatorLayout l;
        l.task = OscillatorTask::VdpForecast;
        l.field = vdp_field();
        l.x0 = Eigen::Vector2d(-1.5, 2.5);
        l.context_times = linspace(0.0, 7.0, 50);
        l.target_times = linspace(7.0, 14.0, 50);
        l.noise_variance = 0.05;
        return l;
    }

    static OscillatorLayout fhn() {
        OscillatorLayout l;
        l.task = OscillatorTask::FhnImputation;
        l.field = fhn_field();
        l.x0 = Eigen::Vector2d(-1.0, 1.0);
        l.context_times = linspace(0.0, 5.0, 25);
        l.noise_variance = 0.025;
        l.remove_quadrant = true;
        return l;
    }
};

/// One realization: context (noisy, possibly with quadrant removal) and clean test targets.
struct OscillatorTrial {
    Context context;
    std::vector<double> test_times;
    Eigen::MatrixXd test_values;
    std::size_t removed = 0;
};

inline OscillatorTrial make_oscillator_trial(const OscillatorLayout& l, std::uint64_t noise_seed) {
    const auto f = as_function(l.field);
    const auto clean = integrate_rk4(f, l.x0, l.context_times, l.reference_substeps);
    ODEINF_REQUIRE(clean.has_value(), "oscillator: reference diverged");
    Rng rng(noise_seed);
    const Eigen::MatrixXd noisy = apply_additive_noise(*clean, l.noise_variance, rng);
    OscillatorTrial t;
    ContextTrajectory ctx;
    if (l.remove_quadrant) {
        std::vector<Eigen::Index> keep, drop;
        for (Eigen::Index i = 0; i < clean->rows(); ++i) ((*clean)(i, 0) > 0.0 && (*clean)(i, 1) < 0.0 ? drop : keep).push_back(i);
        ctx.values.resize(static_cast<Eigen::Index>(keep.size()), clean->cols());
        for (std::size_t k = 0; k < keep.size(); ++k) {
            ctx.times.push_back(l.context_times[static_cast<std::size_t>(keep[k])]);
            ctx.values.row(static_cast<Eigen::Index>(k)) = noisy.row(keep[k]);
        }
        t.test_values.resize(static_cast<Eigen::Index>(drop.size()), clean->cols());
        for (std::size_t k = 0; k < drop.size(); ++k) {
            t.test_times.push_back(l.context_times[static_cast<std::size_t>(drop[k])]);
            t.test_values.row(static_cast<Eigen::Index>(k)) = clean->row(drop[k]);
        }
        t.removed = drop.size();
    } else {
        ctx.times = l.context_times;
        ctx.values = noisy;
        t.test_times = l.target_times;
        std::vector<double> all = l.context_times;
        all.insert(all.end(), l.target_times.begin(), l.target_times.end());
        std::sort(all.begin(), all.end());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        const auto full = integrate_rk4(f, l.x0, all, l.reference_substeps);
        ODEINF_REQUIRE(full.has_value(), "oscillator: reference diverged");
        t.test_values.resize(static_cast<Eigen::Index>(l.target_times.size()), full->cols());
        for (std::size_t k = 0; k < l.target_times.size(); ++k) {
            const auto pos = std::lower_bound(all.begin(), all.end(), l.target_times[k]) - all.begin();
            t.test_values.row(static_cast<Eigen::Index>(k)) = full->row(pos);
        }
    }
    t.context.push_back(std::move(ctx));
    return t;
}

/// Integrates `field` from the true initial condition and returns the MSE over
/// test points and dimensions (infinity when the rollout fails).
inline double oscillator_mse(const VectorFieldFn& field, const OscillatorLayout& l, const OscillatorTrial& t, int substeps = 20) {
    std::vector<double> times{l.context_times.front()};
    std::vector<std::size_t> test_pos;
    std::vector<double> merged = l.context_times;
    merged.insert(merged.end(), t.test_times.begin(), t.test_times.end());
    std::sort(merged.begin(), merged.end());
    merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
    std::optional<Eigen::MatrixXd> path;
    try {
        path = integrate_at_times(field, l.x0, merged, substeps);
    } catch (const ContractError&) {
        path.reset();
    }
    if (!path) return std::numeric_limits<double>::infinity();
    double se = 0.0;
    for (std::size_t k = 0; k < t.test_times.size(); ++k) {
        const auto pos = static_cast<Eigen::Index>(std::lower_bound(merged.begin(), merged.end(), t.test_times[k]) - merged.begin());
        se += (path->row(pos) - t.test_values.row(static_cast<Eigen::Index>(k))).squaredNorm();
    }
    return se / static_cast<double>(t.test_times.size() * static_cast<std::size_t>(t.test_values.cols()));
}

/// MSE of predicting the mean of the context observations at every test point.
inline double context_mean_mse(const OscillatorTrial& t) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(t.test_values.cols());
    Eigen::Index n = 0;
    for (const auto& c : t.context) {
        mean += c.values.colwise().sum();
        n += c.length();
    }
    mean /= static_cast<double>(n);
    return (t.test_values.rowwise() - mean).squaredNorm() / static_cast<double>(t.test_values.size());
}

struct OscillatorTrialResult {
    std::uint64_t seed = 0;
    std::size_t context_points = 0;
    std::size_t test_points = 0;
    double zero_shot_mse = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> finetuned_mse;
    std::optional<int> best_epoch;
    std::string error;
};

inline Json to_json(const OscillatorTrialResult& r) {
    auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
    Json j{{"seed", r.seed}, {"context_points", r.context_points}, {"test_points", r.test_points}, {"zero_shot_mse", num(r.zero_shot_mse)}};
    if (r.finetuned_mse) j["finetuned_mse"] = num(*r.finetuned_mse);
    if (r.best_epoch) j["best_epoch"] = *r.best_epoch;
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

struct OscillatorReport {
    OscillatorTask task = OscillatorTask::VdpForecast;
    std::vector<OscillatorTrialResult> trials;
    SummaryStats zero_shot;
    std::optional<SummaryStats> finetuned;
};

inline Json to_json(const OscillatorReport& r) {
    Json trials = Json::array();
    for (const auto& t : r.trials) trials.push_back(to_json(t));
    Json j{{"task", to_string(r.task)}, {"trials", trials}, {"zero_shot", to_json(r.zero_shot)}};
    if (r.finetuned) j["finetuned"] = to_json(*r.finetuned);
    return j;
}

/// n_trials noise realizations (seeds base_seed + i); zero-shot MSE and,
/// when `finetune_config` is given, MSE after finetuning a copy of the model.
template <typename T>
OscillatorReport run_vdp_fhn_suite(const FieldModel<T>& model, const OscillatorLayout& layout, int n_trials, std::uint64_t base_seed,
                                   const std::optional<FinetuneConfig>& finetune_config = std::nullopt,
                                   const std::function<void(const OscillatorTrialResult&)>& on_trial = {}) {
    ODEINF_REQUIRE(n_trials >= 1, "run_vdp_fhn_suite: need at least one trial");
    OscillatorReport rep;
    rep.task = layout.task;
    std::vector<double> zs, ft;
    for (int i = 0; i < n_trials; ++i) {
        OscillatorTrialResult r;
        r.seed = base_seed + static_cast<std::uint64_t>(i);
        try {
            const OscillatorTrial trial = make_oscillator_trial(layout, r.seed);
            r.context_points = static_cast<std::size_t>(trial.context[0].length());
            r.test_points = trial.test_times.size();
            FieldModel<T> local = model;
            {
                FieldEstimator<T> est(local, trial.context);
                r.zero_shot_mse = oscillator_mse([&est](const Eigen::VectorXd& x) { return est.predict(x); }, layout, trial);
            }
            if (finetune_config) {
                FinetuneConfig fc = *finetune_config;
                fc.seed = r.seed;
                const auto res = finetune(local, trial.context, fc);
                r.best_epoch = res.best_epoch;
                FieldEstimator<T> est(local, trial.context);
                r.finetuned_mse = oscillator_mse([&est](const Eigen::VectorXd& x) { return est.predict(x); }, layout, trial);
            }
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        zs.push_back(r.zero_shot_mse);
        if (r.finetuned_mse) ft.push_back(*r.finetuned_mse);
        if (on_trial) on_trial(r);
        rep.trials.push_back(std::move(r));
    }
    rep.zero_shot = summarize(zs);
    if (finetune_config) rep.finetuned = summarize(ft);
    return rep;
}

} // namespace odeinf
