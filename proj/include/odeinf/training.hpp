#pragma once

// Pretraining on the synthetic prior and trajectory-level finetuning.

#include "odeinf/autodiff.hpp"
#include "odeinf/context.hpp"
#include "odeinf/dataset.hpp"
#include "odeinf/errors.hpp"
#include "odeinf/json_io.hpp"
#include "odeinf/model.hpp"
#include "odeinf/random.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace odeinf {

struct TrainConfig {
    double learning_rate = 1e-5;
    double weight_decay = 1e-4;
    int batch_size = 64;
    double grad_clip = 10.0;
    double dropout = 0.10;
    int k_min = 1;
    int k_max = 9;
    int queries = 256;
    int steps = 1000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int checkpoint_every = 0; // 0: only at the end
    double time_limit_seconds = 0.0; // 0: none
    std::uint64_t seed = 0;

    void validate() const {
        ODEINF_REQUIRE(learning_rate >= 0.0, "train: learning_rate must be >= 0");
        ODEINF_REQUIRE(weight_decay >= 0.0, "train: weight_decay must be >= 0");
        ODEINF_REQUIRE(batch_size >= 1, "train: batch_size must be >= 1");
        ODEINF_REQUIRE(grad_clip > 0.0, "train: grad_clip must be positive");
        ODEINF_REQUIRE(dropout >= 0.0 && dropout < 1.0, "train: dropout must lie in [0, 1)");
        ODEINF_REQUIRE(k_min >= 1 && k_max >= k_min, "train: invalid K range");
        ODEINF_REQUIRE(queries >= 1, "train: queries must be >= 1");
        ODEINF_REQUIRE(steps >= 0, "train: steps must be >= 0");
        ODEINF_REQUIRE(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "train: betas must lie in [0, 1)");
        ODEINF_REQUIRE(adam_eps > 0.0, "train: adam_eps must be positive");
        ODEINF_REQUIRE(checkpoint_every >= 0, "train: checkpoint_every must be >= 0");
        ODEINF_REQUIRE(time_limit_seconds >= 0.0, "train: time_limit_seconds must be >= 0");
    }
};

inline Json to_json(const TrainConfig& c) {
    return Json{{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
                {"grad_clip", c.grad_clip},         {"dropout", c.dropout},           {"k_min", c.k_min},
                {"k_max", c.k_max},                 {"queries", c.queries},           {"steps", c.steps},
                {"beta1", c.beta1},                 {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
                {"checkpoint_every", c.checkpoint_every}, {"time_limit_seconds", c.time_limit_seconds}, {"seed", c.seed}};
}

inline void read(JsonReader& r, TrainConfig& c) {
    r.get("learning_rate", c.learning_rate);
    r.get("weight_decay", c.weight_decay);
    r.get("batch_size", c.batch_size);
    r.get("grad_clip", c.grad_clip);
    r.get("dropout", c.dropout);
    r.get("k_min", c.k_min);
    r.get("k_max", c.k_max);
    r.get("queries", c.queries);
    r.get("steps", c.steps);
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("adam_eps", c.adam_eps);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("time_limit_seconds", c.time_limit_seconds);
    r.get("seed", c.seed);
}

/// floor(n/2) locations among the record's observed states, the rest uniform on its box; targets are exact.
inline VectorFieldSamples sample_query_locations(const SystemRecord& record, int n_queries, Rng& rng) {
    ODEINF_REQUIRE(n_queries >= 1, "sample_query_locations: n_queries must be >= 1");
    std::vector<Eigen::Index> offsets;
    Eigen::Index total = 0;
    for (const auto& c : record.corrupted) {
        offsets.push_back(total);
        total += c.length();
    }
    ODEINF_REQUIRE(total > 0, "sample_query_locations: record has no observations");
    const int d = record.dimension();
    VectorFieldSamples out;
    out.locations.resize(n_queries, d);
    out.values.resize(n_queries, d);
    const int n_traj = n_queries / 2;
    for (int q = 0; q < n_queries; ++q) {
        Eigen::VectorXd x;
        if (q < n_traj) {
            auto k = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(total)));
            std::size_t t = 0;
            while (t + 1 < offsets.size() && offsets[t + 1] <= k) ++t;
            x = record.corrupted[t].observations.row(k - offsets[t]).transpose();
        } else {
            x = uniform_in_box(record.box, rng);
        }
        out.locations.row(q) = x.transpose();
        out.values.row(q) = evaluate_field(record.vf, x).transpose();
    }
    return out;
}

/// Uncertainty-weighted L1 loss in plain numbers (no tape).
inline double vf_loss(const Eigen::MatrixXd& predicted, const Eigen::VectorXd& log_var, const Eigen::MatrixXd& target,
                      const std::vector<std::uint8_t>& dim_mask) {
    ad::Tape<double> t(false);
    const auto p = t.constant(predicted);
    const auto u = t.constant(log_var);
    return t.value(ad::uncertainty_l1(t, p, u, target, dim_mask))(0, 0);
}

template <typename T>
struct AdamW {
    double lr = 1e-5, weight_decay = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t step_count = 0;
    std::vector<ad::Matrix<T>> m, v;

    AdamW() = default;
    AdamW(const TrainConfig& c) : lr(c.learning_rate), weight_decay(c.weight_decay), beta1(c.beta1), beta2(c.beta2), eps(c.adam_eps) {}

    void step(ad::ParameterStore<T>& params) {
        if (m.empty()) {
            for (const auto& p : params) {
                m.push_back(ad::Matrix<T>::Zero(p.value.rows(), p.value.cols()));
                v.push_back(ad::Matrix<T>::Zero(p.value.rows(), p.value.cols()));
            }
        }
        ++step_count;
        const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
        const T c1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(step_count)));
        const T c2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(step_count)));
        const T decay = static_cast<T>(1.0 - lr * weight_decay);
        const T a = static_cast<T>(lr);
        const T e = static_cast<T>(eps);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            m[i] = b1 * m[i] + (T(1) - b1) * p.grad;
            v[i] = b2 * v[i] + (T(1) - b2) * p.grad.cwiseAbs2();
            p.value *= decay;
            p.value.array() -= a * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + e);
        }
    }
};

struct StepMetrics {
    std::uint64_t step = 0;
    double loss = 0.0;
    double mae = 0.0;
    double mean_u = 0.0;
    double grad_norm = 0.0; // before clipping
};

inline Json to_json(const StepMetrics& m) {
    return Json{{"step", m.step}, {"loss", m.loss}, {"mae", m.mae}, {"mean_u", m.mean_u}, {"grad_norm", m.grad_norm}};
}

/// Normalized-space inputs of one batch item.
struct PreparedItem {
    Eigen::MatrixXd features;
    Eigen::MatrixXd queries; // Q x 3
    Eigen::MatrixXd targets; // Q x 3
    std::vector<std::uint8_t> dim_mask;
};

inline PreparedItem prepare_item(const BatchItem& item) {
    PreparedItem p;
    const NormalizationState norm = fit_normalization(item.context);
    Transitions tr;
    const auto j = static_cast<Eigen::Index>(item.valid_transitions());
    const Eigen::Index d = item.dimension;
    tr.y.resize(j, d);
    tr.dy.resize(j, d);
    tr.dtau.resize(j);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < item.valid.size(); ++i) {
        if (!item.valid[i]) continue;
        const auto ii = static_cast<Eigen::Index>(i);
        tr.y.row(r) = item.y.row(ii).head(d);
        tr.dy.row(r) = item.dy.row(ii).head(d);
        tr.dtau[r] = item.dtau[ii];
        ++r;
    }
    p.features = transition_features(tr, norm);
    p.queries = normalize_queries(item.query_locations, norm);
    p.targets = Eigen::MatrixXd::Zero(item.query_targets.rows(), kMaxDimension);
    for (Eigen::Index i = 0; i < d; ++i) p.targets.col(i) = item.query_targets.col(i) / (norm.sigma[i] * norm.gamma);
    p.dim_mask = item.dim_mask;
    return p;
}

struct ItemLoss {
    double loss = 0.0, mae = 0.0, mean_u = 0.0;
};

/// Forward (and optionally backward with weight `grad_weight`) for one item.
template <typename T>
ItemLoss item_loss(FieldModel<T>& model, const PreparedItem& p, std::uint64_t record, Rng* dropout_rng, double grad_weight) {
    ad::Tape<T> tape(grad_weight != 0.0);
    const auto c = model.encode(tape, p.features.template cast<T>(), dropout_rng);
    const auto mem = model.memory(tape, c);
    const auto out = model.decode(tape, tape.constant(p.queries.template cast<T>()), mem, p.dim_mask, dropout_rng);
    const auto& f = tape.value(out.field);
    const auto& u = tape.value(out.log_var);
    if (!f.allFinite() || !u.allFinite())
        throw NumericalError("non-finite model output for record " + std::to_string(record));
    const auto loss = ad::uncertainty_l1(tape, out.field, out.log_var, ad::Matrix<T>(p.targets.template cast<T>()), p.dim_mask);
    ItemLoss res;
    res.loss = static_cast<double>(tape.value(loss)(0, 0));
    if (!std::isfinite(res.loss)) throw NumericalError("non-finite loss for record " + std::to_string(record));
    int active = 0;
    for (auto m : p.dim_mask) active += m;
    double mae = 0.0;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
        for (int dd = 0; dd < kMaxDimension; ++dd)
            if (p.dim_mask[static_cast<std::size_t>(dd)]) mae += std::abs(static_cast<double>(f(i, dd)) - p.targets(i, dd));
    res.mae = mae / (static_cast<double>(f.rows()) * active);
    res.mean_u = static_cast<double>(u.mean());
    if (grad_weight != 0.0) tape.backward(ad::scale(tape, loss, static_cast<T>(grad_weight)));
    return res;
}

/// Clips the global gradient norm to `max_norm`; returns the norm before clipping.
template <typename T>
double clip_gradients(ad::ParameterStore<T>& params, double max_norm) {
    const double n = static_cast<double>(params.grad_norm());
    if (std::isfinite(n) && n > max_norm) params.scale_grad(static_cast<T>(max_norm / n));
    return n;
}

/// One AdamW update over a batch whose items carry query locations and targets.
template <typename T>
StepMetrics train_step(FieldModel<T>& model, const Batch& batch, AdamW<T>& opt, const TrainConfig& config, Rng& dropout_rng) {
    ODEINF_REQUIRE(!batch.items.empty(), "train_step: empty batch");
    model.set_dropout(config.dropout);
    auto& params = model.parameters();
    params.zero_grad();
    StepMetrics m;
    const double w = 1.0 / static_cast<double>(batch.items.size());
    std::vector<std::uint64_t> bad;
    for (const auto& item : batch.items) {
        ODEINF_REQUIRE(item.query_locations.rows() >= 1, "train_step: batch item has no queries");
        const PreparedItem p = prepare_item(item);
        try {
            const ItemLoss l = item_loss(model, p, item.record, &dropout_rng, w);
            m.loss += w * l.loss;
            m.mae += w * l.mae;
            m.mean_u += w * l.mean_u;
        } catch (const NumericalError&) {
            bad.push_back(item.record);
        }
    }
    if (!bad.empty()) {
        std::ostringstream os;
        os << "non-finite loss; step aborted; records:";
        for (auto r : bad) os << " " << r;
        params.zero_grad();
        throw NumericalError(os.str());
    }
    m.grad_norm = clip_gradients(params, config.grad_clip);
    if (!std::isfinite(m.grad_norm)) {
        params.zero_grad();
        throw NumericalError("non-finite gradient norm; step aborted");
    }
    opt.step(params);
    m.step = opt.step_count;
    return m;
}

/// Attaches queries to every item of a batch.
inline void attach_queries(Batch& batch, const std::vector<const SystemRecord*>& records, int n_queries, Rng& rng) {
    ODEINF_REQUIRE(batch.items.size() == records.size(), "attach_queries: batch/record count mismatch");
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto q = sample_query_locations(*records[i], n_queries, rng);
        batch.items[i].query_locations = std::move(q.locations);
        batch.items[i].query_targets = std::move(q.values);
    }
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradientCheckReport {
    std::size_t coordinates = 0;
    double max_relative_error = 0.0;
    std::size_t worst_coordinate = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline constexpr double kGradientCheckFloor = 1e-8;

/// Analytic gradients of the batch loss vs central differences on a random
/// subsample of parameter coordinates (double precision, dropout off).
inline GradientCheckReport gradient_check(FieldModel<double>& model, const std::vector<PreparedItem>& items, std::size_t n_coordinates,
                                          std::uint64_t seed, double h = 1e-5) {
    ODEINF_REQUIRE(!items.empty(), "gradient_check: no items");
    auto& params = model.parameters();
    const double w = 1.0 / static_cast<double>(items.size());
    auto total = [&](double gw) {
        double s = 0.0;
        for (std::size_t i = 0; i < items.size(); ++i) s += w * item_loss(model, items[i], i, nullptr, gw).loss;
        return s;
    };
    params.zero_grad();
    total(w);
    const std::size_t n = params.scalar_count();
    Rng rng(seed);
    std::vector<std::size_t> coords;
    if (n_coordinates >= n) {
        for (std::size_t k = 0; k < n; ++k) coords.push_back(k);
    } else {
        std::vector<std::size_t> pool(n);
        for (std::size_t k = 0; k < n; ++k) pool[k] = k;
        for (std::size_t i = 0; i < n_coordinates; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.below(n - i));
            std::swap(pool[i], pool[j]);
            coords.push_back(pool[i]);
        }
    }
    GradientCheckReport rep;
    rep.coordinates = coords.size();
    for (auto k : coords) {
        double& x = params.flat(k);
        const double x0 = x;
        x = x0 + h;
        const double lp = total(0.0);
        x = x0 - h;
        const double lm = total(0.0);
        x = x0;
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = params.flat_grad(k);
        const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), kGradientCheckFloor});
        if (rel > rep.max_relative_error || rep.coordinates == 0) {
            rep.max_relative_error = rel;
            rep.worst_coordinate = k;
            rep.worst_analytic = analytic;
            rep.worst_numeric = numeric;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Pretraining loop

struct TrainResult {
    std::uint64_t steps = 0;
    double seconds = 0.0;
    bool time_limited = false;
    std::vector<StepMetrics> log;
    std::string batch_rng_state;
    std::string dropout_rng_state;
};

/// Step count and generator states handed to checkpoint callbacks.
struct TrainProgress {
    std::uint64_t step = 0;
    std::string batch_rng_state;
    std::string dropout_rng_state;
};

/// Runs config.steps updates on the dataset's training split. `on_step` sees
/// every metrics record; `on_checkpoint` is called every checkpoint_every steps.
template <typename T>
TrainResult train(FieldModel<T>& model, const Dataset& data, const TrainConfig& config,
                  const std::function<void(const StepMetrics&)>& on_step = {},
                  const std::function<void(const TrainProgress&)>& on_checkpoint = {}) {
    config.validate();
    ODEINF_REQUIRE(!data.train.empty(), "train: dataset has no training records");
    Rng batch_rng(derive_seed(config.seed, {1}));
    Rng dropout_rng(derive_seed(config.seed, {2}));
    AdamW<T> opt(config);
    TrainResult res;
    const auto start = std::chrono::steady_clock::now();
    for (int s = 0; s < config.steps; ++s) {
        if (config.time_limit_seconds > 0.0) {
            const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            if (el >= config.time_limit_seconds) {
                res.time_limited = true;
                break;
            }
        }
        std::vector<const SystemRecord*> recs;
        for (int b = 0; b < config.batch_size; ++b)
            recs.push_back(&data.records[data.train[static_cast<std::size_t>(batch_rng.below(data.train.size()))]]);
        Batch batch = make_batch(recs, config.k_min, config.k_max, batch_rng);
        attach_queries(batch, recs, config.queries, batch_rng);
        const StepMetrics m = train_step(model, batch, opt, config, dropout_rng);
        res.log.push_back(m);
        ++res.steps;
        if (on_step) on_step(m);
        if (on_checkpoint && config.checkpoint_every > 0 && res.steps % static_cast<std::uint64_t>(config.checkpoint_every) == 0)
            on_checkpoint({res.steps, batch_rng.state(), dropout_rng.state()});
    }
    res.batch_rng_state = batch_rng.state();
    res.dropout_rng_state = dropout_rng.state();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

// ---------------------------------------------------------------------------
// Finetuning

struct FinetuneConfig {
    int n_steps = 25;
    int epochs = 200;
    int substeps = 20;
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
    double grad_clip = 10.0;
    bool step_noise = false;
    bool select_best = true;
    std::uint64_t seed = 0;

    void validate() const {
        ODEINF_REQUIRE(n_steps >= 2, "finetune: n_steps must be >= 2");
        ODEINF_REQUIRE(epochs >= 0, "finetune: epochs must be >= 0");
        ODEINF_REQUIRE(substeps >= 1, "finetune: substeps must be >= 1");
        ODEINF_REQUIRE(learning_rate >= 0.0, "finetune: learning_rate must be >= 0");
        ODEINF_REQUIRE(weight_decay >= 0.0, "finetune: weight_decay must be >= 0");
        ODEINF_REQUIRE(grad_clip > 0.0, "finetune: grad_clip must be positive");
    }
};

inline Json to_json(const FinetuneConfig& c) {
    return Json{{"n_steps", c.n_steps},     {"epochs", c.epochs},         {"substeps", c.substeps},
                {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
                {"step_noise", c.step_noise}, {"select_best", c.select_best}, {"seed", c.seed}};
}

inline void read(JsonReader& r, FinetuneConfig& c) {
    r.get("n_steps", c.n_steps);
    r.get("epochs", c.epochs);
    r.get("substeps", c.substeps);
    r.get("learning_rate", c.learning_rate);
    r.get("weight_decay", c.weight_decay);
    r.get("grad_clip", c.grad_clip);
    r.get("step_noise", c.step_noise);
    r.get("select_best", c.select_best);
    r.get("seed", c.seed);
}

struct SegmentPlan {
    int steps = 0;                 // observation intervals per segment
    std::vector<Eigen::Index> starts;
};

/// Segment length min(n_steps, L-1); floor(2L/n_steps) equally spaced starts (at least one).
inline SegmentPlan plan_segments(Eigen::Index length, int n_steps) {
    ODEINF_REQUIRE(length >= 2, "plan_segments: trajectory needs at least two observations");
    SegmentPlan p;
    p.steps = static_cast<int>(std::min<Eigen::Index>(n_steps, length - 1));
    const auto n_ic = std::max<Eigen::Index>(1, (2 * length) / n_steps);
    const Eigen::Index last = length - 1 - p.steps;
    for (Eigen::Index i = 0; i < n_ic; ++i) {
        if (n_ic == 1) {
            p.starts.push_back(0);
        } else {
            p.starts.push_back(static_cast<Eigen::Index>(std::llround(static_cast<double>(i * last) / static_cast<double>(n_ic - 1))));
        }
    }
    return p;
}

struct FinetuneEpoch {
    int epoch = 0;
    double train_loss = 0.0;      // loss of the parameters entering this epoch
    double validation_loss = 0.0; // same parameters on the validation set
    double best_validation = 0.0;
};

inline Json to_json(const FinetuneEpoch& e) {
    return Json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_loss", e.validation_loss}, {"best_validation", e.best_validation}};
}

struct FinetuneResult {
    int best_epoch = 0;
    double best_validation = 0.0;
    std::vector<FinetuneEpoch> history;
};

namespace detail {

/// Sum over segments of the per-segment MAE (original units) from rolling the
/// model field out with Euler; records on `tape` when it is recording.
template <typename T>
ad::Var rollout_loss(ad::Tape<T>& tape, FieldModel<T>& model, const typename FieldModel<T>::Memory& mem,
                     const NormalizationState& norm, const Context& trajectories, int n_steps, int substeps, Rng* noise_rng) {
    const Eigen::Index d = norm.dimension();
    const auto mask = dimension_mask(d);
    ad::Matrix<T> sigma_row = ad::Matrix<T>::Zero(1, kMaxDimension);
    for (Eigen::Index i = 0; i < d; ++i) sigma_row(0, i) = static_cast<T>(norm.sigma[i]);
    ad::Var total;
    for (const auto& tr : trajectories) {
        if (tr.length() < 2) continue;
        const SegmentPlan plan = plan_segments(tr.length(), n_steps);
        const auto s = static_cast<Eigen::Index>(plan.starts.size());
        ad::Matrix<T> z0 = ad::Matrix<T>::Zero(s, kMaxDimension);
        for (Eigen::Index k = 0; k < s; ++k)
            for (Eigen::Index i = 0; i < d; ++i)
                z0(k, i) = static_cast<T>((tr.values(plan.starts[static_cast<std::size_t>(k)], i) - norm.mu[i]) / norm.sigma[i]);
        ad::Var z = tape.constant(std::move(z0));
        const T weight = static_cast<T>(1.0 / (static_cast<double>(plan.steps) * static_cast<double>(d)));
        for (int j = 1; j <= plan.steps; ++j) {
            ad::Matrix<T> h(s, 1);
            ad::Matrix<T> noise_sd(s, 1);
            for (Eigen::Index k = 0; k < s; ++k) {
                const auto a = plan.starts[static_cast<std::size_t>(k)] + j;
                const double dt = tr.times[static_cast<std::size_t>(a)] - tr.times[static_cast<std::size_t>(a - 1)];
                h(k, 0) = static_cast<T>(norm.gamma * dt / substeps);
                noise_sd(k, 0) = static_cast<T>(dt / substeps / 5.0);
            }
            for (int sub = 0; sub < substeps; ++sub) {
                const auto out = model.decode(tape, z, mem, mask);
                z = ad::add(tape, z, ad::mul_col_const(tape, out.field, h));
                if (noise_rng) {
                    ad::Matrix<T> eps = ad::Matrix<T>::Zero(s, kMaxDimension);
                    for (Eigen::Index k = 0; k < s; ++k)
                        for (Eigen::Index i = 0; i < d; ++i)
                            eps(k, i) = static_cast<T>(noise_rng->normal() * static_cast<double>(noise_sd(k, 0)) / norm.sigma[i]);
                    z = ad::add(tape, z, tape.constant(std::move(eps)));
                }
            }
            if (!tape.value(z).allFinite()) throw NumericalError("finetune rollout diverged");
            ad::Matrix<T> target = ad::Matrix<T>::Zero(s, kMaxDimension);
            for (Eigen::Index k = 0; k < s; ++k)
                for (Eigen::Index i = 0; i < d; ++i)
                    target(k, i) = static_cast<T>(tr.values(plan.starts[static_cast<std::size_t>(k)] + j, i) - norm.mu[i]);
            const ad::Var err = ad::weighted_l1(tape, ad::mul_row_const(tape, z, sigma_row), std::move(target), weight);
            total = total.valid() ? ad::add(tape, total, err) : err;
        }
    }
    ODEINF_REQUIRE(total.valid(), "finetune: no trajectory with at least two observations");
    return total;
}

template <typename T>
double finetune_loss(FieldModel<T>& model, const Eigen::MatrixXd& features, const NormalizationState& norm, const Context& trajs,
                     const FinetuneConfig& cfg, Rng* noise_rng, bool backward) {
    ad::Tape<T> tape(backward);
    const auto c = model.encode(tape, features.template cast<T>());
    const auto mem = model.memory(tape, c);
    const auto loss = rollout_loss(tape, model, mem, norm, trajs, cfg.n_steps, cfg.substeps, noise_rng);
    const double v = static_cast<double>(tape.value(loss)(0, 0));
    if (backward) tape.backward(loss);
    return v;
}

} // namespace detail

/// Finetunes `model` on observed trajectories with the unrolled-solver segment
/// loss; on return the model holds the parameters with the best validation loss
/// (epoch 0 = the incoming parameters). `validation` defaults to `context`.
template <typename T>
FinetuneResult finetune(FieldModel<T>& model, const Context& context, const FinetuneConfig& config,
                        const Context* validation = nullptr, const std::function<void(const FinetuneEpoch&)>& on_epoch = {}) {
    config.validate();
    const NormalizationState norm = fit_normalization(context);
    const Eigen::MatrixXd features = transition_features(extract_transitions(context), norm);
    const Context& val = validation ? *validation : context;
    const bool shared = (validation == nullptr) && !config.step_noise;
    model.set_dropout(0.0);
    auto& params = model.parameters();
    TrainConfig tc;
    tc.learning_rate = config.learning_rate;
    tc.weight_decay = config.weight_decay;
    AdamW<T> opt(tc);
    Rng noise_rng(derive_seed(config.seed, {3}));

    FinetuneResult res;
    ad::ParameterStore<T> best = params;
    res.best_validation = std::numeric_limits<double>::infinity();
    auto consider = [&](int epoch, double train_loss, double val_loss) {
        FinetuneEpoch e{epoch, train_loss, val_loss, 0.0};
        if (std::isfinite(val_loss) && (val_loss < res.best_validation || !config.select_best)) {
            res.best_validation = val_loss;
            res.best_epoch = epoch;
            best = params;
        }
        e.best_validation = res.best_validation;
        res.history.push_back(e);
        if (on_epoch) on_epoch(e);
    };
    auto safe_loss = [&](const Context& trajs, Rng* nr, bool back) {
        try {
            return detail::finetune_loss(model, features, norm, trajs, config, nr, back);
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    for (int epoch = 0; epoch <= config.epochs; ++epoch) {
        const bool last = epoch == config.epochs;
        params.zero_grad();
        const double train_loss = safe_loss(context, config.step_noise ? &noise_rng : nullptr, !last);
        const double val_loss = shared ? train_loss : safe_loss(val, nullptr, false);
        consider(epoch, train_loss, val_loss);
        if (last) break;
        if (!std::isfinite(train_loss)) break;
        const double n = clip_gradients(params, config.grad_clip);
        if (!std::isfinite(n)) break;
        opt.step(params);
        if (!params.all_finite()) break;
    }
    if (res.best_validation == std::numeric_limits<double>::infinity()) {
        res.best_epoch = 0;
    }
    params.assign_values(best);
    return res;
}

} // namespace odeinf
