#include "odeinf/checkpoint.hpp"
#include "odeinf/cli.hpp"
#include "odeinf/evaluation.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace odeinf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(4) << v;
    return os.str();
}

// ---------------------------------------------------------------------------

double decay_error(int substeps) {
    const auto vf = make_field({{{{1}, -1.0}}});
    const auto res = integrate_euler(as_function(vf), Eigen::VectorXd::Ones(1), TimeGrid{0.0, 10.0, 201, substeps});
    const auto& tr = std::get<Trajectory>(res);
    double err = 0.0;
    for (Eigen::Index i = 0; i < tr.length(); ++i) err = std::max(err, std::abs(tr.states(i, 0) - std::exp(-tr.times[static_cast<std::size_t>(i)])));
    return err;
}

Outcome integrator_oracle() {
    const auto t0 = Clock::now();
    const double e20 = decay_error(20), e10 = decay_error(10);
    const double ratio = e10 / e20, secs = seconds_since(t0);
    return {e20 <= 5e-3 && ratio >= 1.7 && ratio <= 2.3 && secs < 1.0,
            "max error " + fmt(e20) + ", ratio " + fmt(ratio) + ", " + fmt(secs) + " s"};
}

std::uint64_t binomial(int n, int k) {
    std::uint64_t r = 1;
    for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
    return r;
}

Outcome prior_combinatorics() {
    const auto t0 = Clock::now();
    bool counts = true;
    for (int d = 1; d <= 3; ++d)
        for (int p = 0; p <= 6; ++p) counts = counts && enumerate_monomials(d, p).size() == binomial(d + p, p);
    bool nonempty = true;
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
        PriorConfig c;
        c.dimension = 1 + i % 3;
        const auto vf = sample_vector_field(c, rng);
        for (const auto& comp : vf.components) nonempty = nonempty && !comp.terms.empty();
    }
    const double secs = seconds_since(t0);
    return {counts && nonempty && secs < 5.0, std::string("counts ") + (counts ? "ok" : "wrong") + ", components " +
                                                  (nonempty ? "non-empty" : "EMPTY") + ", " + fmt(secs) + " s"};
}

Outcome corruption_laws() {
    const auto t0 = Clock::now();
    Rng rng(2);
    const int n = 10000;
    const double sigma = 0.06, x = 1.7;
    const Eigen::MatrixXd y = apply_noise(Eigen::MatrixXd::Constant(n, 1, x), sigma, rng);
    const double z = std::abs(y.mean() - x) / (sigma * x / std::sqrt(static_cast<double>(n)));
    double total = 0.0;
    for (int i = 0; i < 10000; ++i)
        for (auto k : subsample(200, 0.5, rng)) total += k;
    const double mean = total / 10000.0, secs = seconds_since(t0);
    return {z <= 3.0 && std::abs(mean - 100.0) <= 2.0 && secs < 10.0,
            "noise bias " + fmt(z) + " standard errors, retained mean " + fmt(mean) + ", " + fmt(secs) + " s"};
}

Context uniform_context(int n, double dt, Eigen::Index d, std::uint64_t seed) {
    Rng rng(seed);
    ContextTrajectory t;
    t.values.resize(n, d);
    for (int i = 0; i < n; ++i) {
        t.times.push_back(dt * i);
        for (Eigen::Index k = 0; k < d; ++k) t.values(i, k) = rng.normal(2.0 * static_cast<double>(k), 3.0);
    }
    return {t};
}

Outcome normalization_algebra() {
    const auto a = fit_normalization(uniform_context(100, 0.01, 1, 1));
    const auto b = fit_normalization(uniform_context(200, 0.05, 3, 2));
    Rng rng(3);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        Eigen::VectorXd x(3);
        for (int k = 0; k < 3; ++k) x[k] = rng.normal(0.0, 10.0);
        worst = std::max(worst, (b.denormalize_state(b.normalize_state(x)) - x).cwiseAbs().maxCoeff());
    }
    return {a.gamma == 1.0 && std::abs(b.gamma - 0.2) <= 1e-12 && worst <= 1e-9,
            "gamma " + fmt(a.gamma) + " and " + fmt(b.gamma) + ", round trip " + fmt(worst)};
}

Context random_context(Eigen::Index d, int n_traj, int length, std::uint64_t seed) {
    Rng rng(seed);
    Context ctx;
    for (int k = 0; k < n_traj; ++k) {
        ContextTrajectory t;
        t.values.resize(length, d);
        for (int i = 0; i < length; ++i) {
            t.times.push_back(0.0625 * i);
            for (Eigen::Index j = 0; j < d; ++j) t.values(i, j) = std::sin(0.3 * i + static_cast<double>(j + k)) + 0.1 * rng.normal();
        }
        ctx.push_back(std::move(t));
    }
    return ctx;
}

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff() / std::max(1e-12, b.cwiseAbs().maxCoeff()); }

Outcome invariances() {
    const auto t0 = Clock::now();
    FieldModel<float> m(ModelConfig::desk(), 17);
    Rng rng(4);
    const auto ctx = random_context(3, 3, 40, 5);
    Eigen::MatrixXd q(16, 3);
    for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
    FieldEstimator<float> base(m, ctx);
    const Eigen::MatrixXd f0 = base.predict(q);

    FieldEstimator<float> perm(m, Context{ctx[2], ctx[0], ctx[1]});
    const double e_perm = rel(perm.predict(q), f0);

    Context shifted = ctx;
    for (auto& t : shifted)
        for (auto& s : t.times) s += 512.0;
    FieldEstimator<float> shift(m, shifted);
    const bool exact_shift = shift.predict(q) == f0;

    Context dilated = ctx;
    for (auto& t : dilated)
        for (auto& s : t.times) s *= 2.7;
    FieldEstimator<float> dil(m, dilated);
    const double e_dil = rel(dil.predict(q) * 2.7, f0);

    const Eigen::Array3d scale(3.0, 0.2, 11.0), offset(-5.0, 2.0, 0.7);
    Context moved = ctx;
    for (auto& t : moved) t.values = ((t.values.array().rowwise() * scale.transpose()).rowwise() + offset.transpose()).matrix();
    const Eigen::MatrixXd qm = ((q.array().rowwise() * scale.transpose()).rowwise() + offset.transpose()).matrix();
    FieldEstimator<float> aff(m, moved);
    const Eigen::MatrixXd expect = (f0.array().rowwise() * scale.transpose()).matrix();
    const double e_aff = rel(aff.predict(qm), expect);

    const auto c1 = random_context(1, 2, 40, 6);
    const auto norm = fit_normalization(c1);
    Eigen::MatrixXf zq = Eigen::MatrixXf::Zero(8, 3);
    for (Eigen::Index i = 0; i < 8; ++i) zq(i, 0) = static_cast<float>(rng.normal());
    Eigen::MatrixXf junk = zq;
    for (Eigen::Index i = 0; i < 8; ++i) junk(i, 1) = static_cast<float>(rng.normal(0.0, 50.0)), junk(i, 2) = static_cast<float>(rng.normal(0.0, 50.0));
    auto run = [&](const Eigen::MatrixXf& zz) {
        ad::Tape<float> t(false);
        const auto mem = m.memory(t, m.encode(t, transition_features(extract_transitions(c1), norm).cast<float>()));
        const auto out = m.decode(t, t.constant(zz), mem, dimension_mask(1));
        Eigen::MatrixXd r(8, 4);
        r << t.value(out.field).cast<double>(), t.value(out.log_var).cast<double>();
        return r;
    };
    const Eigen::MatrixXd pa = run(zq), pb = run(junk);
    const double e_pad = std::max((pa - pb).cwiseAbs().maxCoeff(), pb.middleCols(1, 2).cwiseAbs().maxCoeff());
    const double secs = seconds_since(t0);
    return {e_perm < 1e-5 && exact_shift && e_dil < 1e-4 && e_aff < 1e-4 && e_pad < 1e-6 && secs < 30.0,
            "permutation " + fmt(e_perm) + ", shift " + (exact_shift ? "exact" : "NOT exact") + ", dilation " + fmt(e_dil) + ", affine " +
                fmt(e_aff) + ", padding " + fmt(e_pad) + ", " + fmt(secs) + " s"};
}

Outcome loss_stationarity() {
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(1, 3), target = Eigen::MatrixXd::Zero(1, 3);
    target(0, 0) = 0.5;
    auto loss = [&](double u) { return vf_loss(p, Eigen::VectorXd::Constant(1, u), target, {1, 0, 0}); };
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = -10.0, b = 10.0, c = b - g * (b - a), d = a + g * (b - a);
    while (b - a > 1e-10) {
        if (loss(c) < loss(d)) b = d;
        else a = c;
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    const double u = 0.5 * (a + b), v = loss(u);
    return {std::abs(u - std::log(0.5)) <= 1e-4 && std::abs(v - (1.0 + std::log(0.5))) <= 1e-4, "U* " + fmt(u) + ", minimum " + fmt(v)};
}

Outcome gradient_check_tiny() {
    const auto t0 = Clock::now();
    GenerationConfig g;
    g.vf_samples = 16;
    g.seed = 7;
    std::vector<SystemRecord> recs;
    for (int d = 1; d <= 3; ++d)
        for (std::uint64_t a = 0; recs.size() < static_cast<std::size_t>(d); ++a) {
            auto r = generate_record(g, d, a);
            if (auto* s = std::get_if<SystemRecord>(&r)) recs.push_back(std::move(*s));
        }
    std::vector<const SystemRecord*> ptrs;
    for (const auto& r : recs) ptrs.push_back(&r);
    Rng rng(8);
    Batch b = make_batch(ptrs, 1, 3, rng);
    attach_queries(b, ptrs, 8, rng);
    std::vector<PreparedItem> items;
    for (const auto& it : b.items) items.push_back(prepare_item(it));
    FieldModel<double> m(ModelConfig::tiny(), 9);
    for (auto& p : m.parameters())
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.05 * rng.normal();
    const auto rep = gradient_check(m, items, 256, 10, 1e-6);
    const double secs = seconds_since(t0);
    return {rep.coordinates >= 200 && rep.max_relative_error <= 1e-3 && secs < 120.0,
            std::to_string(rep.coordinates) + " coordinates, max relative error " + fmt(rep.max_relative_error) + ", " + fmt(secs) + " s"};
}

double brute_r2(const Eigen::MatrixXd& p, const Eigen::MatrixXd& t) {
    const Eigen::Index n = t.rows();
    std::vector<double> sst(static_cast<std::size_t>(t.cols()), 0.0), sse(sst.size(), 0.0);
    for (Eigen::Index k = t.cols() - 1; k >= 0; --k) {
        double mean = 0.0;
        for (Eigen::Index i = n - 1; i >= 0; --i) mean += t(i, k) / static_cast<double>(n);
        for (Eigen::Index i = n - 1; i >= 0; --i) {
            sst[static_cast<std::size_t>(k)] += (t(i, k) - mean) * (t(i, k) - mean);
            sse[static_cast<std::size_t>(k)] += (t(i, k) - p(i, k)) * (t(i, k) - p(i, k));
        }
    }
    double total = 0.0, acc = 0.0;
    for (double s : sst) total += s;
    for (std::size_t k = 0; k < sst.size(); ++k) acc += sst[k] * (1.0 - sse[k] / sst[k]);
    return acc / total;
}

Outcome metric_oracle() {
    Rng rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Eigen::Index n = 5 + static_cast<Eigen::Index>(rng.below(100)), d = 1 + static_cast<Eigen::Index>(rng.below(3));
        Eigen::MatrixXd t(n, d), p(n, d);
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            t.data()[i] = rng.normal(0.0, 1.0 + static_cast<double>(i % d));
            p.data()[i] = t.data()[i] + rng.normal(0.0, 0.3 + rng.uniform(0.0, 1.0));
        }
        worst = std::max(worst, std::abs(r2_score(p, t).weighted - brute_r2(p, t)));
    }
    Eigen::MatrixXd t(3, 1), p(3, 1);
    t << 0, 1, 2;
    p << 0, 1, 4;
    const double hand = r2_score(p, t).weighted;
    return {worst <= 1e-10 && hand == -1.0, "max deviation " + fmt(worst) + ", hand case " + fmt(hand)};
}

Outcome oracle_sandwich() {
    std::ostringstream os;
    bool ok = true;
    for (const auto& sys : demo_systems()) {
        EvalTask task;
        const auto good = run_reconstruction(oracle_provider(sys.field), sys, task);
        const auto zero = run_reconstruction(zero_provider(sys.dimension), sys, task);
        if (!sys.chaotic) ok = ok && good.r2 >= 0.999;
        ok = ok && !(zero.r2 >= 0.9);
        os << sys.name << " " << fmt(good.r2) << "/" << fmt(zero.r2) << (sys.chaotic ? " (chaotic)" : "") << "; ";
    }
    return {ok, "true/zero R2: " + os.str()};
}

// ---------------------------------------------------------------------------
// Desk-scale smoke runs

struct SmokeSettings {
    int systems = 2000;
    int vf_samples = 1000;
    std::uint64_t data_seed = 1;
    int steps = 3400;
    double time_limit = 1750.0;
    double learning_rate = 1e-3;
    int batch_size = 16;
    int queries = 128;
    std::uint64_t train_seed = 3;
    std::uint64_t model_seed = 11;
};

GenerationConfig smoke_generation(const SmokeSettings& s) {
    GenerationConfig g;
    g.counts = {s.systems, 0, 0};
    g.prior.max_degree = 2;
    g.vf_samples = s.vf_samples;
    g.seed = s.data_seed;
    return g;
}

TrainConfig smoke_training(const SmokeSettings& s) {
    TrainConfig t;
    t.steps = s.steps;
    t.time_limit_seconds = s.time_limit;
    t.learning_rate = s.learning_rate;
    t.batch_size = s.batch_size;
    t.queries = s.queries;
    t.seed = s.train_seed;
    return t;
}

/// Dataset and trained checkpoint, reused across runs while the settings are unchanged.
struct SmokeArtifacts {
    Dataset data;
    FieldModel<float> model;
    double train_seconds = 0.0;
    std::uint64_t steps = 0;
    bool cached = false;
};

SmokeArtifacts smoke_artifacts(const fs::path& work) {
    const SmokeSettings s;
    const GenerationConfig g = smoke_generation(s);
    const TrainConfig tc = smoke_training(s);
    const Json key{{"generation", to_json(g)}, {"train", to_json(tc)}, {"model", to_json(ModelConfig::desk())}, {"model_seed", s.model_seed}};
    const std::string tag = std::to_string(io::crc32(key.dump()));
    const fs::path data_dir = work / ("smoke-data-" + std::to_string(io::crc32(to_json(g).dump())));
    const fs::path ckpt = work / ("smoke-" + tag + ".ckpt");
    if (!fs::exists(data_dir / "manifest.json")) generate_dataset(g, data_dir, 1);
    SmokeArtifacts a{load_dataset(data_dir), FieldModel<float>(ModelConfig::desk(), s.model_seed)};
    if (fs::exists(ckpt)) {
        const auto c = load_checkpoint(ckpt);
        a.model = model_from_checkpoint(c);
        a.steps = c.step;
        a.train_seconds = c.metadata.value("seconds", 0.0);
        a.cached = true;
        return a;
    }
    const auto res = train(a.model, a.data, tc);
    a.steps = res.steps;
    a.train_seconds = res.seconds;
    save_checkpoint(ckpt, make_checkpoint(a.model, res.steps, Json{{"seconds", res.seconds}, {"time_limited", res.time_limited}}));
    return a;
}

Outcome desk_smoke(const SmokeArtifacts& a) {
    FieldModel<float> model = a.model;
    const FieldProvider provider = model_provider(model);
    std::vector<TaskScore> scores;
    EvalTask task;
    task.context_points = 200;
    for (auto i : a.data.validation) scores.push_back(run_record_task(provider, a.data.records[i], task));
    const double rate = success_rate(scores, 0.9);
    std::size_t diverged = 0;
    for (const auto& s : scores) diverged += s.diverged;
    return {rate >= 0.4 && a.train_seconds <= 1800.0,
            "success " + fmt(rate) + " over " + std::to_string(scores.size()) + " held-out systems (" + std::to_string(diverged) +
                " diverged), " + std::to_string(a.steps) + " steps in " + fmt(a.train_seconds) + " s" + (a.cached ? " (cached checkpoint)" : "")};
}

Outcome finetune_smoke(const SmokeArtifacts& a, int trials) {
    const auto t0 = Clock::now();
    FinetuneConfig fc;
    fc.epochs = 100;
    fc.substeps = 5;
    fc.learning_rate = 1e-3;
    const auto rep = run_vdp_fhn_suite(a.model, OscillatorLayout::vdp_task1(), trials, 0, fc);
    int improved = 0, errors = 0;
    std::vector<double> ratio;
    for (const auto& t : rep.trials) {
        if (!t.error.empty() || !t.finetuned_mse) {
            ++errors;
            continue;
        }
        ratio.push_back(*t.finetuned_mse / t.zero_shot_mse);
        if (*t.finetuned_mse <= 0.75 * t.zero_shot_mse) ++improved;
    }
    const auto sum = summarize(ratio);
    const int needed = (70 * trials + 99) / 100;
    return {improved >= needed && fc.epochs <= 200,
            std::to_string(improved) + "/" + std::to_string(trials) + " seeds with >= 25% reduction, median MSE ratio " + fmt(sum.median) + ", " +
                std::to_string(errors) + " errors, zero-shot median MSE " + fmt(rep.zero_shot.median) + ", " + fmt(seconds_since(t0)) + " s"};
}

// ---------------------------------------------------------------------------

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "odeinf");
    std::vector<const char*> argv;
    for (const auto& s : args) argv.push_back(s.c_str());
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), sink);
    std::cout.rdbuf(old);
    return code;
}

Outcome reproducibility(const fs::path& work) {
    const fs::path root = work / "repro";
    fs::remove_all(root);
    fs::create_directories(root);
    const auto cfg = (root / "config.json").string();
    std::ofstream(cfg) << R"({"seed": 21, "preset": "tiny",
        "generation": {"counts": [8, 4, 4], "vf_samples": 64, "records_per_shard": 6},
        "train": {"steps": 30, "batch_size": 3, "queries": 16},
        "finetune": {"epochs": 3, "n_steps": 5, "substeps": 2},
        "eval": {"systems": "demo", "eval_points": 128, "corruption": [{"rho": 0.3, "sigma": 0.02}]}})";
    const fs::path dir = root / "run";
    int failures = 0;
    for (const char* workers : {"1", "2"}) {
        fs::remove_all(dir);
        const std::string data = (dir / "data").string();
        failures += run_cli({"generate", "--config", cfg, "--out", data, "--workers", workers}) != 0;
        failures += run_cli({"train", "--config", cfg, "--dataset", data, "--out", (dir / "train").string()}) != 0;
        const std::string ck = (dir / "train" / "model.ckpt").string();
        const std::string shard = (dir / "data" / "shard-00000.bin").string();
        failures += run_cli({"finetune", "--config", cfg, "--checkpoint", ck, "--context", shard, "--record", "2", "--out", (dir / "ft").string()}) != 0;
        failures += run_cli({"infer", "--checkpoint", ck, "--context", shard, "--record", "2", "--out", (dir / "infer").string()}) != 0;
        failures += run_cli({"eval", "--config", cfg, "--checkpoint", ck, "--out", (dir / "eval").string()}) != 0;
        if (workers[0] == '1') fs::rename(dir, root / "first");
    }
    std::vector<std::string> mismatched;
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(root / "first")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), root / "first");
        if (e.path().filename() == "report.json" || rel == fs::path("data") / "resolved_config.json") continue;
        ++compared;
        const auto other = dir / rel;
        if (!fs::exists(other) || io::read_file(e.path()) != io::read_file(other)) mismatched.push_back(rel.string());
    }
    std::string detail = std::to_string(compared) + " files compared (generation with 1 then 2 workers)";
    for (const auto& m : mismatched) detail += ", differs: " + m;
    if (failures) detail += ", " + std::to_string(failures) + " commands failed";
    return {failures == 0 && mismatched.empty() && compared >= 10, detail};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string work = "acceptance-work";
    std::vector<int> only;
    int trials = 100;
    app.add_option("--work", work, "directory for datasets and cached checkpoints");
    app.add_option("--only", only, "run only these criteria");
    app.add_option("--trials", trials, "noise seeds for the finetune smoke run");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
    std::optional<SmokeArtifacts> smoke;
    auto artifacts = [&]() -> const SmokeArtifacts& {
        if (!smoke) smoke.emplace(smoke_artifacts(work));
        return *smoke;
    };
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, integrator_oracle},
        {2, prior_combinatorics},
        {3, corruption_laws},
        {4, normalization_algebra},
        {5, invariances},
        {6, loss_stationarity},
        {7, gradient_check_tiny},
        {8, metric_oracle},
        {9, oracle_sandwich},
        {10, [&] { return desk_smoke(artifacts()); }},
        {11, [&] { return finetune_smoke(artifacts(), trials); }},
        {12, [&] { return reproducibility(work); }},
    };
    int failed = 0;
    for (const auto& [n, check] : criteria) {
        if (!wanted(n)) continue;
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
