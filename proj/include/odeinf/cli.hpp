#pragma once

// Subcommands of the odeinf executable: generate, stats, train, finetune,
// infer, eval, bench-vdp-fhn and plot.

#include "odeinf/checkpoint.hpp"
#include "odeinf/dataset.hpp"
#include "odeinf/evaluation.hpp"
#include "odeinf/plot.hpp"
#include "odeinf/training.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace odeinf::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigFailure = 2, kIoFailure = 3, kNumericalFailure = 4 };

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

struct EvalConfig {
    std::vector<std::array<double, 2>> corruption{{0.0, 0.0}}; // (rho, sigma)
    std::vector<std::string> tasks{"reconstruction", "generalization"};
    std::string systems = "demo"; // "demo" or a dataset directory
    std::string split = "validation";
    int max_systems = 0;           // 0: all
    int eval_points = 512;
    int substeps = 20;
    int reference_substeps = 50;
    int plot_systems = 4;
    std::string field = "model";   // model | true | zero
    std::uint64_t seed = 0;
};

struct BenchConfig {
    int trials = 100;
    bool finetune = true;
    std::vector<std::string> tasks{"vdp-forecast", "fhn-imputation"};
    std::uint64_t seed = 0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string preset = "desk";
    int workers = 0; // 0: per-command default
    GenerationConfig generation;
    ModelConfig model = ModelConfig::desk();
    Json model_overrides = Json::object();
    TrainConfig train;
    FinetuneConfig finetune;
    EvalConfig eval;
    BenchConfig bench;
};

inline Json to_json(const EvalConfig& c) {
    Json corr = Json::array();
    for (const auto& p : c.corruption) corr.push_back(Json{{"rho", p[0]}, {"sigma", p[1]}});
    return Json{{"corruption", corr},        {"tasks", c.tasks},           {"systems", c.systems},
                {"split", c.split},          {"max_systems", c.max_systems}, {"eval_points", c.eval_points},
                {"substeps", c.substeps},    {"reference_substeps", c.reference_substeps},
                {"plot_systems", c.plot_systems}, {"field", c.field}, {"seed", c.seed}};
}

inline void read(JsonReader& r, EvalConfig& c) {
    Json corr;
    if (r.has("corruption")) {
        r.get("corruption", corr);
        if (!corr.is_array()) r.fail("corruption", "array of {rho, sigma} objects expected");
        c.corruption.clear();
        for (const auto& p : corr) {
            JsonReader pr(p, r.key_name("corruption"));
            double rho = 0.0, sigma = 0.0;
            pr.get("rho", rho);
            pr.get("sigma", sigma);
            pr.finish();
            c.corruption.push_back({rho, sigma});
        }
    } else {
        r.get("corruption", corr);
    }
    r.get("tasks", c.tasks);
    r.get("systems", c.systems);
    r.get("split", c.split);
    r.get("max_systems", c.max_systems);
    r.get("eval_points", c.eval_points);
    r.get("substeps", c.substeps);
    r.get("reference_substeps", c.reference_substeps);
    r.get("plot_systems", c.plot_systems);
    r.get("field", c.field);
    r.get("seed", c.seed);
    for (const auto& t : c.tasks)
        if (t != "reconstruction" && t != "generalization") r.fail("tasks", "unknown task '" + t + "'");
    if (c.split != "validation" && c.split != "train" && c.split != "all") r.fail("split", "expected validation, train or all");
    if (c.field != "model" && c.field != "true" && c.field != "zero") r.fail("field", "expected model, true or zero");
    if (c.max_systems < 0) r.fail("max_systems", "must be >= 0");
    if (c.plot_systems < 0) r.fail("plot_systems", "must be >= 0");
    if (c.eval_points < 2) r.fail("eval_points", "must be >= 2");
    if (c.substeps < 1) r.fail("substeps", "must be >= 1");
    if (c.reference_substeps < 1) r.fail("reference_substeps", "must be >= 1");
    for (const auto& p : c.corruption)
        if (!(p[0] >= 0.0 && p[0] < 1.0 && p[1] >= 0.0)) r.fail("corruption", "rho must lie in [0, 1) and sigma must be >= 0");
}

inline Json to_json(const BenchConfig& c) {
    return Json{{"trials", c.trials}, {"finetune", c.finetune}, {"tasks", c.tasks}, {"seed", c.seed}};
}

inline void read(JsonReader& r, BenchConfig& c) {
    r.get("trials", c.trials);
    r.get("finetune", c.finetune);
    r.get("tasks", c.tasks);
    r.get("seed", c.seed);
    if (c.trials < 1) r.fail("trials", "must be >= 1");
    for (const auto& t : c.tasks)
        if (t != "vdp-forecast" && t != "fhn-imputation") r.fail("tasks", "unknown task '" + t + "'");
}

inline Json to_json(const RunConfig& c) {
    return Json{{"seed", c.seed},
                {"preset", c.preset},
                {"workers", c.workers},
                {"generation", to_json(c.generation)},
                {"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"finetune", to_json(c.finetune)},
                {"eval", to_json(c.eval)},
                {"bench", to_json(c.bench)}};
}

/// Block seeds default to the top-level seed unless the block names its own.
inline void apply_seed(RunConfig& c, std::uint64_t seed, bool force) {
    c.seed = seed;
    if (force) {
        c.generation.seed = c.train.seed = c.finetune.seed = c.eval.seed = c.bench.seed = seed;
    }
}

inline void resolve_model(RunConfig& c) {
    c.model = model_preset(c.preset);
    JsonReader r(c.model_overrides, "model");
    read(r, c.model);
    r.finish();
    validate_as_config(c.model, "model");
}

inline RunConfig parse_run_config(const Json& j, const std::string& source) {
    RunConfig c;
    if (!j.is_object()) throw ConfigError("<root>", source + ": top level must be an object");
    JsonReader r(j, "");
    r.get("seed", c.seed);
    r.get("preset", c.preset);
    r.get("workers", c.workers);
    if (c.workers < 0) r.fail("workers", "must be >= 0");
    std::vector<std::string> own_seed;
    auto block = [&](const std::string& key, auto& target) {
        r.child(key, [&](JsonReader& b) {
            if (b.has("seed")) own_seed.push_back(key);
            read(b, target);
        });
    };
    block("generation", c.generation);
    block("train", c.train);
    block("finetune", c.finetune);
    block("eval", c.eval);
    block("bench", c.bench);
    if (j.contains("model")) {
        r.get("model", c.model_overrides);
        if (!c.model_overrides.is_object()) r.fail("model", "expected an object");
    } else {
        r.get("model", c.model_overrides);
        c.model_overrides = Json::object();
    }
    r.finish();
    auto has_own = [&](const char* k) { return std::find(own_seed.begin(), own_seed.end(), k) != own_seed.end(); };
    if (!has_own("generation")) c.generation.seed = c.seed;
    if (!has_own("train")) c.train.seed = c.seed;
    if (!has_own("finetune")) c.finetune.seed = c.seed;
    if (!has_own("eval")) c.eval.seed = c.seed;
    if (!has_own("bench")) c.bench.seed = c.seed;
    resolve_model(c);
    validate_as_config(c.generation, "generation");
    validate_as_config(c.train, "train");
    validate_as_config(c.finetune, "finetune");
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    const std::string text = io::read_file(path);
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("<file>", path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.string());
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> workers;
    std::string preset;
};

inline RunConfig resolve(const CommonOptions& o) {
    RunConfig c = o.config.empty() ? parse_run_config(Json::object(), "<defaults>") : load_run_config(o.config);
    if (o.seed) apply_seed(c, *o.seed, true);
    if (!o.preset.empty()) {
        c.preset = o.preset;
        resolve_model(c);
    }
    if (o.workers) {
        if (*o.workers < 0) throw ConfigError("workers", "--workers must be >= 0");
        c.workers = *o.workers;
    }
    return c;
}

inline int default_workers(const RunConfig& c) {
    if (c.workers > 0) return c.workers;
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

inline void require_exists(const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what, "--" + what + " is required");
    if (!fs::exists(p)) throw IoError(p.string(), what + " not found");
}

inline void require_out(const std::string& out) {
    if (out.empty()) throw ConfigError("out", "--out is required");
}

/// Writes resolved_config.json describing the run into `dir`.
inline void write_resolved_config(const fs::path& dir, const std::string& command, const RunConfig& c, const Json& inputs) {
    const Json j{{"command", command},
                 {"version", kVersion},
                 {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION)},
                 {"seed", c.seed},
                 {"inputs", inputs},
                 {"config", to_json(c)}};
    io::write_file_atomic(dir / "resolved_config.json", j.dump(2) + "\n");
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',' || ch == ' ' || ch == '\t' || ch == ';') {
            if (!cur.empty()) out.push_back(cur), cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline double parse_number(const std::string& s, const std::string& path, std::size_t line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw FormatError(FormatErrorKind::Malformed, path, "line " + std::to_string(line) + ": '" + s + "' is not a number");
}

/// Delimited text: rows "t, x1..xd"; blank lines separate trajectories; '#' starts a comment.
inline Context read_context_text(const fs::path& path) {
    std::istringstream in(io::read_file(path));
    Context ctx;
    ContextTrajectory cur;
    std::vector<std::vector<double>> rows;
    auto flush = [&]() {
        if (rows.empty()) return;
        cur.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size() - 1));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            cur.times.push_back(rows[i][0]);
            for (std::size_t k = 1; k < rows[i].size(); ++k) cur.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k - 1)) = rows[i][k];
        }
        ctx.push_back(std::move(cur));
        cur = {};
        rows.clear();
    };
    std::string line;
    std::size_t n = 0, width = 0;
    while (std::getline(in, line)) {
        ++n;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        const auto f = split_fields(line);
        if (f.empty()) {
            flush();
            continue;
        }
        if (n == 1 && !f.empty() && (f[0] == "t" || f[0] == "time")) continue;
        if (f.size() < 2 || f.size() > static_cast<std::size_t>(kMaxDimension) + 1)
            throw FormatError(FormatErrorKind::Malformed, path.string(), "line " + std::to_string(n) + ": expected t and 1 to 3 state columns");
        if (width == 0) width = f.size();
        if (f.size() != width) throw FormatError(FormatErrorKind::Malformed, path.string(), "line " + std::to_string(n) + ": column count changed");
        std::vector<double> row;
        for (const auto& s : f) row.push_back(parse_number(s, path.string(), n));
        rows.push_back(std::move(row));
    }
    flush();
    if (ctx.empty()) throw FormatError(FormatErrorKind::Malformed, path.string(), "no observations");
    return ctx;
}

/// Context from a shard file (corrupted trajectories of record `record`) or from delimited text.
inline Context read_context(const fs::path& path, std::size_t record) {
    require_exists(path, "context");
    const std::string data = io::read_file(path);
    if (data.size() >= kShardMagic.size() && std::string_view(data).substr(0, kShardMagic.size()) == kShardMagic) {
        const auto recs = decode_shard(data, path.string());
        if (record >= recs.size()) throw ConfigError("record", "--record " + std::to_string(record) + " out of range for " + path.string());
        std::vector<std::size_t> all(recs[record].corrupted.size());
        std::iota(all.begin(), all.end(), 0);
        return recs[record].context(all);
    }
    return read_context_text(path);
}

/// Rows of x1..xd.
inline Eigen::MatrixXd read_queries(const fs::path& path, int dimension) {
    require_exists(path, "queries");
    std::istringstream in(io::read_file(path));
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        const auto f = split_fields(line);
        if (f.empty()) continue;
        if (n == 1 && f[0] == "x1") continue;
        if (f.size() != static_cast<std::size_t>(dimension))
            throw FormatError(FormatErrorKind::Malformed, path.string(),
                              "line " + std::to_string(n) + ": expected " + std::to_string(dimension) + " columns");
        std::vector<double> row;
        for (const auto& s : f) row.push_back(parse_number(s, path.string(), n));
        rows.push_back(std::move(row));
    }
    Eigen::MatrixXd q(static_cast<Eigen::Index>(rows.size()), dimension);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int k = 0; k < dimension; ++k) q(static_cast<Eigen::Index>(i), k) = rows[i][static_cast<std::size_t>(k)];
    return q;
}

inline FieldModel<float> load_model(const std::string& path) {
    require_exists(path, "checkpoint");
    return model_from_checkpoint<float>(load_checkpoint(path));
}

inline std::vector<const SystemRecord*> records_of_dimension(const Dataset& ds, int d) {
    std::vector<const SystemRecord*> out;
    for (const auto& r : ds.records)
        if (r.dimension() == d) out.push_back(&r);
    return out;
}

// ---------------------------------------------------------------------------
// Commands

inline void write_stats(const Dataset& ds, const fs::path& dir, std::ostream& log) {
    std::ostringstream summary;
    summary << "rejection statistics\n";
    for (const auto& s : ds.manifest.json.at("rejection")) summary << "  " << s.dump() << "\n";
    summary << "split: " << ds.manifest.json.at("split").dump() << "\n";
    for (int d = 1; d <= kMaxDimension; ++d) {
        const auto recs = records_of_dimension(ds, d);
        if (recs.empty()) continue;
        const auto rep = boundary_statistics(recs);
        summary << "\nvector-field magnitude vs relative boundary distance, d=" << d << " (" << rep.records << " systems)\n" << rep.table();
        if (!dir.empty()) io::write_file_atomic(dir / ("boundary-d" + std::to_string(d) + ".csv"), rep.csv());
    }
    if (!dir.empty()) io::write_file_atomic(dir / "boundary.txt", summary.str());
    log << summary.str();
}

inline int cmd_generate(const CommonOptions& o) {
    require_out(o.out);
    RunConfig c = resolve(o);
    const fs::path out(o.out);
    const int workers = default_workers(c);
    const auto t0 = std::chrono::steady_clock::now();
    const auto m = generate_dataset(c.generation, out, workers);
    write_resolved_config(out, "generate", c, Json{{"workers", workers}});
    const Dataset ds = load_dataset(out);
    write_stats(ds, out, std::cout);
    std::cout << "generated " << m.size() << " systems in "
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s -> " << out.string() << "\n";
    return kOk;
}

inline int cmd_stats(const CommonOptions& o, const std::string& dataset) {
    require_exists(dataset, "dataset");
    const Dataset ds = load_dataset(dataset);
    fs::path out;
    if (!o.out.empty()) {
        RunConfig c = resolve(o);
        out = o.out;
        fs::create_directories(out);
        write_resolved_config(out, "stats", c, Json{{"dataset", dataset}});
    }
    write_stats(ds, out, std::cout);
    return kOk;
}

inline int cmd_train(const CommonOptions& o, const std::string& dataset, const std::string& init_checkpoint) {
    require_out(o.out);
    require_exists(dataset, "dataset");
    RunConfig c = resolve(o);
    const fs::path out(o.out);
    fs::create_directories(out);
    const Dataset ds = load_dataset(dataset);
    FieldModel<float> model = init_checkpoint.empty() ? FieldModel<float>(c.model, derive_seed(c.train.seed, {0})) : load_model(init_checkpoint);
    model.set_dropout(c.train.dropout);
    write_resolved_config(out, "train", c,
                          Json{{"dataset", dataset}, {"dataset_manifest_crc32", io::crc32(ds.manifest.json.dump())}, {"init_checkpoint", init_checkpoint},
                               {"parameters", model.parameters().scalar_count()}});
    std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw IoError((out / "metrics.jsonl").string(), "cannot open for writing");
    auto meta = [&](std::uint64_t step) { return Json{{"train", to_json(c.train)}, {"dataset", dataset}, {"step", step}}; };
    const auto res = train(
        model, ds, c.train,
        [&](const StepMetrics& m) {
            metrics << to_json(m).dump() << "\n";
            metrics.flush();
            if (m.step % 100 == 0) std::cerr << "step " << m.step << " loss " << m.loss << " mae " << m.mae << "\n";
        },
        [&](const TrainProgress& p) {
            Checkpoint ck = make_checkpoint(model, p.step, meta(p.step));
            ck.batch_rng_state = p.batch_rng_state;
            ck.dropout_rng_state = p.dropout_rng_state;
            std::ostringstream name;
            name << "checkpoint-" << std::setw(7) << std::setfill('0') << p.step << ".ckpt";
            save_checkpoint(out / name.str(), ck);
        });
    Checkpoint ck = make_checkpoint(model, res.steps, meta(res.steps));
    ck.batch_rng_state = res.batch_rng_state;
    ck.dropout_rng_state = res.dropout_rng_state;
    save_checkpoint(out / "model.ckpt", ck);
    if (!metrics) throw IoError((out / "metrics.jsonl").string(), "write failed");
    if (res.time_limited) std::cerr << "time limit reached after " << res.steps << " steps\n";
    std::cout << "trained " << res.steps << " steps in " << res.seconds << " s -> " << (out / "model.ckpt").string() << "\n";
    return kOk;
}

inline int cmd_finetune(const CommonOptions& o, const std::string& checkpoint, const std::string& context, const std::string& validation,
                        std::size_t record) {
    require_out(o.out);
    RunConfig c = resolve(o);
    FieldModel<float> model = load_model(checkpoint);
    const Context ctx = read_context(context, record);
    std::optional<Context> val;
    if (!validation.empty()) val = read_context(validation, record);
    const fs::path out(o.out);
    fs::create_directories(out);
    write_resolved_config(out, "finetune", c, Json{{"checkpoint", checkpoint}, {"context", context}, {"validation", validation}, {"record", record}});
    std::ostringstream log;
    const auto res = finetune(model, ctx, c.finetune, val ? &*val : nullptr, [&](const FinetuneEpoch& e) { log << to_json(e).dump() << "\n"; });
    io::write_file_atomic(out / "selection.jsonl", log.str());
    io::write_file_atomic(out / "selection.json", Json{{"best_epoch", res.best_epoch}, {"best_validation", res.best_validation},
                                                        {"epochs", c.finetune.epochs}}.dump(2) + "\n");
    save_checkpoint(out / "model.ckpt", make_checkpoint(model, 0, Json{{"finetune", to_json(c.finetune)}, {"base", checkpoint}, {"best_epoch", res.best_epoch}}));
    std::cout << "best epoch " << res.best_epoch << " validation loss " << res.best_validation << " -> " << (out / "model.ckpt").string() << "\n";
    return kOk;
}

inline int cmd_infer(const CommonOptions& o, const std::string& checkpoint, const std::string& context, const std::string& queries,
                     std::size_t record) {
    RunConfig c = resolve(o);
    FieldModel<float> model = load_model(checkpoint);
    const Context ctx = read_context(context, record);
    const int d = static_cast<int>(ctx.front().values.cols());
    Eigen::MatrixXd q;
    if (queries.empty()) {
        Eigen::Index n = 0;
        for (const auto& t : ctx) n += t.length();
        q.resize(n, d);
        Eigen::Index r = 0;
        for (const auto& t : ctx) q.middleRows(r, t.length()) = t.values, r += t.length();
    } else {
        q = read_queries(queries, d);
    }
    FieldEstimator<float> est(model, ctx);
    const Eigen::MatrixXd f = est.predict(q);
    const Eigen::VectorXd u = est.log_variance(q);
    std::ostringstream os;
    for (int k = 0; k < d; ++k) os << "x" << k + 1 << ",";
    for (int k = 0; k < d; ++k) os << "f" << k + 1 << ",";
    os << "log_variance\n" << std::setprecision(9);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        for (int k = 0; k < d; ++k) os << q(i, k) << ",";
        for (int k = 0; k < d; ++k) os << f(i, k) << ",";
        os << u[i] << "\n";
    }
    if (o.out.empty()) {
        std::cout << os.str();
    } else {
        const fs::path out(o.out);
        fs::create_directories(out);
        write_resolved_config(out, "infer", c, Json{{"checkpoint", checkpoint}, {"context", context}, {"queries", queries}, {"record", record}});
        io::write_file_atomic(out / "field.csv", os.str());
        std::cout << q.rows() << " field evaluations -> " << (out / "field.csv").string() << "\n";
    }
    return kOk;
}

struct EvalItem {
    std::string name;
    const EvalSystem* system = nullptr;
    const SystemRecord* record = nullptr;
};

inline int cmd_eval(const CommonOptions& o, const std::string& checkpoint) {
    require_out(o.out);
    RunConfig c = resolve(o);
    const EvalConfig& ec = c.eval;
    std::optional<FieldModel<float>> model;
    if (ec.field == "model") model.emplace(load_model(checkpoint));
    std::vector<EvalSystem> demos;
    std::optional<Dataset> ds;
    std::vector<EvalItem> items;
    if (ec.systems == "demo") {
        demos = demo_systems();
        for (const auto& s : demos) items.push_back({s.name, &s, nullptr});
    } else {
        require_exists(ec.systems, "eval.systems");
        ds = load_dataset(ec.systems);
        std::vector<std::size_t> pos;
        if (ec.split == "validation") pos = ds->validation;
        else if (ec.split == "train") pos = ds->train;
        else pos.resize(ds->records.size()), std::iota(pos.begin(), pos.end(), 0);
        for (auto p : pos) items.push_back({"record-" + std::to_string(ds->records[p].provenance.index), nullptr, &ds->records[p]});
    }
    if (ec.max_systems > 0 && items.size() > static_cast<std::size_t>(ec.max_systems)) items.resize(static_cast<std::size_t>(ec.max_systems));
    if (items.empty()) throw ConfigError("eval.systems", "no systems to evaluate");

    auto provider_for = [&](const EvalItem& it) -> FieldProvider {
        const int d = it.system ? it.system->dimension : it.record->dimension();
        if (ec.field == "true") return oracle_provider(it.system ? it.system->field : as_function(it.record->vf));
        if (ec.field == "zero") return zero_provider(d);
        return model_provider(*model);
    };

    struct Job {
        std::size_t item, pair;
        TaskKind kind;
    };
    std::vector<Job> jobs;
    for (std::size_t pi = 0; pi < ec.corruption.size(); ++pi)
        for (const auto& tname : ec.tasks)
            for (std::size_t i = 0; i < items.size(); ++i) jobs.push_back({i, pi, tname == "reconstruction" ? TaskKind::Reconstruction : TaskKind::Generalization});

    const int workers = default_workers(c);
    const auto t0 = std::chrono::steady_clock::now();
    struct JobResult {
        TaskScore score;
        std::optional<TaskTrace> trace;
    };
    const auto results = parallel_map<JobResult>(jobs.size(), workers, [&](std::size_t j) {
        const Job& job = jobs[j];
        const EvalItem& it = items[job.item];
        EvalTask task;
        task.kind = job.kind;
        task.rho = ec.corruption[job.pair][0];
        task.sigma = ec.corruption[job.pair][1];
        task.eval_points = ec.eval_points;
        task.substeps = ec.substeps;
        task.reference_substeps = ec.reference_substeps;
        task.seed = derive_seed(ec.seed, {job.pair, job.item});
        if (it.record) task.context_points = static_cast<int>(it.record->grid.n_points);
        const bool keep = job.pair == 0 && job.kind == TaskKind::Reconstruction && job.item < static_cast<std::size_t>(ec.plot_systems);
        JobResult r;
        TaskTrace tr;
        r.score = it.system ? run_task(provider_for(it), *it.system, task, keep ? &tr : nullptr) : run_record_task(provider_for(it), *it.record, task, keep ? &tr : nullptr);
        if (keep) r.trace = std::move(tr);
        return r;
    });

    EvaluationReport rep;
    Json plots = Json::array();
    for (std::size_t j = 0; j < results.size(); ++j) {
        rep.scores.push_back(results[j].score);
        if (results[j].trace) plots.push_back(plot::to_json(plot::trace_plot(items[jobs[j].item].name + " reconstruction", *results[j].trace)));
    }
    rep.aggregates = aggregate(rep.scores);
    for (const auto& it : items) {
        if (!it.record) continue;
        const Context ctx = it.record->context({0});
        rep.vf.push_back({it.name, record_vf_metrics(provider_for(it)(ctx), *it.record)});
    }
    rep.runtime = Json{{"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
                       {"workers", workers},
                       {"version", kVersion},
                       {"checkpoint", checkpoint},
                       {"field", ec.field}};
    const fs::path out(o.out);
    fs::create_directories(out);
    write_resolved_config(out, "eval", c, Json{{"checkpoint", checkpoint}});
    io::write_file_atomic(out / "report.json", to_json(rep).dump(2) + "\n");
    io::write_file_atomic(out / "tables.txt", success_table(rep));
    io::write_file_atomic(out / "scores.csv", scores_csv(rep.scores));
    io::write_file_atomic(out / "plot_data.json", Json{{"format", "odeinf-plot-data"}, {"plots", plots}}.dump() + "\n");
    std::cout << success_table(rep);
    return kOk;
}

inline int cmd_bench(const CommonOptions& o, const std::string& checkpoint) {
    require_out(o.out);
    RunConfig c = resolve(o);
    const FieldModel<float> model = load_model(checkpoint);
    const fs::path out(o.out);
    fs::create_directories(out);
    write_resolved_config(out, "bench-vdp-fhn", c, Json{{"checkpoint", checkpoint}});
    Json reports = Json::array();
    std::ostringstream table;
    table << std::left << std::setw(16) << "task" << std::setw(12) << "mode" << std::right;
    for (const char* h : {"mean", "median", "std", "min", "max"}) table << std::setw(12) << h;
    table << std::setw(8) << "n" << "\n" << std::setprecision(4);
    auto row = [&](const std::string& task, const std::string& mode, const SummaryStats& s) {
        table << std::left << std::setw(16) << task << std::setw(12) << mode << std::right;
        for (double v : {s.mean, s.median, s.stddev, s.min, s.max}) table << std::setw(12) << v;
        table << std::setw(8) << s.count << "\n";
    };
    for (const auto& name : c.bench.tasks) {
        const OscillatorLayout layout = name == "vdp-forecast" ? OscillatorLayout::vdp_task1() : OscillatorLayout::fhn();
        std::ostringstream trials;
        const auto rep = run_vdp_fhn_suite(model, layout, c.bench.trials, c.bench.seed,
                                           c.bench.finetune ? std::optional<FinetuneConfig>(c.finetune) : std::nullopt,
                                           [&](const OscillatorTrialResult& r) {
                                               trials << to_json(r).dump() << "\n";
                                               std::cerr << name << " trial " << r.seed << " zero-shot " << r.zero_shot_mse
                                                         << (r.finetuned_mse ? " finetuned " + std::to_string(*r.finetuned_mse) : std::string()) << "\n";
                                           });
        io::write_file_atomic(out / ("trials-" + name + ".jsonl"), trials.str());
        Json j = to_json(rep);
        const double baseline = context_mean_mse(make_oscillator_trial(
            [&] {
                OscillatorLayout l = layout;
                l.noise_variance = 0.0;
                return l;
            }(),
            0));
        j["context_mean_baseline_mse"] = baseline;
        reports.push_back(j);
        row(name, "zero-shot", rep.zero_shot);
        if (rep.finetuned) row(name, "finetuned", *rep.finetuned);
    }
    io::write_file_atomic(out / "bench_report.json", Json{{"reports", reports}}.dump(2) + "\n");
    io::write_file_atomic(out / "bench_summary.txt", table.str());
    std::cout << table.str();
    return kOk;
}

/// Renders every plot in a plot-data file (or a report directory holding
/// plot_data.json). Nothing is written unless every plot renders.
inline int cmd_plot(const CommonOptions& o, const std::string& input) {
    require_out(o.out);
    fs::path in(input);
    if (!in.empty() && fs::is_directory(in)) in /= "plot_data.json";
    require_exists(in, "input");
    Json j;
    try {
        j = Json::parse(io::read_file(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(FormatErrorKind::Malformed, in.string(), e.what());
    }
    if (!j.is_object() || !j.contains("plots") || !j.at("plots").is_array())
        throw FormatError(FormatErrorKind::Malformed, in.string(), "expected an object with a 'plots' array");
    std::vector<std::pair<std::string, std::string>> files;
    std::size_t k = 0;
    for (const auto& pj : j.at("plots")) {
        plot::PlotSpec p;
        try {
            p = plot::plot_from_json(pj, "plots");
        } catch (const ConfigError& e) {
            throw FormatError(FormatErrorKind::Malformed, in.string(), e.what());
        }
        if (p.series.empty()) continue;
        std::ostringstream stem;
        stem << "plot-" << std::setw(3) << std::setfill('0') << k++;
        files.emplace_back(stem.str() + "-trajectories.svg", plot::render_trajectories(p));
        if (p.dimension() >= 2) files.emplace_back(stem.str() + "-phase.svg", plot::render_phase_portrait(p));
        files.emplace_back(stem.str() + ".csv", plot::plot_csv(p));
    }
    if (files.empty()) throw FormatError(FormatErrorKind::Malformed, in.string(), "report contains no plottable data");
    const fs::path out(o.out);
    for (const auto& [name, body] : files) io::write_file_atomic(out / name, body);
    std::cout << files.size() << " files -> " << out.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
    CLI::App app{"Amortized inference of ODE vector fields from noisy, sparse trajectories", "odeinf"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    auto common = [](CLI::App* sub, CommonOptions& o) {
        sub->add_option("--config", o.config, "JSON run configuration");
        sub->add_option("--seed", o.seed, "seed overriding every block seed");
        sub->add_option("--out", o.out, "output directory");
        sub->add_option("--workers", o.workers, "worker threads (0: available cores)");
        sub->add_option("--preset", o.preset, "model preset")->check(CLI::IsMember({"desk", "paper", "tiny"}));
    };

    CommonOptions o;
    std::string dataset, checkpoint, context, validation, queries, input;
    std::size_t record = 0;

    auto* gen = app.add_subcommand("generate", "sample systems and write dataset shards");
    common(gen, o);
    auto* stats = app.add_subcommand("stats", "rejection and boundary statistics of a dataset");
    common(stats, o);
    stats->add_option("--dataset", dataset, "dataset directory")->required();
    auto* tr = app.add_subcommand("train", "pretrain the model on a dataset");
    common(tr, o);
    tr->add_option("--dataset", dataset, "dataset directory")->required();
    tr->add_option("--checkpoint", checkpoint, "initial parameters");
    auto* ft = app.add_subcommand("finetune", "adapt a checkpoint to observed trajectories");
    common(ft, o);
    ft->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    ft->add_option("--context", context, "observed trajectories (shard or delimited text)")->required();
    ft->add_option("--validation", validation, "validation trajectories (defaults to the context)");
    ft->add_option("--record", record, "record index when the context is a shard");
    auto* inf = app.add_subcommand("infer", "evaluate the inferred field at query states");
    common(inf, o);
    inf->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    inf->add_option("--context", context, "observed trajectories (shard or delimited text)")->required();
    inf->add_option("--queries", queries, "query states, one row per state");
    inf->add_option("--record", record, "record index when the context is a shard");
    auto* ev = app.add_subcommand("eval", "reconstruction and generalization scores");
    common(ev, o);
    ev->add_option("--checkpoint", checkpoint, "model checkpoint");
    auto* bench = app.add_subcommand("bench-vdp-fhn", "oscillator forecasting and imputation trials");
    common(bench, o);
    bench->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    auto* pl = app.add_subcommand("plot", "render plot data to SVG");
    common(pl, o);
    pl->add_option("--input", input, "plot_data.json or an eval output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, std::cout, err);
        return code == 0 ? kOk : kConfigFailure;
    }

    try {
        if (gen->parsed()) return cmd_generate(o);
        if (stats->parsed()) return cmd_stats(o, dataset);
        if (tr->parsed()) return cmd_train(o, dataset, checkpoint);
        if (ft->parsed()) return cmd_finetune(o, checkpoint, context, validation, record);
        if (inf->parsed()) return cmd_infer(o, checkpoint, context, queries, record);
        if (ev->parsed()) return cmd_eval(o, checkpoint);
        if (bench->parsed()) return cmd_bench(o, checkpoint);
        if (pl->parsed()) return cmd_plot(o, input);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigFailure;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const FormatError& e) {
        err << "io error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const fs::filesystem_error& e) {
        err << "io error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumericalFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}

} // namespace odeinf::cli
