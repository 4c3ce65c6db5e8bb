#pragma once

// System records, deterministic parallel generation, sharded storage, batch
// assembly and boundary statistics.

#include "odeinf/binary.hpp"
#include "odeinf/context.hpp"
#include "odeinf/corruption.hpp"
#include "odeinf/errors.hpp"
#include "odeinf/json_io.hpp"
#include "odeinf/prior.hpp"
#include "odeinf/random.hpp"
#include "odeinf/simulation.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace odeinf {

struct Provenance {
    std::uint64_t seed = 0;
    std::uint64_t attempt = 0; // stream index within the dimension
    std::uint64_t index = 0;   // global record index
    int dimension = 1;
    double sigma = 0.0;
    double rho = 0.0;

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct SystemRecord {
    PolynomialVectorField vf;
    TimeGrid grid;
    TrajectorySet clean;
    std::vector<CorruptedTrajectory> corrupted;
    BoundingBox box;
    VectorFieldSamples vf_targets;
    Provenance provenance;

    int dimension() const { return vf.dimension; }

    /// Corrupted trajectories as a model context.
    Context context(const std::vector<std::size_t>& which) const {
        Context c;
        for (auto k : which) c.push_back({corrupted.at(k).times, corrupted.at(k).observations});
        return c;
    }
};

inline bool operator==(const BoundingBox& a, const BoundingBox& b) { return a.low == b.low && a.high == b.high; }

inline bool operator==(const SystemRecord& a, const SystemRecord& b) {
    if (!(a.vf == b.vf && a.grid == b.grid && a.box == b.box && a.provenance == b.provenance)) return false;
    if (a.clean.size() != b.clean.size() || a.corrupted.size() != b.corrupted.size()) return false;
    for (std::size_t k = 0; k < a.clean.size(); ++k)
        if (a.clean[k].times != b.clean[k].times || a.clean[k].states != b.clean[k].states) return false;
    for (std::size_t k = 0; k < a.corrupted.size(); ++k)
        if (a.corrupted[k].times != b.corrupted[k].times || a.corrupted[k].observations != b.corrupted[k].observations ||
            a.corrupted[k].keep_mask != b.corrupted[k].keep_mask)
            return false;
    return a.vf_targets.locations == b.vf_targets.locations && a.vf_targets.values == b.vf_targets.values;
}

struct GenerationConfig {
    PriorConfig prior;
    std::array<int, kMaxDimension> counts{2000, 4000, 4000};
    TimeGrid grid;
    CorruptionRanges corruption;
    int trajectories = 9;
    double reject_threshold = 1e2;
    double box_expand = 0.2;
    int vf_samples = 10000;
    double validation_fraction = 0.1;
    int records_per_shard = 256;
    int max_attempts_per_record = 200;
    std::uint64_t seed = 0;

    void validate() const {
        for (int d = 0; d < kMaxDimension; ++d) {
            ODEINF_REQUIRE(counts[static_cast<std::size_t>(d)] >= 0, "generation: counts must be >= 0");
            PriorConfig p = prior;
            p.dimension = d + 1;
            p.validate();
        }
        grid.validate();
        ODEINF_REQUIRE(corruption.sigma_max >= 0.0, "generation: sigma_max must be >= 0");
        ODEINF_REQUIRE(corruption.rho_max >= 0.0 && corruption.rho_max < 1.0, "generation: rho_max must lie in [0, 1)");
        ODEINF_REQUIRE(trajectories >= 1, "generation: need at least one trajectory per system");
        ODEINF_REQUIRE(reject_threshold > 0.0, "generation: reject threshold must be positive");
        ODEINF_REQUIRE(box_expand >= 0.0, "generation: box expansion must be >= 0");
        ODEINF_REQUIRE(vf_samples >= 1, "generation: vf_samples must be >= 1");
        ODEINF_REQUIRE(validation_fraction >= 0.0 && validation_fraction < 1.0, "generation: validation fraction must lie in [0, 1)");
        ODEINF_REQUIRE(records_per_shard >= 1, "generation: records_per_shard must be >= 1");
        ODEINF_REQUIRE(max_attempts_per_record >= 1, "generation: max_attempts_per_record must be >= 1");
    }
};

inline Json to_json(const GenerationConfig& c) {
    return Json{{"prior", to_json(c.prior)},
                {"counts", c.counts},
                {"grid", to_json(c.grid)},
                {"corruption", to_json(c.corruption)},
                {"trajectories", c.trajectories},
                {"reject_threshold", c.reject_threshold},
                {"box_expand", c.box_expand},
                {"vf_samples", c.vf_samples},
                {"validation_fraction", c.validation_fraction},
                {"records_per_shard", c.records_per_shard},
                {"max_attempts_per_record", c.max_attempts_per_record},
                {"seed", c.seed}};
}

inline void read(JsonReader& r, GenerationConfig& c) {
    r.child("prior", [&](JsonReader& s) { read(s, c.prior); });
    std::vector<int> counts(c.counts.begin(), c.counts.end());
    r.get("counts", counts);
    if (counts.size() != static_cast<std::size_t>(kMaxDimension)) r.fail("counts", "three per-dimension counts expected");
    std::copy(counts.begin(), counts.end(), c.counts.begin());
    r.child("grid", [&](JsonReader& s) { read(s, c.grid); });
    r.child("corruption", [&](JsonReader& s) { read(s, c.corruption); });
    r.get("trajectories", c.trajectories);
    r.get("reject_threshold", c.reject_threshold);
    r.get("box_expand", c.box_expand);
    r.get("vf_samples", c.vf_samples);
    r.get("validation_fraction", c.validation_fraction);
    r.get("records_per_shard", c.records_per_shard);
    r.get("max_attempts_per_record", c.max_attempts_per_record);
    r.get("seed", c.seed);
}

namespace detail {

inline Eigen::MatrixXd quantize(const Eigen::MatrixXd& m) { return m.cast<float>().cast<double>(); }

} // namespace detail

/// One generation attempt; its random stream depends only on (seed, dimension, attempt).
inline std::variant<SystemRecord, Rejection> generate_record(const GenerationConfig& config, int dimension,
                                                             std::uint64_t attempt) {
    Rng rng(derive_seed(config.seed, {static_cast<std::uint64_t>(dimension), attempt}));
    PriorConfig prior = config.prior;
    prior.dimension = dimension;
    SystemRecord rec;
    rec.vf = sample_vector_field(prior, rng);
    rec.grid = config.grid;
    auto sim = simulate_system(rec.vf, config.trajectories, config.grid, config.reject_threshold, rng);
    if (auto* rej = std::get_if<Rejection>(&sim)) return *rej;
    rec.clean = std::move(std::get<TrajectorySet>(sim));
    for (auto& t : rec.clean) t.states = detail::quantize(t.states);
    const CorruptionConfig corruption = config.corruption.sample(rng);
    rec.corrupted = corrupt_system(rec.clean, corruption, rng);
    for (auto& c : rec.corrupted) c.observations = detail::quantize(c.observations);
    rec.box = bounding_box(rec.clean, config.box_expand);
    rec.vf_targets = sample_vf_targets(rec.vf, rec.box, config.vf_samples, rng);
    rec.provenance = {config.seed, attempt, 0, dimension, corruption.sigma, corruption.rho};
    return rec;
}

// ---------------------------------------------------------------------------
// Shard format

inline constexpr std::string_view kShardMagic = "ODESHARD";
inline constexpr std::uint32_t kShardVersion = 1;

inline Json record_manifest(const SystemRecord& r) {
    Json terms = Json::array();
    for (const auto& c : r.vf.components) {
        Json comp = Json::array();
        for (const auto& t : c.terms) comp.push_back(t.exponents);
        terms.push_back(comp);
    }
    Json retained = Json::array();
    for (const auto& c : r.corrupted) retained.push_back(c.length());
    return Json{{"index", r.provenance.index},
                {"dimension", r.dimension()},
                {"scale", r.vf.scale},
                {"monomials", terms},
                {"grid", to_json(r.grid)},
                {"trajectories", r.clean.size()},
                {"retained", retained},
                {"vf_samples", r.vf_targets.size()},
                {"provenance",
                 {{"seed", r.provenance.seed},
                  {"stream", r.provenance.attempt},
                  {"sigma", r.provenance.sigma},
                  {"rho", r.provenance.rho}}}};
}

inline void encode_record(const SystemRecord& r, io::ByteWriter& out) {
    const std::string manifest = record_manifest(r).dump();
    io::ByteWriter blob;
    for (const auto& c : r.vf.components)
        for (const auto& t : c.terms) blob.put(t.coefficient);
    blob.put(r.vf.scale);
    blob.put(r.grid.t_start);
    blob.put(r.grid.t_end);
    blob.put(r.provenance.sigma);
    blob.put(r.provenance.rho);
    blob.put_array(r.box.low.data(), static_cast<std::size_t>(r.box.low.size()));
    blob.put_array(r.box.high.data(), static_cast<std::size_t>(r.box.high.size()));
    auto put_f32 = [&blob](const Eigen::MatrixXd& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) blob.put(static_cast<float>(m(i, j)));
    };
    auto put_f64 = [&blob](const Eigen::MatrixXd& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) blob.put(m(i, j));
    };
    for (const auto& t : r.clean) put_f32(t.states);
    for (const auto& c : r.corrupted) blob.put_array(c.keep_mask.data(), c.keep_mask.size());
    for (const auto& c : r.corrupted) put_f32(c.observations);
    put_f64(r.vf_targets.locations);
    put_f64(r.vf_targets.values);

    out.put(static_cast<std::uint32_t>(manifest.size()));
    out.put_bytes(manifest);
    out.put(static_cast<std::uint64_t>(blob.size()));
    out.put_bytes(blob.bytes());
}

inline SystemRecord decode_record(io::ByteReader& in) {
    const std::string& path = in.path();
    const auto mlen = in.get<std::uint32_t>();
    Json m;
    try {
        m = Json::parse(in.get_bytes(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::Malformed, path, std::string("record manifest: ") + e.what());
    }
    const auto blen = in.get<std::uint64_t>();
    io::ByteReader b(in.get_bytes(blen), path);
    SystemRecord r;
    try {
        const int d = m.at("dimension").get<int>();
        if (d < 1 || d > kMaxDimension) throw FormatError(FormatErrorKind::Malformed, path, "bad dimension");
        r.vf.dimension = d;
        for (const auto& comp : m.at("monomials")) {
            PolynomialComponent pc;
            for (const auto& e : comp) pc.terms.push_back({e.get<Exponents>(), b.get<double>()});
            r.vf.components.push_back(std::move(pc));
        }
        r.vf.scale = b.get<double>();
        const auto& g = m.at("grid");
        r.grid.n_points = g.at("n_points").get<int>();
        r.grid.substeps = g.at("substeps").get<int>();
        r.grid.t_start = b.get<double>();
        r.grid.t_end = b.get<double>();
        r.provenance.sigma = b.get<double>();
        r.provenance.rho = b.get<double>();
        r.box.low.resize(d);
        r.box.high.resize(d);
        b.get_array(r.box.low.data(), static_cast<std::size_t>(d));
        b.get_array(r.box.high.data(), static_cast<std::size_t>(d));

        const auto k = m.at("trajectories").get<std::size_t>();
        const auto retained = m.at("retained").get<std::vector<Eigen::Index>>();
        if (retained.size() != k) throw FormatError(FormatErrorKind::Malformed, path, "retained count list length");
        const auto times = r.grid.times();
        const Eigen::Index len = r.grid.n_points;
        auto get_f32 = [&b](Eigen::Index rows, Eigen::Index cols) {
            Eigen::MatrixXd out(rows, cols);
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = static_cast<double>(b.get<float>());
            return out;
        };
        auto get_f64 = [&b](Eigen::Index rows, Eigen::Index cols) {
            Eigen::MatrixXd out(rows, cols);
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = b.get<double>();
            return out;
        };
        for (std::size_t i = 0; i < k; ++i) r.clean.push_back({times, get_f32(len, d)});
        std::vector<std::vector<std::uint8_t>> masks(k, std::vector<std::uint8_t>(static_cast<std::size_t>(len)));
        for (auto& mk : masks) b.get_array(mk.data(), mk.size());
        for (std::size_t i = 0; i < k; ++i) {
            CorruptedTrajectory c;
            c.keep_mask = std::move(masks[i]);
            for (std::size_t t = 0; t < c.keep_mask.size(); ++t)
                if (c.keep_mask[t]) c.times.push_back(times[t]);
            if (static_cast<Eigen::Index>(c.times.size()) != retained[i])
                throw FormatError(FormatErrorKind::Malformed, path, "keep mask disagrees with retained count");
            c.observations = get_f32(retained[i], d);
            r.corrupted.push_back(std::move(c));
        }
        const auto n = m.at("vf_samples").get<Eigen::Index>();
        r.vf_targets.locations = get_f64(n, d);
        r.vf_targets.values = get_f64(n, d);
        const auto& p = m.at("provenance");
        r.provenance.seed = p.at("seed").get<std::uint64_t>();
        r.provenance.attempt = p.at("stream").get<std::uint64_t>();
        r.provenance.index = m.at("index").get<std::uint64_t>();
        r.provenance.dimension = d;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::Malformed, path, std::string("record manifest: ") + e.what());
    }
    if (!b.done()) throw FormatError(FormatErrorKind::Malformed, path, "trailing bytes in record blob");
    return r;
}

/// Serializes records into a shard; `offsets` receives each record's byte offset in the file.
inline std::string encode_shard(const std::vector<SystemRecord>& records, std::vector<std::uint64_t>* offsets = nullptr) {
    io::ByteWriter payload;
    for (const auto& r : records) {
        if (offsets) offsets->push_back(io::ContainerHeader::kSize + payload.size());
        encode_record(r, payload);
    }
    return io::make_container(kShardMagic, kShardVersion, records.size(), payload.bytes());
}

inline std::vector<SystemRecord> decode_shard(std::string_view data, const std::string& path) {
    io::ContainerHeader h;
    const auto payload = io::open_container(data, kShardMagic, kShardVersion, path, &h);
    io::ByteReader r(payload, path);
    std::vector<SystemRecord> out;
    out.reserve(h.count);
    for (std::uint64_t i = 0; i < h.count; ++i) out.push_back(decode_record(r));
    if (!r.done()) throw FormatError(FormatErrorKind::Malformed, path, "trailing bytes after the last record");
    return out;
}

inline void write_shard(const std::filesystem::path& path, const std::vector<SystemRecord>& records,
                        std::vector<std::uint64_t>* offsets = nullptr) {
    io::write_file_atomic(path, encode_shard(records, offsets));
}

inline std::vector<SystemRecord> load_shard(const std::filesystem::path& path) {
    return decode_shard(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Generation

struct DimensionStats {
    int dimension = 1;
    std::uint64_t target = 0;
    std::uint64_t accepted = 0;
    std::uint64_t attempts = 0;
    std::uint64_t rejected = 0;
    std::uint64_t rejected_non_finite = 0;

    double rejection_rate() const { return attempts ? static_cast<double>(rejected) / static_cast<double>(attempts) : 0.0; }
};

inline Json to_json(const DimensionStats& s) {
    return Json{{"dimension", s.dimension},   {"target", s.target},
                {"accepted", s.accepted},     {"attempts", s.attempts},
                {"rejected", s.rejected},     {"rejected_non_finite", s.rejected_non_finite},
                {"rejection_rate", s.rejection_rate()}};
}

class GenerationAborted : public NumericalError {
public:
    GenerationAborted(const DimensionStats& s)
        : NumericalError("generation aborted for dimension " + std::to_string(s.dimension) + ": " +
                         std::to_string(s.accepted) + " of " + std::to_string(s.target) + " records accepted after " +
                         std::to_string(s.attempts) + " attempts (rejection rate " + std::to_string(s.rejection_rate()) + ")"),
          stats_(s) {}

    const DimensionStats& stats() const { return stats_; }

private:
    DimensionStats stats_;
};

/// Runs fn(i) for i in [0, n) on `workers` threads; results land at their index.
template <typename R, typename F>
std::vector<R> parallel_map(std::size_t n, int workers, F&& fn) {
    std::vector<std::optional<R>> slots(n);
    const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n));
    std::vector<std::exception_ptr> errors(w);
    auto run = [&](std::size_t id) {
        try {
            for (std::size_t i = id; i < n; i += w) slots[i].emplace(fn(i));
        } catch (...) {
            errors[id] = std::current_exception();
        }
    };
    if (w == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t id = 0; id < w; ++id) threads.emplace_back(run, id);
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<R> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

/// Accepted records for one dimension, in attempt order. `sink` receives each accepted record.
inline DimensionStats generate_dimension(const GenerationConfig& config, int dimension, int workers,
                                         const std::function<void(SystemRecord&&)>& sink, std::uint64_t first_index) {
    DimensionStats s;
    s.dimension = dimension;
    s.target = static_cast<std::uint64_t>(config.counts[static_cast<std::size_t>(dimension - 1)]);
    const std::uint64_t max_attempts = std::max<std::uint64_t>(1000, s.target * static_cast<std::uint64_t>(config.max_attempts_per_record));
    std::uint64_t next = 0;
    while (s.accepted < s.target) {
        if (next >= max_attempts) throw GenerationAborted(s);
        const std::uint64_t needed = s.target - s.accepted;
        const std::uint64_t chunk = std::min<std::uint64_t>(max_attempts - next, std::max<std::uint64_t>(needed * 2, 4 * static_cast<std::uint64_t>(std::max(workers, 1))));
        using Result = std::variant<SystemRecord, Rejection>;
        auto results = parallel_map<Result>(static_cast<std::size_t>(chunk), workers,
                                            [&](std::size_t i) { return generate_record(config, dimension, next + i); });
        for (auto& res : results) {
            if (s.accepted == s.target) break;
            ++s.attempts;
            ++next;
            if (auto* rej = std::get_if<Rejection>(&res)) {
                ++s.rejected;
                if (rej->cause.non_finite) ++s.rejected_non_finite;
                continue;
            }
            auto& rec = std::get<SystemRecord>(res);
            rec.provenance.index = first_index + s.accepted;
            ++s.accepted;
            sink(std::move(rec));
        }
    }
    return s;
}

/// Regenerates a record from its provenance (bit-exact).
inline SystemRecord regenerate(const GenerationConfig& config, const Provenance& p) {
    GenerationConfig c = config;
    c.seed = p.seed;
    auto res = generate_record(c, p.dimension, p.attempt);
    ODEINF_REQUIRE(std::holds_alternative<SystemRecord>(res), "regenerate: provenance points at a rejected attempt");
    auto rec = std::move(std::get<SystemRecord>(res));
    rec.provenance.index = p.index;
    return rec;
}

struct DatasetManifest {
    Json json;

    std::size_t size() const { return json.at("records").size(); }
};

inline bool is_validation(std::uint64_t within_dimension, std::uint64_t count, double fraction) {
    const auto n_val = static_cast<std::uint64_t>(std::llround(fraction * static_cast<double>(count)));
    return within_dimension >= count - std::min(n_val, count);
}

/// Generates all dimensions, writes shards and manifest.json into `out_dir`.
inline DatasetManifest generate_dataset(const GenerationConfig& config, const std::filesystem::path& out_dir, int workers = 1) {
    config.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError(out_dir.string(), "cannot create output directory: " + ec.message());

    Json shards = Json::array();
    Json records = Json::array();
    Json stats = Json::array();
    std::vector<SystemRecord> pending;
    std::uint64_t index = 0;

    auto flush = [&]() {
        if (pending.empty()) return;
        std::ostringstream name;
        name << "shard-" << std::setw(5) << std::setfill('0') << shards.size() << ".bin";
        std::vector<std::uint64_t> offsets;
        const std::string bytes = encode_shard(pending, &offsets);
        io::write_file_atomic(out_dir / name.str(), bytes);
        shards.push_back(Json{{"file", name.str()}, {"records", pending.size()}, {"bytes", bytes.size()}, {"crc32", io::crc32(bytes)}});
        for (std::size_t i = 0; i < pending.size(); ++i) {
            const auto& p = pending[i].provenance;
            const auto count = static_cast<std::uint64_t>(config.counts[static_cast<std::size_t>(p.dimension - 1)]);
            std::uint64_t first = 0;
            for (int d = 1; d < p.dimension; ++d) first += static_cast<std::uint64_t>(config.counts[static_cast<std::size_t>(d - 1)]);
            records.push_back(Json{{"index", p.index},
                                   {"dimension", p.dimension},
                                   {"stream", p.attempt},
                                   {"shard", name.str()},
                                   {"offset", offsets[i]},
                                   {"split", is_validation(p.index - first, count, config.validation_fraction) ? "validation" : "train"}});
        }
        pending.clear();
    };

    for (int d = 1; d <= kMaxDimension; ++d) {
        auto s = generate_dimension(
            config, d, workers,
            [&](SystemRecord&& r) {
                pending.push_back(std::move(r));
                if (pending.size() >= static_cast<std::size_t>(config.records_per_shard)) flush();
            },
            index);
        flush();
        index += s.accepted;
        stats.push_back(to_json(s));
    }

    std::uint64_t n_val = 0;
    for (const auto& r : records) n_val += r.at("split") == "validation" ? 1 : 0;
    DatasetManifest m;
    m.json = Json{{"format", "odeinf-dataset"},
                  {"version", kShardVersion},
                  {"generation", to_json(config)},
                  {"shards", shards},
                  {"records", records},
                  {"rejection", stats},
                  {"split", {{"validation_fraction", config.validation_fraction}, {"train", records.size() - n_val}, {"validation", n_val}}}};
    io::write_file_atomic(out_dir / "manifest.json", m.json.dump(2) + "\n");
    return m;
}

struct Dataset {
    DatasetManifest manifest;
    GenerationConfig generation;
    std::vector<SystemRecord> records;    // ordered by index
    std::vector<std::size_t> train;       // positions in `records`
    std::vector<std::size_t> validation;
};

inline GenerationConfig generation_from_manifest(const Json& manifest) {
    GenerationConfig g;
    JsonReader r(manifest.at("generation"), "generation");
    read(r, g);
    r.finish();
    return g;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    Dataset ds;
    try {
        ds.manifest.json = Json::parse(io::read_file(mpath));
        ds.generation = generation_from_manifest(ds.manifest.json);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::Malformed, mpath.string(), e.what());
    } catch (const ConfigError& e) {
        throw FormatError(FormatErrorKind::Malformed, mpath.string(), e.what());
    }
    for (const auto& s : ds.manifest.json.at("shards")) {
        auto recs = load_shard(dir / s.at("file").get<std::string>());
        for (auto& r : recs) ds.records.push_back(std::move(r));
    }
    const auto& entries = ds.manifest.json.at("records");
    if (entries.size() != ds.records.size())
        throw FormatError(FormatErrorKind::Malformed, mpath.string(), "record count differs from the shards");
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        if (entries[i].at("index").get<std::uint64_t>() != ds.records[i].provenance.index)
            throw FormatError(FormatErrorKind::Malformed, mpath.string(), "record order differs from the shards");
        (entries[i].at("split") == "validation" ? ds.validation : ds.train).push_back(i);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Batches

struct BatchItem {
    std::uint64_t record = 0;
    int dimension = 1;
    std::vector<std::size_t> trajectories;
    Context context;
    // Raw transitions padded to the batch maximum; padded rows and dimensions are zero.
    Eigen::MatrixXd y;
    Eigen::MatrixXd dy;
    Eigen::VectorXd dtau;
    std::vector<std::uint8_t> valid;
    std::vector<std::uint8_t> dim_mask;
    // Filled by sample_query_locations.
    Eigen::MatrixXd query_locations;
    Eigen::MatrixXd query_targets;

    std::size_t valid_transitions() const {
        std::size_t n = 0;
        for (auto v : valid) n += v;
        return n;
    }
};

struct Batch {
    std::vector<BatchItem> items;
    Eigen::Index max_transitions = 0;

    std::size_t valid_transitions() const {
        std::size_t n = 0;
        for (const auto& i : items) n += i.valid_transitions();
        return n;
    }
};

/// Per record: K uniform in [k_min, k_max], K distinct corrupted trajectories, padded transitions.
inline Batch make_batch(const std::vector<const SystemRecord*>& records, int k_min, int k_max, Rng& rng) {
    ODEINF_REQUIRE(k_min >= 1 && k_max >= k_min, "make_batch: invalid K range");
    Batch b;
    for (const auto* rec : records) {
        ODEINF_REQUIRE(rec->corrupted.size() >= static_cast<std::size_t>(k_max), "make_batch: record has fewer trajectories than K max");
        BatchItem item;
        item.record = rec->provenance.index;
        item.dimension = rec->dimension();
        const int k = static_cast<int>(rng.integer(k_min, k_max));
        std::vector<std::size_t> pool(rec->corrupted.size());
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        for (int i = 0; i < k; ++i) {
            const auto j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
            std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
            item.trajectories.push_back(pool[static_cast<std::size_t>(i)]);
        }
        item.context = rec->context(item.trajectories);
        item.dim_mask = dimension_mask(item.dimension);
        b.items.push_back(std::move(item));
    }
    for (const auto& item : b.items) {
        Eigen::Index j = 0;
        for (const auto& t : item.context) j += t.length() - 1;
        b.max_transitions = std::max(b.max_transitions, j);
    }
    for (auto& item : b.items) {
        const Transitions tr = extract_transitions(item.context);
        item.y = Eigen::MatrixXd::Zero(b.max_transitions, kMaxDimension);
        item.dy = Eigen::MatrixXd::Zero(b.max_transitions, kMaxDimension);
        item.dtau = Eigen::VectorXd::Zero(b.max_transitions);
        item.valid.assign(static_cast<std::size_t>(b.max_transitions), 0);
        item.y.topLeftCorner(tr.size(), item.dimension) = tr.y;
        item.dy.topLeftCorner(tr.size(), item.dimension) = tr.dy;
        item.dtau.head(tr.size()) = tr.dtau;
        std::fill_n(item.valid.begin(), tr.size(), 1);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Boundary statistics

struct BoundaryBin {
    double low = 0.0, high = 0.0;
    std::size_t count = 0;
    double mean = 0.0, median = 0.0, q25 = 0.0, q75 = 0.0;
};

struct BoundaryReport {
    int dimension = 1;
    std::size_t records = 0;
    std::vector<BoundaryBin> bins;

    std::string table() const {
        std::ostringstream os;
        os << "relative distance | count | mean | median | q25 | q75\n";
        os << std::setprecision(6);
        for (const auto& b : bins)
            os << "[" << b.low << ", " << b.high << ") | " << b.count << " | " << b.mean << " | " << b.median << " | " << b.q25
               << " | " << b.q75 << "\n";
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os << "low,high,count,mean,median,q25,q75\n" << std::setprecision(17);
        for (const auto& b : bins)
            os << b.low << "," << b.high << "," << b.count << "," << b.mean << "," << b.median << "," << b.q25 << "," << b.q75 << "\n";
        return os.str();
    }
};

namespace detail {
inline double quantile_sorted(const std::vector<double>& v, double q) {
    if (v.empty()) return 0.0;
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}
} // namespace detail

/// Bins vf target magnitudes by relative distance to the box boundary; edges cover [0, 0.5].
inline BoundaryReport boundary_statistics(const std::vector<const SystemRecord*>& records, int n_bins = 10) {
    ODEINF_REQUIRE(!records.empty(), "boundary_statistics: no records");
    ODEINF_REQUIRE(n_bins >= 1, "boundary_statistics: need at least one bin");
    BoundaryReport rep;
    rep.dimension = records.front()->dimension();
    rep.records = records.size();
    std::vector<std::vector<double>> mags(static_cast<std::size_t>(n_bins));
    const double width = 0.5 / n_bins;
    for (const auto* r : records) {
        ODEINF_REQUIRE(r->dimension() == rep.dimension, "boundary_statistics: records must share one dimension");
        for (Eigen::Index i = 0; i < r->vf_targets.size(); ++i) {
            const double rel = r->box.relative_boundary_distance(r->vf_targets.locations.row(i).transpose());
            const auto bin = std::min<std::size_t>(static_cast<std::size_t>(rel / width), static_cast<std::size_t>(n_bins - 1));
            mags[bin].push_back(r->vf_targets.values.row(i).norm());
        }
    }
    for (int b = 0; b < n_bins; ++b) {
        auto& v = mags[static_cast<std::size_t>(b)];
        std::sort(v.begin(), v.end());
        BoundaryBin bin;
        bin.low = b * width;
        bin.high = b + 1 == n_bins ? 0.5 : (b + 1) * width;
        bin.count = v.size();
        if (!v.empty()) {
            double s = 0.0;
            for (double x : v) s += x;
            bin.mean = s / static_cast<double>(v.size());
            bin.median = detail::quantile_sorted(v, 0.5);
            bin.q25 = detail::quantile_sorted(v, 0.25);
            bin.q75 = detail::quantile_sorted(v, 0.75);
        }
        rep.bins.push_back(bin);
    }
    return rep;
}

} // namespace odeinf
