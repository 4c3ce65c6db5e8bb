#include "odeinf/dataset.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace odeinf;
namespace fs = std::filesystem;

namespace {

GenerationConfig tiny_generation(std::uint64_t seed) {
    GenerationConfig g;
    g.counts = {5, 3, 2};
    g.vf_samples = 32;
    g.trajectories = 3;
    g.grid = TimeGrid{0.0, 2.95, 60, 5};
    g.records_per_shard = 4;
    g.validation_fraction = 0.4;
    g.seed = seed;
    return g;
}

SystemRecord first_record(const GenerationConfig& g, int d) {
    for (std::uint64_t a = 0;; ++a) {
        auto res = generate_record(g, d, a);
        if (auto* r = std::get_if<SystemRecord>(&res)) return std::move(*r);
    }
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("odeinf_dataset_" + name);
    fs::remove_all(p);
    return p;
}

FormatErrorKind kind_of(const std::string& bytes) {
    try {
        decode_shard(bytes, "x");
    } catch (const FormatError& e) {
        return e.kind();
    }
    return FormatErrorKind::Io;
}

} // namespace

TEST(Record, GenerationDeterministic) {
    const auto g = tiny_generation(1);
    EXPECT_TRUE(first_record(g, 2) == first_record(g, 2));
    EXPECT_FALSE(first_record(g, 2) == first_record(tiny_generation(2), 2));
}

TEST(Record, ShapesAndQuantization) {
    const auto r = first_record(tiny_generation(3), 3);
    EXPECT_EQ(r.dimension(), 3);
    ASSERT_EQ(r.clean.size(), 3u);
    ASSERT_EQ(r.corrupted.size(), 3u);
    EXPECT_EQ(r.vf_targets.size(), 32);
    for (const auto& c : r.corrupted) {
        EXPECT_EQ(c.keep_mask.size(), 60u);
        EXPECT_TRUE(c.observations == c.observations.cast<float>().cast<double>());
    }
    EXPECT_LE(r.provenance.sigma, 0.06);
    EXPECT_LT(r.provenance.rho, 0.5);
}

TEST(Shard, RoundTripExact) {
    const auto g = tiny_generation(4);
    std::vector<SystemRecord> recs{first_record(g, 1), first_record(g, 2), first_record(g, 3)};
    std::vector<std::uint64_t> offsets;
    const auto bytes = encode_shard(recs, &offsets);
    ASSERT_EQ(offsets.size(), 3u);
    EXPECT_EQ(offsets[0], io::ContainerHeader::kSize);
    const auto back = decode_shard(bytes, "mem");
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(back[i] == recs[i]);
    EXPECT_EQ(encode_shard(back), bytes);
}

TEST(Shard, ErrorKinds) {
    const auto bytes = encode_shard({first_record(tiny_generation(5), 1)});
    std::string bad = bytes;
    bad[1] = 'Q';
    EXPECT_EQ(kind_of(bad), FormatErrorKind::BadMagic);
    EXPECT_EQ(kind_of(bytes.substr(0, 5)), FormatErrorKind::Truncated);
    EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() / 2)), FormatErrorKind::Truncated);
    bad = bytes;
    bad[bytes.size() - 3] ^= 1;
    EXPECT_EQ(kind_of(bad), FormatErrorKind::ChecksumMismatch);
    bad = bytes;
    bad[8] = 2;
    EXPECT_EQ(kind_of(bad), FormatErrorKind::VersionMismatch);
    bad = bytes;
    std::swap(bad[12], bad[15]);
    std::swap(bad[13], bad[14]);
    EXPECT_EQ(kind_of(bad), FormatErrorKind::EndiannessMismatch);
    EXPECT_THROW(load_shard(scratch("missing") / "none.bin"), IoError);
}

TEST(Dataset, GenerateLoadAndRegenerate) {
    const auto dir = scratch("gen");
    const auto g = tiny_generation(6);
    const auto m = generate_dataset(g, dir, 2);
    EXPECT_EQ(m.size(), 10u);
    const auto ds = load_dataset(dir);
    ASSERT_EQ(ds.records.size(), 10u);
    EXPECT_EQ(ds.generation.seed, 6u);
    EXPECT_EQ(ds.validation.size(), 2u + 1u + 1u);
    EXPECT_EQ(ds.train.size() + ds.validation.size(), 10u);
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        EXPECT_EQ(ds.records[i].provenance.index, i);
        EXPECT_TRUE(regenerate(ds.generation, ds.records[i].provenance) == ds.records[i]);
    }
    EXPECT_EQ(ds.records[4].dimension(), 1);
    EXPECT_EQ(ds.records[5].dimension(), 2);
    EXPECT_EQ(m.json.at("shards").size(), 4u);
    fs::remove_all(dir);
}

TEST(Dataset, WorkerCountDoesNotChangeOutput) {
    const auto a = scratch("w1"), b = scratch("w3");
    generate_dataset(tiny_generation(7), a, 1);
    generate_dataset(tiny_generation(7), b, 3);
    for (const auto& e : fs::directory_iterator(a)) EXPECT_EQ(io::read_file(e.path()), io::read_file(b / e.path().filename()));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Dataset, CorruptShardReported) {
    const auto dir = scratch("corrupt");
    generate_dataset(tiny_generation(8), dir, 1);
    {
        std::fstream f(dir / "shard-00001.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(60);
        f.put('\x7f');
    }
    try {
        load_dataset(dir);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatErrorKind::ChecksumMismatch);
    }
    fs::remove_all(dir);
}

TEST(Split, LastFractionPerDimension) {
    EXPECT_FALSE(is_validation(0, 10, 0.1));
    EXPECT_FALSE(is_validation(8, 10, 0.1));
    EXPECT_TRUE(is_validation(9, 10, 0.1));
    int n = 0;
    for (std::uint64_t i = 0; i < 2000; ++i) n += is_validation(i, 2000, 0.1);
    EXPECT_EQ(n, 200);
    EXPECT_FALSE(is_validation(4, 5, 0.0));
}

TEST(Batch, PaddingAndMasks) {
    const auto g = tiny_generation(9);
    const auto r1 = first_record(g, 1), r3 = first_record(g, 3);
    Rng rng(1);
    const auto b = make_batch({&r1, &r3}, 1, 3, rng);
    ASSERT_EQ(b.items.size(), 2u);
    Eigen::Index longest = 0;
    for (const auto& it : b.items) {
        EXPECT_GE(it.trajectories.size(), 1u);
        EXPECT_LE(it.trajectories.size(), 3u);
        std::vector<std::size_t> sorted = it.trajectories;
        std::sort(sorted.begin(), sorted.end());
        EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
        Eigen::Index j = 0;
        for (const auto& t : it.context) j += t.length() - 1;
        EXPECT_EQ(static_cast<Eigen::Index>(it.valid_transitions()), j);
        longest = std::max(longest, j);
        EXPECT_EQ(it.y.rows(), b.max_transitions);
        for (Eigen::Index r = j; r < b.max_transitions; ++r) {
            EXPECT_TRUE(it.y.row(r).isZero(0.0));
            EXPECT_EQ(it.dtau[r], 0.0);
        }
        EXPECT_TRUE(it.y.rightCols(3 - it.dimension).isZero(0.0));
    }
    EXPECT_EQ(b.max_transitions, longest);
    EXPECT_EQ(b.items[0].dim_mask, (std::vector<std::uint8_t>{1, 0, 0}));
}

TEST(Batch, KDistribution) {
    const auto r = first_record(tiny_generation(10), 1);
    Rng rng(2);
    std::array<int, 4> counts{};
    for (int i = 0; i < 3000; ++i) ++counts[make_batch({&r}, 1, 3, rng).items[0].trajectories.size()];
    EXPECT_EQ(counts[0], 0);
    for (int k = 1; k <= 3; ++k) EXPECT_NEAR(counts[static_cast<std::size_t>(k)] / 3000.0, 1.0 / 3.0, 0.04);
    EXPECT_THROW(make_batch({&r}, 1, 4, rng), ContractError);
}

TEST(Boundary, BinsAndQuantiles) {
    SystemRecord r;
    r.vf = make_field({{{{0}, 1.0}}});
    r.box = BoundingBox{Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, 10.0)};
    r.vf_targets.locations.resize(4, 1);
    r.vf_targets.values.resize(4, 1);
    r.vf_targets.locations << 0.1, 0.2, 5.0, 9.95;
    r.vf_targets.values << 1, 3, 7, -2;
    const auto rep = boundary_statistics({&r}, 5);
    ASSERT_EQ(rep.bins.size(), 5u);
    EXPECT_EQ(rep.bins[0].count, 3u);
    EXPECT_DOUBLE_EQ(rep.bins[0].mean, 2.0);
    EXPECT_DOUBLE_EQ(rep.bins[0].median, 2.0);
    EXPECT_DOUBLE_EQ(rep.bins[0].q25, 1.5);
    EXPECT_EQ(rep.bins[4].count, 1u);
    EXPECT_DOUBLE_EQ(rep.bins[4].mean, 7.0);
    EXPECT_DOUBLE_EQ(rep.bins[4].high, 0.5);
    EXPECT_NE(rep.csv().find("low,high,count"), std::string::npos);
}

TEST(ParallelMap, OrderedResults) {
    const auto v = parallel_map<int>(50, 4, [](std::size_t i) { return static_cast<int>(i * i); });
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(v[i], static_cast<int>(i * i));
}

TEST(GenerationConfig, JsonRoundTripAndValidation) {
    const auto g = tiny_generation(11);
    GenerationConfig back;
    const Json j = to_json(g);
    JsonReader r(j, "generation");
    read(r, back);
    r.finish();
    EXPECT_EQ(to_json(back), to_json(g));
    GenerationConfig bad = g;
    bad.corruption.rho_max = 1.0;
    EXPECT_THROW(bad.validate(), ContractError);
}
