#pragma once

// Model checkpoints: binary container holding a JSON header (model config,
// step, rng states, free-form metadata) and float32 parameter arrays.

#include "odeinf/binary.hpp"
#include "odeinf/json_io.hpp"
#include "odeinf/model.hpp"

#include <filesystem>
#include <string>

namespace odeinf {

inline Json to_json(const ModelConfig& c) {
    return Json{{"width", c.width},           {"encoder_layers", c.encoder_layers}, {"decoder_blocks", c.decoder_blocks},
                {"heads", c.heads},           {"mlp_layers", c.mlp_layers},         {"mlp_hidden", c.mlp_hidden},
                {"ffn_multiplier", c.ffn_multiplier}, {"dropout", c.dropout}};
}

inline void read(JsonReader& r, ModelConfig& c) {
    r.get("width", c.width);
    r.get("encoder_layers", c.encoder_layers);
    r.get("decoder_blocks", c.decoder_blocks);
    r.get("heads", c.heads);
    r.get("mlp_layers", c.mlp_layers);
    r.get("mlp_hidden", c.mlp_hidden);
    r.get("ffn_multiplier", c.ffn_multiplier);
    r.get("dropout", c.dropout);
}

inline ModelConfig model_preset(const std::string& name) {
    if (name == "paper") return ModelConfig::paper();
    if (name == "desk") return ModelConfig::desk();
    if (name == "tiny") return ModelConfig::tiny();
    throw ConfigError("preset", "unknown preset '" + name + "' (expected paper, desk or tiny)");
}

inline constexpr std::string_view kCheckpointMagic = "ODECKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig model;
    std::uint64_t step = 0;
    std::string batch_rng_state;
    std::string dropout_rng_state;
    Json metadata = Json::object();
    ad::ParameterStore<float> parameters;
};

inline std::string encode_checkpoint(const Checkpoint& c) {
    io::ByteWriter w;
    const Json header{{"model", to_json(c.model)},
                      {"step", c.step},
                      {"batch_rng_state", c.batch_rng_state},
                      {"dropout_rng_state", c.dropout_rng_state},
                      {"metadata", c.metadata}};
    const std::string hs = header.dump();
    w.put(static_cast<std::uint32_t>(hs.size()));
    w.put_bytes(hs);
    for (const auto& p : c.parameters) {
        w.put(static_cast<std::uint32_t>(p.name.size()));
        w.put_bytes(p.name);
        w.put(static_cast<std::uint64_t>(p.value.rows()));
        w.put(static_cast<std::uint64_t>(p.value.cols()));
        w.put_array(p.value.data(), static_cast<std::size_t>(p.value.size()));
    }
    return io::make_container(kCheckpointMagic, kCheckpointVersion, c.parameters.size(), w.bytes());
}

/// Parses and checks that names and shapes match a model of the stored config.
inline Checkpoint decode_checkpoint(std::string_view data, const std::string& path) {
    io::ContainerHeader h;
    const auto payload = io::open_container(data, kCheckpointMagic, kCheckpointVersion, path, &h);
    io::ByteReader r(payload, path);
    Checkpoint c;
    const auto hlen = r.get<std::uint32_t>();
    Json header;
    try {
        header = Json::parse(r.get_bytes(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::Malformed, path, std::string("header: ") + e.what());
    }
    try {
        JsonReader jr(header, "");
        jr.child("model", [&](JsonReader& m) { read(m, c.model); });
        jr.get("step", c.step);
        jr.get("batch_rng_state", c.batch_rng_state);
        jr.get("dropout_rng_state", c.dropout_rng_state);
        jr.get("metadata", c.metadata);
        jr.finish();
        c.model.validate();
    } catch (const std::exception& e) {
        throw FormatError(FormatErrorKind::Malformed, path, std::string("header: ") + e.what());
    }
    const FieldModel<float> reference(c.model, 0);
    if (h.count != reference.parameters().size())
        throw FormatError(FormatErrorKind::Malformed, path,
                          "expected " + std::to_string(reference.parameters().size()) + " parameter arrays, found " + std::to_string(h.count));
    for (const auto& ref : reference.parameters()) {
        const auto nlen = r.get<std::uint32_t>();
        std::string name(r.get_bytes(nlen));
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        if (name != ref.name || rows != static_cast<std::uint64_t>(ref.value.rows()) || cols != static_cast<std::uint64_t>(ref.value.cols()))
            throw FormatError(FormatErrorKind::Malformed, path, "parameter '" + name + "' does not match the model layout (expected '" + ref.name + "')");
        ad::Matrix<float> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        r.get_array(m.data(), static_cast<std::size_t>(m.size()));
        c.parameters.add(std::move(name), std::move(m));
    }
    if (!r.done()) throw FormatError(FormatErrorKind::Malformed, path, "trailing bytes after the last parameter");
    return c;
}

template <typename T>
Checkpoint make_checkpoint(const FieldModel<T>& model, std::uint64_t step = 0, Json metadata = Json::object()) {
    Checkpoint c;
    c.model = model.config();
    c.step = step;
    c.metadata = std::move(metadata);
    c.parameters = model.parameters().template cast<float>();
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { io::write_file_atomic(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path), path.string()); }

template <typename T = float>
FieldModel<T> model_from_checkpoint(const Checkpoint& c) {
    return FieldModel<T>(c.model, c.parameters.template cast<T>());
}

} // namespace odeinf
