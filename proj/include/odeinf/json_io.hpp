#pragma once

// Strict JSON <-> config conversion. Unknown keys and wrong types raise
// ConfigError naming the full key path.

#include "odeinf/corruption.hpp"
#include "odeinf/errors.hpp"
#include "odeinf/prior.hpp"
#include "odeinf/simulation.hpp"

#include <json.hpp>

#include <set>
#include <type_traits>
#include <string>
#include <vector>

namespace odeinf {

using Json = nlohmann::ordered_json;

class JsonReader {
public:
    JsonReader(Json&&, std::string) = delete;
    JsonReader(const Json& j, std::string path) : j_(&j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, key_name("") + ": expected an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = j_->find(key);
        if (it == j_->end()) return;
        if (!type_matches<T>(*it)) throw ConfigError(key_name(key), key_name(key) + ": " + type_hint<T>() + " expected");
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(key_name(key), key_name(key) + ": " + type_hint<T>() + " expected");
        }
    }

    bool has(const std::string& key) const { return j_->contains(key); }

    /// Nested object; returns false when the key is absent.
    template <typename F>
    bool child(const std::string& key, F&& fn) {
        seen_.insert(key);
        auto it = j_->find(key);
        if (it == j_->end()) return false;
        JsonReader r(*it, key_name(key));
        fn(r);
        r.finish();
        return true;
    }

    void finish() const {
        for (auto it = j_->begin(); it != j_->end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(key_name(it.key()), "unknown config key '" + key_name(it.key()) + "'");
    }

    std::string key_name(const std::string& key) const {
        if (path_.empty()) return key;
        if (key.empty()) return path_;
        return path_ + "." + key;
    }

    void fail(const std::string& key, const std::string& message) const { throw ConfigError(key_name(key), key_name(key) + ": " + message); }

private:
    template <typename T>
    static bool type_matches(const Json& v) {
        if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
        else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
        else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
        else if constexpr (std::is_floating_point_v<T>) return v.is_number();
        else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
        else return true;
    }

    template <typename T>
    static std::string type_hint() {
        if constexpr (std::is_same_v<T, bool>) return "boolean";
        else if constexpr (std::is_integral_v<T>) return "integer";
        else if constexpr (std::is_floating_point_v<T>) return "number";
        else if constexpr (std::is_same_v<T, std::string>) return "string";
        else return "value of a different type";
    }

    const Json* j_;
    std::string path_;
    std::set<std::string> seen_;
};

/// Runs validate() and rethrows contract failures as ConfigError on `key`.
template <typename C>
void validate_as_config(const C& c, const std::string& key) {
    try {
        c.validate();
    } catch (const ContractError& e) {
        throw ConfigError(key, key + ": " + e.what());
    }
}

inline Json to_json(const PriorConfig& c) {
    return Json{{"max_degree", c.max_degree},
                {"degree_keep_probability", c.degree_keep_probability},
                {"monomial_keep_probability", c.monomial_keep_probability},
                {"scale_low", c.scale_low},
                {"scale_high", c.scale_high},
                {"coefficient_mean", c.coefficient_mean},
                {"coefficient_stddev", c.coefficient_stddev}};
}

inline void read(JsonReader& r, PriorConfig& c) {
    r.get("max_degree", c.max_degree);
    r.get("degree_keep_probability", c.degree_keep_probability);
    r.get("monomial_keep_probability", c.monomial_keep_probability);
    r.get("scale_low", c.scale_low);
    r.get("scale_high", c.scale_high);
    r.get("coefficient_mean", c.coefficient_mean);
    r.get("coefficient_stddev", c.coefficient_stddev);
}

inline Json to_json(const TimeGrid& g) {
    return Json{{"t_start", g.t_start}, {"t_end", g.t_end}, {"n_points", g.n_points}, {"substeps", g.substeps}};
}

inline void read(JsonReader& r, TimeGrid& g) {
    r.get("t_start", g.t_start);
    r.get("t_end", g.t_end);
    r.get("n_points", g.n_points);
    r.get("substeps", g.substeps);
}

inline Json to_json(const CorruptionRanges& c) { return Json{{"sigma_max", c.sigma_max}, {"rho_max", c.rho_max}}; }

inline void read(JsonReader& r, CorruptionRanges& c) {
    r.get("sigma_max", c.sigma_max);
    r.get("rho_max", c.rho_max);
}

inline Json field_to_json(const PolynomialVectorField& vf) {
    Json comps = Json::array();
    for (const auto& c : vf.components) {
        Json terms = Json::array();
        for (const auto& t : c.terms) terms.push_back(Json{{"exponents", t.exponents}, {"coefficient", t.coefficient}});
        comps.push_back(terms);
    }
    return Json{{"dimension", vf.dimension}, {"scale", vf.scale}, {"components", comps}};
}

inline PolynomialVectorField field_from_json(const Json& j, const std::string& path) {
    JsonReader r(j, path);
    PolynomialVectorField vf;
    r.get("dimension", vf.dimension);
    r.get("scale", vf.scale);
    Json comps;
    r.get("components", comps);
    r.finish();
    if (!comps.is_array()) r.fail("components", "array expected");
    for (const auto& c : comps) {
        PolynomialComponent pc;
        if (!c.is_array()) r.fail("components", "each component must be an array of terms");
        for (const auto& t : c) {
            JsonReader tr(t, r.key_name("components"));
            Term term;
            tr.get("exponents", term.exponents);
            tr.get("coefficient", term.coefficient);
            tr.finish();
            pc.terms.push_back(std::move(term));
        }
        vf.components.push_back(std::move(pc));
    }
    validate_as_config(vf, path);
    return vf;
}

} // namespace odeinf
