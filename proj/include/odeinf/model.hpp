#pragma once

// Vector-field estimator: transition encoder with linear self-attention and a
// query decoder with softmax cross-attention, plus the inference wrapper that
// maps between original and normalized coordinates.

#include "odeinf/autodiff.hpp"
#include "odeinf/context.hpp"
#include "odeinf/errors.hpp"
#include "odeinf/random.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace odeinf {

struct ModelConfig {
    int width = 256;
    int encoder_layers = 2;
    int decoder_blocks = 8;
    int heads = 8;
    int mlp_layers = 3;
    int mlp_hidden = 1024;
    int ffn_multiplier = 4;
    double dropout = 0.10;

    static ModelConfig paper() { return {}; }
    static ModelConfig desk() { return {64, 2, 4, 8, 3, 256, 2, 0.10}; }
    static ModelConfig tiny() { return {8, 1, 2, 2, 3, 8, 2, 0.0}; }

    void validate() const {
        ODEINF_REQUIRE(width >= 4 && width % 4 == 0, "model: width must be a positive multiple of 4");
        ODEINF_REQUIRE(heads >= 1 && width % heads == 0, "model: width must be divisible by the head count");
        ODEINF_REQUIRE(encoder_layers >= 1, "model: need at least one encoder layer");
        ODEINF_REQUIRE(decoder_blocks >= 1, "model: need at least one decoder block");
        ODEINF_REQUIRE(mlp_layers >= 1, "model: need at least one output layer");
        ODEINF_REQUIRE(mlp_hidden >= 1 && ffn_multiplier >= 1, "model: hidden widths must be positive");
        ODEINF_REQUIRE(dropout >= 0.0 && dropout < 1.0, "model: dropout must lie in [0, 1)");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
class FieldModel {
public:
    using Mat = ad::Matrix<T>;
    using Tape = ad::Tape<T>;
    using Var = ad::Var;

    struct Linear {
        std::size_t w = 0, b = 0;
    };
    struct Norm {
        std::size_t g = 0, b = 0;
    };
    struct Ffn {
        Norm norm;
        Linear in, out;
    };
    struct EncoderLayer {
        Norm norm;
        Linear q, k, v, o;
        Ffn ffn;
    };
    struct DecoderBlock {
        Norm norm;
        Linear q, k, v, o;
        Ffn ffn;
    };
    struct Mlp {
        Norm norm;
        std::vector<Linear> layers;
    };

    /// Per-block keys and values of the encoded context.
    struct Memory {
        std::vector<Var> keys;
        std::vector<Var> values;
        Eigen::Index size = 0;
    };

    struct Output {
        Var field;    // Q x 3, normalized units
        Var log_var;  // Q x 1
    };

    FieldModel(ModelConfig config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        build(rng);
    }

    /// Model with the same layout whose parameters come from `values` (checkpoint loading, casts).
    FieldModel(ModelConfig config, ad::ParameterStore<T> values) : config_(config) {
        config_.validate();
        Rng rng(0);
        build(rng);
        ODEINF_REQUIRE(values.size() == params_.size(), "FieldModel: parameter count mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            ODEINF_REQUIRE(values[i].name == params_[i].name, "FieldModel: parameter name mismatch: " + values[i].name);
            ODEINF_REQUIRE(values[i].value.rows() == params_[i].value.rows() && values[i].value.cols() == params_[i].value.cols(),
                           "FieldModel: parameter shape mismatch: " + values[i].name);
        }
        params_.assign_values(values);
    }

    const ModelConfig& config() const { return config_; }
    void set_dropout(double p) {
        ODEINF_REQUIRE(p >= 0.0 && p < 1.0, "model: dropout must lie in [0, 1)");
        config_.dropout = p;
    }
    ad::ParameterStore<T>& parameters() { return params_; }
    const ad::ParameterStore<T>& parameters() const { return params_; }

    template <typename U>
    FieldModel<U> cast() const {
        return FieldModel<U>(config_, params_.template cast<U>());
    }

    /// Encodes transition features (J x 10) into the context matrix (J x n).
    Var encode(Tape& t, const Mat& features, Rng* dropout_rng = nullptr) {
        ODEINF_REQUIRE(features.rows() >= 1, "encode: no valid transitions");
        ODEINF_REQUIRE(features.cols() == kFeatureWidth, "encode: feature width mismatch");
        ODEINF_REQUIRE(features.allFinite(), "encode: non-finite features");
        const Var f = t.constant(features);
        const int d = kMaxDimension;
        Var x = ad::concat_cols(t, {linear(t, ad::slice_cols(t, f, 0, d), embed_y_),
                                    linear(t, ad::slice_cols(t, f, d, d), embed_dy_),
                                    linear(t, ad::slice_cols(t, f, 2 * d, d), embed_dy2_),
                                    linear(t, ad::slice_cols(t, f, 3 * d, 1), embed_dt_)});
        for (const auto& layer : encoder_) {
            const Var h = norm(t, x, layer.norm);
            const Var q = ad::elu1(t, linear(t, h, layer.q));
            const Var k = ad::elu1(t, linear(t, h, layer.k));
            const Var v = linear(t, h, layer.v);
            const Var a = linear(t, ad::linear_attention(t, q, k, v, config_.heads), layer.o);
            x = ad::add(t, x, drop(t, a, dropout_rng));
            x = ad::add(t, x, drop(t, ffn(t, x, layer.ffn, dropout_rng), dropout_rng));
        }
        return norm(t, x, encoder_norm_);
    }

    Memory memory(Tape& t, Var context) {
        Memory m;
        m.size = t.value(context).rows();
        for (const auto& block : decoder_) {
            m.keys.push_back(linear(t, context, block.k));
            m.values.push_back(linear(t, context, block.v));
        }
        return m;
    }

    /// Decodes normalized query locations (Q x 3). Coordinates with mask 0 are
    /// zeroed on input and output.
    Output decode(Tape& t, Var queries, const Memory& mem, const std::vector<std::uint8_t>& dim_mask,
                  Rng* dropout_rng = nullptr) {
        ODEINF_REQUIRE(t.value(queries).cols() == kMaxDimension, "decode: queries must have 3 columns");
        ODEINF_REQUIRE(t.value(queries).allFinite(), "decode: non-finite query");
        ODEINF_REQUIRE(mem.keys.size() == decoder_.size(), "decode: memory does not match the model");
        const Mat mask = mask_row(dim_mask);
        const Var xq = ad::mul_row_const(t, queries, mask);
        Var h = linear(t, ad::gelu(t, linear(t, xq, query_in_)), query_out_);
        for (std::size_t i = 0; i < decoder_.size(); ++i) {
            const auto& block = decoder_[i];
            const Var q = linear(t, norm(t, h, block.norm), block.q);
            const Var a = linear(t, ad::softmax_attention(t, q, mem.keys[i], mem.values[i], config_.heads), block.o);
            h = ad::add(t, h, drop(t, a, dropout_rng));
            h = ad::add(t, h, drop(t, ffn(t, h, block.ffn, dropout_rng), dropout_rng));
        }
        Output out;
        out.field = ad::mul_row_const(t, mlp(t, h, field_head_, dropout_rng), mask);
        out.log_var = mlp(t, h, uncertainty_head_, dropout_rng);
        return out;
    }

private:
    void build(Rng& rng) {
        const int n = config_.width;
        const int quarter = n / 4;
        const int d = kMaxDimension;
        embed_y_ = make_linear("embed.y", d, quarter, rng);
        embed_dy_ = make_linear("embed.dy", d, quarter, rng);
        embed_dy2_ = make_linear("embed.dy2", d, quarter, rng);
        embed_dt_ = make_linear("embed.dt", 1, quarter, rng);
        for (int l = 0; l < config_.encoder_layers; ++l) {
            const std::string p = "encoder." + std::to_string(l) + ".";
            EncoderLayer e;
            e.norm = make_norm(p + "norm", n);
            e.q = make_linear(p + "q", n, n, rng);
            e.k = make_linear(p + "k", n, n, rng);
            e.v = make_linear(p + "v", n, n, rng);
            e.o = make_linear(p + "o", n, n, rng);
            e.ffn = make_ffn(p + "ffn", rng);
            encoder_.push_back(e);
        }
        encoder_norm_ = make_norm("encoder.norm", n);
        query_in_ = make_linear("query.in", d, n, rng);
        query_out_ = make_linear("query.out", n, n, rng);
        for (int b = 0; b < config_.decoder_blocks; ++b) {
            const std::string p = "decoder." + std::to_string(b) + ".";
            DecoderBlock blk;
            blk.norm = make_norm(p + "norm", n);
            blk.q = make_linear(p + "q", n, n, rng);
            blk.k = make_linear(p + "k", n, n, rng);
            blk.v = make_linear(p + "v", n, n, rng);
            blk.o = make_linear(p + "o", n, n, rng);
            blk.ffn = make_ffn(p + "ffn", rng);
            decoder_.push_back(blk);
        }
        field_head_ = make_mlp("head.field", d, rng, false);
        uncertainty_head_ = make_mlp("head.uncertainty", 1, rng, true);
    }

    Linear make_linear(const std::string& name, int in, int out, Rng& rng, bool zero = false) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        Mat w(in, out);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                w(i, j) = zero ? T(0) : static_cast<T>(rng.uniform(-bound, bound));
        Linear l;
        l.w = params_.add(name + ".w", std::move(w));
        l.b = params_.add(name + ".b", Mat::Zero(1, out));
        return l;
    }

    Norm make_norm(const std::string& name, int width) {
        Norm nm;
        nm.g = params_.add(name + ".g", Mat::Ones(1, width));
        nm.b = params_.add(name + ".b", Mat::Zero(1, width));
        return nm;
    }

    Ffn make_ffn(const std::string& name, Rng& rng) {
        const int n = config_.width;
        Ffn f;
        f.norm = make_norm(name + ".norm", n);
        f.in = make_linear(name + ".in", n, n * config_.ffn_multiplier, rng);
        f.out = make_linear(name + ".out", n * config_.ffn_multiplier, n, rng);
        return f;
    }

    Mlp make_mlp(const std::string& name, int out, Rng& rng, bool zero_last) {
        Mlp m;
        m.norm = make_norm(name + ".norm", config_.width);
        int in = config_.width;
        for (int l = 0; l < config_.mlp_layers; ++l) {
            const bool last = l + 1 == config_.mlp_layers;
            const int o = last ? out : config_.mlp_hidden;
            m.layers.push_back(make_linear(name + "." + std::to_string(l), in, o, rng, last && zero_last));
            in = o;
        }
        return m;
    }

    Var linear(Tape& t, Var x, const Linear& l) {
        return ad::linear(t, x, t.parameter(params_[l.w]), t.parameter(params_[l.b]));
    }

    Var norm(Tape& t, Var x, const Norm& n) {
        return ad::layer_norm(t, x, t.parameter(params_[n.g]), t.parameter(params_[n.b]));
    }

    Var drop(Tape& t, Var x, Rng* rng) {
        if (!rng || config_.dropout <= 0.0) return x;
        return ad::dropout(t, x, config_.dropout, *rng);
    }

    Var ffn(Tape& t, Var x, const Ffn& f, Rng* rng) {
        return linear(t, drop(t, ad::gelu(t, linear(t, norm(t, x, f.norm), f.in)), rng), f.out);
    }

    Var mlp(Tape& t, Var x, const Mlp& m, Rng* rng) {
        Var h = norm(t, x, m.norm);
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            h = linear(t, h, m.layers[l]);
            if (l + 1 < m.layers.size()) h = drop(t, ad::gelu(t, h), rng);
        }
        return h;
    }

    static Mat mask_row(const std::vector<std::uint8_t>& dim_mask) {
        ODEINF_REQUIRE(dim_mask.size() == static_cast<std::size_t>(kMaxDimension), "decode: mask must have 3 entries");
        Mat m(1, kMaxDimension);
        for (int i = 0; i < kMaxDimension; ++i) m(0, i) = dim_mask[static_cast<std::size_t>(i)] ? T(1) : T(0);
        return m;
    }

    ModelConfig config_;
    ad::ParameterStore<T> params_;
    Linear embed_y_, embed_dy_, embed_dy2_, embed_dt_;
    std::vector<EncoderLayer> encoder_;
    Norm encoder_norm_;
    Linear query_in_, query_out_;
    std::vector<DecoderBlock> decoder_;
    Mlp field_head_, uncertainty_head_;
};

/// Zero-shot estimator for one context: fits the normalization, encodes the
/// context once and answers field queries in original coordinates.
template <typename T>
class FieldEstimator {
public:
    FieldEstimator(FieldModel<T>& model, const Context& context)
        : model_(&model), norm_(fit_normalization(context)), mask_(dimension_mask(norm_.dimension())),
          tape_(std::make_unique<ad::Tape<T>>(false)) {
        const Transitions tr = extract_transitions(context);
        const auto c = model_->encode(*tape_, transition_features(tr, norm_).template cast<T>());
        memory_ = model_->memory(*tape_, c);
        mark_ = tape_->mark();
    }

    const NormalizationState& normalization() const { return norm_; }
    Eigen::Index dimension() const { return norm_.dimension(); }

    /// Normalized-space outputs for normalized queries (Q x 3): field (Q x 3) and log-variance (Q x 1).
    std::pair<Eigen::MatrixXd, Eigen::VectorXd> decode_normalized(const Eigen::MatrixXd& zq) {
        tape_->rewind(mark_);
        const auto q = tape_->constant(zq.template cast<T>());
        const auto out = model_->decode(*tape_, q, memory_, mask_);
        Eigen::MatrixXd f = tape_->value(out.field).template cast<double>();
        Eigen::VectorXd u = tape_->value(out.log_var).col(0).template cast<double>();
        tape_->rewind(mark_);
        return {std::move(f), std::move(u)};
    }

    /// Field at query rows x (Q x d) in original units.
    Eigen::MatrixXd predict(const Eigen::MatrixXd& x) {
        const auto [g, u] = decode_normalized(normalize_queries(x, norm_));
        const Eigen::Index d = dimension();
        Eigen::MatrixXd out(x.rows(), d);
        for (Eigen::Index i = 0; i < d; ++i) out.col(i) = g.col(i) * (norm_.sigma[i] * norm_.gamma);
        return out;
    }

    Eigen::VectorXd predict(const Eigen::VectorXd& x) {
        return predict(Eigen::MatrixXd(x.transpose())).row(0).transpose();
    }

    /// Log-variance at query rows x (Q x d).
    Eigen::VectorXd log_variance(const Eigen::MatrixXd& x) { return decode_normalized(normalize_queries(x, norm_)).second; }

private:
    FieldModel<T>* model_;
    NormalizationState norm_;
    std::vector<std::uint8_t> mask_;
    std::unique_ptr<ad::Tape<T>> tape_;
    typename FieldModel<T>::Memory memory_;
    std::size_t mark_ = 0;
};

/// predict_field for a single query without keeping an estimator around.
template <typename T>
Eigen::VectorXd predict_field(FieldModel<T>& model, const Context& context, const Eigen::VectorXd& x) {
    FieldEstimator<T> est(model, context);
    return est.predict(x);
}

} // namespace odeinf
