#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrdetr/geometry.hpp"
#include "mrdetr/layers.hpp"
#include "mrdetr/param.hpp"

namespace mrdetr::model {

using ad::Tensor;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class SaKind { Shared, Independent, Instructive };
enum class CaKind { Shared, Independent };
enum class FfnKind { SharedO2O, IndependentO2M, MoeGateShared, MoeGateIndependent };
enum class Target { O2O, O2M };

struct RouteSpec {
    std::string name;
    SaKind sa = SaKind::Shared;
    CaKind ca = CaKind::Shared;
    FfnKind ffn = FfnKind::SharedO2O;
    Target target = Target::O2O;

    bool operator==(const RouteSpec&) const = default;
};

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t n_queries = 20;
    std::size_t n_instruction_tokens = 10;
    std::size_t n_experts = 4;
    std::size_t top_k = 2;
    std::size_t moe_scales = 1;  // η: encoder scales (coarsest first) receiving the MoE term
    std::vector<std::size_t> moe_decoder_layers{1};
    std::size_t num_classes = 3;
    std::size_t image_size = 64;
    std::vector<std::size_t> strides{32, 16, 8};
    bool load_balance = false;
    double load_balance_weight = 0.01;
    double pos_temperature = 20.0;  // sine position encoding
    std::vector<RouteSpec> routes;

    void validate() const;
    std::size_t primary_route() const;
    bool is_moe_layer(std::size_t layer) const;
    std::size_t num_scales() const { return strides.size(); }
};

// Route lists for the named configurations.
std::vector<RouteSpec> mrdetr_routes();
std::vector<RouteSpec> mrdetr_pp_routes();
std::vector<RouteSpec> baseline_routes();
ModelConfig default_config();  // mrdetr-pp preset at desk scale

void to_json(nlohmann::json& j, const RouteSpec& r);
void from_json(const nlohmann::json& j, RouteSpec& r);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct HeadOutputs {
    Tensor logits;      // [n × C]
    Tensor boxes;       // [n × 4], cxcywh in (0,1)
    Tensor iou_logits;  // [n × C]
};

struct RouteLayerOutput {
    Tensor queries;  // Q̂ after the layer, [n × d]
    HeadOutputs heads;
};

struct ForwardOptions {
    // Empty → every route; otherwise only the listed route indices run.
    std::vector<std::size_t> routes;
    bool record_attention = false;
    bool record_moe = false;
};

struct ForwardTrace {
    // Instructive self-attention probabilities per decoder layer (route name → per layer).
    std::map<std::string, std::vector<nn::AttentionProbe>> instructive_attention;
    // key "dec.<layer>.<gate>.<route>" → expert selection counts.
    std::map<std::string, nn::MoeTrace> moe;
};

struct ForwardResult {
    // outputs[route][layer]; routes not run are empty.
    std::vector<std::vector<RouteLayerOutput>> outputs;
    Tensor balance_loss;  // defined only with load balancing on
    ForwardTrace trace;
};

// Per-scene constant inputs: patches per scale and positional encodings.
struct SceneInput {
    std::vector<Tensor> patches;
};

struct Detection {
    std::size_t query = 0;
    int label = 0;
    double score = 0.0;
    geometry::Box box;
};

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);
    // Builds the structure with zeroed values (for checkpoint loading).
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    SceneInput prepare(const std::vector<double>& image, std::size_t height, std::size_t width) const;

    // Stem output tokens per scale, coarsest first.
    std::vector<Tensor> stem(const SceneInput& in) const;
    std::vector<Tensor> encode(const std::vector<Tensor>& tokens) const;
    ForwardResult forward(const SceneInput& in, const ForwardOptions& opts = {}) const;

    // One scale-aware encoder layer on per-scale token lists.
    std::vector<Tensor> encoder_layer(std::size_t layer, const std::vector<Tensor>& scales,
                                      const std::vector<Tensor>& scale_pos, std::size_t eta,
                                      Tensor* balance = nullptr) const;

    // Runs one decoder layer for every listed route from per-route inputs.
    std::vector<Tensor> decoder_layer(std::size_t layer, const std::vector<Tensor>& route_inputs,
                                      const Tensor& memory, const Tensor& memory_pos,
                                      const std::vector<std::size_t>& routes, ForwardTrace* trace = nullptr,
                                      Tensor* balance = nullptr) const;

    HeadOutputs predict_heads(const Tensor& queries) const;

    // Primary route only; top-N (query, class) by calibrated score, ties to
    // the lower flat index. top_n = 0 → min(100, n·C).
    std::vector<Detection> inference(const SceneInput& in, double phi, std::size_t top_n = 0) const;

    // Weights for named components (exposed for tests and probing).
    nn::AttentionBlock attention_block(const std::string& prefix) const;
    nn::FfnBlock ffn_block(const std::string& prefix) const;
    nn::Ffn ffn(const std::string& prefix) const;
    nn::Linear linear(const std::string& prefix) const;
    nn::Norm norm(const std::string& prefix) const;

    // Sine encodings plus the learned per-scale embedding, coarsest first.
    std::vector<Tensor> scale_positions() const;

    // Parameter prefixes a route resolves to at a decoder layer; routes
    // sharing a component resolve to the same prefix.
    static std::string sa_param(std::size_t layer, const RouteSpec& r);
    static std::string ca_param(std::size_t layer, const RouteSpec& r);
    std::string ffn_param(std::size_t layer, const RouteSpec& r) const;
    std::string gate_param(std::size_t layer, const RouteSpec& r) const;  // empty off MoE layers

private:
    void build(std::uint64_t seed, bool init);
    void add_linear(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed, bool init,
                    double bias_init = 0.0);
    void add_norm(const std::string& name);
    void add_attention(const std::string& name, std::uint64_t seed, bool init);
    void add_ffn(const std::string& name, std::uint64_t seed, bool init, bool with_norm);
    void build_positions();

    ModelConfig cfg_;
    ad::ParamStore params_;
    std::vector<Tensor> scale_sine_;  // constant sine encodings per scale
};

// Flattened scale sizes for the configured image.
std::vector<std::size_t> scale_token_counts(const ModelConfig& cfg);

// Analytic multiply-accumulate counts (matmul MACs only).
std::uint64_t encoder_layer_macs(const ModelConfig& cfg, const std::vector<std::size_t>& tokens_per_scale,
                                 std::size_t eta);
std::uint64_t encoder_macs(const ModelConfig& cfg, const std::vector<std::size_t>& tokens_per_scale,
                           std::size_t eta);

const char* to_string(SaKind k);
const char* to_string(CaKind k);
const char* to_string(FfnKind k);
const char* to_string(Target t);

}  // namespace mrdetr::model
