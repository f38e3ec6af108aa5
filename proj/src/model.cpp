#include "mrdetr/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <utility>

#include "mrdetr/data.hpp"
#include "mrdetr/losses.hpp"
#include "mrdetr/rng.hpp"

namespace mrdetr::model {

namespace {

constexpr double kPriorBias = -4.595;  // logit of 0.01

std::string layer_prefix(const char* part, std::size_t layer) {
    return std::string(part) + "." + std::to_string(layer);
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<E> all, const char* what) {
    for (E e : all)
        if (s == to_string(e)) return e;
    std::string valid;
    for (E e : all) valid += std::string(valid.empty() ? "" : ", ") + to_string(e);
    throw ConfigError(std::string("unknown ") + what + " '" + s + "' (valid: " + valid + ")");
}

}  // namespace

const char* to_string(SaKind k) {
    switch (k) {
        case SaKind::Shared: return "shared";
        case SaKind::Independent: return "independent";
        case SaKind::Instructive: return "instructive";
    }
    return "?";
}

const char* to_string(CaKind k) {
    return k == CaKind::Shared ? "shared" : "independent";
}

const char* to_string(FfnKind k) {
    switch (k) {
        case FfnKind::SharedO2O: return "shared-o2o";
        case FfnKind::IndependentO2M: return "independent-o2m";
        case FfnKind::MoeGateShared: return "moe-gate-shared";
        case FfnKind::MoeGateIndependent: return "moe-gate-independent";
    }
    return "?";
}

const char* to_string(Target t) { return t == Target::O2O ? "o2o" : "o2m"; }

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be a positive multiple of n_heads");
    if (d_model % 4 != 0) fail("d_model must be divisible by 4 for the sine encoding");
    if (d_ff == 0) fail("d_ff must be positive");
    if (n_dec_layers == 0) fail("need at least one decoder layer");
    if (n_queries == 0) fail("n_queries must be positive");
    if (num_classes == 0) fail("num_classes must be positive");
    if (!(pos_temperature > 1.0)) fail("pos_temperature must exceed 1");
    if (strides.empty()) fail("strides must not be empty");
    for (std::size_t i = 0; i < strides.size(); ++i) {
        if (strides[i] == 0 || image_size % strides[i] != 0)
            fail("image_size " + std::to_string(image_size) + " not divisible by stride " +
                 std::to_string(strides[i]));
        if (i > 0 && strides[i] >= strides[i - 1]) fail("strides must be ordered coarsest first");
    }
    if (moe_scales > strides.size())
        fail("moe_scales (eta) " + std::to_string(moe_scales) + " exceeds the number of scales " +
             std::to_string(strides.size()));
    const bool any_moe = moe_scales > 0 || !moe_decoder_layers.empty();
    if (any_moe && (n_experts == 0 || top_k < 1 || top_k > n_experts))
        fail("top_k must lie in [1, n_experts]");
    for (auto l : moe_decoder_layers)
        if (l >= n_dec_layers) fail("moe decoder layer " + std::to_string(l) + " out of range");
    if (routes.empty()) fail("no routes");
    std::set<std::string> names;
    std::size_t primaries = 0;
    for (auto& r : routes) {
        if (r.name.empty() || r.name.find_first_of("@. ,") != std::string::npos)
            fail("route name '" + r.name + "' must be non-empty without '@', '.', ',' or spaces");
        if (!names.insert(r.name).second) fail("duplicate route name " + r.name);
        if (r.target == Target::O2O) ++primaries;
    }
    if (primaries != 1) fail("exactly one route must carry the one-to-one target");
}

std::size_t ModelConfig::primary_route() const {
    for (std::size_t i = 0; i < routes.size(); ++i)
        if (routes[i].target == Target::O2O) return i;
    throw ConfigError("model config: no one-to-one route");
}

bool ModelConfig::is_moe_layer(std::size_t layer) const {
    return std::find(moe_decoder_layers.begin(), moe_decoder_layers.end(), layer) != moe_decoder_layers.end();
}

std::vector<RouteSpec> mrdetr_routes() {
    return {
        {"route-1", SaKind::Shared, CaKind::Shared, FfnKind::IndependentO2M, Target::O2M},
        {"route-2", SaKind::Shared, CaKind::Shared, FfnKind::SharedO2O, Target::O2O},
        {"route-3", SaKind::Instructive, CaKind::Shared, FfnKind::SharedO2O, Target::O2M},
    };
}

std::vector<RouteSpec> mrdetr_pp_routes() {
    return {
        {"route-1", SaKind::Shared, CaKind::Shared, FfnKind::MoeGateIndependent, Target::O2M},
        {"route-2", SaKind::Shared, CaKind::Shared, FfnKind::MoeGateShared, Target::O2O},
        {"route-3", SaKind::Instructive, CaKind::Shared, FfnKind::MoeGateShared, Target::O2M},
    };
}

std::vector<RouteSpec> baseline_routes() {
    return {{"route-2", SaKind::Shared, CaKind::Shared, FfnKind::SharedO2O, Target::O2O}};
}

ModelConfig default_config() {
    ModelConfig c;
    c.moe_scales = 1;
    c.moe_decoder_layers.clear();
    for (std::size_t l = c.n_dec_layers / 2; l < c.n_dec_layers; ++l) c.moe_decoder_layers.push_back(l);
    c.routes = mrdetr_pp_routes();
    return c;
}

void to_json(nlohmann::json& j, const RouteSpec& r) {
    j = {{"name", r.name},
         {"sa", to_string(r.sa)},
         {"ca", to_string(r.ca)},
         {"ffn", to_string(r.ffn)},
         {"target", to_string(r.target)}};
}

void from_json(const nlohmann::json& j, RouteSpec& r) {
    r.name = j.at("name").get<std::string>();
    r.sa = parse_enum(j.value("sa", std::string("shared")),
                      {SaKind::Shared, SaKind::Independent, SaKind::Instructive}, "sa kind");
    r.ca = parse_enum(j.value("ca", std::string("shared")), {CaKind::Shared, CaKind::Independent}, "ca kind");
    r.ffn = parse_enum(j.value("ffn", std::string("shared-o2o")),
                       {FfnKind::SharedO2O, FfnKind::IndependentO2M, FfnKind::MoeGateShared,
                        FfnKind::MoeGateIndependent},
                       "ffn kind");
    r.target = parse_enum(j.value("target", std::string("o2o")), {Target::O2O, Target::O2M}, "target");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},
         {"n_heads", c.n_heads},
         {"d_ff", c.d_ff},
         {"n_enc_layers", c.n_enc_layers},
         {"n_dec_layers", c.n_dec_layers},
         {"n_queries", c.n_queries},
         {"n_instruction_tokens", c.n_instruction_tokens},
         {"n_experts", c.n_experts},
         {"top_k", c.top_k},
         {"moe_scales", c.moe_scales},
         {"moe_decoder_layers", c.moe_decoder_layers},
         {"num_classes", c.num_classes},
         {"image_size", c.image_size},
         {"strides", c.strides},
         {"load_balance", c.load_balance},
         {"load_balance_weight", c.load_balance_weight},
         {"pos_temperature", c.pos_temperature},
         {"routes", c.routes}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    static const std::set<std::string> known = {
        "d_model",    "n_heads",      "d_ff",        "n_enc_layers", "n_dec_layers",
        "n_queries",  "n_instruction_tokens",        "n_experts",    "top_k",
        "moe_scales", "moe_decoder_layers",          "num_classes",  "image_size",
        "strides",    "load_balance", "load_balance_weight",         "routes",
        "pos_temperature"};
    for (auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("model config: unknown key '" + k + "'");
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) j.at(k).get_to(field);
    };
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("d_ff", c.d_ff);
    get("n_enc_layers", c.n_enc_layers);
    get("n_dec_layers", c.n_dec_layers);
    get("n_queries", c.n_queries);
    get("n_instruction_tokens", c.n_instruction_tokens);
    get("n_experts", c.n_experts);
    get("top_k", c.top_k);
    get("moe_scales", c.moe_scales);
    get("moe_decoder_layers", c.moe_decoder_layers);
    get("num_classes", c.num_classes);
    get("image_size", c.image_size);
    get("strides", c.strides);
    get("load_balance", c.load_balance);
    get("load_balance_weight", c.load_balance_weight);
    get("pos_temperature", c.pos_temperature);
    get("routes", c.routes);
}

std::vector<std::size_t> scale_token_counts(const ModelConfig& cfg) {
    std::vector<std::size_t> out;
    for (auto s : cfg.strides) out.push_back((cfg.image_size / s) * (cfg.image_size / s));
    return out;
}

std::uint64_t encoder_layer_macs(const ModelConfig& cfg, const std::vector<std::size_t>& tokens, std::size_t eta) {
    if (eta > tokens.size()) throw ConfigError("eta exceeds the number of scales");
    const std::uint64_t d = cfg.d_model, ff = cfg.d_ff;
    const std::uint64_t n = std::accumulate(tokens.begin(), tokens.end(), std::uint64_t{0});
    std::uint64_t macs = 4 * n * d * d + 2 * n * n * d;  // projections, scores, weighted values
    macs += 2 * n * d * ff;                               // shared FFN
    for (std::size_t j = 0; j < eta; ++j) {
        const std::uint64_t nj = tokens[j];
        macs += nj * d * cfg.n_experts + cfg.top_k * nj * 2 * d * ff;
    }
    return macs;
}

std::uint64_t encoder_macs(const ModelConfig& cfg, const std::vector<std::size_t>& tokens, std::size_t eta) {
    return cfg.n_enc_layers * encoder_layer_macs(cfg, tokens, eta);
}

std::string Model::sa_param(std::size_t layer, const RouteSpec& r) {
    const auto base = layer_prefix("dec", layer) + ".sa";
    return r.sa == SaKind::Independent ? base + "@" + r.name : base;
}

std::string Model::ca_param(std::size_t layer, const RouteSpec& r) {
    const auto base = layer_prefix("dec", layer) + ".ca";
    return r.ca == CaKind::Independent ? base + "@" + r.name : base;
}

std::string Model::ffn_param(std::size_t layer, const RouteSpec& r) const {
    const auto base = layer_prefix("dec", layer) + ".ffn";
    if (r.ffn == FfnKind::IndependentO2M) return base + "@" + r.name;
    return base;
}

std::string Model::gate_param(std::size_t layer, const RouteSpec& r) const {
    if (!cfg_.is_moe_layer(layer)) return {};
    const auto base = layer_prefix("dec", layer) + ".gate";
    if (r.ffn == FfnKind::MoeGateShared) return base;
    if (r.ffn == FfnKind::MoeGateIndependent) return base + "@" + r.name;
    return {};
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(seed, true);
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(0, false);
}

void Model::add_linear(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed, bool init,
                       double bias_init) {
    std::vector<double> w(in * out, 0.0);
    if (init) {
        const CounterRng rng(seed, name + ".w");
        const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(i, -lim, lim);
    }
    params_.add(name + ".w", {in, out}, std::move(w));
    params_.add(name + ".b", {out}, std::vector<double>(out, init ? bias_init : 0.0));
}

void Model::add_norm(const std::string& name) {
    params_.add(name + ".gamma", {cfg_.d_model}, std::vector<double>(cfg_.d_model, 1.0));
    params_.add(name + ".beta", {cfg_.d_model}, std::vector<double>(cfg_.d_model, 0.0));
}

void Model::add_attention(const std::string& name, std::uint64_t seed, bool init) {
    const auto d = cfg_.d_model;
    for (const char* p : {".q", ".k", ".v", ".o"}) add_linear(name + p, d, d, seed, init);
    add_norm(name + ".norm");
}

void Model::add_ffn(const std::string& name, std::uint64_t seed, bool init, bool with_norm) {
    add_linear(name + ".in", cfg_.d_model, cfg_.d_ff, seed, init);
    add_linear(name + ".out", cfg_.d_ff, cfg_.d_model, seed, init);
    if (with_norm) add_norm(name + ".norm");
}

void Model::build(std::uint64_t seed, bool init) {
    const auto d = cfg_.d_model;
    auto add_normal = [&](const std::string& name, std::size_t rows, double stddev) {
        std::vector<double> v(rows * d, 0.0);
        if (init) {
            const CounterRng rng(seed, name);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = stddev * rng.normal(i);
        }
        params_.add(name, {rows, d}, std::move(v));
    };

    for (std::size_t s = 0; s < cfg_.num_scales(); ++s) {
        const auto name = layer_prefix("stem", s);
        const std::size_t patch_dim = cfg_.strides[s] * cfg_.strides[s] * 3;
        std::vector<double> w(patch_dim * d, 0.0);
        if (init) {
            const CounterRng rng(seed, name + ".proj");
            const double lim = std::sqrt(6.0 / static_cast<double>(patch_dim + d));
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(i, -lim, lim);
        }
        params_.add(name + ".proj", {patch_dim, d}, std::move(w));
        params_.add(name + ".bias", {d}, std::vector<double>(d, 0.0));
    }
    add_normal("enc.scale_embed", cfg_.num_scales(), 0.1);
    for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) {
        const auto p = layer_prefix("enc", l);
        add_attention(p + ".sa", seed, init);
        add_ffn(p + ".ffn", seed, init, true);
        if (cfg_.moe_scales > 0) {
            add_linear(p + ".moe.gate", d, cfg_.n_experts, seed, init);
            for (std::size_t e = 0; e < cfg_.n_experts; ++e)
                add_ffn(p + ".moe.expert" + std::to_string(e), seed, init, false);
        }
    }

    add_normal("query.content", cfg_.n_queries, 1.0);
    add_normal("query.pos", cfg_.n_queries, 1.0);

    for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
        const auto p = layer_prefix("dec", l);
        const bool moe = cfg_.is_moe_layer(l);
        std::vector<std::string> sa, ca, ffn, gates;
        bool ins = false, experts = false;
        auto once = [](std::vector<std::string>& v, const std::string& s) {
            if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
        };
        for (auto& r : cfg_.routes) {
            once(sa, sa_param(l, r));
            once(ca, ca_param(l, r));
            if (r.sa == SaKind::Instructive && cfg_.n_instruction_tokens > 0) ins = true;
            const auto g = gate_param(l, r);
            if (g.empty()) {
                once(ffn, ffn_param(l, r));
            } else {
                experts = true;
                once(gates, g);
            }
        }
        for (auto& n : sa) add_attention(n, seed, init);
        if (ins) add_normal(p + ".ins", cfg_.n_instruction_tokens, 1.0);
        for (auto& n : ca) add_attention(n, seed, init);
        for (auto& n : ffn) add_ffn(n, seed, init, true);
        if (moe && experts) {
            for (std::size_t e = 0; e < cfg_.n_experts; ++e)
                add_ffn(p + ".experts." + std::to_string(e), seed, init, false);
            for (auto& g : gates) add_linear(g, d, cfg_.n_experts, seed, init);
            add_norm(p + ".moe.norm");
        }
    }

    add_linear("head.cls", d, cfg_.num_classes, seed, init, kPriorBias);
    add_linear("head.box.0", d, d, seed, init);
    add_linear("head.box.1", d, d, seed, init);
    add_linear("head.box.2", d, 4, seed, init);
    add_linear("head.iou", d, cfg_.num_classes, seed, init, kPriorBias);

    build_positions();
}

void Model::build_positions() {
    scale_sine_.clear();
    for (auto s : cfg_.strides)
        scale_sine_.push_back(
            nn::sine_position_encoding(data::token_centers(cfg_.image_size, cfg_.image_size, s), cfg_.d_model,
                                         cfg_.pos_temperature));
}

nn::Linear Model::linear(const std::string& prefix) const {
    return {params_.tensor(prefix + ".w"), params_.tensor(prefix + ".b")};
}

nn::Norm Model::norm(const std::string& prefix) const {
    return {params_.tensor(prefix + ".gamma"), params_.tensor(prefix + ".beta")};
}

nn::AttentionBlock Model::attention_block(const std::string& prefix) const {
    return {{linear(prefix + ".q"), linear(prefix + ".k"), linear(prefix + ".v"), linear(prefix + ".o")},
            norm(prefix + ".norm")};
}

nn::Ffn Model::ffn(const std::string& prefix) const { return {linear(prefix + ".in"), linear(prefix + ".out")}; }

nn::FfnBlock Model::ffn_block(const std::string& prefix) const { return {ffn(prefix), norm(prefix + ".norm")}; }

std::vector<Tensor> Model::scale_positions() const {
    const Tensor& embed = params_.tensor("enc.scale_embed");
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < scale_sine_.size(); ++s) out.push_back(scale_sine_[s] + ad::slice(embed, 0, s, s + 1));
    return out;
}

SceneInput Model::prepare(const std::vector<double>& image, std::size_t height, std::size_t width) const {
    if (height != cfg_.image_size || width != cfg_.image_size)
        throw ad::ShapeError("prepare: image " + std::to_string(height) + "x" + std::to_string(width) +
                             " does not match configured size " + std::to_string(cfg_.image_size));
    data::SceneSample s;
    s.height = height;
    s.width = width;
    s.image = image;
    return {data::patchify_all(s, cfg_.strides)};
}

std::vector<Tensor> Model::stem(const SceneInput& in) const {
    if (in.patches.size() != cfg_.num_scales()) throw ad::ShapeError("stem: scale count mismatch");
    data::StemWeights w;
    for (std::size_t s = 0; s < cfg_.num_scales(); ++s) {
        const auto p = layer_prefix("stem", s);
        w.proj.push_back(params_.tensor(p + ".proj"));
        w.bias.push_back(params_.tensor(p + ".bias"));
    }
    return data::feature_stem(in.patches, w);
}

std::vector<Tensor> Model::encoder_layer(std::size_t layer, const std::vector<Tensor>& scales,
                                         const std::vector<Tensor>& scale_pos, std::size_t eta,
                                         Tensor* balance) const {
    if (scales.size() != scale_pos.size()) throw ad::ShapeError("encoder_layer: scale/position count mismatch");
    if (eta > scales.size()) throw ConfigError("encoder_layer: eta exceeds the number of scales");
    const auto p = layer_prefix("enc", layer);
    const Tensor x = ad::concat(scales, 0);
    const Tensor pos = ad::concat(scale_pos, 0);
    const auto sa = attention_block(p + ".sa");
    const Tensor qk = x + pos;
    const Tensor h = sa.norm(x + nn::multi_head_attention(qk, qk, x, sa.attn, cfg_.n_heads));

    const auto ffn_blk = ffn_block(p + ".ffn");
    nn::Linear gate;
    std::vector<nn::Ffn> experts;
    if (eta > 0) {
        gate = linear(p + ".moe.gate");
        for (std::size_t e = 0; e < cfg_.n_experts; ++e) experts.push_back(ffn(p + ".moe.expert" + std::to_string(e)));
    }
    std::vector<Tensor> out;
    std::size_t offset = 0;
    for (std::size_t j = 0; j < scales.size(); ++j) {
        const std::size_t nj = scales[j].dim(0);
        const Tensor fj = ad::slice(h, 0, offset, offset + nj);
        offset += nj;
        Tensor y = ffn_blk.ffn(fj);
        if (j < eta) {
            auto moe = nn::moe_block(fj, gate, experts, cfg_.top_k, nullptr, balance != nullptr);
            y = y + moe.out;
            if (balance) *balance = balance->defined() ? *balance + moe.balance : moe.balance;
        }
        out.push_back(ffn_blk.norm(fj + y));
    }
    return out;
}

std::vector<Tensor> Model::encode(const std::vector<Tensor>& tokens) const {
    const auto pos = scale_positions();
    std::vector<Tensor> cur = tokens;
    for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) cur = encoder_layer(l, cur, pos, cfg_.moe_scales);
    return cur;
}

std::vector<Tensor> Model::decoder_layer(std::size_t layer, const std::vector<Tensor>& route_inputs,
                                         const Tensor& memory, const Tensor& memory_pos,
                                         const std::vector<std::size_t>& routes, ForwardTrace* trace,
                                         Tensor* balance) const {
    if (route_inputs.size() != routes.size()) throw ad::ShapeError("decoder_layer: one input per route required");
    const auto p = layer_prefix("dec", layer);
    const Tensor& q_pos = params_.tensor("query.pos");
    const std::size_t heads = cfg_.n_heads;

    // Identical (input, component) pairs are computed once and shared.
    std::map<std::pair<const ad::Node*, std::string>, Tensor> cache;
    std::map<std::pair<const ad::Node*, std::string>, nn::MoeTrace> moe_cache;
    std::map<std::pair<const ad::Node*, std::string>, nn::AttentionProbe> probe_cache;

    std::vector<Tensor> out;
    for (std::size_t i = 0; i < routes.size(); ++i) {
        const RouteSpec& r = cfg_.routes.at(routes[i]);
        const Tensor& q = route_inputs[i];

        // Self-attention variant.
        std::string sa_id = r.sa == SaKind::Shared ? "S" : r.sa == SaKind::Independent ? "I" + r.name : "N";
        auto sa_key = std::make_pair(q.node().get(), "sa:" + sa_id);
        Tensor x;
        if (auto it = cache.find(sa_key); it != cache.end()) {
            x = it->second;
            if (r.sa == SaKind::Instructive && trace && probe_cache.count(sa_key))
                trace->instructive_attention[r.name].push_back(probe_cache[sa_key]);
        } else {
            const auto blk = attention_block(sa_param(layer, r));
            if (r.sa == SaKind::Instructive) {
                Tensor ins;
                if (cfg_.n_instruction_tokens > 0) ins = params_.tensor(p + ".ins");
                nn::AttentionProbe probe;
                x = nn::instructive_self_attention(q, q_pos, ins, blk, heads, trace ? &probe : nullptr);
                if (trace) {
                    probe_cache[sa_key] = probe;
                    trace->instructive_attention[r.name].push_back(std::move(probe));
                }
            } else {
                x = nn::self_attention_block(q, q_pos, blk, heads);
            }
            cache[sa_key] = x;
        }

        // Cross-attention.
        auto ca_key = std::make_pair(x.node().get(), std::string(r.ca == CaKind::Shared ? "ca:S" : "ca:I" + r.name));
        if (auto it = cache.find(ca_key); it != cache.end()) {
            x = it->second;
        } else {
            const Tensor y = nn::cross_attention_block(x, q_pos, memory, memory_pos,
                                                       attention_block(ca_param(layer, r)), heads);
            cache[ca_key] = y;
            x = y;
        }

        // Feed-forward variant.
        const std::string gate = gate_param(layer, r);
        std::string ffn_id;
        if (!gate.empty())
            ffn_id = r.ffn == FfnKind::MoeGateShared ? "G" : "G'" + r.name;
        else
            ffn_id = r.ffn == FfnKind::IndependentO2M ? "O" + r.name : "F";
        auto ffn_key = std::make_pair(x.node().get(), "ffn:" + ffn_id);
        const std::string moe_trace_key = gate + "/" + r.name;
        if (auto it = cache.find(ffn_key); it != cache.end()) {
            if (!gate.empty() && trace && moe_cache.count(ffn_key)) trace->moe[moe_trace_key] = moe_cache[ffn_key];
            x = it->second;
        } else {
            Tensor y;
            if (gate.empty()) {
                const auto blk = ffn_block(ffn_param(layer, r));
                y = blk.norm(x + blk.ffn(x));
            } else {
                std::vector<nn::Ffn> experts;
                for (std::size_t e = 0; e < cfg_.n_experts; ++e)
                    experts.push_back(ffn(p + ".experts." + std::to_string(e)));
                nn::MoeTrace mt;
                auto moe = nn::moe_block(x, linear(gate), experts, cfg_.top_k, &mt, balance != nullptr);
                y = norm(p + ".moe.norm")(x + moe.out);
                if (balance) *balance = balance->defined() ? *balance + moe.balance : moe.balance;
                moe_cache[ffn_key] = mt;
                if (trace) trace->moe[moe_trace_key] = mt;
            }
            cache[ffn_key] = y;
            x = y;
        }
        out.push_back(x);
    }
    return out;
}

HeadOutputs Model::predict_heads(const Tensor& queries) const {
    HeadOutputs h;
    h.logits = linear("head.cls")(queries);
    Tensor b = ad::relu(linear("head.box.0")(queries));
    b = ad::relu(linear("head.box.1")(b));
    h.boxes = ad::sigmoid(linear("head.box.2")(b));
    h.iou_logits = linear("head.iou")(queries);
    return h;
}

ForwardResult Model::forward(const SceneInput& in, const ForwardOptions& opts) const {
    std::vector<std::size_t> routes = opts.routes;
    if (routes.empty()) {
        routes.resize(cfg_.routes.size());
        std::iota(routes.begin(), routes.end(), std::size_t{0});
    }
    for (auto r : routes)
        if (r >= cfg_.routes.size()) throw ConfigError("forward: route index " + std::to_string(r) + " out of range");

    ForwardResult res;
    Tensor balance;
    Tensor* bal = cfg_.load_balance ? &balance : nullptr;

    const auto pos = scale_positions();
    std::vector<Tensor> scales = stem(in);
    for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) scales = encoder_layer(l, scales, pos, cfg_.moe_scales, bal);
    const Tensor memory = ad::concat(scales, 0);
    const Tensor memory_pos = ad::concat(pos, 0);

    res.outputs.assign(cfg_.routes.size(), {});
    std::vector<Tensor> cur(routes.size(), params_.tensor("query.content"));
    ForwardTrace* trace = (opts.record_attention || opts.record_moe) ? &res.trace : nullptr;
    for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
        cur = decoder_layer(l, cur, memory, memory_pos, routes, trace, bal);
        std::map<const ad::Node*, HeadOutputs> head_cache;
        for (std::size_t i = 0; i < routes.size(); ++i) {
            auto it = head_cache.find(cur[i].node().get());
            if (it == head_cache.end()) it = head_cache.emplace(cur[i].node().get(), predict_heads(cur[i])).first;
            res.outputs[routes[i]].push_back({cur[i], it->second});
        }
    }
    if (!opts.record_attention) res.trace.instructive_attention.clear();
    if (!opts.record_moe) res.trace.moe.clear();
    if (bal && balance.defined()) res.balance_loss = balance * cfg_.load_balance_weight;
    return res;
}

std::vector<Detection> Model::inference(const SceneInput& in, double phi, std::size_t top_n) const {
    ad::NoGradGuard ng;
    ForwardOptions opts;
    opts.routes = {cfg_.primary_route()};
    const auto fwd = forward(in, opts);
    const auto& heads = fwd.outputs[cfg_.primary_route()].back().heads;
    const std::size_t n = cfg_.n_queries, c = cfg_.num_classes;
    if (top_n == 0) top_n = std::min<std::size_t>(100, n * c);
    std::vector<double> scores(n * c);
    for (std::size_t i = 0; i < n * c; ++i) {
        const double s_cls = 1.0 / (1.0 + std::exp(-heads.logits.at(i)));
        const double s_iou = 1.0 / (1.0 + std::exp(-heads.iou_logits.at(i)));
        scores[i] = loss::calibrate_score(s_cls, s_iou, phi);
    }
    std::vector<std::size_t> order(n * c);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(std::min(top_n, order.size()));
    std::vector<Detection> dets;
    for (auto flat : order) {
        const std::size_t q = flat / c;
        Detection d;
        d.query = q;
        d.label = static_cast<int>(flat % c);
        d.score = scores[flat];
        d.box = geometry::clamp_degenerate(geometry::Box::cxcywh(heads.boxes.at(q, 0), heads.boxes.at(q, 1),
                                                                 heads.boxes.at(q, 2), heads.boxes.at(q, 3)));
        dets.push_back(d);
    }
    return dets;
}

}  // namespace mrdetr::model
