#include "mrdetr/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mrdetr/rng.hpp"

namespace mrdetr::data {

void to_json(nlohmann::json& j, const GenConfig& g) {
    j = {{"image_size", g.image_size}, {"min_objects", g.min_objects}, {"max_objects", g.max_objects},
         {"min_side", g.min_side},     {"max_side", g.max_side},       {"num_classes", g.num_classes},
         {"max_pair_iou", g.max_pair_iou}, {"noise", g.noise}};
}

void from_json(const nlohmann::json& j, GenConfig& g) {
    static const std::set<std::string> known = {"image_size", "min_objects", "max_objects", "min_side",
                                                "max_side",   "num_classes", "max_pair_iou", "noise"};
    for (auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("gen config: unknown key '" + k + "'");
    g.image_size = j.value("image_size", g.image_size);
    g.min_objects = j.value("min_objects", g.min_objects);
    g.max_objects = j.value("max_objects", g.max_objects);
    g.min_side = j.value("min_side", g.min_side);
    g.max_side = j.value("max_side", g.max_side);
    g.num_classes = j.value("num_classes", g.num_classes);
    g.max_pair_iou = j.value("max_pair_iou", g.max_pair_iou);
    g.noise = j.value("noise", g.noise);
}

}  // namespace mrdetr::data

namespace mrdetr::harness {

using model::FfnKind;
using model::RouteSpec;
using model::SaKind;
using model::CaKind;
using ad::Tensor;
using model::Target;

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
    if (!j.is_object()) throw HarnessError(std::string(what) + ": expected an object");
    for (auto& [k, v] : j.items())
        if (std::none_of(known.begin(), known.end(), [&](const char* s) { return k == s; }))
            throw HarnessError(std::string(what) + ": unknown key '" + k + "'");
}

template <class T>
void get_opt(const nlohmann::json& j, const char* key, T& field) {
    if (j.contains(key)) j.at(key).get_to(field);
}

RouteSpec aux(const std::string& name, SaKind sa, CaKind ca, FfnKind ffn) {
    return {name, sa, ca, ffn, Target::O2M};
}

const RouteSpec kPrimary{"route-2", SaKind::Shared, CaKind::Shared, FfnKind::SharedO2O, Target::O2O};

// Independent component routes of the variant matrix.
RouteSpec indep_sa() { return aux("aux-sa", SaKind::Independent, CaKind::Shared, FfnKind::SharedO2O); }
RouteSpec indep_ca() { return aux("aux-ca", SaKind::Shared, CaKind::Independent, FfnKind::SharedO2O); }
RouteSpec indep_ffn() { return aux("aux-ffn", SaKind::Shared, CaKind::Shared, FfnKind::IndependentO2M); }

const std::map<std::string, std::vector<RouteSpec>>& preset_routes() {
    static const std::map<std::string, std::vector<RouteSpec>> table = {
        {"o2o-only", {kPrimary}},
        {"share-all", {kPrimary, aux("shared-o2m", SaKind::Shared, CaKind::Shared, FfnKind::SharedO2O)}},
        {"indep-sa", {kPrimary, indep_sa()}},
        {"indep-ca", {kPrimary, indep_ca()}},
        {"indep-ffn", {kPrimary, indep_ffn()}},
        {"shared-sa", {kPrimary, aux("aux", SaKind::Shared, CaKind::Independent, FfnKind::IndependentO2M)}},
        {"shared-ca", {kPrimary, aux("aux", SaKind::Independent, CaKind::Shared, FfnKind::IndependentO2M)}},
        {"shared-ffn", {kPrimary, aux("aux", SaKind::Independent, CaKind::Independent, FfnKind::SharedO2O)}},
        {"combo-3-4", {kPrimary, indep_sa(), indep_ca()}},
        {"combo-3-5", {kPrimary, indep_sa(), indep_ffn()}},
        {"combo-4-5", {kPrimary, indep_ca(), indep_ffn()}},
        {"combo-3-4-5", {kPrimary, indep_sa(), indep_ca(), indep_ffn()}},
        {"mrdetr", model::mrdetr_routes()},
        {"mrdetr-pp", model::mrdetr_pp_routes()},
    };
    return table;
}

std::vector<std::size_t> last_half_layers(std::size_t n_layers) {
    std::vector<std::size_t> out;
    for (std::size_t l = n_layers / 2; l < n_layers; ++l) out.push_back(l);
    return out;
}

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string csv_opt(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

std::string join_path(const std::string& dir, const std::string& file) {
    return (std::filesystem::path(dir) / file).string();
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string format_exact(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw HarnessError("cannot write " + path);
    out << text;
    if (!out) throw HarnessError("write failed for " + path);
}

void RunConfig::validate() const {
    if (!preset_routes().count(preset)) throw HarnessError("unknown preset '" + preset + "'");
    model.validate();
    loss.validate();
    dataset.gen.validate();
    if (dataset.gen.image_size != model.image_size)
        throw HarnessError("dataset.gen.image_size must equal model.image_size");
    if (static_cast<std::size_t>(dataset.gen.num_classes) != model.num_classes)
        throw HarnessError("dataset.gen.num_classes must equal model.num_classes");
    if (static_cast<std::size_t>(dataset.gen.max_objects) > model.n_queries)
        throw HarnessError("max_objects exceeds the number of queries");
    if (optim.batch == 0) throw HarnessError("optim.batch must be positive");
    if (!(optim.lr > 0) || optim.weight_decay < 0 || optim.grad_clip < 0)
        throw HarnessError("optimizer values out of range");
    if (assigner.o2m.k == 0 || assigner.o2m.alpha < 0 || assigner.o2m.alpha > 1 || assigner.o2m.tau < 0 ||
        assigner.o2m.tau > 1)
        throw HarnessError("assigner values out of range (need k >= 1, alpha and tau in [0, 1])");
    if (dataset.n_train == 0 || dataset.n_val == 0) throw HarnessError("dataset splits must be non-empty");
    if (eval.every == 0) throw HarnessError("eval.every must be positive");
    if (!(eval.nms_thresh >= 0 && eval.nms_thresh <= 1)) throw HarnessError("eval.nms_thresh must lie in [0, 1]");
    if (probe.batch == 0 || !(probe.lr > 0)) throw HarnessError("probe settings out of range");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{
        {"preset", c.preset},
        {"run_id", c.run_id},
        {"seed", c.seed},
        {"model", c.model},
        {"loss", c.loss},
        {"assigner", c.assigner},
        {"optim",
         {{"lr", c.optim.lr},
          {"weight_decay", c.optim.weight_decay},
          {"epochs", c.optim.epochs},
          {"batch", c.optim.batch},
          {"lr_drop_epoch", c.optim.lr_drop_epoch},
          {"lr_drop", c.optim.lr_drop},
          {"beta1", c.optim.beta1},
          {"beta2", c.optim.beta2},
          {"eps", c.optim.eps},
          {"grad_clip", c.optim.grad_clip}}},
        {"dataset",
         {{"seed", c.dataset.seed}, {"n_train", c.dataset.n_train}, {"n_val", c.dataset.n_val},
          {"augment", c.dataset.augment}, {"gen", c.dataset.gen}}},
        {"eval", {{"nms_thresh", c.eval.nms_thresh}, {"top_n", c.eval.top_n}, {"every", c.eval.every}}},
        {"probe",
         {{"epochs", c.probe.epochs}, {"lr", c.probe.lr}, {"batch", c.probe.batch}, {"oracle", c.probe.oracle}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    check_keys(j, {"preset", "run_id", "seed", "model", "loss", "assigner", "optim", "dataset", "eval", "probe"},
               "run config");
    get_opt(j, "preset", c.preset);
    get_opt(j, "run_id", c.run_id);
    get_opt(j, "seed", c.seed);
    get_opt(j, "model", c.model);
    get_opt(j, "loss", c.loss);
    get_opt(j, "assigner", c.assigner);
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        check_keys(o, {"lr", "weight_decay", "epochs", "batch", "lr_drop_epoch", "lr_drop", "beta1", "beta2", "eps",
                       "grad_clip"},
                   "optim config");
        get_opt(o, "lr", c.optim.lr);
        get_opt(o, "weight_decay", c.optim.weight_decay);
        get_opt(o, "epochs", c.optim.epochs);
        get_opt(o, "batch", c.optim.batch);
        get_opt(o, "lr_drop_epoch", c.optim.lr_drop_epoch);
        get_opt(o, "lr_drop", c.optim.lr_drop);
        get_opt(o, "beta1", c.optim.beta1);
        get_opt(o, "beta2", c.optim.beta2);
        get_opt(o, "eps", c.optim.eps);
        get_opt(o, "grad_clip", c.optim.grad_clip);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"seed", "n_train", "n_val", "augment", "gen"}, "dataset config");
        get_opt(d, "seed", c.dataset.seed);
        get_opt(d, "n_train", c.dataset.n_train);
        get_opt(d, "n_val", c.dataset.n_val);
        get_opt(d, "augment", c.dataset.augment);
        get_opt(d, "gen", c.dataset.gen);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, {"nms_thresh", "top_n", "every"}, "eval config");
        get_opt(e, "nms_thresh", c.eval.nms_thresh);
        get_opt(e, "top_n", c.eval.top_n);
        get_opt(e, "every", c.eval.every);
    }
    if (j.contains("probe")) {
        const auto& p = j.at("probe");
        check_keys(p, {"epochs", "lr", "batch", "oracle"}, "probe config");
        get_opt(p, "epochs", c.probe.epochs);
        get_opt(p, "lr", c.probe.lr);
        get_opt(p, "batch", c.probe.batch);
        get_opt(p, "oracle", c.probe.oracle);
    }
}

std::vector<std::string> preset_names() {
    return {"o2o-only",  "share-all", "indep-sa",  "indep-ca",  "indep-ffn",   "shared-sa", "shared-ca",
            "shared-ffn", "combo-3-4", "combo-3-5", "combo-4-5", "combo-3-4-5", "mrdetr",    "mrdetr-pp"};
}

model::ModelConfig preset_model(const std::string& name, model::ModelConfig base) {
    auto it = preset_routes().find(name);
    if (it == preset_routes().end()) {
        std::string valid;
        for (auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw HarnessError("unknown preset '" + name + "' (valid: " + valid + ")");
    }
    base.routes = it->second;
    if (name == "mrdetr-pp") {
        base.moe_scales = 1;
        base.moe_decoder_layers = last_half_layers(base.n_dec_layers);
    } else {
        base.moe_scales = 0;
        base.moe_decoder_layers.clear();
    }
    return base;
}

RunConfig preset_config(const std::string& name) {
    RunConfig c;
    c.preset = name;
    c.model = preset_model(name);
    return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw HarnessError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        value = raw;
    }
    nlohmann::json* cur = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur->is_object()) throw HarnessError("override '" + key + "' descends into a non-object");
        cur = &(*cur)[parts[i]];
        if (cur->is_null()) *cur = nlohmann::json::object();
    }
    if (!cur->is_object()) throw HarnessError("override '" + key + "' descends into a non-object");
    (*cur)[parts.back()] = value;
}

RunConfig resolve_config(const nlohmann::json& file_json, const std::vector<std::string>& overrides) {
    nlohmann::json user = file_json.is_null() ? nlohmann::json::object() : file_json;
    if (!user.is_object()) throw HarnessError("config file must hold a JSON object");
    for (auto& o : overrides) apply_override(user, o);
    const std::string preset = user.value("preset", std::string("mrdetr-pp"));
    RunConfig base = preset_config(preset);
    nlohmann::json merged = base;
    merged.merge_patch(user);
    RunConfig cfg = merged.get<RunConfig>();
    const bool explicit_layers = user.contains("model") && user["model"].contains("moe_decoder_layers");
    if (preset == "mrdetr-pp" && !explicit_layers)
        cfg.model.moe_decoder_layers = last_half_layers(cfg.model.n_dec_layers);
    if (cfg.run_id.empty()) cfg.run_id = cfg.preset + "-s" + std::to_string(cfg.seed);
    cfg.validate();
    return cfg;
}

Dataset build_dataset(const DatasetConfig& cfg, const std::string& split, std::size_t count,
                      const std::vector<std::size_t>& strides) {
    Dataset ds;
    for (std::size_t i = 0; i < count; ++i) {
        auto scene = data::generate_scene(data::scene_seed(cfg.seed, split, i), cfg.gen);
        ds.inputs.push_back({data::patchify_all(scene, strides)});
        loss::GtSet g;
        for (auto& o : scene.gts) {
            g.boxes.push_back(o.box);
            g.labels.push_back(o.label);
            ds.eval_gts.push_back({i, o.label, o.box});
        }
        ds.gts.push_back(std::move(g));
        ds.scenes.push_back(std::move(scene));
    }
    return ds;
}

AdamW::AdamW(ad::ParamStore& params, const OptimConfig& cfg) : params_(params), cfg_(cfg) {
    for (auto& p : params_.params()) {
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
    }
}

double AdamW::step(double lr) {
    auto& ps = params_.params();
    double sq = 0.0;
    for (auto& p : ps) {
        if (!p.trainable) continue;
        for (double g : p.tensor.node()->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& p = ps[i];
        if (!p.trainable) continue;
        const auto& grad = p.tensor.node()->grad;
        auto vals = p.tensor.mutable_values();
        for (std::size_t k = 0; k < vals.size(); ++k) {
            const double g = grad.empty() ? 0.0 : grad[k] * clip;
            m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
            v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m_[i][k] / bc1, vh = v_[i][k] / bc2;
            vals[k] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * vals[k]);
        }
    }
    return norm;
}

std::string metrics_header(std::size_t n_layers) {
    std::string h = "run_id,epoch,route,use_nms,AP,AP50,AP75";
    for (std::size_t l = 0; l < n_layers; ++l) h += ",AP_layer" + std::to_string(l);
    return h;
}

std::string metrics_line(const MetricsRow& r) {
    std::string s = r.run_id + "," + std::to_string(r.epoch) + "," + r.route + "," + (r.use_nms ? "1" : "0");
    if (r.ap)
        s += "," + format_double(r.ap->ap) + "," + format_double(r.ap->ap50) + "," + format_double(r.ap->ap75);
    else
        s += ",NA,NA,NA";
    for (auto& v : r.layer_ap) s += "," + csv_opt(v);
    return s;
}

std::vector<MetricsRow> evaluate_routes(const model::Model& m, const Dataset& val, const RunConfig& cfg,
                                        std::size_t epoch) {
    const auto& mc = m.config();
    const std::size_t primary = mc.primary_route(), n_layers = mc.n_dec_layers;
    // (route, nms) combinations: primary raw; auxiliary routes with and without NMS.
    std::vector<std::pair<std::size_t, bool>> combos{{primary, false}};
    for (std::size_t r = 0; r < mc.routes.size(); ++r)
        if (r != primary) {
            combos.emplace_back(r, true);
            combos.emplace_back(r, false);
        }
    std::vector<std::vector<std::vector<eval::Detection>>> dets(combos.size(),
                                                                std::vector<std::vector<eval::Detection>>(n_layers));
    ad::NoGradGuard ng;
    for (std::size_t s = 0; s < val.size(); ++s) {
        const auto fwd = m.forward(val.inputs[s]);
        for (std::size_t c = 0; c < combos.size(); ++c) {
            eval::DecodeOptions d;
            d.phi = cfg.loss.phi;
            d.use_nms = combos[c].second;
            d.nms_thresh = cfg.eval.nms_thresh;
            d.top_n = cfg.eval.top_n;
            for (std::size_t l = 0; l < n_layers; ++l) {
                auto v = eval::decode_heads(fwd.outputs[combos[c].first][l].heads, s, d);
                dets[c][l].insert(dets[c][l].end(), v.begin(), v.end());
            }
        }
    }
    std::vector<MetricsRow> rows;
    for (std::size_t c = 0; c < combos.size(); ++c) {
        MetricsRow row;
        row.run_id = cfg.run_id;
        row.epoch = epoch;
        row.route = mc.routes[combos[c].first].name;
        row.use_nms = combos[c].second;
        for (std::size_t l = 0; l < n_layers; ++l) {
            auto ap = eval::compute_ap(dets[c][l], val.eval_gts);
            row.layer_ap.push_back(ap ? std::optional<double>(ap->ap) : std::nullopt);
            if (l + 1 == n_layers) row.ap = ap;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

TrainResult run_train(const RunConfig& cfg, const std::string& run_dir, const Logger& log) {
    cfg.validate();
    const Dataset train = build_dataset(cfg.dataset, "train", cfg.dataset.n_train, cfg.model.strides);
    const Dataset val = build_dataset(cfg.dataset, "val", cfg.dataset.n_val, cfg.model.strides);
    return run_train(cfg, train, val, run_dir, log);
}

TrainResult run_train(const RunConfig& cfg, const Dataset& train, const Dataset& val, const std::string& run_dir,
                      const Logger& log) {
    cfg.validate();
    TrainResult res;
    res.model = std::make_shared<model::Model>(cfg.model, cfg.seed);
    model::Model& m = *res.model;
    AdamW opt(m.params(), cfg.optim);
    const CounterRng shuffle_rng(cfg.seed, "shuffle");
    const CounterRng flip_rng(cfg.seed, "flip");
    const bool augment = cfg.dataset.augment && train.scenes.size() == train.size();

    std::string csv;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        write_text(join_path(run_dir, "config.json"), nlohmann::json(cfg).dump(2) + "\n");
        csv = metrics_header(cfg.model.n_dec_layers) + "\n";
        write_text(join_path(run_dir, "metrics.csv"), csv);
    }

    std::vector<std::size_t> order(train.size());
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        const CounterRng er = shuffle_rng.derive(epoch);
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(er.integer(i, 0, static_cast<std::int64_t>(i - 1)));
            std::swap(order[i - 1], order[j]);
        }
        const double lr = cfg.optim.lr * (epoch > cfg.optim.lr_drop_epoch ? cfg.optim.lr_drop : 1.0);
        double epoch_loss = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.optim.batch) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.optim.batch);
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            m.params().zero_grad();
            for (std::size_t b = b0; b < b1; ++b) {
                const std::size_t idx = order[b];
                const model::SceneInput* input = &train.inputs[idx];
                const loss::GtSet* gts = &train.gts[idx];
                model::SceneInput flipped_input;
                loss::GtSet flipped_gts;
                const auto flips = augment ? flip_rng.derive(epoch).integer(idx, 0, 3) : 0;
                if (flips != 0) {
                    const auto scene = data::flip_scene(train.scenes[idx], flips & 1, flips & 2);
                    flipped_input.patches = data::patchify_all(scene, cfg.model.strides);
                    for (auto& o : scene.gts) {
                        flipped_gts.boxes.push_back(o.box);
                        flipped_gts.labels.push_back(o.label);
                    }
                    input = &flipped_input;
                    gts = &flipped_gts;
                }
                const auto fwd = m.forward(*input);
                const auto mrl = loss::multi_route_loss(cfg.model, fwd, *gts, cfg.loss, cfg.assigner);
                const double v = mrl.total.item();
                if (!std::isfinite(v))
                    throw HarnessError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(step) + ", scene " + std::to_string(idx));
                epoch_loss += v;
                ad::backward(mrl.total * inv);
            }
            const double gnorm = opt.step(lr);
            if (!std::isfinite(gnorm))
                throw HarnessError("non-finite gradient at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step));
            ++step;
        }
        epoch_loss /= static_cast<double>(train.size());
        res.epoch_loss.push_back(epoch_loss);

        const bool do_eval = epoch % cfg.eval.every == 0 || epoch == cfg.optim.epochs;
        std::string msg = cfg.run_id + " epoch " + std::to_string(epoch) + " loss " + format_double(epoch_loss);
        if (do_eval) {
            auto rows = evaluate_routes(m, val, cfg, epoch);
            for (auto& r : rows) {
                csv += metrics_line(r) + "\n";
                if (r.ap) msg += " " + r.route + (r.use_nms ? "+nms" : "") + "=" + format_double(r.ap->ap);
            }
            if (epoch == cfg.optim.epochs) {
                res.best_o2m_ap.reset();
                for (auto& r : rows) {
                    if (!r.ap) continue;
                    if (r.route == cfg.model.routes[cfg.model.primary_route()].name && !r.use_nms)
                        res.o2o_ap = r.ap->ap;
                    else if (r.use_nms && (!res.best_o2m_ap || r.ap->ap > *res.best_o2m_ap))
                        res.best_o2m_ap = r.ap->ap;
                }
            }
            res.rows.insert(res.rows.end(), rows.begin(), rows.end());
            if (!run_dir.empty()) write_text(join_path(run_dir, "metrics.csv"), csv);
        }
        if (log) log(msg);
    }
    if (!run_dir.empty()) save_checkpoint(join_path(run_dir, "checkpoint"), m);
    return res;
}

std::vector<AblationRow> run_ablation(const std::vector<std::string>& presets, const RunConfig& base,
                                      const std::string& run_dir, const Logger& log) {
    const Dataset train = build_dataset(base.dataset, "train", base.dataset.n_train, base.model.strides);
    const Dataset val = build_dataset(base.dataset, "val", base.dataset.n_val, base.model.strides);
    std::vector<AblationRow> rows;
    for (auto& name : presets) {
        RunConfig cfg = base;
        cfg.preset = name;
        cfg.model = preset_model(name, base.model);
        cfg.run_id = name + "-s" + std::to_string(cfg.seed);
        const std::string dir = run_dir.empty() ? "" : join_path(run_dir, name);
        auto tr = run_train(cfg, train, val, dir, log);
        rows.push_back({name, tr.o2o_ap, tr.best_o2m_ap});
    }
    if (!run_dir.empty()) write_text(join_path(run_dir, "ablation.csv"), ablation_table(rows));
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::string s = "preset,o2o_AP,o2m_AP\n";
    for (auto& r : rows) s += r.preset + "," + format_double(r.o2o_ap) + "," + (r.o2m_ap ? format_double(*r.o2m_ap) : "") + "\n";
    return s;
}

namespace {

struct ProbeSample {
    Tensor queries;  // frozen final-layer queries
    model::HeadOutputs heads;
};

std::vector<ProbeSample> probe_features(const model::Model& m, std::size_t route, const Dataset& ds) {
    ad::NoGradGuard ng;
    model::ForwardOptions fo;
    fo.routes = {route};
    std::vector<ProbeSample> out;
    for (auto& in : ds.inputs) {
        const auto fwd = m.forward(in, fo);
        const auto& last = fwd.outputs[route].back();
        out.push_back({last.queries.detach(), {last.heads.logits.detach(), last.heads.boxes.detach(),
                                              last.heads.iou_logits.detach()}});
    }
    return out;
}

double ap_of(const std::vector<eval::Detection>& dets, const Dataset& ds) {
    auto r = eval::compute_ap(dets, ds.eval_gts);
    return r ? r->ap : 0.0;
}

}  // namespace

ProbeRow run_probe(const model::Model& m, const std::string& route, const RunConfig& cfg, const Dataset& train,
                   const Dataset& val) {
    const auto& mc = m.config();
    const std::size_t r = eval::route_index(mc, route);
    const auto train_f = probe_features(m, r, train);
    const auto val_f = probe_features(m, r, val);

    ad::ParamStore probe;
    {
        const std::size_t d = mc.d_model, c = mc.num_classes;
        const CounterRng rng(cfg.seed, "probe.w");
        const double lim = std::sqrt(6.0 / static_cast<double>(d + c));
        std::vector<double> w(d * c);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(i, -lim, lim);
        probe.add("probe.w", {d, c}, std::move(w));
        probe.add("probe.b", {c}, std::vector<double>(c, -4.595));
    }
    const nn::Linear head{probe.tensor("probe.w"), probe.tensor("probe.b")};
    OptimConfig oc = cfg.optim;
    oc.weight_decay = 0.0;
    AdamW opt(probe, oc);
    std::vector<std::size_t> order(train_f.size());
    const CounterRng shuffle(cfg.seed, "probe.shuffle");
    for (std::size_t epoch = 1; epoch <= cfg.probe.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        const CounterRng er = shuffle.derive(epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(er.integer(i, 0, static_cast<std::int64_t>(i - 1)))]);
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.probe.batch) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.probe.batch);
            probe.zero_grad();
            for (std::size_t b = b0; b < b1; ++b) {
                const auto& s = train_f[order[b]];
                model::HeadOutputs h{head(s.queries), s.heads.boxes, s.heads.iou_logits};
                const auto pos = loss::assign_route(h, train.gts[order[b]], Target::O2O, cfg.assigner);
                const Tensor l = loss::focal_cls_loss(h.logits, pos, train.gts[order[b]].labels, cfg.loss.focal_alpha,
                                                      cfg.loss.focal_gamma);
                ad::backward(l * (1.0 / static_cast<double>(b1 - b0)));
            }
            opt.step(cfg.probe.lr);
        }
    }

    ProbeRow row;
    row.route = mc.routes[r].name;
    std::vector<eval::Detection> own_raw, own_nms, pr_raw, pr_nms;
    eval::DecodeOptions d;
    d.phi = cfg.loss.phi;
    d.nms_thresh = cfg.eval.nms_thresh;
    d.top_n = cfg.eval.top_n;
    eval::DecodeOptions dp = d;
    dp.phi = 1.0;  // the probe only supplies class scores
    ad::NoGradGuard ng;
    for (std::size_t s = 0; s < val_f.size(); ++s) {
        const auto& f = val_f[s];
        auto append = [&](std::vector<eval::Detection>& dst, const model::HeadOutputs& h, eval::DecodeOptions o,
                          bool nms) {
            o.use_nms = nms;
            auto v = eval::decode_heads(h, s, o);
            dst.insert(dst.end(), v.begin(), v.end());
        };
        append(own_raw, f.heads, d, false);
        append(own_nms, f.heads, d, true);
        const model::HeadOutputs ph{head(f.queries), f.heads.boxes, f.heads.iou_logits};
        append(pr_raw, ph, dp, false);
        append(pr_nms, ph, dp, true);
    }
    row.ap_no_nms = ap_of(own_raw, val);
    row.ap_nms = ap_of(own_nms, val);
    row.probe_ap_no_nms = ap_of(pr_raw, val);
    row.probe_ap_nms = ap_of(pr_nms, val);
    return row;
}

std::string probe_table(const std::vector<ProbeRow>& rows) {
    std::string s = "route,AP_no_nms,AP_nms,probe_AP_no_nms,probe_AP_nms\n";
    for (auto& r : rows)
        s += r.route + "," + format_double(r.ap_no_nms) + "," + format_double(r.ap_nms) + "," +
             format_double(r.probe_ap_no_nms) + "," + format_double(r.probe_ap_nms) + "\n";
    return s;
}

nlohmann::json checkpoint_json(const model::Model& m) {
    nlohmann::json params = nlohmann::json::array();
    for (auto& p : m.params().params()) {
        const auto v = p.tensor.values();
        params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"values", std::vector<double>(v.begin(), v.end())}});
    }
    return {{"format", "mrdetr-checkpoint"}, {"version", 1}, {"model_config", m.config()}, {"params", params}};
}

std::shared_ptr<model::Model> model_from_checkpoint(const nlohmann::json& j) {
    if (j.value("format", std::string()) != "mrdetr-checkpoint") throw HarnessError("not an mrdetr checkpoint");
    if (j.value("version", 0) != 1) throw HarnessError("unsupported checkpoint version");
    auto m = std::make_shared<model::Model>(j.at("model_config").get<model::ModelConfig>());
    auto& store = m->params();
    std::set<std::string> seen;
    for (auto& p : j.at("params")) {
        const auto name = p.at("name").get<std::string>();
        if (!store.contains(name)) throw HarnessError("checkpoint parameter '" + name + "' not in model");
        auto& t = store.tensor(name);
        const auto shape = p.at("shape").get<ad::Shape>();
        if (shape != t.shape())
            throw HarnessError("checkpoint parameter '" + name + "' has shape " + ad::shape_str(shape) + ", model expects " +
                               ad::shape_str(t.shape()));
        const auto values = p.at("values").get<std::vector<double>>();
        std::copy(values.begin(), values.end(), t.mutable_values().begin());
        seen.insert(name);
    }
    if (seen.size() != store.size()) throw HarnessError("checkpoint is missing parameters");
    return m;
}

void save_checkpoint(const std::string& path, const model::Model& m) {
    write_text(path, checkpoint_json(m).dump() + "\n");
}

std::shared_ptr<model::Model> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw HarnessError("cannot open checkpoint " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw HarnessError("corrupt checkpoint " + path + ": " + e.what());
    }
    return model_from_checkpoint(j);
}

std::vector<std::string> dump_artifacts(const model::Model& m, const Dataset& sample, const std::string& what,
                                        const std::string& dir) {
    static const std::set<std::string> kinds = {"attention", "experts", "cosine", "all"};
    if (!kinds.count(what)) throw HarnessError("unknown dump '" + what + "' (valid: attention, experts, cosine, all)");
    const auto& mc = m.config();
    const bool all = what == "all";
    std::filesystem::create_directories(dir);
    std::vector<std::string> files;

    bool has_instructive = false, has_moe = false;
    for (auto& r : mc.routes) {
        if (r.sa == SaKind::Instructive) has_instructive = true;
        for (std::size_t l = 0; l < mc.n_dec_layers; ++l)
            if (!m.gate_param(l, r).empty()) has_moe = true;
    }
    const bool want_att = what == "attention" || (all && has_instructive);
    const bool want_moe = what == "experts" || (all && has_moe);
    const bool want_cos = what == "cosine" || (all && has_instructive && mc.n_instruction_tokens > 0);
    if (what == "attention" && !has_instructive) throw HarnessError("model has no instructive self-attention route");
    if (what == "experts" && !has_moe) throw HarnessError("model has no decoder MoE layers");
    if (what == "cosine" && !(has_instructive && mc.n_instruction_tokens > 0))
        throw HarnessError("model has no instruction tokens");

    if (want_att || want_moe) {
        ad::NoGradGuard ng;
        model::ForwardOptions fo;
        fo.record_attention = want_att;
        fo.record_moe = want_moe;
        std::map<std::string, std::vector<nn::AttentionProbe>> att;
        std::map<std::string, std::vector<std::size_t>> counts;
        std::map<std::string, std::size_t> tokens;
        for (auto& in : sample.inputs) {
            const auto fwd = m.forward(in, fo);
            for (auto& [route, layers] : fwd.trace.instructive_attention) {
                auto& acc = att[route];
                if (acc.empty()) acc = layers;
                else
                    for (std::size_t l = 0; l < layers.size(); ++l)
                        for (std::size_t k = 0; k < layers[l].mean_probs.size(); ++k)
                            acc[l].mean_probs[k] += layers[l].mean_probs[k];
            }
            for (auto& [key, tr] : fwd.trace.moe) {
                auto& c = counts[key];
                c.resize(tr.expert_counts.size(), 0);
                for (std::size_t e = 0; e < c.size(); ++e) c[e] += tr.expert_counts[e];
                tokens[key] += tr.tokens * tr.k;
            }
        }
        const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, sample.size()));
        for (auto& [route, layers] : att)
            for (std::size_t l = 0; l < layers.size(); ++l) {
                const auto& p = layers[l];
                std::string s;
                for (std::size_t i = 0; i < p.rows; ++i) {
                    for (std::size_t j = 0; j < p.cols; ++j)
                        s += (j ? "," : "") + format_exact(p.mean_probs[i * p.cols + j] * inv);
                    s += "\n";
                }
                const auto f = join_path(dir, "attention_" + route + "_layer" + std::to_string(l) + ".csv");
                write_text(f, s);
                files.push_back(f);
            }
        if (want_moe) {
            std::string s = "gate,route,expert,count,selections\n";
            for (auto& [key, c] : counts) {
                const auto slash = key.find('/');
                for (std::size_t e = 0; e < c.size(); ++e)
                    s += key.substr(0, slash) + "," + key.substr(slash + 1) + "," + std::to_string(e) + "," +
                         std::to_string(c[e]) + "," + std::to_string(tokens[key]) + "\n";
            }
            const auto f = join_path(dir, "experts.csv");
            write_text(f, s);
            files.push_back(f);
        }
    }
    if (want_cos) {
        for (std::size_t l = 0; l < mc.n_dec_layers; ++l) {
            const std::string name = "dec." + std::to_string(l) + ".ins";
            if (!m.params().contains(name)) continue;
            const auto& t = m.params().tensor(name);
            const std::size_t rows = t.dim(0), d = t.dim(1);
            std::vector<double> norms(rows);
            for (std::size_t i = 0; i < rows; ++i) {
                double s = 0;
                for (std::size_t k = 0; k < d; ++k) s += t.at(i, k) * t.at(i, k);
                norms[i] = std::sqrt(s);
            }
            std::string s;
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < rows; ++j) {
                    double dot = 0;
                    for (std::size_t k = 0; k < d; ++k) dot += t.at(i, k) * t.at(j, k);
                    s += (j ? "," : "") + format_exact(i == j ? 1.0 : dot / (norms[i] * norms[j]));
                }
                s += "\n";
            }
            const auto f = join_path(dir, "instruction_cosine_layer" + std::to_string(l) + ".csv");
            write_text(f, s);
            files.push_back(f);
        }
    }
    if (files.empty()) throw HarnessError("nothing to dump for this model");
    return files;
}

model::ModelConfig gradcheck_config(const std::string& preset) {
    model::ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 8;
    c.n_enc_layers = 1;
    c.n_dec_layers = 2;
    c.n_queries = 6;
    c.n_instruction_tokens = 2;
    c.n_experts = 3;
    c.top_k = 2;
    c.image_size = 16;
    c.strides = {8, 4, 2};
    c = preset_model(preset, c);
    return c;
}

GradCheckReport gradcheck_model(const model::ModelConfig& cfg, std::uint64_t seed, std::size_t max_coords) {
    const double t0 = now_seconds();
    model::Model m(cfg, seed);
    data::GenConfig gen;
    gen.image_size = cfg.image_size;
    gen.num_classes = static_cast<int>(cfg.num_classes);
    gen.max_objects = static_cast<int>(std::min<std::size_t>(3, cfg.n_queries));
    gen.min_objects = std::min(2, gen.max_objects);
    const auto scene = data::generate_scene(seed, gen);
    const auto in = m.prepare(scene.image, scene.height, scene.width);
    loss::GtSet gts;
    for (auto& o : scene.gts) {
        gts.boxes.push_back(o.box);
        gts.labels.push_back(o.label);
    }
    const loss::LossWeights w;
    const loss::AssignerConfig a;
    std::vector<loss::RouteTargets> targets;
    {
        ad::NoGradGuard ng;
        targets = loss::multi_route_loss(cfg, m.forward(in), gts, w, a).targets;
    }
    auto f = [&]() {
        const auto fwd = m.forward(in);
        return loss::multi_route_loss(cfg, fwd, gts, w, a, &targets).total;
    };
    ad::GradCheckOptions opts;
    opts.max_coords_per_param = max_coords;
    GradCheckReport rep;
    rep.result = ad::grad_check(f, m.params(), opts);
    rep.params = m.params().scalar_count();
    rep.seconds = now_seconds() - t0;
    return rep;
}

}  // namespace mrdetr::harness
