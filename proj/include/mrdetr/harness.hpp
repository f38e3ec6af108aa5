#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrdetr/data.hpp"
#include "mrdetr/eval.hpp"
#include "mrdetr/losses.hpp"
#include "mrdetr/model.hpp"

namespace mrdetr::harness {

class HarnessError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct OptimConfig {
    double lr = 2e-3;
    double weight_decay = 1e-4;
    std::size_t epochs = 100;
    std::size_t batch = 8;
    std::size_t lr_drop_epoch = 80;
    double lr_drop = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.1;  // max global norm, 0 disables
};

struct DatasetConfig {
    std::uint64_t seed = 2024;
    std::size_t n_train = 500;
    std::size_t n_val = 100;
    bool augment = true;  // random horizontal/vertical flips of training scenes
    data::GenConfig gen;
};

struct EvalConfig {
    double nms_thresh = 0.7;
    std::size_t top_n = 0;
    std::size_t every = 1;  // evaluate after every k-th epoch (and always the last)
};

struct ProbeConfig {
    std::size_t epochs = 20;
    double lr = 1e-2;
    std::size_t batch = 8;
    bool oracle = false;  // pretrain with one-to-many supervision only, then probe
};

struct RunConfig {
    std::string preset = "mrdetr-pp";
    std::string run_id;
    std::uint64_t seed = 0;
    model::ModelConfig model;
    loss::LossWeights loss;
    loss::AssignerConfig assigner;
    OptimConfig optim;
    DatasetConfig dataset;
    EvalConfig eval;
    ProbeConfig probe;

    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

std::vector<std::string> preset_names();
// Model routes and MoE placement for a named ablation preset.
model::ModelConfig preset_model(const std::string& name, model::ModelConfig base = {});
RunConfig preset_config(const std::string& name);

// Applies "a.b.c=value" to a JSON object; value parses as JSON, else as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Preset defaults ← file JSON ← overrides, then validated.
RunConfig resolve_config(const nlohmann::json& file_json, const std::vector<std::string>& overrides);

struct Dataset {
    std::vector<data::SceneSample> scenes;
    std::vector<model::SceneInput> inputs;
    std::vector<loss::GtSet> gts;
    std::vector<eval::GroundTruth> eval_gts;
    std::size_t size() const { return inputs.size(); }
};

// Generates and patchifies a split.
Dataset build_dataset(const DatasetConfig& cfg, const std::string& split, std::size_t count,
                      const std::vector<std::size_t>& strides);

class AdamW {
public:
    AdamW(ad::ParamStore& params, const OptimConfig& cfg);
    // Clips the global gradient norm, then applies one decoupled-decay update.
    // Returns the pre-clip norm.
    double step(double lr);
    std::size_t steps() const { return t_; }

private:
    ad::ParamStore& params_;
    OptimConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct MetricsRow {
    std::string run_id;
    std::size_t epoch = 0;
    std::string route;
    bool use_nms = false;
    std::optional<eval::ApResult> ap;
    std::vector<std::optional<double>> layer_ap;
};

std::string metrics_header(std::size_t n_layers);
std::string metrics_line(const MetricsRow& r);

struct TrainResult {
    std::shared_ptr<model::Model> model;
    std::vector<MetricsRow> rows;
    std::vector<double> epoch_loss;
    double o2o_ap = 0.0;                 // primary route, no NMS, final epoch
    std::optional<double> best_o2m_ap;   // max over auxiliary routes with NMS
};

using Logger = std::function<void(const std::string&)>;

// Per-route metrics on `val`: primary without NMS, auxiliary routes with NMS.
std::vector<MetricsRow> evaluate_routes(const model::Model& m, const Dataset& val, const RunConfig& cfg,
                                        std::size_t epoch);

// Trains per `cfg`. When run_dir is non-empty writes config.json,
// metrics.csv and checkpoint there.
TrainResult run_train(const RunConfig& cfg, const std::string& run_dir = {}, const Logger& log = {});

// Same, on prebuilt splits.
TrainResult run_train(const RunConfig& cfg, const Dataset& train, const Dataset& val,
                      const std::string& run_dir = {}, const Logger& log = {});

struct AblationRow {
    std::string preset;
    double o2o_ap = 0.0;
    std::optional<double> o2m_ap;
};

std::vector<AblationRow> run_ablation(const std::vector<std::string>& presets, const RunConfig& base,
                                      const std::string& run_dir = {}, const Logger& log = {});
std::string ablation_table(const std::vector<AblationRow>& rows);

struct ProbeRow {
    std::string route;
    double ap_no_nms = 0.0;
    double ap_nms = 0.0;
    double probe_ap_no_nms = 0.0;
    double probe_ap_nms = 0.0;
};

// Freezes `m`, fits a fresh linear class probe on the route's final-layer
// queries under one-to-one assignment (boxes from the frozen box head), and
// reports AP with and without NMS for both the route and the probe.
ProbeRow run_probe(const model::Model& m, const std::string& route, const RunConfig& cfg, const Dataset& train,
                   const Dataset& val);
std::string probe_table(const std::vector<ProbeRow>& rows);

void save_checkpoint(const std::string& path, const model::Model& m);
std::shared_ptr<model::Model> load_checkpoint(const std::string& path);
nlohmann::json checkpoint_json(const model::Model& m);
std::shared_ptr<model::Model> model_from_checkpoint(const nlohmann::json& j);

// Writes the requested CSV dumps into `dir`; what ∈ {attention, experts, cosine, all}.
// Returns the files written.
std::vector<std::string> dump_artifacts(const model::Model& m, const Dataset& sample, const std::string& what,
                                        const std::string& dir);

struct GradCheckReport {
    ad::GradCheckResult result;
    std::size_t params = 0;
    double seconds = 0.0;
};

// Full multi-route loss on one synthetic scene with a tiny configuration.
GradCheckReport gradcheck_model(const model::ModelConfig& cfg, std::uint64_t seed, std::size_t max_coords = 0);
model::ModelConfig gradcheck_config(const std::string& preset);

std::string format_double(double v);  // six decimals, for metrics
std::string format_exact(double v);   // shortest round-trip form, for dumps
void write_text(const std::string& path, const std::string& text);

}  // namespace mrdetr::harness
