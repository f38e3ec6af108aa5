#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrdetr/harness.hpp"

namespace fs = std::filesystem;
using namespace mrdetr;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw harness::HarnessError("cannot open config " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw harness::HarnessError("config " + path + " is not valid JSON: " + e.what());
    }
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

struct CommonOpts {
    std::string config;
    std::vector<std::string> sets;
    std::string run_dir;
};

void add_common(CLI::App* sub, CommonOpts& o, bool need_run_dir) {
    sub->add_option("-c,--config", o.config, "JSON config file");
    sub->add_option("--set", o.sets, "Override key=value (dotted keys, repeatable)");
    auto* rd = sub->add_option("-r,--run-dir", o.run_dir, "Run directory");
    if (need_run_dir) rd->required();
}

// Config stored in a run directory, with command-line overrides on top.
harness::RunConfig run_dir_config(const CommonOpts& o) {
    json base = read_json_file((fs::path(o.run_dir) / "config.json").string());
    json extra = read_json_file(o.config);
    base.merge_patch(extra);
    return harness::resolve_config(base, o.sets);
}

std::string default_run_dir(const harness::RunConfig& cfg) { return (fs::path("runs") / cfg.run_id).string(); }

int cmd_train(const CommonOpts& o) {
    auto cfg = harness::resolve_config(read_json_file(o.config), o.sets);
    const std::string dir = o.run_dir.empty() ? default_run_dir(cfg) : o.run_dir;
    auto res = harness::run_train(cfg, dir, log_line);
    json out = {{"run_dir", dir}, {"o2o_ap", res.o2o_ap}};
    if (res.best_o2m_ap) out["o2m_ap"] = *res.best_o2m_ap;
    std::cout << out.dump() << std::endl;
    return 0;
}

int cmd_ablate(const CommonOpts& o, std::vector<std::string> presets) {
    auto cfg = harness::resolve_config(read_json_file(o.config), o.sets);
    if (presets.empty()) presets = harness::preset_names();
    const std::string dir = o.run_dir.empty() ? "runs/ablation-s" + std::to_string(cfg.seed) : o.run_dir;
    auto rows = harness::run_ablation(presets, cfg, dir, log_line);
    std::cout << harness::ablation_table(rows);
    return 0;
}

int cmd_probe(const CommonOpts& o, std::vector<std::string> routes) {
    auto cfg = o.run_dir.empty() || !fs::exists(fs::path(o.run_dir) / "config.json")
                   ? harness::resolve_config(read_json_file(o.config), o.sets)
                   : run_dir_config(o);
    const std::string dir = o.run_dir.empty() ? default_run_dir(cfg) : o.run_dir;
    const auto train = harness::build_dataset(cfg.dataset, "train", cfg.dataset.n_train, cfg.model.strides);
    const auto val = harness::build_dataset(cfg.dataset, "val", cfg.dataset.n_val, cfg.model.strides);
    std::shared_ptr<model::Model> m;
    if (cfg.probe.oracle) {
        // One-to-many-only oracle: single route, trained with o2m supervision.
        harness::RunConfig oc = cfg;
        oc.preset = "o2o-only";
        oc.model = harness::preset_model("o2o-only", cfg.model);
        oc.assigner.primary_o2m = true;
        oc.run_id = cfg.run_id + "-oracle";
        m = harness::run_train(oc, train, val, (fs::path(dir) / "oracle").string(), log_line).model;
    } else {
        m = harness::load_checkpoint((fs::path(dir) / "checkpoint").string());
    }
    if (routes.empty())
        for (auto& r : m->config().routes) routes.push_back(r.name);
    std::vector<harness::ProbeRow> rows;
    for (auto& r : routes) rows.push_back(harness::run_probe(*m, r, cfg, train, val));
    const auto table = harness::probe_table(rows);
    fs::create_directories(dir);
    harness::write_text((fs::path(dir) / (cfg.probe.oracle ? "probe_oracle.csv" : "probe.csv")).string(), table);
    std::cout << table;
    return 0;
}

int cmd_eval(const CommonOpts& o) {
    auto cfg = run_dir_config(o);
    auto m = harness::load_checkpoint((fs::path(o.run_dir) / "checkpoint").string());
    const auto val = harness::build_dataset(cfg.dataset, "val", cfg.dataset.n_val, m->config().strides);
    auto rows = harness::evaluate_routes(*m, val, cfg, cfg.optim.epochs);
    std::string csv = harness::metrics_header(m->config().n_dec_layers) + "\n";
    for (auto& r : rows) csv += harness::metrics_line(r) + "\n";
    harness::write_text((fs::path(o.run_dir) / "eval.csv").string(), csv);
    std::cout << csv;
    return 0;
}

int cmd_gradcheck(const std::string& preset, std::uint64_t seed, std::size_t max_coords, double tol) {
    const auto cfg = harness::gradcheck_config(preset);
    const auto rep = harness::gradcheck_model(cfg, seed, max_coords);
    const bool ok = rep.result.max_rel_error <= tol;
    json out = {{"preset", preset},
                {"max_rel_error", rep.result.max_rel_error},
                {"worst_param", rep.result.worst_param},
                {"worst_index", rep.result.worst_index},
                {"coords_checked", rep.result.coords_checked},
                {"params", rep.params},
                {"seconds", rep.seconds},
                {"pass", ok}};
    std::cout << out.dump() << std::endl;
    if (!ok) {
        std::cerr << json{{"error", {{"type", "GradCheckFailed"}, {"message", "max relative error above tolerance"}}}}.dump()
                  << std::endl;
        return 3;
    }
    return 0;
}

int cmd_gen_data(const CommonOpts& o) {
    auto cfg = harness::resolve_config(read_json_file(o.config), o.sets);
    const std::string dir = o.run_dir.empty() ? "data" : o.run_dir;
    fs::create_directories(dir);
    for (auto [split, n] : {std::pair<std::string, std::size_t>{"train", cfg.dataset.n_train}, {"val", cfg.dataset.n_val}}) {
        const auto scenes = data::generate_split(cfg.dataset.seed, split, n, cfg.dataset.gen);
        data::write_manifest((fs::path(dir) / (split + ".jsonl")).string(), scenes);
    }
    std::cout << json{{"dir", dir}, {"train", cfg.dataset.n_train}, {"val", cfg.dataset.n_val}}.dump() << std::endl;
    return 0;
}

int cmd_dump(const CommonOpts& o, const std::string& what, std::size_t samples) {
    auto cfg = run_dir_config(o);
    auto m = harness::load_checkpoint((fs::path(o.run_dir) / "checkpoint").string());
    const auto sample = harness::build_dataset(cfg.dataset, "val", std::min(samples, cfg.dataset.n_val), m->config().strides);
    const auto files = harness::dump_artifacts(*m, sample, what, (fs::path(o.run_dir) / "dumps").string());
    std::cout << json{{"files", files}}.dump() << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-route detection transformer toolkit"};
    app.require_subcommand(1);

    CommonOpts train_o, ablate_o, probe_o, eval_o, gen_o, dump_o;
    auto* train = app.add_subcommand("train", "Train a model");
    add_common(train, train_o, false);

    auto* ablate = app.add_subcommand("ablate", "Train ablation presets and print the comparison table");
    add_common(ablate, ablate_o, false);
    std::vector<std::string> presets;
    ablate->add_option("--presets", presets, "Presets to run (default: all)")->delimiter(',');

    auto* probe = app.add_subcommand("probe", "Fit linear class probes on frozen route queries");
    add_common(probe, probe_o, false);
    std::vector<std::string> routes;
    probe->add_option("--routes", routes, "Routes to probe (default: all)")->delimiter(',');

    auto* evalc = app.add_subcommand("eval", "Evaluate a trained run");
    add_common(evalc, eval_o, true);

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full model loss");
    std::string gc_preset = "mrdetr-pp";
    std::uint64_t gc_seed = 0;
    std::size_t gc_coords = 0;
    double gc_tol = 1e-4;
    grad->add_option("--preset", gc_preset, "Route preset");
    grad->add_option("--seed", gc_seed, "Seed");
    grad->add_option("--max-coords", gc_coords, "Coordinates per parameter (0 = all)");
    grad->add_option("--tol", gc_tol, "Tolerance");

    auto* gen = app.add_subcommand("gen-data", "Write dataset manifests");
    add_common(gen, gen_o, false);

    auto* dump = app.add_subcommand("dump", "Write attention, expert and instruction-token CSV dumps");
    add_common(dump, dump_o, true);
    std::string what = "all";
    std::size_t samples = 16;
    dump->add_option("--what", what, "attention, experts, cosine or all");
    dump->add_option("--samples", samples, "Validation scenes to average over");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", {{"type", "UsageError"}, {"message", e.what()}}}}.dump() << std::endl;
        return 2;
    }

    try {
        if (*train) return cmd_train(train_o);
        if (*ablate) return cmd_ablate(ablate_o, presets);
        if (*probe) return cmd_probe(probe_o, routes);
        if (*evalc) return cmd_eval(eval_o);
        if (*grad) return cmd_gradcheck(gc_preset, gc_seed, gc_coords, gc_tol);
        if (*gen) return cmd_gen_data(gen_o);
        if (*dump) return cmd_dump(dump_o, what, samples);
    } catch (const model::ConfigError& e) {
        std::cerr << json{{"error", {{"type", "ConfigError"}, {"message", e.what()}}}}.dump() << std::endl;
        return 1;
    } catch (const harness::HarnessError& e) {
        std::cerr << json{{"error", {{"type", "HarnessError"}, {"message", e.what()}}}}.dump() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"type", "Error"}, {"message", e.what()}}}}.dump() << std::endl;
        return 1;
    }
    return 1;
}
