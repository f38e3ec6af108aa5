#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mrdetr/harness.hpp"

using namespace mrdetr;
using namespace mrdetr::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<double>> read_csv(const fs::path& p) {
    std::vector<std::vector<double>> rows;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<double> r;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
        rows.push_back(r);
    }
    return rows;
}

fs::path scratch_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("mrdetr_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

RunConfig tiny_config(const std::string& preset) {
    return resolve_config(nlohmann::json::object(),
                          {"preset=" + preset, "dataset.n_train=8", "dataset.n_val=4", "optim.epochs=2",
                           "optim.batch=4", "optim.lr_drop_epoch=1"});
}

}  // namespace

TEST(Config, PresetDefaultsAndOverrides) {
    const auto c = resolve_config(nlohmann::json::object(), {});
    EXPECT_EQ(c.preset, "mrdetr-pp");
    EXPECT_EQ(c.run_id, "mrdetr-pp-s0");
    EXPECT_EQ(c.assigner.o2m.k, 6u);
    EXPECT_DOUBLE_EQ(c.assigner.o2m.alpha, 0.3);
    EXPECT_DOUBLE_EQ(c.assigner.o2m.tau, 0.4);
    EXPECT_EQ(c.model.moe_decoder_layers, (std::vector<std::size_t>{1}));

    const auto o = resolve_config(nlohmann::json{{"seed", 4}, {"optim", {{"lr", 0.5}}}},
                                  {"preset=mrdetr", "model.n_dec_layers=4", "loss.lambda_aux=0.5"});
    EXPECT_EQ(o.seed, 4u);
    EXPECT_DOUBLE_EQ(o.optim.lr, 0.5);
    EXPECT_EQ(o.model.n_dec_layers, 4u);
    EXPECT_DOUBLE_EQ(o.loss.lambda_aux, 0.5);
    EXPECT_EQ(o.model.routes, model::mrdetr_routes());
    EXPECT_TRUE(o.model.moe_decoder_layers.empty());

    // Deeper mrdetr-pp decoders keep MoE on the last half of the layers.
    EXPECT_EQ(resolve_config(nlohmann::json::object(), {"model.n_dec_layers=6"}).model.moe_decoder_layers,
              (std::vector<std::size_t>{3, 4, 5}));
}

TEST(Config, BadInputsAreErrors) {
    EXPECT_THROW(resolve_config(nlohmann::json::object(), {"preset=nope"}), HarnessError);
    EXPECT_THROW(resolve_config(nlohmann::json::object(), {"novalue"}), HarnessError);
    EXPECT_ANY_THROW(resolve_config(nlohmann::json::object(), {"optim.no_such=1"}));
    EXPECT_ANY_THROW(resolve_config(nlohmann::json::object(), {"model.top_k=9"}));
    EXPECT_ANY_THROW(resolve_config(nlohmann::json::array(), {}));
    EXPECT_ANY_THROW(resolve_config(nlohmann::json::object(), {"dataset.gen.max_objects=30"}));
}

TEST(Config, JsonRoundTrip) {
    const auto c = tiny_config("mrdetr-pp");
    const nlohmann::json j = c;
    const RunConfig back = j.get<RunConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Config, OverrideParsing) {
    nlohmann::json j = nlohmann::json::object();
    apply_override(j, "a.b=3");
    apply_override(j, "a.c=hello");
    apply_override(j, "d=[1,2]");
    EXPECT_EQ(j["a"]["b"], 3);
    EXPECT_EQ(j["a"]["c"], "hello");
    EXPECT_EQ(j["d"], nlohmann::json::array({1, 2}));
    EXPECT_THROW(apply_override(j, "=3"), HarnessError);
    EXPECT_THROW(apply_override(j, "a.b.c=1"), HarnessError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto dir = scratch_dir("ckpt");
    const model::Model m(preset_model("mrdetr-pp"), 3);
    const auto path = (dir / "checkpoint").string();
    save_checkpoint(path, m);
    const auto back = load_checkpoint(path);
    ASSERT_EQ(back->params().size(), m.params().size());
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        const auto& a = m.params().params()[i];
        const auto& b = back->params().params()[i];
        EXPECT_EQ(a.name, b.name);
        EXPECT_EQ(a.tensor.shape(), b.tensor.shape());
        EXPECT_TRUE(std::equal(a.tensor.values().begin(), a.tensor.values().end(), b.tensor.values().begin()))
            << a.name;
    }
    EXPECT_EQ(nlohmann::json(back->config()), nlohmann::json(m.config()));
    EXPECT_THROW(load_checkpoint((dir / "missing").string()), HarnessError);
    write_text((dir / "bad").string(), "{\"format\":\"other\"}");
    EXPECT_ANY_THROW(load_checkpoint((dir / "bad").string()));
}

TEST(Train, TinyRunIsDeterministicAndPersistsArtifacts) {
    const auto cfg = tiny_config("mrdetr");
    const auto a = scratch_dir("run_a"), b = scratch_dir("run_b");
    const auto ra = run_train(cfg, a.string());
    const auto rb = run_train(cfg, b.string());
    for (const char* f : {"config.json", "metrics.csv", "checkpoint"}) {
        EXPECT_TRUE(fs::exists(a / f)) << f;
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    }
    EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
    ASSERT_EQ(ra.epoch_loss.size(), 2u);

    // metrics.csv: header, then per epoch the primary route plus each auxiliary route with and without NMS.
    std::ifstream in(a / "metrics.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header.rfind("run_id,epoch,route,use_nms,AP,AP50,AP75", 0), 0u) << header;
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    EXPECT_EQ(lines, 2u * (1u + 2u * 2u));

    // Reloaded checkpoint reproduces the evaluation exactly.
    const auto reloaded = load_checkpoint((a / "checkpoint").string());
    const auto val = build_dataset(cfg.dataset, "val", cfg.dataset.n_val, cfg.model.strides);
    const auto m1 = evaluate_routes(*ra.model, val, cfg, 2);
    const auto m2 = evaluate_routes(*reloaded, val, cfg, 2);
    ASSERT_EQ(m1.size(), m2.size());
    for (std::size_t i = 0; i < m1.size(); ++i) EXPECT_EQ(metrics_line(m1[i]), metrics_line(m2[i]));
}

TEST(Train, AdamWStepMovesAgainstGradient) {
    ad::ParamStore s;
    s.add("x", {2}, {1.0, -1.0});
    ad::backward(ad::sum(s.tensor("x") * s.tensor("x")), s);
    OptimConfig oc;
    oc.weight_decay = 0;
    oc.grad_clip = 0;
    AdamW opt(s, oc);
    const double norm = opt.step(0.1);
    EXPECT_NEAR(norm, std::sqrt(8.0), 1e-12);
    EXPECT_NEAR(s.tensor("x").at(0), 0.9, 1e-9);
    EXPECT_NEAR(s.tensor("x").at(1), -0.9, 1e-9);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(Dumps, ArtifactsAreWellFormed) {
    const auto dir = scratch_dir("dumps");
    const model::Model m(preset_model("mrdetr-pp"), 5);
    DatasetConfig dc;
    const auto sample = build_dataset(dc, "val", 3, m.config().strides);
    const auto files = dump_artifacts(m, sample, "all", dir.string());
    bool saw_att = false, saw_exp = false, saw_cos = false;
    for (const auto& f : files) {
        const auto name = fs::path(f).filename().string();
        if (name.rfind("attention_", 0) == 0) {
            saw_att = true;
            const auto rows = read_csv(f);
            const std::size_t len = m.config().n_queries + m.config().n_instruction_tokens;
            ASSERT_EQ(rows.size(), len);
            for (const auto& r : rows) {
                ASSERT_EQ(r.size(), len);
                double s = 0;
                for (double v : r) s += v;
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
        } else if (name == "experts.csv") {
            saw_exp = true;
            std::ifstream in(f);
            std::string line;
            std::getline(in, line);
            EXPECT_EQ(line, "gate,route,expert,count,selections");
            std::map<std::string, std::pair<std::size_t, std::size_t>> per_key;
            while (std::getline(in, line)) {
                std::stringstream ss(line);
                std::string gate, route, expert, count, sel;
                std::getline(ss, gate, ',');
                std::getline(ss, route, ',');
                std::getline(ss, expert, ',');
                std::getline(ss, count, ',');
                std::getline(ss, sel, ',');
                auto& acc = per_key[gate + "/" + route];
                acc.first += std::stoul(count);
                acc.second = std::stoul(sel);
            }
            EXPECT_FALSE(per_key.empty());
            for (auto& [key, acc] : per_key) {
                EXPECT_EQ(acc.first, acc.second) << key;
                EXPECT_EQ(acc.second, 3 * m.config().n_queries * m.config().top_k) << key;
            }
        } else if (name.rfind("instruction_cosine_", 0) == 0) {
            saw_cos = true;
            const auto rows = read_csv(f);
            ASSERT_EQ(rows.size(), m.config().n_instruction_tokens);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                EXPECT_EQ(rows[i][i], 1.0);
                for (std::size_t j = 0; j < rows.size(); ++j) EXPECT_EQ(rows[i][j], rows[j][i]);
            }
        }
    }
    EXPECT_TRUE(saw_att && saw_exp && saw_cos);

    const model::Model plain(preset_model("mrdetr"), 5);
    EXPECT_THROW(dump_artifacts(plain, sample, "experts", dir.string()), HarnessError);
    EXPECT_THROW(dump_artifacts(plain, sample, "bogus", dir.string()), HarnessError);
}

TEST(GradCheck, FullModelPasses) {
    const auto rep = gradcheck_model(gradcheck_config("mrdetr-pp"), 1, 3);
    EXPECT_LE(rep.result.max_rel_error, 1e-4) << rep.result.worst_param;
    EXPECT_GT(rep.params, 0u);
}

TEST(Format, MetricsAndExactForms) {
    EXPECT_EQ(format_double(1.0 / 3.0), "0.333333");
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, 0.0}) EXPECT_EQ(std::stod(format_exact(v)), v);
}
