#include "mrdetr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "mrdetr/ops.hpp"
#include "mrdetr/rng.hpp"

namespace mrdetr::data {

using geometry::Box;

void GenConfig::validate() const {
    if (image_size == 0) throw ConfigError("gen: image_size must be positive");
    if (min_objects < 1 || max_objects < min_objects)
        throw ConfigError("gen: object count range [" + std::to_string(min_objects) + "," +
                          std::to_string(max_objects) + "] is empty or below 1");
    if (!(min_side > 0) || min_side > 1.0) throw ConfigError("gen: min_side must lie in (0,1]");
    if (max_side < min_side || max_side > 1.0) throw ConfigError("gen: max_side must lie in [min_side,1]");
    if (num_classes < 1) throw ConfigError("gen: num_classes must be >= 1");
    if (!(max_pair_iou >= 0 && max_pair_iou <= 1)) throw ConfigError("gen: max_pair_iou outside [0,1]");
    if (noise < 0) throw ConfigError("gen: noise must be >= 0");
}

namespace {

std::array<double, 3> class_color(int label, int num_classes) {
    static constexpr std::array<std::array<double, 3>, 3> base{{{0.9, 0.15, 0.15}, {0.15, 0.8, 0.2}, {0.2, 0.3, 0.95}}};
    if (num_classes <= 3) return base[static_cast<std::size_t>(label) % 3];
    // Evenly spaced hues beyond three classes.
    const double h = 6.0 * static_cast<double>(label) / static_cast<double>(num_classes);
    const double x = 1.0 - std::fabs(std::fmod(h, 2.0) - 1.0);
    switch (static_cast<int>(h)) {
        case 0: return {0.9, 0.9 * x, 0.1};
        case 1: return {0.9 * x, 0.9, 0.1};
        case 2: return {0.1, 0.9, 0.9 * x};
        case 3: return {0.1, 0.9 * x, 0.9};
        case 4: return {0.9 * x, 0.1, 0.9};
        default: return {0.9, 0.1, 0.9 * x};
    }
}

// Texture factor by class: solid, horizontal stripes, checkerboard.
double texture(int label, std::size_t y, std::size_t x) {
    switch (label % 3) {
        case 0: return 1.0;
        case 1: return (y / 2) % 2 == 0 ? 1.0 : 0.6;
        default: return ((y / 2) + (x / 2)) % 2 == 0 ? 1.0 : 0.55;
    }
}

constexpr std::uint64_t kAttempts = 200;

}  // namespace

SceneSample generate_scene(std::uint64_t seed, const GenConfig& cfg) {
    cfg.validate();
    const CounterRng rng(seed, "scene");
    SceneSample s;
    s.seed = seed;
    s.height = s.width = cfg.image_size;

    const auto count = static_cast<int>(rng.integer(0, cfg.min_objects, cfg.max_objects));
    for (int obj = 0; obj < count; ++obj) {
        const CounterRng orng = rng.derive(static_cast<std::uint64_t>(obj) + 1);
        for (std::uint64_t attempt = 0; attempt < kAttempts; ++attempt) {
            const std::uint64_t base = attempt * 8;
            const double w = orng.uniform(base + 0, cfg.min_side, cfg.max_side);
            const double h = orng.uniform(base + 1, cfg.min_side, cfg.max_side);
            const double cx = orng.uniform(base + 2, 0.5 * w, 1.0 - 0.5 * w);
            const double cy = orng.uniform(base + 3, 0.5 * h, 1.0 - 0.5 * h);
            const Box b = Box::cxcywh(cx, cy, w, h);
            bool ok = true;
            for (auto& g : s.gts)
                if (geometry::iou(g.box, b) > cfg.max_pair_iou) {
                    ok = false;
                    break;
                }
            if (!ok) continue;
            // Class law is uniform and independent of geometry.
            const int label = static_cast<int>(orng.integer(base + 4, 0, cfg.num_classes - 1));
            s.gts.push_back({b, label});
            break;
        }
    }
    if (static_cast<int>(s.gts.size()) < cfg.min_objects)
        throw ConfigError("gen: could not place " + std::to_string(cfg.min_objects) +
                          " objects under the overlap limit (seed " + std::to_string(seed) + ")");

    // Background: mid-gray plus per-pixel noise.
    const std::size_t H = s.height, W = s.width;
    s.image.assign(H * W * 3, 0.5);
    const CounterRng nrng = rng.derive("noise");
    for (std::size_t i = 0; i < s.image.size(); ++i) s.image[i] += cfg.noise * (nrng.uniform(i) * 2.0 - 1.0);

    // Paint large objects first so small ones stay visible.
    std::vector<std::size_t> order(s.gts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s.gts[a].box.area() > s.gts[b].box.area(); });
    for (auto idx : order) {
        const auto& g = s.gts[idx];
        const auto c = geometry::to_xyxy(g.box);
        const auto color = class_color(g.label, cfg.num_classes);
        for (std::size_t y = 0; y < H; ++y) {
            const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
            if (py < c.b || py >= c.d) continue;
            for (std::size_t x = 0; x < W; ++x) {
                const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
                if (px < c.a || px >= c.c) continue;
                const double t = texture(g.label, y, x);
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    const std::size_t i = (y * W + x) * 3 + ch;
                    s.image[i] = color[ch] * t + cfg.noise * (nrng.uniform(s.image.size() + i) * 2.0 - 1.0);
                }
            }
        }
    }
    // Stored intensities are centered: raw [0, 1] maps to [-1, 1].
    for (auto& v : s.image) v = 2.0 * v - 1.0;
    return s;
}

SceneSample flip_scene(const SceneSample& scene, bool horizontal, bool vertical) {
    SceneSample out = scene;
    const std::size_t H = scene.height, W = scene.width;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t sy = vertical ? H - 1 - y : y;
            const std::size_t sx = horizontal ? W - 1 - x : x;
            for (std::size_t ch = 0; ch < 3; ++ch)
                out.image[(y * W + x) * 3 + ch] = scene.image[(sy * W + sx) * 3 + ch];
        }
    for (auto& g : out.gts) {
        if (horizontal) g.box.a = 1.0 - g.box.a;
        if (vertical) g.box.b = 1.0 - g.box.b;
    }
    return out;
}

std::uint64_t scene_seed(std::uint64_t dataset_seed, const std::string& split, std::size_t index) {
    return hash_combine(hash_combine(dataset_seed, hash_str(split)), index);
}

std::vector<SceneSample> generate_split(std::uint64_t dataset_seed, const std::string& split, std::size_t count,
                                        const GenConfig& cfg) {
    std::vector<SceneSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(scene_seed(dataset_seed, split, i), cfg));
    return out;
}

ad::Tensor patchify(const SceneSample& scene, std::size_t stride) {
    if (stride == 0 || scene.height % stride != 0 || scene.width % stride != 0)
        throw ConfigError("stem: image " + std::to_string(scene.height) + "x" + std::to_string(scene.width) +
                          " not divisible by stride " + std::to_string(stride));
    const std::size_t gh = scene.height / stride, gw = scene.width / stride;
    const std::size_t pd = stride * stride * 3;
    std::vector<double> v(gh * gw * pd);
    for (std::size_t ty = 0; ty < gh; ++ty)
        for (std::size_t tx = 0; tx < gw; ++tx) {
            double* out = v.data() + (ty * gw + tx) * pd;
            for (std::size_t dy = 0; dy < stride; ++dy)
                for (std::size_t dx = 0; dx < stride; ++dx)
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        *out++ = scene.image[((ty * stride + dy) * scene.width + tx * stride + dx) * 3 + ch];
        }
    return ad::Tensor::leaf({gh * gw, pd}, std::move(v));
}

std::vector<std::pair<double, double>> token_centers(std::size_t height, std::size_t width, std::size_t stride) {
    if (stride == 0 || height % stride != 0 || width % stride != 0)
        throw ConfigError("stem: image not divisible by stride " + std::to_string(stride));
    std::vector<std::pair<double, double>> out;
    const std::size_t gh = height / stride, gw = width / stride;
    for (std::size_t ty = 0; ty < gh; ++ty)
        for (std::size_t tx = 0; tx < gw; ++tx)
            out.emplace_back((static_cast<double>(tx) + 0.5) / static_cast<double>(gw),
                             (static_cast<double>(ty) + 0.5) / static_cast<double>(gh));
    return out;
}

std::vector<ad::Tensor> feature_stem(const std::vector<ad::Tensor>& patches, const StemWeights& w) {
    if (patches.size() != w.proj.size() || patches.size() != w.bias.size())
        throw ConfigError("stem: scale count mismatch");
    std::vector<ad::Tensor> out;
    out.reserve(patches.size());
    for (std::size_t s = 0; s < patches.size(); ++s) out.push_back(ad::matmul(patches[s], w.proj[s]) + w.bias[s]);
    return out;
}

std::vector<ad::Tensor> patchify_all(const SceneSample& scene, const std::vector<std::size_t>& strides) {
    std::vector<ad::Tensor> out;
    for (auto s : strides) out.push_back(patchify(scene, s));
    return out;
}

std::string manifest_line(const SceneSample& s) {
    nlohmann::json j;
    j["seed"] = s.seed;
    j["gts"] = nlohmann::json::array();
    for (auto& g : s.gts)
        j["gts"].push_back({{"cx", g.box.a}, {"cy", g.box.b}, {"w", g.box.c}, {"h", g.box.d}, {"label", g.label}});
    return j.dump();
}

void write_manifest(const std::string& path, const std::vector<SceneSample>& scenes) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest for writing: " + path);
    for (auto& s : scenes) f << manifest_line(s) << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        ManifestEntry e;
        e.seed = j.at("seed").get<std::uint64_t>();
        for (auto& g : j.at("gts"))
            e.gts.push_back({Box::cxcywh(g.at("cx").get<double>(), g.at("cy").get<double>(), g.at("w").get<double>(),
                                         g.at("h").get<double>()),
                             g.at("label").get<int>()});
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace mrdetr::data
