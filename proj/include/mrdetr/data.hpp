#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrdetr/geometry.hpp"
#include "mrdetr/tensor.hpp"

namespace mrdetr::data {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct GenConfig {
    std::size_t image_size = 64;
    int min_objects = 2;
    int max_objects = 6;
    double min_side = 0.08;
    double max_side = 0.4;
    int num_classes = 3;
    double max_pair_iou = 0.5;
    double noise = 0.05;

    void validate() const;
};

struct GtObject {
    geometry::Box box;  // cxcywh, normalized
    int label = 0;

    bool operator==(const GtObject&) const = default;
};

struct SceneSample {
    std::uint64_t seed = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> image;  // height × width × 3, row-major, intensities in about [-1, 1]
    std::vector<GtObject> gts;

    bool operator==(const SceneSample&) const = default;
};

SceneSample generate_scene(std::uint64_t seed, const GenConfig& cfg);

// Mirrors the image and its boxes left-right and/or top-bottom.
SceneSample flip_scene(const SceneSample& scene, bool horizontal, bool vertical);

// Seeds for split members: pure function of (dataset seed, split name, index).
std::uint64_t scene_seed(std::uint64_t dataset_seed, const std::string& split, std::size_t index);

std::vector<SceneSample> generate_split(std::uint64_t dataset_seed, const std::string& split, std::size_t count,
                                        const GenConfig& cfg);

// Non-overlapping patches at `stride` → [tokens × stride²·3], token order row-major.
ad::Tensor patchify(const SceneSample& scene, std::size_t stride);

// Normalized (cx, cy) of each token center at the given stride.
std::vector<std::pair<double, double>> token_centers(std::size_t height, std::size_t width, std::size_t stride);

struct StemWeights {
    // Per scale, coarsest first: projection [patch_dim × d] and bias [d].
    std::vector<ad::Tensor> proj;
    std::vector<ad::Tensor> bias;
};

// Linear patch embedding per scale; patches[s] comes from patchify at strides[s].
std::vector<ad::Tensor> feature_stem(const std::vector<ad::Tensor>& patches, const StemWeights& w);

// Convenience: patchify an image at every stride (coarsest first).
std::vector<ad::Tensor> patchify_all(const SceneSample& scene, const std::vector<std::size_t>& strides);

// JSONL manifest: {"seed":…, "gts":[{"cx","cy","w","h","label"}]} per line.
std::string manifest_line(const SceneSample& s);
void write_manifest(const std::string& path, const std::vector<SceneSample>& scenes);
struct ManifestEntry {
    std::uint64_t seed = 0;
    std::vector<GtObject> gts;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace mrdetr::data
