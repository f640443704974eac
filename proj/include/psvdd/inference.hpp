#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psvdd/feature_index.hpp"
#include "psvdd/model.hpp"
#include "psvdd/sampling.hpp"

namespace psvdd::inference {

using numerics::Tensor;

enum class MapScale : std::uint32_t { Small = 0, Big = 1, Multi = 2 };

std::string scale_name(MapScale s);

/// Per-pixel anomaly scores, row-major H x W.
struct AnomalyMap {
    std::size_t height = 0;
    std::size_t width = 0;
    MapScale scale = MapScale::Multi;
    std::vector<float> values;

    AnomalyMap() = default;
    AnomalyMap(std::size_t h, std::size_t w, MapScale s, float fill = 0.0f)
        : height(h), width(w), scale(s), values(h * w, fill) {}

    float& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
    float at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
    bool operator==(const AnomalyMap&) const = default;
};

struct InspectionResult {
    AnomalyMap small;
    AnomalyMap big;
    AnomalyMap multi;
    float image_score = 0;
};

/// Features [N,D] for the patches of `grid` taken from `image` [H,W,3].
using Featurizer = std::function<Tensor<float>(const Tensor<float>& image, const sampling::PatchGrid& grid)>;

/// The trained (or random) encoder at one scale. K=32 reads f_small's dense
/// map where grid positions fall on its stride; K=64 gathers the four
/// quadrant features from the same map and applies g_big.
Featurizer encoder_featurizer(const model::HierarchicalEncoder<float>& encoder, std::size_t patch);

/// The identity encoder: each patch flattened to K*K*3 values.
Featurizer raw_featurizer();

/// One scale of the detector: patch size, stride, features and index.
struct ScaleSetup {
    std::size_t patch = 0;
    std::size_t stride = 0;
    Featurizer featurize;
    const index::FeatureIndex* index = nullptr;
};

struct Detector {
    ScaleSetup small;
    ScaleSetup big;
    std::size_t threads = 1;
};

/// Detector scales with the default grids (K=32/S=4 and K=64/S=16).
ScaleSetup small_scale(Featurizer f, const index::FeatureIndex* idx = nullptr);
ScaleSetup big_scale(Featurizer f, const index::FeatureIndex* idx = nullptr);

/// Features of every grid patch of every training image, with provenance.
index::FeatureIndex index_images(std::span<const Tensor<float>> images, const ScaleSetup& scale,
                                 const index::IndexBuildConfig& config);

/// Nearest-normal distance of one patch (32 or 64 square) under the encoder.
float patch_score(const index::FeatureIndex& idx, const model::HierarchicalEncoder<float>& encoder,
                  const Tensor<float>& patch);

/// Each pixel receives the mean score of the patches covering it. Pixels no
/// patch covers copy the value of the nearest covered pixel.
AnomalyMap distribute_to_pixels(const sampling::PatchGrid& grid, std::span<const float> scores, std::size_t height,
                                std::size_t width, MapScale scale = MapScale::Multi);

/// Elementwise product; the result is tagged Multi.
AnomalyMap aggregate_multiscale(const AnomalyMap& m_small, const AnomalyMap& m_big);

float image_score(const AnomalyMap& m);

/// Scores of the covering grid at one scale, as a pixel map.
AnomalyMap scale_map(const Tensor<float>& image, const ScaleSetup& scale, MapScale tag, std::size_t threads = 1);

InspectionResult inspect_image(const Tensor<float>& image, const Detector& detector);

// --- export ----------------------------------------------------------------

inline constexpr char kMapMagic[4] = {'P', 'S', 'A', 'M'};
inline constexpr std::uint32_t kMapFormatVersion = 1;

/// "PSAM", u32 version, u32 H, u32 W, u32 scale tag, H*W f32 little-endian.
void write_map_raw(const std::filesystem::path& path, const AnomalyMap& map);
AnomalyMap read_map_raw(const std::filesystem::path& path);

/// 16-bit binary PGM; 65535 corresponds to `max` (the map maximum when not
/// given), recorded in a "# max" comment. Returns the max used.
float write_map_pgm(const std::filesystem::path& path, const AnomalyMap& map, std::optional<float> max = {});

struct ManifestEntry {
    std::string image_id;
    std::string category;
    std::string defect;  // "good" for normal images
    float score = 0;
    std::string map_raw;
    std::string map_pgm;
};

/// One JSON object per line.
void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace psvdd::inference
