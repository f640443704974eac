#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psvdd/data.hpp"
#include "psvdd/feature_index.hpp"
#include "psvdd/inference.hpp"
#include "psvdd/model.hpp"

namespace psvdd::evaluation {

using numerics::Tensor;

struct LabeledScores {
    std::vector<double> normal;
    std::vector<double> abnormal;
};

/// P[normal < abnormal] + P[tie]/2 through midranks, O(n log n).
double auroc(const LabeledScores& scores);

/// AUROC over the pooled pixels of all maps; mask 1 = abnormal. Normal images
/// pass an all-zero mask.
double pixel_auroc(std::span<const inference::AnomalyMap> maps, std::span<const data::Mask> masks);

/// TwoNN estimate (n-1) / sum ln(d2/d1) over the rows of points [N,D], with
/// exact duplicate rows dropped first. Needs at least 10 distinct rows.
double intrinsic_dimension(const Tensor<float>& points);

/// Rank correlation with midranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

/// Rank correlation between raw-patch distances and the distances of one
/// random 3x3 stride-1 conv layer (He init, LeakyReLU) over `pairs` pairs
/// p2 = clamp(p1 + sigma * noise), sigma ~ U[0, 0.5].
double random_conv_distance_correlation(std::size_t pairs, std::uint64_t seed);

// --- pipeline evaluation ---------------------------------------------------

struct ScoredImage {
    std::string id;
    bool abnormal = false;
    double score = 0;
};

struct MethodScores {
    std::string method;
    double image_auroc = 0;
    double pixel_auroc = 0;
    std::vector<ScoredImage> images;
};

/// AUROCs from one map per test record (same order).
MethodScores score_maps(const std::string& method, std::span<const data::ImageRecord> test,
                        std::span<const inference::AnomalyMap> maps);

/// Runs the detector over the test records and scores the multi-scale maps.
MethodScores evaluate_detector(const std::string& method, const inference::Detector& detector,
                               std::span<const data::ImageRecord> test);

/// Builds indexes from `train` for the given featurizers and evaluates.
MethodScores evaluate_featurizers(const std::string& method, const inference::Featurizer& small,
                                  const inference::Featurizer& big, std::span<const data::ImageRecord> train,
                                  std::span<const data::ImageRecord> test, const index::IndexBuildConfig& config,
                                  std::size_t threads = 1);

/// Identity encoder (flattened raw patches) at both scales.
MethodScores baseline_raw_patch(std::span<const data::ImageRecord> train, std::span<const data::ImageRecord> test,
                                const index::IndexBuildConfig& config, std::size_t threads = 1);

/// Untrained encoder with init_random weights.
MethodScores baseline_random_encoder(std::span<const data::ImageRecord> train,
                                     std::span<const data::ImageRecord> test, const model::EncoderConfig& encoder,
                                     std::uint64_t seed, const index::IndexBuildConfig& config,
                                     std::size_t threads = 1);

/// TwoNN over at most `max_points` evenly strided rows of an index.
double index_intrinsic_dimension(const index::FeatureIndex& idx, std::size_t max_points = 2000);

// --- reports ---------------------------------------------------------------

struct CategoryReport {
    std::string category;
    std::vector<MethodScores> methods;  // the first is the main method
    std::optional<double> id_small;
    std::optional<double> id_big;
};

struct EvalReport {
    std::vector<CategoryReport> categories;
    std::string id_estimator = "TwoNN";
    std::string pixel_pooling = "pooled over all test pixels of a category";
};

std::string report_json(const EvalReport& report);
/// Aligned columns: category, method, Det. (image AUROC), Seg. (pixel AUROC), IDs.
std::string report_text(const EvalReport& report);
/// report.json, report.txt and scores_<category>.csv in `dir`.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace psvdd::evaluation
