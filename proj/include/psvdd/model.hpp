#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "psvdd/numerics/autograd.hpp"
#include "psvdd/numerics/serialize.hpp"

namespace psvdd::model {

using numerics::Shape;
using numerics::Tensor;
using numerics::Var;

inline constexpr std::size_t kSmallPatch = 32;
inline constexpr std::size_t kBigPatch = 64;
inline constexpr std::size_t kPositionClasses = 8;
inline constexpr std::size_t kClassifierHidden = 128;
inline constexpr std::size_t kBigHidden = 128;
inline constexpr double kLeakySlope = 0.1;
inline constexpr std::uint32_t kArchitectureVersion = 1;

/// Kernel sizes and strides of the small encoder's four valid convolutions.
/// A 32x32 input reduces to exactly 1x1; the stack's total stride is 4, so
/// running it over a whole image evaluates every stride-4 patch at once.
inline constexpr std::array<std::size_t, 4> kSmallKernels{5, 5, 3, 3};
inline constexpr std::array<std::size_t, 4> kSmallStrides{2, 2, 1, 1};
inline constexpr std::size_t kSmallDenseStride = 4;

struct EncoderConfig {
    std::size_t embed_dim = 64;
    std::array<std::size_t, 3> channels{32, 64, 128};
    std::uint64_t seed = 0;

    void validate() const;
};

template <typename T>
struct ConvLayer {
    Var<T> weight;  // [k,k,Cin,Cout]
    Var<T> bias;    // [Cout]
    std::size_t stride = 1;
};

template <typename T>
struct DenseLayer {
    Var<T> weight;  // [n,m]
    Var<T> bias;    // [m]
};

/// f_small (32x32x3 -> D) plus the aggregation head g_big (2x2xD -> D).
/// f_big(p) is g_big applied to f_small on the four 32x32 quadrants of p.
template <typename T>
class HierarchicalEncoder {
   public:
    HierarchicalEncoder() = default;
    HierarchicalEncoder(EncoderConfig config, std::array<ConvLayer<T>, 4> small, std::array<DenseLayer<T>, 2> head);

    const EncoderConfig& config() const { return config_; }
    std::size_t embed_dim() const { return config_.embed_dim; }

    /// Fully convolutional f_small over [H,W,3] or [N,H,W,3]; returns the raw
    /// [.., H', W', D] activation grid.
    Var<T> small_map(const Var<T>& images) const;
    /// [N,32,32,3] -> [N,D].
    Var<T> encode_small_batch(const Var<T>& patches) const;
    /// Quadrant features [N,4D] (row-major TL,TR,BL,BR) -> [N,D].
    Var<T> aggregate(const Var<T>& quadrant_features) const;
    /// [N,64,64,3] -> [N,D], through encode_small_batch and aggregate.
    Var<T> encode_big_batch(const Var<T>& patches) const;

    Tensor<T> encode_small(const Tensor<T>& patch) const;
    Tensor<T> encode_big(const Tensor<T>& patch) const;
    /// g_big on a [2,2,D] grid of quadrant features.
    Tensor<T> g_big(const Tensor<T>& quadrant_grid) const;

    std::vector<Var<T>> small_parameters() const;
    std::vector<Var<T>> big_parameters() const;
    std::vector<Var<T>> parameters() const;

    std::vector<numerics::NamedTensor> export_tensors() const;
    static HierarchicalEncoder import_tensors(EncoderConfig config, const std::vector<numerics::NamedTensor>& tensors);

    template <typename U>
    HierarchicalEncoder<U> cast() const;

    /// Copy with independent parameter storage.
    HierarchicalEncoder clone() const { return cast<T>(); }

   private:
    EncoderConfig config_;
    std::array<ConvLayer<T>, 4> small_;
    std::array<DenseLayer<T>, 2> head_;

    template <typename>
    friend class HierarchicalEncoder;
};

/// C_phi: MLP on the difference of two features, D -> 128 -> 128 -> 8.
template <typename T>
class PositionClassifier {
   public:
    PositionClassifier() = default;
    explicit PositionClassifier(std::array<DenseLayer<T>, 3> layers) : layers_(std::move(layers)) {}

    std::size_t input_dim() const { return layers_[0].weight.shape()[0]; }

    /// Logits [N,8] for feature batches h1, h2 of shape [N,D].
    Var<T> forward(const Var<T>& h1, const Var<T>& h2) const;
    Tensor<T> classify_pair(const Tensor<T>& h1, const Tensor<T>& h2) const;

    std::vector<Var<T>> parameters() const;
    std::vector<numerics::NamedTensor> export_tensors(const std::string& prefix) const;
    static PositionClassifier import_tensors(const std::string& prefix,
                                             const std::vector<numerics::NamedTensor>& tensors);

    template <typename U>
    PositionClassifier<U> cast() const;

   private:
    std::array<DenseLayer<T>, 3> layers_;

    template <typename>
    friend class PositionClassifier;
};

template <typename T>
struct RandomModel {
    HierarchicalEncoder<T> encoder;
    PositionClassifier<T> classifier;
};

/// He-normal weights (std sqrt(2/fan_in)), zero biases, drawn from a
/// mt19937_64 seeded with `seed`.
template <typename T>
RandomModel<T> init_random(const EncoderConfig& config, std::uint64_t seed);

template <typename T>
PositionClassifier<T> init_classifier(std::size_t embed_dim, std::uint64_t seed);

/// Weights + per-scale classifiers, as written by training.
struct ModelBundle {
    HierarchicalEncoder<float> encoder;
    PositionClassifier<float> classifier_small;
    PositionClassifier<float> classifier_big;
};

/// Writes `path` (parameter container) and `path` with extension ".txt" (manifest).
void save_model(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_model(const std::filesystem::path& path);
std::filesystem::path manifest_path_for(const std::filesystem::path& model_path);

/// Crops a [K,K,C] window with top-left (row, col) from an [H,W,C] tensor.
template <typename T>
Tensor<T> crop(const Tensor<T>& image, std::size_t row, std::size_t col, std::size_t size);

}  // namespace psvdd::model
