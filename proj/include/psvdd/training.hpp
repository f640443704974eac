#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psvdd/model.hpp"
#include "psvdd/numerics/optim.hpp"
#include "psvdd/sampling.hpp"

namespace psvdd::training {

using numerics::Tensor;
using numerics::Var;

struct LossWeights {
    double lambda = 1.0;
    void validate() const;
};

/// Which objective drives the encoder.
enum class Objective {
    PatchSvdd,    // lambda * L_SVDD' + L_SSL
    SvddClassic,  // sum of distances to a precomputed centre
};

struct TrainConfig {
    std::size_t steps_small = 1000;
    std::size_t steps_big = 1000;
    std::size_t batch_size = 64;  // pairs per loss term per step
    LossWeights weights;
    numerics::AdamConfig adam;
    std::uint64_t seed = 0;
    bool train_small = true;
    bool train_big = true;
    bool joint = false;  // also update f_small while training at K = 64
    Objective objective = Objective::PatchSvdd;
    std::size_t center_samples = 1024;
    bool jitter = true;
    float rgb_amplitude = 0.1f;
    double distance_eps = 1e-9;

    void validate() const;
};

struct SvddCenter {
    Tensor<float> c;
};

struct LossRecord {
    std::size_t scale = 0;  // patch size K
    std::size_t step = 0;
    double svdd = 0;  // L_SVDD' (or L_SVDD in classic mode)
    double ssl = 0;
    double total = 0;
};

// --- losses ----------------------------------------------------------------
// The distance losses are plain sums over rows, as written in the objective;
// the training step divides by the pair count.

/// sum_i ||features_i - center||_2 for features [B,D], center [D].
template <typename T>
Var<T> loss_svdd_classic(const Var<T>& features, const Var<T>& center, T eps = T(1e-9));

/// sum_i ||first_i - second_i||_2 for paired features [B,D].
template <typename T>
Var<T> loss_svdd_prime(const Var<T>& first, const Var<T>& second, T eps = T(1e-9));

/// Cross-entropy of 8-way logits [8] against y.
template <typename T>
Var<T> loss_ssl(const Var<T>& logits, int y);

/// Mean cross-entropy over a batch of logits [B,8].
template <typename T>
Var<T> loss_ssl_batch(const Var<T>& logits, std::span<const int> labels);

template <typename T>
Var<T> total_loss(const Var<T>& svdd_prime, const Var<T>& ssl, const LossWeights& weights);

/// Arithmetic mean of the features (each of length D).
SvddCenter compute_center(std::span<const Tensor<float>> features);

// --- one optimisation step -------------------------------------------------

/// Patches for one step, each tensor [B,K,K,3].
struct StepBatch {
    std::size_t patch = 0;
    Tensor<float> jitter_anchor;
    Tensor<float> jitter_partner;
    Tensor<float> position_first;
    Tensor<float> position_second;
    std::vector<int> labels;
};

StepBatch sample_step_batch(std::span<const Tensor<float>> images, std::size_t patch, const TrainConfig& config,
                            sampling::Rng& rng);

template <typename T>
struct StepLosses {
    Var<T> svdd;
    Var<T> ssl;
    Var<T> total;
};

/// Encodes `batch` with the scale's encoder and builds the objective graph.
/// In classic mode only `jitter_anchor` is used and `center` is required.
template <typename T>
StepLosses<T> step_losses(const model::HierarchicalEncoder<T>& encoder, const model::PositionClassifier<T>& classifier,
                          const StepBatch& batch, const TrainConfig& config, const Tensor<T>* center = nullptr);

/// Encodes [N,K,K,3] patches at scale K (32 or 64).
template <typename T>
Var<T> encode_patches(const model::HierarchicalEncoder<T>& encoder, std::size_t patch, const Var<T>& patches);

// --- full training ---------------------------------------------------------

struct TrainResult {
    model::ModelBundle model;
    std::vector<LossRecord> history;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Trains f_small with K = 32, then g_big with K = 64 (f_small frozen unless
/// `joint`). Throws NumericalError on a non-finite loss.
TrainResult train(std::span<const Tensor<float>> images, const TrainConfig& config,
                  const model::EncoderConfig& encoder_config, const ProgressFn& progress = {});

/// Writes "step,l_svdd_prime,l_ssl,total" rows for one scale.
void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> history, std::size_t scale);

}  // namespace psvdd::training
