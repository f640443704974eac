#include "psvdd/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace psvdd::training {

using numerics::Shape;

void LossWeights::validate() const {
    if (!std::isfinite(lambda) || lambda < 0) throw ArgumentError("lambda must be finite and non-negative");
}

void TrainConfig::validate() const {
    weights.validate();
    if (batch_size == 0) throw ArgumentError("batch_size must be positive");
    if (train_small && steps_small == 0) throw ArgumentError("steps_small must be positive");
    if (train_big && steps_big == 0) throw ArgumentError("steps_big must be positive");
    if (center_samples == 0) throw ArgumentError("center_samples must be positive");
    if (!(adam.learning_rate > 0)) throw ArgumentError("learning rate must be positive");
    if (rgb_amplitude < 0 || rgb_amplitude > 1) throw ArgumentError("rgb amplitude must lie in [0,1]");
}

template <typename T>
Var<T> loss_svdd_classic(const Var<T>& features, const Var<T>& center, T eps) {
    return numerics::sum(numerics::row_norms(numerics::sub_row(features, center), eps));
}

template <typename T>
Var<T> loss_svdd_prime(const Var<T>& first, const Var<T>& second, T eps) {
    return numerics::sum(numerics::row_norms(numerics::sub(first, second), eps));
}

template <typename T>
Var<T> loss_ssl(const Var<T>& logits, int y) {
    if (logits.shape() != Shape{model::kPositionClasses}) {
        throw DimensionError("loss_ssl: expected [8] logits, got " + numerics::shape_string(logits.shape()));
    }
    return numerics::softmax_cross_entropy(logits, y);
}

template <typename T>
Var<T> loss_ssl_batch(const Var<T>& logits, std::span<const int> labels) {
    return numerics::softmax_cross_entropy_mean(logits, labels);
}

template <typename T>
Var<T> total_loss(const Var<T>& svdd_prime, const Var<T>& ssl, const LossWeights& weights) {
    weights.validate();
    return numerics::add(numerics::scale(svdd_prime, T(weights.lambda)), ssl);
}

SvddCenter compute_center(std::span<const Tensor<float>> features) {
    if (features.empty()) throw ArgumentError("compute_center: no features");
    const std::size_t d = features[0].size();
    std::vector<double> acc(d, 0.0);
    for (const auto& f : features) {
        if (f.size() != d) throw DimensionError("compute_center: feature lengths differ");
        for (std::size_t j = 0; j < d; ++j) acc[j] += f[j];
    }
    Tensor<float> c(Shape{d});
    for (std::size_t j = 0; j < d; ++j) c[j] = static_cast<float>(acc[j] / static_cast<double>(features.size()));
    return {std::move(c)};
}

template <typename T>
Var<T> encode_patches(const model::HierarchicalEncoder<T>& encoder, std::size_t patch, const Var<T>& patches) {
    if (patch == model::kSmallPatch) return encoder.encode_small_batch(patches);
    if (patch == model::kBigPatch) return encoder.encode_big_batch(patches);
    throw ArgumentError("encode_patches: unsupported patch size " + std::to_string(patch));
}

namespace {

void copy_into(const Tensor<float>& image, sampling::Coord at, std::size_t patch, Tensor<float>& batch,
               std::size_t slot) {
    const std::size_t ch = image.dim(2);
    const std::size_t width = image.dim(1);
    float* dst = batch.data() + slot * patch * patch * ch;
    for (std::size_t r = 0; r < patch; ++r) {
        const float* src = image.data() + ((at.row + r) * width + at.col) * ch;
        std::copy_n(src, patch * ch, dst + r * patch * ch);
    }
}

void perturb_slot(Tensor<float>& batch, std::size_t slot, std::size_t patch, float amplitude, sampling::Rng& rng) {
    std::uniform_real_distribution<float> dist(-amplitude, amplitude);
    float shift[3];
    for (float& s : shift) s = amplitude > 0 ? dist(rng) : 0.0f;
    float* p = batch.data() + slot * patch * patch * 3;
    for (std::size_t i = 0; i < patch * patch * 3; ++i) p[i] = std::clamp(p[i] + shift[i % 3], 0.0f, 1.0f);
}

template <typename T>
Var<T> as_var(const Tensor<float>& t) {
    if constexpr (std::is_same_v<T, float>) {
        return Var<T>::constant(t);
    } else {
        return Var<T>::constant(t.template cast<T>());
    }
}

void check_images(std::span<const Tensor<float>> images) {
    if (images.empty()) throw ArgumentError("training: dataset is empty");
    for (const auto& img : images) {
        if (img.rank() != 3 || img.dim(2) != 3) {
            throw DimensionError("training: images must be [H,W,3], got " + numerics::shape_string(img.shape()));
        }
    }
}

}  // namespace

StepBatch sample_step_batch(std::span<const Tensor<float>> images, std::size_t patch, const TrainConfig& config,
                            sampling::Rng& rng) {
    check_images(images);
    const std::size_t b = config.batch_size;
    const std::size_t jitter = config.jitter ? sampling::default_jitter(patch) : 0;
    StepBatch batch;
    batch.patch = patch;
    const Shape shape{b, patch, patch, 3};
    batch.jitter_anchor = Tensor<float>(shape);
    batch.jitter_partner = Tensor<float>(shape);
    batch.position_first = Tensor<float>(shape);
    batch.position_second = Tensor<float>(shape);
    batch.labels.resize(b);
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    for (std::size_t i = 0; i < b; ++i) {
        const auto& img = images[pick(rng)];
        auto pair = sampling::sample_jitter_pair(img.dim(0), img.dim(1), patch, jitter, rng);
        copy_into(img, pair.anchor, patch, batch.jitter_anchor, i);
        copy_into(img, pair.jittered, patch, batch.jitter_partner, i);
    }
    for (std::size_t i = 0; i < b; ++i) {
        const auto& img = images[pick(rng)];
        auto pair = sampling::sample_position_pair(img.dim(0), img.dim(1), patch, jitter, rng);
        copy_into(img, pair.first, patch, batch.position_first, i);
        copy_into(img, pair.second, patch, batch.position_second, i);
        perturb_slot(batch.position_first, i, patch, config.rgb_amplitude, rng);
        perturb_slot(batch.position_second, i, patch, config.rgb_amplitude, rng);
        batch.labels[i] = pair.label;
    }
    return batch;
}

template <typename T>
StepLosses<T> step_losses(const model::HierarchicalEncoder<T>& encoder, const model::PositionClassifier<T>& classifier,
                          const StepBatch& batch, const TrainConfig& config, const Tensor<T>* center) {
    const T inv_pairs = T(1) / T(batch.labels.size());
    const T eps = T(config.distance_eps);
    StepLosses<T> out;
    if (config.objective == Objective::SvddClassic) {
        if (center == nullptr) throw ArgumentError("step_losses: classic objective needs a centre");
        auto h = encode_patches(encoder, batch.patch, as_var<T>(batch.jitter_anchor));
        out.svdd = numerics::scale(loss_svdd_classic(h, Var<T>::constant(*center), eps), inv_pairs);
        out.ssl = Var<T>::constant(Tensor<T>(Shape{}));
        out.total = out.svdd;
        return out;
    }
    auto h = encode_patches(encoder, batch.patch, as_var<T>(batch.jitter_anchor));
    auto h_near = encode_patches(encoder, batch.patch, as_var<T>(batch.jitter_partner));
    out.svdd = numerics::scale(loss_svdd_prime(h, h_near, eps), inv_pairs);
    auto f1 = encode_patches(encoder, batch.patch, as_var<T>(batch.position_first));
    auto f2 = encode_patches(encoder, batch.patch, as_var<T>(batch.position_second));
    out.ssl = loss_ssl_batch(classifier.forward(f1, f2), batch.labels);
    out.total = total_loss(out.svdd, out.ssl, config.weights);
    return out;
}

namespace {

Tensor<float> classic_center(const model::HierarchicalEncoder<float>& encoder, std::span<const Tensor<float>> images,
                             std::size_t patch, std::size_t samples, sampling::Rng& rng) {
    constexpr std::size_t kChunk = 128;
    std::vector<Tensor<float>> features;
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    for (std::size_t done = 0; done < samples; done += kChunk) {
        const std::size_t n = std::min(kChunk, samples - done);
        Tensor<float> batch(Shape{n, patch, patch, 3});
        for (std::size_t i = 0; i < n; ++i) {
            const auto& img = images[pick(rng)];
            auto pair = sampling::sample_jitter_pair(img.dim(0), img.dim(1), patch, 0, rng);
            copy_into(img, pair.anchor, patch, batch, i);
        }
        auto h = encode_patches(encoder, patch, Var<float>::constant(std::move(batch))).value();
        const std::size_t d = h.dim(1);
        for (std::size_t i = 0; i < n; ++i) {
            features.emplace_back(Shape{d}, std::vector<float>(h.data() + i * d, h.data() + (i + 1) * d));
        }
    }
    return compute_center(features).c;
}

void set_trainable(const std::vector<Var<float>>& params, bool on) {
    for (auto p : params) p.set_requires_grad(on);
}

void train_scale(std::size_t patch, std::size_t steps, model::HierarchicalEncoder<float>& encoder,
                 model::PositionClassifier<float>& classifier, std::vector<Var<float>> params,
                 std::span<const Tensor<float>> images, const TrainConfig& config, sampling::Rng& rng,
                 std::vector<LossRecord>& history, const ProgressFn& progress) {
    std::optional<Tensor<float>> center;
    if (config.objective == Objective::SvddClassic) {
        // Frozen-weight forward pass; nothing is recorded while params are frozen.
        set_trainable(params, false);
        center = classic_center(encoder, images, patch, config.center_samples, rng);
        set_trainable(params, true);
    }
    auto state = numerics::make_adam_state<float>(params, config.adam);
    for (std::size_t step = 0; step < steps; ++step) {
        auto batch = sample_step_batch(images, patch, config, rng);
        auto losses = step_losses(encoder, classifier, batch, config, center ? &*center : nullptr);
        LossRecord rec{patch, step, losses.svdd.value()[0], losses.ssl.value()[0], losses.total.value()[0]};
        if (!std::isfinite(rec.total)) {
            throw NumericalError("non-finite loss at scale K=" + std::to_string(patch) + ", step " +
                                 std::to_string(step) + " (svdd=" + std::to_string(rec.svdd) +
                                 ", ssl=" + std::to_string(rec.ssl) + ")");
        }
        numerics::zero_grads<float>(params);
        numerics::backward(losses.total);
        numerics::adam_step<float>(params, state);
        history.push_back(rec);
        if (progress) progress(rec);
    }
}

}  // namespace

TrainResult train(std::span<const Tensor<float>> images, const TrainConfig& config,
                  const model::EncoderConfig& encoder_config, const ProgressFn& progress) {
    check_images(images);
    config.validate();
    sampling::Rng rng(config.seed);
    auto init = model::init_random<float>(encoder_config, config.seed);
    TrainResult result;
    result.model.encoder = init.encoder;
    result.model.classifier_small = init.classifier;
    result.model.classifier_big = model::init_classifier<float>(encoder_config.embed_dim, config.seed + 1);
    auto& enc = result.model.encoder;

    if (config.train_small) {
        auto params = enc.small_parameters();
        for (auto& p : result.model.classifier_small.parameters()) params.push_back(p);
        train_scale(model::kSmallPatch, config.steps_small, enc, result.model.classifier_small, params, images, config,
                    rng, result.history, progress);
    }
    if (config.train_big) {
        auto params = enc.big_parameters();
        for (auto& p : result.model.classifier_big.parameters()) params.push_back(p);
        const auto small = enc.small_parameters();
        if (config.joint) {
            for (auto& p : small) params.push_back(p);
        } else {
            set_trainable(small, false);
        }
        train_scale(model::kBigPatch, config.steps_big, enc, result.model.classifier_big, params, images, config, rng,
                    result.history, progress);
        set_trainable(small, true);
    }
    return result;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> history, std::size_t scale) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,l_svdd_prime,l_ssl,total\n" << std::setprecision(9);
    for (const auto& r : history) {
        if (r.scale == scale) out << r.step << ',' << r.svdd << ',' << r.ssl << ',' << r.total << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

#define PSVDD_INSTANTIATE(T)                                                                                        \
    template Var<T> loss_svdd_classic(const Var<T>&, const Var<T>&, T);                                             \
    template Var<T> loss_svdd_prime(const Var<T>&, const Var<T>&, T);                                               \
    template Var<T> loss_ssl(const Var<T>&, int);                                                                   \
    template Var<T> loss_ssl_batch(const Var<T>&, std::span<const int>);                                            \
    template Var<T> total_loss(const Var<T>&, const Var<T>&, const LossWeights&);                                   \
    template Var<T> encode_patches(const model::HierarchicalEncoder<T>&, std::size_t, const Var<T>&);               \
    template StepLosses<T> step_losses(const model::HierarchicalEncoder<T>&, const model::PositionClassifier<T>&,  \
                                       const StepBatch&, const TrainConfig&, const Tensor<T>*);

PSVDD_INSTANTIATE(float)
PSVDD_INSTANTIATE(double)

#undef PSVDD_INSTANTIATE

}  // namespace psvdd::training
