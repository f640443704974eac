#include "psvdd/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace psvdd::model {

namespace {

template <typename U, typename T>
Var<U> cast_var(const Var<T>& v) {
    return Var<U>::parameter(v.value().template cast<U>());
}

// [N,2K,2K,C] -> [4N,K,K,C], quadrants of each image consecutive in
// row-major order (TL, TR, BL, BR).
template <typename T>
Var<T> split_quadrants(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != s[2] || s[1] % 2 != 0) {
        throw DimensionError("split_quadrants: expected [N,2K,2K,C], got " + numerics::shape_string(s));
    }
    const std::size_t n = s[0], full = s[1], half = full / 2, ch = s[3];
    Tensor<T> out(Shape{4 * n, half, half, ch});
    const std::size_t row_len = half * ch;
    auto offsets = [=](std::size_t b, std::size_t q, std::size_t r) {
        const std::size_t qr = q / 2, qc = q % 2;
        const std::size_t src = ((b * full + qr * half + r) * full + qc * half) * ch;
        const std::size_t dst = ((b * 4 + q) * half + r) * half * ch;
        return std::pair{src, dst};
    };
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t q = 0; q < 4; ++q) {
            for (std::size_t r = 0; r < half; ++r) {
                auto [src, dst] = offsets(b, q, r);
                std::copy_n(x.value().data() + src, row_len, out.data() + dst);
            }
        }
    }
    return Var<T>::from_op(std::move(out), {x}, [=](numerics::Node<T>& self) {
        auto& p = *self.parents[0];
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t q = 0; q < 4; ++q) {
                for (std::size_t r = 0; r < half; ++r) {
                    auto [src, dst] = offsets(b, q, r);
                    for (std::size_t i = 0; i < row_len; ++i) p.grad[src + i] += self.grad[dst + i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
DenseLayer<T> dense_layer(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return {Var<T>::parameter(he_normal<T>({in, out}, in, rng)), Var<T>::parameter(Tensor<T>({out}))};
}

const Tensor<float>& find_tensor(const std::map<std::string, const Tensor<float>*>& by_name, const std::string& name,
                                 const Shape& expected) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("model file lacks tensor '" + name + "'");
    if (it->second->shape() != expected) {
        throw DimensionError("tensor '" + name + "' has shape " + numerics::shape_string(it->second->shape()) +
                             ", expected " + numerics::shape_string(expected));
    }
    return *it->second;
}

std::map<std::string, const Tensor<float>*> index_by_name(const std::vector<numerics::NamedTensor>& tensors) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.tensor;
    return by_name;
}

}  // namespace

void EncoderConfig::validate() const {
    if (embed_dim == 0) throw ArgumentError("encoder: embed_dim must be >= 1");
    for (std::size_t c : channels) {
        if (c == 0) throw ArgumentError("encoder: channel widths must be >= 1");
    }
}

template <typename T>
Tensor<T> crop(const Tensor<T>& image, std::size_t row, std::size_t col, std::size_t size) {
    if (image.rank() != 3 || row + size > image.dim(0) || col + size > image.dim(1)) {
        throw DimensionError("crop: window " + std::to_string(size) + " at (" + std::to_string(row) + "," +
                             std::to_string(col) + ") outside " + numerics::shape_string(image.shape()));
    }
    const std::size_t ch = image.dim(2);
    Tensor<T> out(Shape{size, size, ch});
    for (std::size_t r = 0; r < size; ++r) {
        const T* src = image.data() + ((row + r) * image.dim(1) + col) * ch;
        std::copy_n(src, size * ch, out.data() + r * size * ch);
    }
    return out;
}

// --- HierarchicalEncoder ---------------------------------------------------

template <typename T>
HierarchicalEncoder<T>::HierarchicalEncoder(EncoderConfig config, std::array<ConvLayer<T>, 4> small,
                                            std::array<DenseLayer<T>, 2> head)
    : config_(config), small_(std::move(small)), head_(std::move(head)) {}

template <typename T>
Var<T> HierarchicalEncoder<T>::small_map(const Var<T>& images) const {
    const Shape& s = images.shape();
    if ((s.size() != 3 && s.size() != 4) || s.back() != 3) {
        throw DimensionError("encoder: expected [H,W,3] or [N,H,W,3] input, got " + numerics::shape_string(s));
    }
    Var<T> h = images;
    for (std::size_t i = 0; i < small_.size(); ++i) {
        h = numerics::conv2d(h, small_[i].weight, small_[i].bias, small_[i].stride);
        if (i + 1 < small_.size()) h = numerics::leaky_relu(h, T(kLeakySlope));
    }
    return h;
}

template <typename T>
Var<T> HierarchicalEncoder<T>::encode_small_batch(const Var<T>& patches) const {
    const Shape& s = patches.shape();
    if (s.size() != 4 || s[1] != kSmallPatch || s[2] != kSmallPatch || s[3] != 3) {
        throw DimensionError("encode_small: expected [N,32,32,3], got " + numerics::shape_string(s));
    }
    return numerics::reshape(small_map(patches), {s[0], config_.embed_dim});
}

template <typename T>
Var<T> HierarchicalEncoder<T>::aggregate(const Var<T>& quadrant_features) const {
    const Shape& s = quadrant_features.shape();
    if (s.size() != 2 || s[1] != 4 * config_.embed_dim) {
        throw DimensionError("g_big: expected [N," + std::to_string(4 * config_.embed_dim) + "], got " +
                             numerics::shape_string(s));
    }
    auto h = numerics::leaky_relu(numerics::linear(quadrant_features, head_[0].weight, head_[0].bias), T(kLeakySlope));
    return numerics::linear(h, head_[1].weight, head_[1].bias);
}

template <typename T>
Var<T> HierarchicalEncoder<T>::encode_big_batch(const Var<T>& patches) const {
    const Shape& s = patches.shape();
    if (s.size() != 4 || s[1] != kBigPatch || s[2] != kBigPatch || s[3] != 3) {
        throw DimensionError("encode_big: expected [N,64,64,3], got " + numerics::shape_string(s));
    }
    auto quadrant_features = encode_small_batch(split_quadrants(patches));
    return aggregate(numerics::reshape(quadrant_features, {s[0], 4 * config_.embed_dim}));
}

template <typename T>
Tensor<T> HierarchicalEncoder<T>::encode_small(const Tensor<T>& patch) const {
    if (patch.shape() != Shape{kSmallPatch, kSmallPatch, 3}) {
        throw DimensionError("encode_small: expected [32,32,3], got " + numerics::shape_string(patch.shape()));
    }
    return encode_small_batch(Var<T>::constant(patch.reshaped({1, kSmallPatch, kSmallPatch, 3})))
        .value()
        .reshaped({config_.embed_dim});
}

template <typename T>
Tensor<T> HierarchicalEncoder<T>::g_big(const Tensor<T>& quadrant_grid) const {
    if (quadrant_grid.shape() != Shape{2, 2, config_.embed_dim}) {
        throw DimensionError("g_big: expected [2,2,D], got " + numerics::shape_string(quadrant_grid.shape()));
    }
    return aggregate(Var<T>::constant(quadrant_grid.reshaped({1, 4 * config_.embed_dim})))
        .value()
        .reshaped({config_.embed_dim});
}

template <typename T>
Tensor<T> HierarchicalEncoder<T>::encode_big(const Tensor<T>& patch) const {
    if (patch.shape() != Shape{kBigPatch, kBigPatch, 3}) {
        throw DimensionError("encode_big: expected [64,64,3], got " + numerics::shape_string(patch.shape()));
    }
    const std::size_t d = config_.embed_dim;
    Tensor<T> grid(Shape{2, 2, d});
    for (std::size_t q = 0; q < 4; ++q) {
        auto f = encode_small(crop(patch, (q / 2) * kSmallPatch, (q % 2) * kSmallPatch, kSmallPatch));
        std::copy_n(f.data(), d, grid.data() + q * d);
    }
    return g_big(grid);
}

template <typename T>
std::vector<Var<T>> HierarchicalEncoder<T>::small_parameters() const {
    std::vector<Var<T>> out;
    for (const auto& l : small_) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

template <typename T>
std::vector<Var<T>> HierarchicalEncoder<T>::big_parameters() const {
    std::vector<Var<T>> out;
    for (const auto& l : head_) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

template <typename T>
std::vector<Var<T>> HierarchicalEncoder<T>::parameters() const {
    auto out = small_parameters();
    for (auto& p : big_parameters()) out.push_back(p);
    return out;
}

template <typename T>
std::vector<numerics::NamedTensor> HierarchicalEncoder<T>::export_tensors() const {
    std::vector<numerics::NamedTensor> out;
    for (std::size_t i = 0; i < small_.size(); ++i) {
        const std::string base = "small.conv" + std::to_string(i + 1);
        out.push_back({base + ".weight", small_[i].weight.value().template cast<float>()});
        out.push_back({base + ".bias", small_[i].bias.value().template cast<float>()});
    }
    for (std::size_t i = 0; i < head_.size(); ++i) {
        const std::string base = "big.fc" + std::to_string(i + 1);
        out.push_back({base + ".weight", head_[i].weight.value().template cast<float>()});
        out.push_back({base + ".bias", head_[i].bias.value().template cast<float>()});
    }
    return out;
}

template <typename T>
HierarchicalEncoder<T> HierarchicalEncoder<T>::import_tensors(EncoderConfig config,
                                                              const std::vector<numerics::NamedTensor>& tensors) {
    config.validate();
    auto by_name = index_by_name(tensors);
    const std::size_t d = config.embed_dim;
    const std::array<std::size_t, 5> widths{3, config.channels[0], config.channels[1], config.channels[2], d};
    std::array<ConvLayer<T>, 4> small;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string base = "small.conv" + std::to_string(i + 1);
        const std::size_t k = kSmallKernels[i];
        small[i].weight = Var<T>::parameter(
            find_tensor(by_name, base + ".weight", {k, k, widths[i], widths[i + 1]}).template cast<T>());
        small[i].bias = Var<T>::parameter(find_tensor(by_name, base + ".bias", {widths[i + 1]}).template cast<T>());
        small[i].stride = kSmallStrides[i];
    }
    std::array<DenseLayer<T>, 2> head;
    const std::array<std::size_t, 3> head_widths{4 * d, kBigHidden, d};
    for (std::size_t i = 0; i < 2; ++i) {
        const std::string base = "big.fc" + std::to_string(i + 1);
        head[i].weight = Var<T>::parameter(
            find_tensor(by_name, base + ".weight", {head_widths[i], head_widths[i + 1]}).template cast<T>());
        head[i].bias =
            Var<T>::parameter(find_tensor(by_name, base + ".bias", {head_widths[i + 1]}).template cast<T>());
    }
    return HierarchicalEncoder(config, std::move(small), std::move(head));
}

template <typename T>
template <typename U>
HierarchicalEncoder<U> HierarchicalEncoder<T>::cast() const {
    std::array<ConvLayer<U>, 4> small;
    for (std::size_t i = 0; i < 4; ++i) {
        small[i] = {cast_var<U>(small_[i].weight), cast_var<U>(small_[i].bias), small_[i].stride};
    }
    std::array<DenseLayer<U>, 2> head;
    for (std::size_t i = 0; i < 2; ++i) head[i] = {cast_var<U>(head_[i].weight), cast_var<U>(head_[i].bias)};
    return HierarchicalEncoder<U>(config_, std::move(small), std::move(head));
}

// --- PositionClassifier ----------------------------------------------------

template <typename T>
Var<T> PositionClassifier<T>::forward(const Var<T>& h1, const Var<T>& h2) const {
    if (h1.shape() != h2.shape() || h1.shape().size() != 2 || h1.shape()[1] != input_dim()) {
        throw DimensionError("classify_pair: features " + numerics::shape_string(h1.shape()) + " and " +
                             numerics::shape_string(h2.shape()) + " vs input width " + std::to_string(input_dim()));
    }
    Var<T> h = numerics::sub(h1, h2);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = numerics::linear(h, layers_[i].weight, layers_[i].bias);
        if (i + 1 < layers_.size()) h = numerics::leaky_relu(h, T(kLeakySlope));
    }
    return h;
}

template <typename T>
Tensor<T> PositionClassifier<T>::classify_pair(const Tensor<T>& h1, const Tensor<T>& h2) const {
    if (h1.rank() != 1 || h1.shape() != h2.shape()) {
        throw DimensionError("classify_pair: feature shapes " + numerics::shape_string(h1.shape()) + " and " +
                             numerics::shape_string(h2.shape()));
    }
    const std::size_t d = h1.size();
    return forward(Var<T>::constant(h1.reshaped({1, d})), Var<T>::constant(h2.reshaped({1, d})))
        .value()
        .reshaped({kPositionClasses});
}

template <typename T>
std::vector<Var<T>> PositionClassifier<T>::parameters() const {
    std::vector<Var<T>> out;
    for (const auto& l : layers_) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

template <typename T>
std::vector<numerics::NamedTensor> PositionClassifier<T>::export_tensors(const std::string& prefix) const {
    std::vector<numerics::NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string base = prefix + ".fc" + std::to_string(i + 1);
        out.push_back({base + ".weight", layers_[i].weight.value().template cast<float>()});
        out.push_back({base + ".bias", layers_[i].bias.value().template cast<float>()});
    }
    return out;
}

template <typename T>
PositionClassifier<T> PositionClassifier<T>::import_tensors(const std::string& prefix,
                                                            const std::vector<numerics::NamedTensor>& tensors) {
    auto by_name = index_by_name(tensors);
    auto w1 = by_name.find(prefix + ".fc1.weight");
    if (w1 == by_name.end() || w1->second->rank() != 2) throw IoError("model file lacks '" + prefix + ".fc1.weight'");
    const std::array<std::size_t, 4> widths{w1->second->dim(0), kClassifierHidden, kClassifierHidden,
                                            kPositionClasses};
    std::array<DenseLayer<T>, 3> layers;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string base = prefix + ".fc" + std::to_string(i + 1);
        layers[i].weight =
            Var<T>::parameter(find_tensor(by_name, base + ".weight", {widths[i], widths[i + 1]}).template cast<T>());
        layers[i].bias = Var<T>::parameter(find_tensor(by_name, base + ".bias", {widths[i + 1]}).template cast<T>());
    }
    return PositionClassifier(std::move(layers));
}

template <typename T>
template <typename U>
PositionClassifier<U> PositionClassifier<T>::cast() const {
    std::array<DenseLayer<U>, 3> layers;
    for (std::size_t i = 0; i < 3; ++i) layers[i] = {cast_var<U>(layers_[i].weight), cast_var<U>(layers_[i].bias)};
    return PositionClassifier<U>(std::move(layers));
}

// --- initialization --------------------------------------------------------

template <typename T>
PositionClassifier<T> init_classifier(std::size_t embed_dim, std::mt19937_64& rng) {
    return PositionClassifier<T>({dense_layer<T>(embed_dim, kClassifierHidden, rng),
                                  dense_layer<T>(kClassifierHidden, kClassifierHidden, rng),
                                  dense_layer<T>(kClassifierHidden, kPositionClasses, rng)});
}

template <typename T>
PositionClassifier<T> init_classifier(std::size_t embed_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return init_classifier<T>(embed_dim, rng);
}

template <typename T>
RandomModel<T> init_random(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.embed_dim;
    const std::array<std::size_t, 5> widths{3, config.channels[0], config.channels[1], config.channels[2], d};
    std::array<ConvLayer<T>, 4> small;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t k = kSmallKernels[i];
        const std::size_t fan_in = k * k * widths[i];
        small[i] = {Var<T>::parameter(he_normal<T>({k, k, widths[i], widths[i + 1]}, fan_in, rng)),
                    Var<T>::parameter(Tensor<T>({widths[i + 1]})), kSmallStrides[i]};
    }
    std::array<DenseLayer<T>, 2> head{dense_layer<T>(4 * d, kBigHidden, rng), dense_layer<T>(kBigHidden, d, rng)};
    EncoderConfig cfg = config;
    cfg.seed = seed;
    RandomModel<T> model{HierarchicalEncoder<T>(cfg, std::move(small), std::move(head)), {}};
    model.classifier = init_classifier<T>(d, rng);
    return model;
}

// --- persistence -----------------------------------------------------------

std::filesystem::path manifest_path_for(const std::filesystem::path& model_path) {
    auto p = model_path;
    p.replace_extension(".txt");
    return p;
}

void save_model(const std::filesystem::path& path, const ModelBundle& bundle) {
    auto tensors = bundle.encoder.export_tensors();
    for (auto& t : bundle.classifier_small.export_tensors("cls_small")) tensors.push_back(std::move(t));
    for (auto& t : bundle.classifier_big.export_tensors("cls_big")) tensors.push_back(std::move(t));
    numerics::save_parameters(path, tensors);

    const auto& cfg = bundle.encoder.config();
    std::ofstream manifest(manifest_path_for(path), std::ios::trunc);
    if (!manifest) throw IoError("cannot write " + manifest_path_for(path).string());
    manifest << "architecture_version=" << kArchitectureVersion << '\n'
             << "embed_dim=" << cfg.embed_dim << '\n'
             << "receptive_field_big=" << kBigPatch << '\n'
             << "receptive_field_small=" << kSmallPatch << '\n'
             << "channels=" << cfg.channels[0] << ',' << cfg.channels[1] << ',' << cfg.channels[2] << '\n'
             << "seed=" << cfg.seed << '\n';
}

ModelBundle load_model(const std::filesystem::path& path) {
    std::ifstream manifest(manifest_path_for(path));
    if (!manifest) throw IoError("missing model manifest " + manifest_path_for(path).string());
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(manifest, line);) {
        auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw IoError("model manifest lacks '" + key + "'");
        return it->second;
    };
    if (std::stoul(get("architecture_version")) != kArchitectureVersion) {
        throw IoError("unsupported architecture version " + get("architecture_version"));
    }
    EncoderConfig cfg;
    cfg.embed_dim = std::stoul(get("embed_dim"));
    cfg.seed = std::stoull(get("seed"));
    std::istringstream widths(get("channels"));
    for (auto& c : cfg.channels) {
        std::string item;
        std::getline(widths, item, ',');
        c = std::stoul(item);
    }
    const auto tensors = numerics::load_parameters(path);
    return {HierarchicalEncoder<float>::import_tensors(cfg, tensors),
            PositionClassifier<float>::import_tensors("cls_small", tensors),
            PositionClassifier<float>::import_tensors("cls_big", tensors)};
}

template class HierarchicalEncoder<float>;
template class HierarchicalEncoder<double>;
template class PositionClassifier<float>;
template class PositionClassifier<double>;
template HierarchicalEncoder<double> HierarchicalEncoder<float>::cast<double>() const;
template HierarchicalEncoder<float> HierarchicalEncoder<double>::cast<float>() const;
template HierarchicalEncoder<float> HierarchicalEncoder<float>::cast<float>() const;
template HierarchicalEncoder<double> HierarchicalEncoder<double>::cast<double>() const;
template PositionClassifier<double> PositionClassifier<float>::cast<double>() const;
template PositionClassifier<float> PositionClassifier<double>::cast<float>() const;
template PositionClassifier<float> PositionClassifier<float>::cast<float>() const;
template RandomModel<float> init_random(const EncoderConfig&, std::uint64_t);
template RandomModel<double> init_random(const EncoderConfig&, std::uint64_t);
template PositionClassifier<float> init_classifier(std::size_t, std::uint64_t);
template PositionClassifier<double> init_classifier(std::size_t, std::uint64_t);
template Tensor<float> crop(const Tensor<float>&, std::size_t, std::size_t, std::size_t);
template Tensor<double> crop(const Tensor<double>&, std::size_t, std::size_t, std::size_t);

}  // namespace psvdd::model
