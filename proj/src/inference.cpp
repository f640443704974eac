#include "psvdd/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "psvdd/numerics/serialize.hpp"

namespace psvdd::inference {

using numerics::Shape;
using numerics::Var;
using sampling::PatchGrid;

std::string scale_name(MapScale s) {
    switch (s) {
        case MapScale::Small: return "small";
        case MapScale::Big: return "big";
        case MapScale::Multi: return "multi";
    }
    throw ArgumentError("unknown map scale");
}

namespace {

void check_image(const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw DimensionError("inference: image must be [H,W,3], got " + numerics::shape_string(image.shape()));
    }
}

Tensor<float> crop_batch(const Tensor<float>& image, std::span<const sampling::Coord> coords, std::size_t patch) {
    const std::size_t ch = image.dim(2), width = image.dim(1);
    Tensor<float> out(Shape{coords.size(), patch, patch, ch});
    for (std::size_t i = 0; i < coords.size(); ++i) {
        float* dst = out.data() + i * patch * patch * ch;
        for (std::size_t r = 0; r < patch; ++r) {
            const float* src = image.data() + ((coords[i].row + r) * width + coords[i].col) * ch;
            std::copy_n(src, patch * ch, dst + r * patch * ch);
        }
    }
    return out;
}

void check_grid(const Tensor<float>& image, const PatchGrid& grid, std::size_t patch) {
    check_image(image);
    if (grid.patch != patch) {
        throw DimensionError("featurizer for K=" + std::to_string(patch) + " given a K=" + std::to_string(grid.patch) +
                             " grid");
    }
    for (const auto& c : grid.coords) {
        if (c.row + patch > image.dim(0) || c.col + patch > image.dim(1)) {
            throw DimensionError("grid patch outside the image");
        }
    }
}

// Encoder copy whose parameters are frozen, so forward passes build no graph.
std::shared_ptr<const model::HierarchicalEncoder<float>> frozen(const model::HierarchicalEncoder<float>& encoder) {
    auto copy = std::make_shared<model::HierarchicalEncoder<float>>(encoder.clone());
    for (auto p : copy->parameters()) p.set_requires_grad(false);
    return copy;
}

}  // namespace

Featurizer encoder_featurizer(const model::HierarchicalEncoder<float>& encoder, std::size_t patch) {
    if (patch != model::kSmallPatch && patch != model::kBigPatch) {
        throw ArgumentError("encoder_featurizer: patch size must be 32 or 64");
    }
    auto enc = frozen(encoder);
    return [enc, patch](const Tensor<float>& image, const PatchGrid& grid) {
        check_grid(image, grid, patch);
        constexpr std::size_t s = model::kSmallDenseStride;
        const std::size_t d = enc->embed_dim();
        const std::size_t n = grid.coords.size();
        Tensor<float> out(Shape{n, d});
        // Patches on the dense stride read the fully convolutional map.
        std::vector<std::size_t> dense, cropped;
        for (std::size_t i = 0; i < n; ++i) {
            (grid.coords[i].row % s == 0 && grid.coords[i].col % s == 0 ? dense : cropped).push_back(i);
        }
        if (!dense.empty()) {
            const auto map = enc->small_map(Var<float>::constant(image)).value();  // [H',W',D]
            const std::size_t mw = map.dim(1);
            auto cell = [&](std::size_t r, std::size_t c) { return map.data() + ((r / s) * mw + c / s) * d; };
            if (patch == model::kSmallPatch) {
                for (std::size_t i : dense) std::copy_n(cell(grid.coords[i].row, grid.coords[i].col), d, out.data() + i * d);
            } else {
                constexpr std::size_t q = model::kSmallPatch;
                Tensor<float> quads(Shape{dense.size(), 4 * d});
                for (std::size_t k = 0; k < dense.size(); ++k) {
                    const auto& c = grid.coords[dense[k]];
                    float* dst = quads.data() + k * 4 * d;
                    std::copy_n(cell(c.row, c.col), d, dst);
                    std::copy_n(cell(c.row, c.col + q), d, dst + d);
                    std::copy_n(cell(c.row + q, c.col), d, dst + 2 * d);
                    std::copy_n(cell(c.row + q, c.col + q), d, dst + 3 * d);
                }
                const auto h = enc->aggregate(Var<float>::constant(std::move(quads))).value();
                for (std::size_t k = 0; k < dense.size(); ++k) std::copy_n(h.data() + k * d, d, out.data() + dense[k] * d);
            }
        }
        if (!cropped.empty()) {
            std::vector<sampling::Coord> where;
            for (std::size_t i : cropped) where.push_back(grid.coords[i]);
            auto patches = Var<float>::constant(crop_batch(image, where, patch));
            const auto h = (patch == model::kSmallPatch ? enc->encode_small_batch(patches) : enc->encode_big_batch(patches))
                               .value();
            for (std::size_t k = 0; k < cropped.size(); ++k) std::copy_n(h.data() + k * d, d, out.data() + cropped[k] * d);
        }
        return out;
    };
}

Featurizer raw_featurizer() {
    return [](const Tensor<float>& image, const PatchGrid& grid) {
        check_grid(image, grid, grid.patch);
        return crop_batch(image, grid.coords, grid.patch).reshaped(Shape{grid.coords.size(), grid.patch * grid.patch * 3});
    };
}

ScaleSetup small_scale(Featurizer f, const index::FeatureIndex* idx) {
    return {model::kSmallPatch, 4, std::move(f), idx};
}

ScaleSetup big_scale(Featurizer f, const index::FeatureIndex* idx) {
    return {model::kBigPatch, 16, std::move(f), idx};
}

index::FeatureIndex index_images(std::span<const Tensor<float>> images, const ScaleSetup& scale,
                                 const index::IndexBuildConfig& config) {
    if (images.empty()) throw ArgumentError("index_images: no images");
    std::vector<float> values;
    std::vector<index::Provenance> provenance;
    std::size_t d = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        check_image(images[i]);
        const auto grid = sampling::covering_grid(images[i].dim(0), images[i].dim(1), scale.patch, scale.stride);
        const auto f = scale.featurize(images[i], grid);
        d = f.dim(1);
        values.insert(values.end(), f.data(), f.data() + f.size());
        for (const auto& c : grid.coords) {
            provenance.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(c.row),
                                  static_cast<std::uint32_t>(c.col)});
        }
    }
    const std::size_t n = provenance.size();
    return index::build_index(Tensor<float>(Shape{n, d}, std::move(values)), std::move(provenance), config);
}

float patch_score(const index::FeatureIndex& idx, const model::HierarchicalEncoder<float>& encoder,
                  const Tensor<float>& patch) {
    if (patch.rank() != 3 || patch.dim(0) != patch.dim(1) || patch.dim(2) != 3) {
        throw DimensionError("patch_score: expected a square [K,K,3] patch, got " + numerics::shape_string(patch.shape()));
    }
    Tensor<float> f;
    if (patch.dim(0) == model::kSmallPatch) {
        f = encoder.encode_small(patch);
    } else if (patch.dim(0) == model::kBigPatch) {
        f = encoder.encode_big(patch);
    } else {
        throw DimensionError("patch_score: patch size must be 32 or 64");
    }
    return idx.nearest(f.values()).distance;
}

AnomalyMap distribute_to_pixels(const PatchGrid& grid, std::span<const float> scores, std::size_t height,
                                std::size_t width, MapScale scale) {
    if (scores.size() != grid.coords.size()) {
        throw DimensionError("distribute_to_pixels: " + std::to_string(scores.size()) + " scores for " +
                             std::to_string(grid.coords.size()) + " patches");
    }
    if (height == 0 || width == 0) throw ArgumentError("distribute_to_pixels: empty map");
    const std::size_t k = grid.patch;
    std::vector<double> sum(height * width, 0.0);
    std::vector<std::uint32_t> count(height * width, 0);
    for (std::size_t p = 0; p < grid.coords.size(); ++p) {
        const auto& c = grid.coords[p];
        if (c.row + k > height || c.col + k > width) throw DimensionError("distribute_to_pixels: patch outside map");
        for (std::size_t r = c.row; r < c.row + k; ++r) {
            for (std::size_t q = c.col; q < c.col + k; ++q) {
                sum[r * width + q] += scores[p];
                count[r * width + q] += 1;
            }
        }
    }
    AnomalyMap m(height, width, scale);
    std::vector<std::size_t> covered;
    for (std::size_t i = 0; i < sum.size(); ++i) {
        if (count[i] > 0) {
            m.values[i] = static_cast<float>(sum[i] / count[i]);
            covered.push_back(i);
        }
    }
    if (covered.empty()) throw ArgumentError("distribute_to_pixels: no patches");
    if (covered.size() == sum.size()) return m;
    for (std::size_t i = 0; i < sum.size(); ++i) {
        if (count[i] > 0) continue;
        const long r = long(i / width), c = long(i % width);
        std::size_t best = covered[0];
        long best_d = std::numeric_limits<long>::max();
        for (std::size_t j : covered) {
            const long dr = long(j / width) - r, dc = long(j % width) - c;
            if (dr * dr + dc * dc < best_d) {
                best_d = dr * dr + dc * dc;
                best = j;
            }
        }
        m.values[i] = m.values[best];
    }
    return m;
}

AnomalyMap aggregate_multiscale(const AnomalyMap& m_small, const AnomalyMap& m_big) {
    if (m_small.height != m_big.height || m_small.width != m_big.width) {
        throw DimensionError("aggregate_multiscale: map sizes differ");
    }
    AnomalyMap out(m_small.height, m_small.width, MapScale::Multi);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = m_small.values[i] * m_big.values[i];
    return out;
}

float image_score(const AnomalyMap& m) {
    if (m.values.empty()) throw ArgumentError("image_score: empty map");
    return *std::max_element(m.values.begin(), m.values.end());
}

AnomalyMap scale_map(const Tensor<float>& image, const ScaleSetup& scale, MapScale tag, std::size_t threads) {
    check_image(image);
    if (scale.index == nullptr) throw ArgumentError("inference: no index for the K=" + std::to_string(scale.patch) + " scale");
    const auto grid = sampling::covering_grid(image.dim(0), image.dim(1), scale.patch, scale.stride);
    const auto features = scale.featurize(image, grid);
    const auto hits = scale.index->nearest_batch(features, threads);
    std::vector<float> scores(hits.size());
    for (std::size_t i = 0; i < hits.size(); ++i) scores[i] = hits[i].distance;
    return distribute_to_pixels(grid, scores, image.dim(0), image.dim(1), tag);
}

InspectionResult inspect_image(const Tensor<float>& image, const Detector& detector) {
    InspectionResult r;
    r.small = scale_map(image, detector.small, MapScale::Small, detector.threads);
    r.big = scale_map(image, detector.big, MapScale::Big, detector.threads);
    r.multi = aggregate_multiscale(r.small, r.big);
    r.image_score = image_score(r.multi);
    return r;
}

// --- export ----------------------------------------------------------------

void write_map_raw(const std::filesystem::path& path, const AnomalyMap& map) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kMapMagic, 4);
    numerics::write_u32(out, kMapFormatVersion);
    numerics::write_u32(out, static_cast<std::uint32_t>(map.height));
    numerics::write_u32(out, static_cast<std::uint32_t>(map.width));
    numerics::write_u32(out, static_cast<std::uint32_t>(map.scale));
    numerics::write_f32_array(out, map.values.data(), map.values.size());
    if (!out) throw IoError("write failed: " + path.string());
}

AnomalyMap read_map_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMapMagic)) throw IoError(path.string() + ": not a map file");
    if (numerics::read_u32(in) != kMapFormatVersion) throw IoError(path.string() + ": unsupported map version");
    const std::size_t h = numerics::read_u32(in), w = numerics::read_u32(in);
    const std::uint32_t tag = numerics::read_u32(in);
    if (tag > 2) throw IoError(path.string() + ": bad scale tag");
    AnomalyMap m(h, w, static_cast<MapScale>(tag));
    numerics::read_f32_array(in, m.values.data(), m.values.size());
    return m;
}

float write_map_pgm(const std::filesystem::path& path, const AnomalyMap& map, std::optional<float> max) {
    const float top = max ? *max : (map.values.empty() ? 0.0f : image_score(map));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    std::ostringstream header;
    header.precision(9);
    header << "P5\n# max " << top << "\n" << map.width << ' ' << map.height << "\n65535\n";
    out << header.str();
    for (float v : map.values) {
        const double t = top > 0 ? std::clamp(double(v) / top, 0.0, 1.0) : 0.0;
        const auto q = static_cast<std::uint16_t>(std::lround(t * 65535.0));
        const char be[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
        out.write(be, 2);
    }
    if (!out) throw IoError("write failed: " + path.string());
    return top;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& e : entries) {
        nlohmann::json j{{"image", e.image_id}, {"category", e.category}, {"defect", e.defect},
                         {"score", e.score},    {"map_raw", e.map_raw},   {"map_pgm", e.map_pgm}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("image").get<std::string>(), j.value("category", ""), j.value("defect", ""),
                           j.at("score").get<float>(), j.value("map_raw", ""), j.value("map_pgm", "")});
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ": bad manifest line: " + e.what());
        }
    }
    return out;
}

}  // namespace psvdd::inference
