#include "psvdd/sampling.hpp"

#include <algorithm>

#include "psvdd/model.hpp"

namespace psvdd::sampling {

namespace {

std::size_t uniform_index(std::size_t lo, std::size_t hi, Rng& rng) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

long uniform_offset(std::size_t jitter, Rng& rng) {
    const long j = static_cast<long>(jitter);
    return std::uniform_int_distribution<long>(-j, j)(rng);
}

void require_fits(const char* op, std::size_t height, std::size_t width, std::size_t need) {
    if (need > height || need > width) {
        throw ArgumentError(std::string(op) + ": image " + std::to_string(height) + "x" + std::to_string(width) +
                            " is smaller than the required " + std::to_string(need) + "x" + std::to_string(need));
    }
}

std::pair<std::size_t, std::size_t> image_extent(const Tensor<float>& image) {
    if (image.rank() != 3) throw DimensionError("sampling: image must be [H,W,C], got " + numerics::shape_string(image.shape()));
    return {image.dim(0), image.dim(1)};
}

}  // namespace

PatchGrid extract_grid(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride) {
    if (patch == 0 || stride == 0) throw ArgumentError("extract_grid: K and S must be positive");
    if (patch > height || patch > width) {
        throw ArgumentError("extract_grid: K=" + std::to_string(patch) + " exceeds image " + std::to_string(height) +
                            "x" + std::to_string(width));
    }
    PatchGrid grid{patch, stride, {}};
    const std::size_t rows = (height - patch) / stride + 1;
    const std::size_t cols = (width - patch) / stride + 1;
    grid.coords.reserve(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) grid.coords.push_back({i * stride, j * stride});
    }
    return grid;
}

PatchGrid extract_grid(const Tensor<float>& image, std::size_t patch, std::size_t stride) {
    auto [h, w] = image_extent(image);
    return extract_grid(h, w, patch, stride);
}

PatchGrid covering_grid(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride) {
    PatchGrid base = extract_grid(height, width, patch, stride);
    std::vector<std::size_t> rows, cols;
    for (std::size_t r = 0; r + patch <= height; r += stride) rows.push_back(r);
    for (std::size_t c = 0; c + patch <= width; c += stride) cols.push_back(c);
    if (rows.back() + patch < height) rows.push_back(height - patch);
    if (cols.back() + patch < width) cols.push_back(width - patch);
    if (rows.size() * cols.size() == base.coords.size()) return base;
    PatchGrid grid{patch, stride, {}};
    for (std::size_t r : rows) {
        for (std::size_t c : cols) grid.coords.push_back({r, c});
    }
    return grid;
}

JitterPair sample_jitter_pair(std::size_t height, std::size_t width, std::size_t patch, std::size_t jitter, Rng& rng) {
    require_fits("sample_jitter_pair", height, width, patch);
    JitterPair pair;
    pair.anchor = {uniform_index(0, height - patch, rng), uniform_index(0, width - patch, rng)};
    auto shift = [&](std::size_t base, std::size_t limit) {
        const long moved = static_cast<long>(base) + uniform_offset(jitter, rng);
        return static_cast<std::size_t>(std::clamp<long>(moved, 0, static_cast<long>(limit)));
    };
    pair.jittered.row = shift(pair.anchor.row, height - patch);
    pair.jittered.col = shift(pair.anchor.col, width - patch);
    return pair;
}

PositionPair sample_position_pair(std::size_t height, std::size_t width, std::size_t patch, std::size_t jitter,
                                  Rng& rng) {
    const std::size_t margin = patch + jitter;
    require_fits("sample_position_pair", height, width, 3 * patch + 2 * jitter);
    PositionPair pair;
    pair.first = {uniform_index(margin, height - patch - margin, rng), uniform_index(margin, width - patch - margin, rng)};
    pair.label = static_cast<int>(uniform_index(0, 7, rng));
    const long dr = kNeighbourOffsets[pair.label][0] * static_cast<long>(patch) + uniform_offset(jitter, rng);
    const long dc = kNeighbourOffsets[pair.label][1] * static_cast<long>(patch) + uniform_offset(jitter, rng);
    pair.second = {static_cast<std::size_t>(static_cast<long>(pair.first.row) + dr),
                   static_cast<std::size_t>(static_cast<long>(pair.first.col) + dc)};
    return pair;
}

Tensor<float> perturb_rgb(const Tensor<float>& patch, Rng& rng, float amplitude) {
    if (patch.rank() != 3) throw DimensionError("perturb_rgb: expected [K,K,C], got " + numerics::shape_string(patch.shape()));
    const std::size_t ch = patch.dim(2);
    std::vector<float> shift(ch);
    std::uniform_real_distribution<float> dist(-amplitude, amplitude);
    for (auto& s : shift) s = amplitude > 0.0f ? dist(rng) : 0.0f;
    Tensor<float> out = patch;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + shift[i % ch], 0.0f, 1.0f);
    return out;
}

JitterPatches sample_jitter_patches(const Tensor<float>& image, std::size_t patch, std::size_t jitter, Rng& rng) {
    auto [h, w] = image_extent(image);
    JitterPatches out;
    out.coords = sample_jitter_pair(h, w, patch, jitter, rng);
    out.anchor = model::crop(image, out.coords.anchor.row, out.coords.anchor.col, patch);
    out.jittered = model::crop(image, out.coords.jittered.row, out.coords.jittered.col, patch);
    return out;
}

PositionPatches sample_position_patches(const Tensor<float>& image, std::size_t patch, std::size_t jitter, Rng& rng) {
    auto [h, w] = image_extent(image);
    PositionPatches out;
    out.coords = sample_position_pair(h, w, patch, jitter, rng);
    out.first = model::crop(image, out.coords.first.row, out.coords.first.col, patch);
    out.second = model::crop(image, out.coords.second.row, out.coords.second.col, patch);
    return out;
}

}  // namespace psvdd::sampling
