#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "psvdd/numerics/tensor.hpp"

namespace psvdd::sampling {

using numerics::Tensor;
using Rng = std::mt19937_64;

struct Coord {
    std::size_t row = 0;
    std::size_t col = 0;
    bool operator==(const Coord&) const = default;
};

struct PatchGrid {
    std::size_t patch = 0;   // K
    std::size_t stride = 0;  // S
    std::vector<Coord> coords;
};

/// Row-major corners {(iS, jS) : iS+K <= H, jS+K <= W}.
PatchGrid extract_grid(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride);
PatchGrid extract_grid(const Tensor<float>& image, std::size_t patch, std::size_t stride);

/// extract_grid plus, when S does not tile the image, one extra row/column
/// of patches flush with the bottom/right edge so that every pixel is covered.
PatchGrid covering_grid(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride);

inline std::size_t default_jitter(std::size_t patch) { return patch / 8; }

struct JitterPair {
    Coord anchor;
    Coord jittered;
};

/// Anchor uniform over valid corners; partner offset per axis by a uniform
/// integer in [-jitter, jitter], clipped to the image.
JitterPair sample_jitter_pair(std::size_t height, std::size_t width, std::size_t patch, std::size_t jitter, Rng& rng);

/// Labels of the eight neighbours, row-major around the centre:
/// 0 up-left, 1 up, 2 up-right, 3 left, 4 right, 5 down-left, 6 down, 7 down-right.
inline constexpr int kNeighbourOffsets[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};

struct PositionPair {
    Coord first;
    Coord second;
    int label = 0;
};

/// First patch placed so that every neighbour cell (offset +-K, plus jitter)
/// fits; the second is a uniformly chosen neighbour with independent per-axis
/// jitter in [-jitter, jitter].
PositionPair sample_position_pair(std::size_t height, std::size_t width, std::size_t patch, std::size_t jitter,
                                  Rng& rng);

/// Per-channel additive shift drawn from U[-amplitude, amplitude], then
/// clamped to [0,1]. Returns a new patch.
Tensor<float> perturb_rgb(const Tensor<float>& patch, Rng& rng, float amplitude = 0.1f);

/// Patch-carrying conveniences over the coordinate samplers.
struct JitterPatches {
    JitterPair coords;
    Tensor<float> anchor;
    Tensor<float> jittered;
};
JitterPatches sample_jitter_patches(const Tensor<float>& image, std::size_t patch, std::size_t jitter, Rng& rng);

struct PositionPatches {
    PositionPair coords;
    Tensor<float> first;
    Tensor<float> second;
};
PositionPatches sample_position_patches(const Tensor<float>& image, std::size_t patch, std::size_t jitter, Rng& rng);

}  // namespace psvdd::sampling
