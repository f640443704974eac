#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psvdd/numerics/tensor.hpp"

namespace psvdd::data {

using numerics::Tensor;

inline constexpr std::size_t kImageSize = 256;

enum class Label { Normal, Abnormal };

/// Binary H x W grid, 1 = defect.
struct Mask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;

    Mask() = default;
    Mask(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}
    std::uint8_t& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
    std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
    std::size_t count() const;
    bool operator==(const Mask&) const = default;
};

struct ImageRecord {
    std::string id;  // "<defect>/<stem>", e.g. "good/000"
    Tensor<float> pixels;  // [H,W,3] in [0,1]
    Label label = Label::Normal;
    std::optional<Mask> mask;  // abnormal test images only
    std::string category;
    std::string defect;  // subdirectory name; "good" for normal images
};

struct Dataset {
    std::vector<ImageRecord> train;
    std::vector<ImageRecord> test;
    std::vector<std::string> notes;  // e.g. non-square inputs that were distorted
};

/// 8-bit decoded image, interleaved, 1 or 3 channels.
struct RawImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;
};

RawImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RawImage& image);

/// Bilinear resample to size x size (half-pixel centres), grayscale
/// replicated to 3 channels, values / 255.
Tensor<float> preprocess(const RawImage& raw, std::size_t size = kImageSize);
/// Bilinear resample of the non-zero indicator, thresholded at 1/2.
Mask preprocess_mask(const RawImage& raw, std::size_t size = kImageSize);

/// Rounds [0,1] floats to 8-bit RGB.
RawImage to_raw(const Tensor<float>& pixels);
RawImage to_raw(const Mask& mask);

/// MVTec layout: <root>/<category>/{train/good, test/<defect>, ground_truth/<defect>/<stem>_mask.png}.
/// A missing directory or mask throws ArgumentError naming the path; an
/// undecodable file throws IoError.
Dataset load_dataset(const std::filesystem::path& root, const std::string& category, std::size_t size = kImageSize);

// --- synthetic data --------------------------------------------------------

enum class Style { Stripes, Checker, BlobsTexture, PlacedObject };
enum class DefectType { Scratch, Blob, MissingRegion };

std::string style_name(Style s);
Style parse_style(const std::string& s);
std::string defect_name(DefectType d);
DefectType parse_defect(const std::string& s);

struct SyntheticConfig {
    std::string category = "synthetic";
    Style style = Style::Stripes;
    std::size_t train_count = 32;
    std::size_t test_good = 8;
    std::size_t test_defective = 8;
    std::vector<DefectType> defects{DefectType::Scratch, DefectType::Blob, DefectType::MissingRegion};
    std::size_t defect_min = 16;  // extent in pixels
    std::size_t defect_max = 40;
    std::size_t image_size = kImageSize;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class Split { Train, TestGood, TestDefective };

/// One rendered image: the defect-free render, the image actually written and
/// its mask (empty for normal images).
struct RenderedSample {
    Tensor<float> clean;
    Tensor<float> image;
    Mask mask;
    DefectType defect = DefectType::Scratch;
};

/// Deterministic in (config, split, index).
RenderedSample render_sample(const SyntheticConfig& config, Split split, std::size_t index);

/// Writes every category under `root` in the MVTec layout, plus
/// <root>/generation.json.
void generate_synthetic(const std::vector<SyntheticConfig>& categories, const std::filesystem::path& root);

}  // namespace psvdd::data
