#include "psvdd/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

namespace psvdd::data {

namespace fs = std::filesystem;

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }

// --- PNG ---------------------------------------------------------------------

RawImage read_png(const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
    img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    RawImage out;
    out.height = img.height;
    out.width = img.width;
    out.channels = color ? 3 : 1;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    return out;
}

void write_png(const fs::path& path, const RawImage& image) {
    if (image.channels != 1 && image.channels != 3) throw ArgumentError("write_png: 1 or 3 channels");
    if (image.pixels.size() != image.height * image.width * image.channels) throw DimensionError("write_png: size");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
        throw IoError("cannot write PNG " + path.string() + ": " + img.message);
    }
}

// --- preprocessing -----------------------------------------------------------

namespace {

// Source coordinate and weight for bilinear sampling with half-pixel centres.
struct Tap {
    std::size_t lo, hi;
    float w;  // weight of hi
};

std::vector<Tap> taps(std::size_t src, std::size_t dst) {
    std::vector<Tap> out(dst);
    const double scale = double(src) / double(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        const double x = std::clamp((i + 0.5) * scale - 0.5, 0.0, double(src - 1));
        const auto lo = static_cast<std::size_t>(std::floor(x));
        out[i] = {lo, std::min(lo + 1, src - 1), static_cast<float>(x - double(lo))};
    }
    return out;
}

void check_raw(const RawImage& raw) {
    if (raw.height == 0 || raw.width == 0) throw ArgumentError("empty image");
    if (raw.channels != 1 && raw.channels != 3) throw ArgumentError("image must have 1 or 3 channels");
    if (raw.pixels.size() != raw.height * raw.width * raw.channels) throw DimensionError("image buffer size mismatch");
}

}  // namespace

Tensor<float> preprocess(const RawImage& raw, std::size_t size) {
    check_raw(raw);
    const auto ty = taps(raw.height, size), tx = taps(raw.width, size);
    Tensor<float> out({size, size, 3});
    auto px = [&](std::size_t r, std::size_t c, std::size_t ch) {
        return float(raw.pixels[(r * raw.width + c) * raw.channels + (raw.channels == 3 ? ch : 0)]);
    };
    for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t j = 0; j < size; ++j) {
            const auto& a = ty[i];
            const auto& b = tx[j];
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const float top = px(a.lo, b.lo, ch) * (1 - b.w) + px(a.lo, b.hi, ch) * b.w;
                const float bottom = px(a.hi, b.lo, ch) * (1 - b.w) + px(a.hi, b.hi, ch) * b.w;
                out.at(i, j, ch) = std::clamp((top * (1 - a.w) + bottom * a.w) / 255.0f, 0.0f, 1.0f);
            }
        }
    }
    return out;
}

Mask preprocess_mask(const RawImage& raw, std::size_t size) {
    check_raw(raw);
    // Same bilinear taps as the image on the 0/1 indicator, kept where >= 1/2.
    const auto ty = taps(raw.height, size), tx = taps(raw.width, size);
    auto on = [&](std::size_t r, std::size_t c) {
        bool any = false;
        for (std::size_t ch = 0; ch < raw.channels; ++ch) any |= raw.pixels[(r * raw.width + c) * raw.channels + ch] != 0;
        return any ? 1.0f : 0.0f;
    };
    Mask m(size, size);
    for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t j = 0; j < size; ++j) {
            const auto& a = ty[i];
            const auto& b = tx[j];
            const float top = on(a.lo, b.lo) * (1 - b.w) + on(a.lo, b.hi) * b.w;
            const float bottom = on(a.hi, b.lo) * (1 - b.w) + on(a.hi, b.hi) * b.w;
            m.at(i, j) = top * (1 - a.w) + bottom * a.w >= 0.5f ? 1 : 0;
        }
    }
    return m;
}

RawImage to_raw(const Tensor<float>& pixels) {
    if (pixels.rank() != 3 || pixels.dim(2) != 3) throw DimensionError("to_raw: expected [H,W,3]");
    RawImage out{pixels.dim(0), pixels.dim(1), 3, std::vector<std::uint8_t>(pixels.size())};
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pixels[i], 0.0f, 1.0f) * 255.0f));
    }
    return out;
}

RawImage to_raw(const Mask& mask) {
    RawImage out{mask.height, mask.width, 1, std::vector<std::uint8_t>(mask.values.size())};
    for (std::size_t i = 0; i < mask.values.size(); ++i) out.pixels[i] = mask.values[i] ? 255 : 0;
    return out;
}

// --- MVTec layout ------------------------------------------------------------

namespace {

std::vector<fs::path> png_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void require_dir(const fs::path& p) {
    if (!fs::is_directory(p)) throw ArgumentError("dataset layout: missing directory " + p.string());
}

ImageRecord load_record(const fs::path& file, const std::string& category, const std::string& defect, std::size_t size,
                        std::vector<std::string>& notes) {
    ImageRecord r;
    r.id = defect + "/" + file.stem().string();
    const auto raw = read_png(file);
    if (raw.height != raw.width) {
        notes.push_back(file.string() + ": " + std::to_string(raw.width) + "x" + std::to_string(raw.height) +
                        " resampled to a square, aspect ratio not kept");
    }
    r.pixels = preprocess(raw, size);
    r.category = category;
    r.defect = defect;
    return r;
}

}  // namespace

Dataset load_dataset(const fs::path& root, const std::string& category, std::size_t size) {
    const fs::path base = root / category;
    require_dir(base);
    require_dir(base / "train" / "good");
    require_dir(base / "test");
    Dataset ds;
    for (const auto& f : png_files(base / "train" / "good")) ds.train.push_back(load_record(f, category, "good", size, ds.notes));
    std::vector<fs::path> defect_dirs;
    for (const auto& e : fs::directory_iterator(base / "test")) {
        if (e.is_directory()) defect_dirs.push_back(e.path());
    }
    std::sort(defect_dirs.begin(), defect_dirs.end());
    for (const auto& dir : defect_dirs) {
        const std::string defect = dir.filename().string();
        for (const auto& f : png_files(dir)) {
            auto r = load_record(f, category, defect, size, ds.notes);
            if (defect != "good") {
                r.label = Label::Abnormal;
                const fs::path mask = base / "ground_truth" / defect / (f.stem().string() + "_mask.png");
                if (!fs::is_regular_file(mask)) throw ArgumentError("dataset layout: missing mask " + mask.string());
                r.mask = preprocess_mask(read_png(mask), size);
            }
            ds.test.push_back(std::move(r));
        }
    }
    return ds;
}

// --- synthetic data ----------------------------------------------------------

std::string style_name(Style s) {
    switch (s) {
        case Style::Stripes: return "stripes";
        case Style::Checker: return "checker";
        case Style::BlobsTexture: return "blobs";
        case Style::PlacedObject: return "object";
    }
    throw ArgumentError("unknown style");
}

Style parse_style(const std::string& s) {
    for (Style v : {Style::Stripes, Style::Checker, Style::BlobsTexture, Style::PlacedObject}) {
        if (style_name(v) == s) return v;
    }
    throw ArgumentError("unknown style '" + s + "' (stripes, checker, blobs, object)");
}

std::string defect_name(DefectType d) {
    switch (d) {
        case DefectType::Scratch: return "scratch";
        case DefectType::Blob: return "blob";
        case DefectType::MissingRegion: return "missing";
    }
    throw ArgumentError("unknown defect type");
}

DefectType parse_defect(const std::string& s) {
    for (DefectType v : {DefectType::Scratch, DefectType::Blob, DefectType::MissingRegion}) {
        if (defect_name(v) == s) return v;
    }
    throw ArgumentError("unknown defect type '" + s + "' (scratch, blob, missing)");
}

void SyntheticConfig::validate() const {
    if (category.empty() || category.find('/') != std::string::npos) throw ArgumentError("synthetic: bad category name");
    if (train_count == 0 || test_good == 0 || test_defective == 0) throw ArgumentError("synthetic: counts must be >= 1");
    if (defects.empty()) throw ArgumentError("synthetic: no defect types");
    if (image_size < 64) throw ArgumentError("synthetic: image size must be >= 64");
    if (defect_min == 0 || defect_min > defect_max || defect_max > image_size / 2) {
        throw ArgumentError("synthetic: defect size range must satisfy 1 <= min <= max <= size/2");
    }
}

namespace {

using Rng = std::mt19937_64;
using Color = std::array<float, 3>;

Rng stream(const SyntheticConfig& c, Split split, std::size_t index, std::uint32_t purpose) {
    std::seed_seq seq{static_cast<std::uint32_t>(c.seed), static_cast<std::uint32_t>(c.seed >> 32),
                      static_cast<std::uint32_t>(c.style), static_cast<std::uint32_t>(split),
                      static_cast<std::uint32_t>(index), purpose};
    return Rng(seq);
}

float uniform(Rng& rng, float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); }

Color mix(const Color& a, const Color& b, float t) {
    return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

void put(Tensor<float>& img, std::size_t r, std::size_t c, const Color& col) {
    for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = col[ch];
}

// Smooth 0..1 square wave with soft edges.
float soft_wave(float phase) {
    const float s = std::sin(phase);
    return 0.5f + 0.5f * std::tanh(3.0f * s);
}

Tensor<float> render_clean(Style style, std::size_t n, Rng& rng) {
    Tensor<float> img({n, n, 3});
    const float fn = float(n);
    switch (style) {
        case Style::Stripes: {
            const Color a{0.20f, 0.35f, 0.60f}, b{0.85f, 0.80f, 0.50f};
            const float angle = 0.5f + uniform(rng, -0.05f, 0.05f);
            const float period = 16.0f, phase = uniform(rng, 0.0f, 6.2832f);
            const float ca = std::cos(angle), sa = std::sin(angle);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    const float u = (float(c) * ca + float(r) * sa) * 6.2832f / period + phase;
                    put(img, r, c, mix(a, b, soft_wave(u)));
                }
            }
            break;
        }
        case Style::Checker: {
            const Color a{0.75f, 0.30f, 0.25f}, b{0.95f, 0.90f, 0.85f};
            const float period = 24.0f, oy = uniform(rng, 0.0f, 48.0f), ox = uniform(rng, 0.0f, 48.0f);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    const float t = soft_wave((float(r) + oy) * 3.1416f / period) * 2 - 1;
                    const float s = soft_wave((float(c) + ox) * 3.1416f / period) * 2 - 1;
                    put(img, r, c, mix(a, b, 0.5f + 0.5f * t * s));
                }
            }
            break;
        }
        case Style::BlobsTexture: {
            const Color bg{0.45f, 0.55f, 0.35f};
            const std::array<Color, 3> palette{{{0.30f, 0.40f, 0.20f}, {0.60f, 0.65f, 0.40f}, {0.50f, 0.45f, 0.30f}}};
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < n; ++c) put(img, r, c, bg);
            }
            const std::size_t blobs = n * n / 1200;
            for (std::size_t k = 0; k < blobs; ++k) {
                const float cy = uniform(rng, 0, fn), cx = uniform(rng, 0, fn), rad = uniform(rng, 5, 12);
                const Color& col = palette[rng() % 3];
                const long r0 = std::max(0L, long(cy - 2 * rad)), r1 = std::min(long(n) - 1, long(cy + 2 * rad));
                const long c0 = std::max(0L, long(cx - 2 * rad)), c1 = std::min(long(n) - 1, long(cx + 2 * rad));
                for (long r = r0; r <= r1; ++r) {
                    for (long c = c0; c <= c1; ++c) {
                        const float d2 = (float(r) - cy) * (float(r) - cy) + (float(c) - cx) * (float(c) - cx);
                        const float w = std::exp(-d2 / (2 * rad * rad / 2));
                        Color cur{img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2)};
                        put(img, r, c, mix(cur, col, w));
                    }
                }
            }
            break;
        }
        case Style::PlacedObject: {
            const Color bg{0.12f, 0.12f, 0.14f}, body{0.80f, 0.60f, 0.20f}, ring{0.45f, 0.30f, 0.10f},
                mark{0.20f, 0.50f, 0.85f};
            const float cy = fn / 2 + uniform(rng, -4, 4), cx = fn / 2 + uniform(rng, -4, 4);
            const float radius = 0.30f * fn;
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    const float dy = float(r) - cy, dx = float(c) - cx;
                    const float d = std::sqrt(dy * dy + dx * dx);
                    Color col = mix(bg, Color{0.2f, 0.2f, 0.22f}, float(r) / fn);
                    const float edge = std::clamp(radius - d, 0.0f, 1.0f);
                    col = mix(col, body, edge);
                    const float rd = std::abs(d - 0.6f * radius);
                    if (rd < 0.08f * radius) col = mix(col, ring, std::clamp(0.08f * radius - rd, 0.0f, 1.0f));
                    // A marker at the top of the object fixes its orientation.
                    if (std::abs(dx) < 0.12f * radius && dy < -0.2f * radius && dy > -0.45f * radius) col = mark;
                    put(img, r, c, col);
                }
            }
            break;
        }
    }
    std::uniform_real_distribution<float> noise(-0.03f, 0.03f);
    for (auto& v : img.values()) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    // Quantise now so the written PNG holds exactly this image.
    for (auto& v : img.values()) v = std::round(v * 255.0f) / 255.0f;
    return img;
}

// Marks the defect footprint and paints it with `color`, forcing a visible
// change on every masked pixel.
void paint_defect(Tensor<float>& img, Mask& mask, DefectType type, std::size_t lo, std::size_t hi, bool on_object,
                  Rng& rng) {
    const std::size_t n = img.dim(0);
    const float extent = float(lo + rng() % (hi - lo + 1));
    const float margin = extent / 2 + 2;
    float cy = uniform(rng, margin, float(n) - margin), cx = uniform(rng, margin, float(n) - margin);
    if (on_object) {
        // Inside the object's disk, away from its rim.
        const float rho = 0.22f * float(n) * std::sqrt(uniform(rng, 0, 1)), phi = uniform(rng, 0, 6.2832f);
        cy = float(n) / 2 + rho * std::sin(phi);
        cx = float(n) / 2 + rho * std::cos(phi);
    }
    const float angle = uniform(rng, 0.0f, 3.1416f);
    const float ca = std::cos(angle), sa = std::sin(angle);
    Color color{uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)};
    if (type == DefectType::MissingRegion) color = {0.0f, 0.0f, 0.0f};
    const float aspect = uniform(rng, 0.5f, 0.8f);

    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            const float dy = float(r) - cy, dx = float(c) - cx;
            const float u = dx * ca + dy * sa, v = -dx * sa + dy * ca;  // rotated coordinates
            bool inside = false;
            switch (type) {
                case DefectType::Scratch: inside = std::abs(u) <= extent / 2 && std::abs(v) <= 1.5f; break;
                case DefectType::Blob: {
                    const float a = extent / 2, b = a * aspect;
                    inside = (u * u) / (a * a) + (v * v) / (b * b) <= 1.0f;
                    break;
                }
                case DefectType::MissingRegion:
                    inside = std::abs(dx) <= extent / 2 && std::abs(dy) <= aspect * extent / 2;
                    break;
            }
            if (!inside) continue;
            mask.at(r, c) = 1;
            float diff = 0;
            for (std::size_t ch = 0; ch < 3; ++ch) diff = std::max(diff, std::abs(color[ch] - img.at(r, c, ch)));
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const float clean = img.at(r, c, ch);
                const float v2 = diff < 0.25f ? std::fmod(clean + 0.5f, 1.0f) : color[ch];
                img.at(r, c, ch) = std::round(v2 * 255.0f) / 255.0f;
            }
        }
    }
}

}  // namespace

RenderedSample render_sample(const SyntheticConfig& config, Split split, std::size_t index) {
    config.validate();
    RenderedSample s;
    auto rng = stream(config, split, index, 0);
    s.clean = render_clean(config.style, config.image_size, rng);
    s.image = s.clean;
    if (split == Split::TestDefective) {
        s.defect = config.defects[index % config.defects.size()];
        s.mask = Mask(config.image_size, config.image_size);
        auto drng = stream(config, split, index, 1);
        paint_defect(s.image, s.mask, s.defect, config.defect_min, config.defect_max,
                     config.style == Style::PlacedObject, drng);
    }
    return s;
}

void generate_synthetic(const std::vector<SyntheticConfig>& categories, const fs::path& root) {
    if (categories.empty()) throw ArgumentError("generate_synthetic: no categories");
    for (const auto& c : categories) c.validate();
    auto mkdir = [](const fs::path& p) {
        std::error_code ec;
        fs::create_directories(p, ec);
        if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
    };
    auto name = [](std::size_t i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%03zu", i);
        return std::string(buf);
    };
    nlohmann::json manifest;
    manifest["generator"] = "psvdd synthetic";
    manifest["format_version"] = 1;
    for (const auto& c : categories) {
        const fs::path base = root / c.category;
        mkdir(base / "train" / "good");
        mkdir(base / "test" / "good");
        for (std::size_t i = 0; i < c.train_count; ++i) {
            write_png(base / "train" / "good" / (name(i) + ".png"), to_raw(render_sample(c, Split::Train, i).image));
        }
        for (std::size_t i = 0; i < c.test_good; ++i) {
            write_png(base / "test" / "good" / (name(i) + ".png"), to_raw(render_sample(c, Split::TestGood, i).image));
        }
        std::vector<std::size_t> per_type(3, 0);
        for (std::size_t i = 0; i < c.test_defective; ++i) {
            const auto s = render_sample(c, Split::TestDefective, i);
            const std::string d = defect_name(s.defect);
            const std::string stem = name(per_type[std::size_t(s.defect)]++);
            mkdir(base / "test" / d);
            mkdir(base / "ground_truth" / d);
            write_png(base / "test" / d / (stem + ".png"), to_raw(s.image));
            write_png(base / "ground_truth" / d / (stem + "_mask.png"), to_raw(s.mask));
        }
        std::vector<std::string> defects;
        for (auto d : c.defects) defects.push_back(defect_name(d));
        manifest["categories"].push_back({{"category", c.category},
                                          {"style", style_name(c.style)},
                                          {"seed", c.seed},
                                          {"image_size", c.image_size},
                                          {"train_count", c.train_count},
                                          {"test_good", c.test_good},
                                          {"test_defective", c.test_defective},
                                          {"defects", defects},
                                          {"defect_min", c.defect_min},
                                          {"defect_max", c.defect_max}});
    }
    std::ofstream out(root / "generation.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (root / "generation.json").string());
    out << manifest.dump(2) << '\n';
}

}  // namespace psvdd::data
