#include "psvdd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <sstream>

namespace psvdd::evaluation {

using numerics::Shape;
using numerics::Var;

namespace {

// Midranks (1-based) of values, ties sharing the mean of their positions.
std::vector<double> midranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> rank(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double mid = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    return rank;
}

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite score");
    }
}

}  // namespace

double auroc(const LabeledScores& s) {
    if (s.normal.empty() || s.abnormal.empty()) throw ArgumentError("auroc: need at least one normal and one abnormal score");
    require_finite(s.normal, "auroc");
    require_finite(s.abnormal, "auroc");
    std::vector<double> all(s.normal);
    all.insert(all.end(), s.abnormal.begin(), s.abnormal.end());
    const auto rank = midranks(all);
    double abnormal_rank_sum = 0;
    for (std::size_t i = s.normal.size(); i < all.size(); ++i) abnormal_rank_sum += rank[i];
    const double na = double(s.abnormal.size()), nn = double(s.normal.size());
    return (abnormal_rank_sum - na * (na + 1) / 2) / (na * nn);
}

double pixel_auroc(std::span<const inference::AnomalyMap> maps, std::span<const data::Mask> masks) {
    if (maps.size() != masks.size()) throw DimensionError("pixel_auroc: one mask per map");
    LabeledScores pooled;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].height != masks[i].height || maps[i].width != masks[i].width) {
            throw DimensionError("pixel_auroc: map and mask sizes differ for image " + std::to_string(i));
        }
        for (std::size_t p = 0; p < maps[i].values.size(); ++p) {
            (masks[i].values[p] ? pooled.abnormal : pooled.normal).push_back(maps[i].values[p]);
        }
    }
    if (pooled.normal.empty() || pooled.abnormal.empty()) {
        throw ArgumentError("pixel_auroc: pooled pixels contain a single class");
    }
    return auroc(pooled);
}

double intrinsic_dimension(const Tensor<float>& points) {
    if (points.rank() != 2) throw DimensionError("intrinsic_dimension: points must be [N,D]");
    const std::size_t d = points.dim(1);
    std::vector<std::vector<float>> rows;
    for (std::size_t i = 0; i < points.dim(0); ++i) rows.emplace_back(points.data() + i * d, points.data() + (i + 1) * d);
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    const std::size_t n = rows.size();
    if (n < 10) throw ArgumentError("intrinsic_dimension: need at least 10 distinct points, got " + std::to_string(n));
    double log_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double d1 = INFINITY, d2 = INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double s = 0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = double(rows[i][k]) - double(rows[j][k]);
                s += diff * diff;
            }
            if (s < d1) {
                d2 = d1;
                d1 = s;
            } else if (s < d2) {
                d2 = s;
            }
        }
        log_sum += 0.5 * std::log(d2 / d1);
    }
    if (!(log_sum > 0)) throw NumericalError("intrinsic_dimension: degenerate neighbour ratios");
    return double(n - 1) / log_sum;
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("spearman: lengths differ");
    if (a.size() < 2) throw ArgumentError("spearman: need at least 2 pairs");
    const auto ra = midranks(a), rb = midranks(b);
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) throw ArgumentError("spearman: constant input");
    return sab / std::sqrt(saa * sbb);
}

double random_conv_distance_correlation(std::size_t pairs, std::uint64_t seed) {
    constexpr std::size_t k = 3, cin = 3, cout = 16, size = 32;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> he(0.0f, std::sqrt(2.0f / float(k * k * cin)));
    Tensor<float> w({k, k, cin, cout});
    for (auto& v : w.values()) v = he(rng);
    const auto weight = Var<float>::constant(w);
    const auto bias = Var<float>::constant(Tensor<float>({cout}));
    auto features = [&](const Tensor<float>& p) {
        return numerics::leaky_relu(numerics::conv2d(Var<float>::constant(p), weight, bias, 1), 0.1f).value();
    };
    std::uniform_real_distribution<float> u(0.0f, 1.0f), sig(0.0f, 0.5f);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    std::vector<double> raw, feat;
    for (std::size_t t = 0; t < pairs; ++t) {
        Tensor<float> p1({size, size, cin}), p2({size, size, cin});
        for (auto& v : p1.values()) v = u(rng);
        const float sigma = sig(rng);
        for (std::size_t i = 0; i < p1.size(); ++i) p2[i] = std::clamp(p1[i] + sigma * noise(rng), 0.0f, 1.0f);
        const auto h1 = features(p1), h2 = features(p2);
        double dp = 0, dh = 0;
        for (std::size_t i = 0; i < p1.size(); ++i) dp += double(p1[i] - p2[i]) * (p1[i] - p2[i]);
        for (std::size_t i = 0; i < h1.size(); ++i) dh += double(h1[i] - h2[i]) * (h1[i] - h2[i]);
        raw.push_back(std::sqrt(dp));
        feat.push_back(std::sqrt(dh));
    }
    return spearman(raw, feat);
}

// --- pipeline evaluation ---------------------------------------------------

MethodScores score_maps(const std::string& method, std::span<const data::ImageRecord> test,
                        std::span<const inference::AnomalyMap> maps) {
    if (test.size() != maps.size()) throw DimensionError("score_maps: one map per test image");
    MethodScores out;
    out.method = method;
    LabeledScores image;
    std::vector<data::Mask> masks;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const bool bad = test[i].label == data::Label::Abnormal;
        const double s = inference::image_score(maps[i]);
        out.images.push_back({test[i].id, bad, s});
        (bad ? image.abnormal : image.normal).push_back(s);
        masks.push_back(test[i].mask ? *test[i].mask : data::Mask(maps[i].height, maps[i].width));
    }
    out.image_auroc = auroc(image);
    out.pixel_auroc = pixel_auroc(maps, masks);
    return out;
}

MethodScores evaluate_detector(const std::string& method, const inference::Detector& detector,
                               std::span<const data::ImageRecord> test) {
    std::vector<inference::AnomalyMap> maps;
    for (const auto& r : test) maps.push_back(inference::inspect_image(r.pixels, detector).multi);
    return score_maps(method, test, maps);
}

namespace {

std::vector<Tensor<float>> pixels_of(std::span<const data::ImageRecord> records) {
    std::vector<Tensor<float>> out;
    for (const auto& r : records) out.push_back(r.pixels);
    return out;
}

}  // namespace

MethodScores evaluate_featurizers(const std::string& method, const inference::Featurizer& small,
                                  const inference::Featurizer& big, std::span<const data::ImageRecord> train,
                                  std::span<const data::ImageRecord> test, const index::IndexBuildConfig& config,
                                  std::size_t threads) {
    const auto images = pixels_of(train);
    inference::Detector det{inference::small_scale(small), inference::big_scale(big), threads};
    const auto small_idx = inference::index_images(images, det.small, config);
    const auto big_idx = inference::index_images(images, det.big, config);
    det.small.index = &small_idx;
    det.big.index = &big_idx;
    return evaluate_detector(method, det, test);
}

MethodScores baseline_raw_patch(std::span<const data::ImageRecord> train, std::span<const data::ImageRecord> test,
                                const index::IndexBuildConfig& config, std::size_t threads) {
    const auto raw = inference::raw_featurizer();
    return evaluate_featurizers("raw_patch", raw, raw, train, test, config, threads);
}

MethodScores baseline_random_encoder(std::span<const data::ImageRecord> train,
                                     std::span<const data::ImageRecord> test, const model::EncoderConfig& encoder,
                                     std::uint64_t seed, const index::IndexBuildConfig& config, std::size_t threads) {
    const auto enc = model::init_random<float>(encoder, seed).encoder;
    return evaluate_featurizers("random_encoder", inference::encoder_featurizer(enc, model::kSmallPatch),
                                inference::encoder_featurizer(enc, model::kBigPatch), train, test, config, threads);
}

double index_intrinsic_dimension(const index::FeatureIndex& idx, std::size_t max_points) {
    const std::size_t n = idx.size(), d = idx.dim();
    const std::size_t take = std::min(n, std::max<std::size_t>(max_points, 1));
    Tensor<float> pts({take, d});
    for (std::size_t i = 0; i < take; ++i) {
        const auto f = idx.feature(i * n / take);
        std::copy(f.begin(), f.end(), pts.data() + i * d);
    }
    return intrinsic_dimension(pts);
}

// --- reports ---------------------------------------------------------------

std::string report_json(const EvalReport& report) {
    nlohmann::json j;
    j["id_estimator"] = report.id_estimator;
    j["pixel_auroc_pooling"] = report.pixel_pooling;
    j["categories"] = nlohmann::json::array();
    for (const auto& c : report.categories) {
        nlohmann::json cj;
        cj["category"] = c.category;
        if (c.id_small) cj["intrinsic_dimension_small"] = *c.id_small;
        if (c.id_big) cj["intrinsic_dimension_big"] = *c.id_big;
        for (const auto& m : c.methods) {
            cj["methods"].push_back({{"method", m.method}, {"image_auroc", m.image_auroc}, {"pixel_auroc", m.pixel_auroc}});
        }
        j["categories"].push_back(cj);
    }
    return j.dump(2) + "\n";
}

std::string report_text(const EvalReport& report) {
    std::ostringstream out;
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3f", v);
        return std::string(buf);
    };
    out << std::left << std::setw(16) << "category" << std::setw(16) << "method" << std::right << std::setw(8) << "Det."
        << std::setw(8) << "Seg." << std::setw(10) << "ID small" << std::setw(10) << "ID big" << '\n';
    double det = 0, seg = 0;
    std::size_t n = 0;
    for (const auto& c : report.categories) {
        for (std::size_t k = 0; k < c.methods.size(); ++k) {
            const auto& m = c.methods[k];
            out << std::left << std::setw(16) << c.category << std::setw(16) << m.method << std::right << std::setw(8)
                << num(m.image_auroc) << std::setw(8) << num(m.pixel_auroc);
            if (k == 0) {
                out << std::setw(10) << (c.id_small ? num(*c.id_small) : "-") << std::setw(10)
                    << (c.id_big ? num(*c.id_big) : "-");
                det += m.image_auroc;
                seg += m.pixel_auroc;
                ++n;
            }
            out << '\n';
        }
    }
    if (n > 1) {
        out << std::left << std::setw(16) << "mean" << std::setw(16) << "" << std::right << std::setw(8) << num(det / n)
            << std::setw(8) << num(seg / n) << '\n';
    }
    out << "ID estimator: " << report.id_estimator << "; pixel AUROC " << report.pixel_pooling << '\n';
    return out.str();
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    auto write = [&](const std::filesystem::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::trunc);
        if (!out || !(out << text)) throw IoError("cannot write " + p.string());
    };
    write(dir / "report.json", report_json(report));
    write(dir / "report.txt", report_text(report));
    for (const auto& c : report.categories) {
        std::ostringstream csv;
        csv << "method,image,label,score\n" << std::setprecision(9);
        for (const auto& m : c.methods) {
            for (const auto& im : m.images) {
                csv << m.method << ',' << im.id << ',' << (im.abnormal ? "abnormal" : "normal") << ',' << im.score << '\n';
            }
        }
        write(dir / ("scores_" + c.category + ".csv"), csv.str());
    }
}

}  // namespace psvdd::evaluation
