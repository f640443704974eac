#include "psvdd/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <fstream>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iterator>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <thread>

#include "psvdd/data.hpp"
#include "psvdd/evaluation.hpp"
#include "psvdd/feature_index.hpp"
#include "psvdd/inference.hpp"
#include "psvdd/model.hpp"
#include "psvdd/numerics/serialize.hpp"
#include "psvdd/training.hpp"

namespace psvdd::cli {

namespace fs = std::filesystem;
using numerics::Tensor;

namespace {

// --- key table -------------------------------------------------------------

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
        if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
        x = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size()) throw ArgumentError(key + ": expected a non-negative integer, got '" + v + "'");
    return std::size_t(x);
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(x)) {
        throw ArgumentError(key + ": expected a finite number, got '" + v + "'");
    }
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ArgumentError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt_double(double x) {
    std::ostringstream s;
    s << std::setprecision(17) << x;
    return s.str();
}

struct Key {
    const char* name;
    const char* help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define PSVDD_STR(field, help)                                                            \
    Key {                                                                                 \
        #field, help, [](RunConfig& c, const std::string& v) { c.field = v; },           \
            [](const RunConfig& c) { return c.field; }                                    \
    }
#define PSVDD_SIZE(field, help)                                                                    \
    Key {                                                                                          \
        #field, help, [](RunConfig& c, const std::string& v) { c.field = parse_size(#field, v); }, \
            [](const RunConfig& c) { return std::to_string(c.field); }                             \
    }
#define PSVDD_DOUBLE(field, help)                                                                    \
    Key {                                                                                            \
        #field, help, [](RunConfig& c, const std::string& v) { c.field = parse_double(#field, v); }, \
            [](const RunConfig& c) { return fmt_double(c.field); }                                   \
    }
#define PSVDD_BOOL(field, help)                                                                    \
    Key {                                                                                          \
        #field, help, [](RunConfig& c, const std::string& v) { c.field = parse_bool(#field, v); }, \
            [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }             \
    }

const std::vector<Key>& keys() {
    static const std::vector<Key> table{
        PSVDD_STR(data_root, "dataset root (MVTec layout); synth writes here"),
        PSVDD_STR(category, "category under data_root used by train/index/infer/eval"),
        PSVDD_STR(out_dir, "run directory for checkpoints, indexes, maps and reports"),
        PSVDD_SIZE(seed, "seed for data generation, initialisation, sampling and index trees"),
        PSVDD_SIZE(image_size, "images are resized to image_size x image_size"),
        PSVDD_SIZE(threads, "worker threads for indexing and inference (0 = all cores)"),
        PSVDD_STR(synth_categories, "synth: comma list of name:style (styles stripes, checker, blobs, object)"),
        PSVDD_SIZE(train_count, "synth: normal training images per category"),
        PSVDD_SIZE(test_good, "synth: normal test images per category"),
        PSVDD_SIZE(test_defective, "synth: defective test images per category"),
        PSVDD_SIZE(defect_min, "synth: smallest defect extent in pixels"),
        PSVDD_SIZE(defect_max, "synth: largest defect extent in pixels"),
        PSVDD_DOUBLE(lambda, "weight of the pairwise SVDD term against the position loss"),
        PSVDD_SIZE(embed_dim, "feature dimension D"),
        PSVDD_STR(scales, "scales to train: small, big or small,big"),
        PSVDD_SIZE(steps_small, "optimisation steps at K=32"),
        PSVDD_SIZE(steps_big, "optimisation steps at K=64"),
        PSVDD_SIZE(batch_size, "pairs per loss term per step"),
        PSVDD_DOUBLE(learning_rate, "Adam learning rate"),
        PSVDD_STR(objective, "patch_svdd or classic (distance to a fixed centre, no position loss)"),
        PSVDD_BOOL(joint, "also update the small encoder while training K=64"),
        PSVDD_BOOL(jitter, "jitter the pairwise SVDD partners by up to K/32 pixels"),
        PSVDD_DOUBLE(rgb_amplitude, "per-channel colour perturbation for position pairs"),
        PSVDD_STR(model, "checkpoint path (default <out_dir>/model.psvdd)"),
        PSVDD_STR(index_mode, "approx (random projection forest) or exact"),
        PSVDD_SIZE(trees, "approx: number of projection trees"),
        PSVDD_SIZE(leaf_size, "approx: maximum points per leaf"),
        PSVDD_SIZE(search_budget, "approx: leaves scanned per query"),
        PSVDD_STR(index_dir, "directory holding index_small.psix/index_big.psix (default <out_dir>)"),
        PSVDD_STR(split, "infer: dataset split to score, test or train"),
        PSVDD_STR(images, "infer: directory of PNG files to score instead of a dataset split"),
        PSVDD_SIZE(id_max_points, "eval: features sampled per scale for the intrinsic dimension"),
    };
    return table;
}

#undef PSVDD_STR
#undef PSVDD_SIZE
#undef PSVDD_DOUBLE
#undef PSVDD_BOOL

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, ',');) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<data::SyntheticConfig> synth_configs(const RunConfig& c) {
    std::vector<data::SyntheticConfig> out;
    std::size_t k = 0;
    for (const auto& item : split_list(c.synth_categories)) {
        const auto colon = item.find(':');
        if (colon == std::string::npos || colon == 0) {
            throw ArgumentError("synth_categories: expected name:style, got '" + item + "'");
        }
        data::SyntheticConfig s;
        s.category = item.substr(0, colon);
        s.style = data::parse_style(item.substr(colon + 1));
        s.train_count = c.train_count;
        s.test_good = c.test_good;
        s.test_defective = c.test_defective;
        s.defect_min = c.defect_min;
        s.defect_max = c.defect_max;
        s.image_size = c.image_size;
        s.seed = c.seed + 1000 * k++;
        s.validate();
        out.push_back(s);
    }
    if (out.empty()) throw ArgumentError("synth_categories is empty");
    return out;
}

// --- error handling and file helpers ---------------------------------------

int guarded(const char* name, std::ostream& log, const std::function<int()>& body) {
    try {
        return body();
    } catch (const NumericalError& e) {
        log << name << ": numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const IoError& e) {
        log << name << ": I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        log << name << ": I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        log << name << ": invalid configuration or input: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        log << name << ": error: " << e.what() << '\n';
        return kExitIo;
    }
}

void make_dirs(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void refuse_existing(const std::vector<fs::path>& outputs, const Flags& flags) {
    if (flags.overwrite) return;
    for (const auto& p : outputs) {
        if (fs::exists(p)) throw ArgumentError(p.string() + " exists (pass --overwrite to replace it)");
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text) || !out.flush()) throw IoError("cannot write " + path.string());
}

std::size_t worker_count(const RunConfig& c, const Flags& flags) {
    if (flags.deterministic) return 1;
    if (c.threads > 0) return c.threads;
    return std::max(1u, std::thread::hardware_concurrency());
}

nlohmann::json run_manifest(const std::string& command, const RunConfig& c, const Flags& flags) {
    nlohmann::json j;
    j["command"] = command;
    nlohmann::json cfg;
    for (const auto& k : keys()) cfg[k.name] = k.get(c);
    j["config"] = cfg;
    j["flags"] = {{"deterministic", flags.deterministic},
                  {"overwrite", flags.overwrite},
                  {"baseline_raw", flags.baseline_raw},
                  {"baseline_random", flags.baseline_random}};
    j["formats"] = {{"parameters", numerics::kParamFormatVersion},
                    {"architecture", model::kArchitectureVersion},
                    {"index", index::kIndexFormatVersion},
                    {"map", inference::kMapFormatVersion}};
    return j;
}

void write_run_manifest(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

data::Dataset dataset_of(const RunConfig& c) {
    if (c.category.empty()) throw ArgumentError("category is not set");
    return data::load_dataset(c.data_root, c.category, c.image_size);
}

std::vector<Tensor<float>> train_images(const data::Dataset& ds) {
    if (ds.train.empty()) throw ArgumentError("the training split is empty");
    std::vector<Tensor<float>> out;
    for (const auto& r : ds.train) out.push_back(r.pixels);
    return out;
}

index::IndexBuildConfig index_config(const RunConfig& c) {
    index::IndexBuildConfig ic;
    ic.mode = c.index_mode == "exact" ? index::IndexMode::Exact : index::IndexMode::Approx;
    ic.trees = c.trees;
    ic.leaf_size = c.leaf_size;
    ic.search_budget = c.search_budget;
    ic.seed = c.seed;
    ic.validate();
    return ic;
}

model::EncoderConfig encoder_config(const RunConfig& c) {
    model::EncoderConfig ec;
    ec.embed_dim = c.embed_dim;
    ec.seed = c.seed;
    ec.validate();
    return ec;
}

model::ModelBundle require_model(const RunConfig& c) {
    const auto path = model_path(c);
    if (!fs::exists(path)) throw ArgumentError("model not found: " + path.string());
    return model::load_model(path);
}

index::FeatureIndex require_index(const RunConfig& c, const std::string& scale) {
    const auto path = index_path(c, scale);
    if (!fs::exists(path)) throw ArgumentError("index not found: " + path.string());
    return index::FeatureIndex::load(path);
}

std::string map_stem(const std::string& id) {
    std::string s = id;
    std::replace(s.begin(), s.end(), '/', '_');
    return s;
}

std::vector<std::pair<fs::path, std::string>> files_below(const fs::path& root) {
    std::vector<std::pair<fs::path, std::string>> out;
    if (!fs::exists(root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        out.emplace_back(fs::relative(e.path(), root), std::string(std::istreambuf_iterator<char>(in), {}));
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

// --- configuration ---------------------------------------------------------

void RunConfig::validate() const {
    if (image_size < 64) throw ArgumentError("image_size must be at least 64 (one K=64 patch)");
    if (embed_dim == 0) throw ArgumentError("embed_dim must be positive");
    if (!std::isfinite(lambda) || lambda < 0) throw ArgumentError("lambda must be non-negative");
    if (!(learning_rate > 0)) throw ArgumentError("learning_rate must be positive");
    if (batch_size == 0) throw ArgumentError("batch_size must be positive");
    if (objective != "patch_svdd" && objective != "classic") {
        throw ArgumentError("objective must be patch_svdd or classic, got '" + objective + "'");
    }
    if (index_mode != "approx" && index_mode != "exact") {
        throw ArgumentError("index_mode must be approx or exact, got '" + index_mode + "'");
    }
    if (split != "test" && split != "train") throw ArgumentError("split must be test or train, got '" + split + "'");
    const auto sc = split_list(scales);
    if (sc.empty()) throw ArgumentError("scales is empty");
    for (const auto& s : sc) {
        if (s != "small" && s != "big") throw ArgumentError("scales: unknown scale '" + s + "'");
    }
    if (rgb_amplitude < 0 || rgb_amplitude > 1) throw ArgumentError("rgb_amplitude must lie in [0,1]");
    if (id_max_points < 10) throw ArgumentError("id_max_points must be at least 10");
    if (out_dir.empty()) throw ArgumentError("out_dir is empty");
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
    for (const auto& k : keys()) {
        if (key == k.name) {
            k.set(config, value);
            return;
        }
    }
    throw ArgumentError("unknown configuration key '" + key + "'");
}

RunConfig load_config(const fs::path& file, std::span<const std::string> overrides) {
    RunConfig c;
    auto apply_line = [&](const std::string& raw, const std::string& where) {
        const auto line = trim(raw.substr(0, raw.find('#')));
        if (line.empty()) return;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ArgumentError(where + ": expected key=value, got '" + line + "'");
        apply_setting(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    };
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw ArgumentError("cannot open config file " + file.string());
        std::size_t n = 0;
        for (std::string line; std::getline(in, line);) apply_line(line, file.string() + ":" + std::to_string(++n));
    }
    for (const auto& o : overrides) apply_line(o, "override");
    c.validate();
    return c;
}

std::string dump_config(const RunConfig& config) {
    std::string out;
    for (const auto& k : keys()) out += std::string(k.name) + "=" + k.get(config) + "\n";
    return out;
}

std::string config_help() {
    const RunConfig defaults;
    std::ostringstream out;
    for (const auto& k : keys()) {
        out << "  " << std::left << std::setw(18) << k.name << k.help << " [" << k.get(defaults) << "]\n";
    }
    return out.str();
}

fs::path model_path(const RunConfig& c) { return c.model.empty() ? fs::path(c.out_dir) / "model.psvdd" : fs::path(c.model); }

fs::path index_path(const RunConfig& c, const std::string& scale) {
    return (c.index_dir.empty() ? fs::path(c.out_dir) : fs::path(c.index_dir)) / ("index_" + scale + ".psix");
}

// --- commands --------------------------------------------------------------

int cmd_synth(const RunConfig& config, const Flags& flags, std::ostream& log) {
    return guarded("synth", log, [&] {
        const auto cats = synth_configs(config);
        const fs::path root = config.data_root;
        if (flags.check) {
            const fs::path scratch = root.string() + ".check";
            fs::remove_all(scratch);
            data::generate_synthetic(cats, scratch);
            const auto want = files_below(scratch);
            std::vector<std::pair<fs::path, std::string>> have;
            for (const auto& f : files_below(root)) {
                if (f.first == "generation.json" || std::any_of(cats.begin(), cats.end(), [&](const auto& s) {
                        return *f.first.begin() == s.category;
                    })) {
                    have.push_back(f);
                }
            }
            fs::remove_all(scratch);
            if (have != want) {
                log << "synth --check: " << root.string() << " differs from a fresh generation\n";
                return kExitCheckFailed;
            }
            log << "synth --check: " << want.size() << " files identical\n";
            return kExitOk;
        }
        std::vector<fs::path> outputs{root / "generation.json"};
        for (const auto& s : cats) outputs.push_back(root / s.category);
        refuse_existing(outputs, flags);
        for (const auto& s : cats) fs::remove_all(root / s.category);
        data::generate_synthetic(cats, root);
        for (const auto& s : cats) {
            log << "synth: " << s.category << " (" << data::style_name(s.style) << ") " << s.train_count << " train, "
                << s.test_good + s.test_defective << " test\n";
        }
        return kExitOk;
    });
}

int cmd_train(const RunConfig& config, const Flags& flags, std::ostream& log) {
    return guarded("train", log, [&] {
        const fs::path out = config.out_dir;
        const auto mpath = model_path(config);
        refuse_existing({mpath, out / "train_manifest.json"}, flags);
        const auto images = train_images(dataset_of(config));

        training::TrainConfig tc;
        const auto sc = split_list(config.scales);
        tc.train_small = std::count(sc.begin(), sc.end(), "small") > 0;
        tc.train_big = std::count(sc.begin(), sc.end(), "big") > 0;
        tc.steps_small = config.steps_small;
        tc.steps_big = config.steps_big;
        tc.batch_size = config.batch_size;
        tc.weights.lambda = config.lambda;
        tc.adam.learning_rate = config.learning_rate;
        tc.seed = config.seed;
        tc.joint = config.joint;
        tc.objective = config.objective == "classic" ? training::Objective::SvddClassic : training::Objective::PatchSvdd;
        tc.jitter = config.jitter;
        tc.rgb_amplitude = float(config.rgb_amplitude);
        tc.validate();

        make_dirs(out);
        if (mpath.has_parent_path()) make_dirs(mpath.parent_path());
        const auto start = std::chrono::steady_clock::now();
        auto result = training::train(images, tc, encoder_config(config), [&](const training::LossRecord& r) {
            if (r.step % 100 == 0) {
                log << "train: K=" << r.scale << " step " << r.step << " svdd " << r.svdd << " ssl " << r.ssl << '\n';
            }
        });
        model::save_model(mpath, result.model);
        nlohmann::json outputs = {{"model", mpath.string()}};
        for (std::size_t k : {model::kSmallPatch, model::kBigPatch}) {
            const bool trained = k == model::kSmallPatch ? tc.train_small : tc.train_big;
            if (!trained) continue;
            const auto csv = out / ("loss_" + std::string(k == model::kSmallPatch ? "small" : "big") + ".csv");
            training::write_loss_csv(csv, result.history, k);
            outputs[k == model::kSmallPatch ? "loss_small" : "loss_big"] = csv.string();
        }
        auto manifest = run_manifest("train", config, flags);
        manifest["outputs"] = outputs;
        manifest["train_images"] = images.size();
        write_run_manifest(out / "train_manifest.json", manifest);
        log << "train: wrote " << mpath.string() << " in "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
        return kExitOk;
    });
}

int cmd_index(const RunConfig& config, const Flags& flags, std::ostream& log) {
    return guarded("index", log, [&] {
        const auto model = require_model(config);
        const auto ic = index_config(config);
        const auto small_path = index_path(config, "small"), big_path = index_path(config, "big");
        const fs::path out = config.out_dir;
        refuse_existing({small_path, big_path, out / "index_manifest.json"}, flags);
        const auto images = train_images(dataset_of(config));
        make_dirs(out);
        make_dirs(small_path.parent_path());

        const auto small = inference::small_scale(inference::encoder_featurizer(model.encoder, model::kSmallPatch));
        const auto big = inference::big_scale(inference::encoder_featurizer(model.encoder, model::kBigPatch));
        const auto si = inference::index_images(images, small, ic);
        si.save(small_path);
        const auto bi = inference::index_images(images, big, ic);
        bi.save(big_path);
        auto manifest = run_manifest("index", config, flags);
        manifest["outputs"] = {{"index_small", small_path.string()}, {"index_big", big_path.string()}};
        manifest["features"] = {{"small", si.size()}, {"big", bi.size()}};
        write_run_manifest(out / "index_manifest.json", manifest);
        log << "index: " << si.size() << " small and " << bi.size() << " big features\n";
        return kExitOk;
    });
}

int cmd_infer(const RunConfig& config, const Flags& flags, std::ostream& log) {
    return guarded("infer", log, [&] {
        const auto model = require_model(config);
        const auto si = require_index(config, "small");
        const auto bi = require_index(config, "big");

        std::vector<data::ImageRecord> records;
        if (!config.images.empty()) {
            if (!fs::is_directory(config.images)) throw ArgumentError("images is not a directory: " + config.images);
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(config.images)) {
                if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            if (files.empty()) throw ArgumentError("no PNG files in " + config.images);
            for (const auto& f : files) {
                data::ImageRecord r;
                r.id = "images/" + f.stem().string();
                r.defect = "unknown";
                r.pixels = data::preprocess(data::read_png(f), config.image_size);
                records.push_back(std::move(r));
            }
        } else {
            auto ds = dataset_of(config);
            records = config.split == "train" ? std::move(ds.train) : std::move(ds.test);
            if (records.empty()) throw ArgumentError("the " + config.split + " split is empty");
        }

        const fs::path out = config.out_dir;
        refuse_existing({out / "scores.jsonl", out / "infer_manifest.json"}, flags);
        make_dirs(out / "maps");

        inference::Detector det{
            inference::small_scale(inference::encoder_featurizer(model.encoder, model::kSmallPatch), &si),
            inference::big_scale(inference::encoder_featurizer(model.encoder, model::kBigPatch), &bi),
            worker_count(config, flags)};
        std::vector<inference::ManifestEntry> entries;
        for (const auto& r : records) {
            const auto start = std::chrono::steady_clock::now();
            const auto result = inference::inspect_image(r.pixels, det);
            const std::string stem = "maps/" + map_stem(r.id);
            inference::write_map_raw(out / (stem + ".raw"), result.multi);
            inference::write_map_pgm(out / (stem + ".pgm"), result.multi);
            entries.push_back({r.id, r.category.empty() ? config.category : r.category, r.defect, result.image_score,
                               stem + ".raw", stem + ".pgm"});
            log << "infer: " << r.id << " score " << result.image_score << " ("
                << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s)\n";
        }
        inference::write_manifest(out / "scores.jsonl", entries);
        auto manifest = run_manifest("infer", config, flags);
        manifest["outputs"] = {{"scores", (out / "scores.jsonl").string()}, {"maps", (out / "maps").string()}};
        manifest["images"] = entries.size();
        write_run_manifest(out / "infer_manifest.json", manifest);
        return kExitOk;
    });
}

int cmd_eval(const RunConfig& config, const Flags& flags, std::ostream& log) {
    return guarded("eval", log, [&] {
        const fs::path out = config.out_dir;
        const fs::path scores = out / "scores.jsonl";
        if (!fs::exists(scores)) throw ArgumentError("no inference output at " + scores.string());
        const auto ds = dataset_of(config);
        if (ds.test.empty()) throw ArgumentError("the test split is empty");
        const fs::path report_dir = out / "eval";
        refuse_existing({report_dir / "report.json"}, flags);

        std::map<std::string, inference::ManifestEntry> by_id;
        for (const auto& e : inference::read_manifest(scores)) by_id[e.image_id] = e;
        std::vector<inference::AnomalyMap> maps;
        for (const auto& r : ds.test) {
            const auto it = by_id.find(r.id);
            if (it == by_id.end()) throw ArgumentError("no inference result for test image " + r.id);
            fs::path p = it->second.map_raw;
            maps.push_back(inference::read_map_raw(p.is_absolute() ? p : out / p));
        }

        evaluation::CategoryReport cat;
        cat.category = config.category;
        cat.methods.push_back(evaluation::score_maps("patch_svdd", ds.test, maps));
        for (const auto& [scale, slot] : {std::pair{"small", &cat.id_small}, std::pair{"big", &cat.id_big}}) {
            const auto p = index_path(config, scale);
            if (fs::exists(p)) *slot = evaluation::index_intrinsic_dimension(index::FeatureIndex::load(p), config.id_max_points);
        }
        const auto threads = worker_count(config, flags);
        if (flags.baseline_raw) {
            log << "eval: raw patch baseline\n";
            cat.methods.push_back(evaluation::baseline_raw_patch(ds.train, ds.test, index_config(config), threads));
        }
        if (flags.baseline_random) {
            log << "eval: random encoder baseline\n";
            cat.methods.push_back(evaluation::baseline_random_encoder(ds.train, ds.test, encoder_config(config),
                                                                      config.seed, index_config(config), threads));
        }
        evaluation::EvalReport report;
        report.categories.push_back(cat);
        evaluation::write_report(report_dir, report);
        auto manifest = run_manifest("eval", config, flags);
        manifest["outputs"] = {{"report", (report_dir / "report.json").string()}};
        write_run_manifest(out / "eval_manifest.json", manifest);
        log << evaluation::report_text(report);
        return kExitOk;
    });
}

// --- command line ----------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Patch-level anomaly detection and segmentation with nearest-neighbour patch features."};
    app.require_subcommand(1);
    app.footer("Configuration keys (file lines or key=value arguments, later settings win):\n" + config_help() +
               "\nExit codes: 0 ok, 1 --check mismatch, 2 usage or configuration, 3 I/O, 4 numerical failure.");
    Flags flags;
    std::vector<std::string> items;
    struct Command {
        const char* name;
        const char* help;
        int (*fn)(const RunConfig&, const Flags&, std::ostream&);
    };
    const std::vector<Command> commands{
        {"synth", "generate the synthetic dataset under data_root", cmd_synth},
        {"train", "train both encoder scales on <data_root>/<category>/train", cmd_train},
        {"index", "build the nearest-neighbour indexes of normal features", cmd_index},
        {"infer", "write anomaly maps and a JSON-lines score manifest", cmd_infer},
        {"eval", "image and pixel AUROC, intrinsic dimensions, optional baselines", cmd_eval},
    };
    std::vector<CLI::App*> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("args", items, "[config-file] [key=value ...]");
        sub->add_flag("--deterministic", flags.deterministic, "single worker, byte-identical outputs for a fixed seed");
        sub->add_flag("--overwrite", flags.overwrite, "replace existing outputs");
        if (std::string(c.name) == "synth") {
            sub->add_flag("--check", flags.check, "regenerate and compare with data_root instead of writing");
        }
        if (std::string(c.name) == "eval") {
            sub->add_flag("--baseline-raw", flags.baseline_raw, "also evaluate raw-patch nearest neighbours");
            sub->add_flag("--baseline-random", flags.baseline_random, "also evaluate an untrained random encoder");
        }
        subs.push_back(sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        const auto active = app.get_subcommands();
        out << (active.empty() ? app.help() : active.front()->help());
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n" << "run with --help for usage\n";
        return kExitConfig;
    }
    for (std::size_t i = 0; i < subs.size(); ++i) {
        if (!subs[i]->parsed()) continue;
        fs::path file;
        std::vector<std::string> overrides;
        for (const auto& item : items) {
            if (item.find('=') != std::string::npos) {
                overrides.push_back(item);
            } else if (file.empty()) {
                file = item;
            } else {
                err << "more than one config file given ('" << file.string() << "', '" << item << "')\n";
                return kExitConfig;
            }
        }
        RunConfig config;
        try {
            config = load_config(file, overrides);
        } catch (const std::exception& e) {
            err << commands[i].name << ": " << e.what() << '\n';
            return kExitConfig;
        }
        return commands[i].fn(config, flags, err);
    }
    return kExitConfig;
}

}  // namespace psvdd::cli
