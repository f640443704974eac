#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace psvdd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // --check found differences
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

/// Every knob of every command. Keys (see config_help) map 1:1 to fields.
struct RunConfig {
    std::string data_root = "data";
    std::string category;
    std::string out_dir = "run";
    std::uint64_t seed = 0;
    std::size_t image_size = 256;
    std::size_t threads = 0;  // 0: all hardware threads

    // synth
    std::string synth_categories = "object:object,texture:blobs";
    std::size_t train_count = 32;
    std::size_t test_good = 8;
    std::size_t test_defective = 8;
    std::size_t defect_min = 16;
    std::size_t defect_max = 40;

    // train
    double lambda = 1.0;
    std::size_t embed_dim = 64;
    std::string scales = "small,big";
    std::size_t steps_small = 1000;
    std::size_t steps_big = 1000;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::string objective = "patch_svdd";
    bool joint = false;
    bool jitter = true;
    double rgb_amplitude = 0.1;

    // index
    std::string model;  // default <out_dir>/model.psvdd
    std::string index_mode = "approx";
    std::size_t trees = 8;
    std::size_t leaf_size = 32;
    std::size_t search_budget = 512;

    // infer / eval
    std::string index_dir;  // default <out_dir>
    std::string split = "test";
    std::string images;  // directory of PNGs instead of a dataset split
    std::size_t id_max_points = 2000;

    void validate() const;
};

struct Flags {
    bool deterministic = false;
    bool overwrite = false;
    bool check = false;
    bool baseline_raw = false;
    bool baseline_random = false;
};

/// Sets one key from its text value; unknown keys and bad values throw ArgumentError.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
/// `file` (flat key=value, '#' comments; empty path for none) then the
/// overrides in order, later settings winning. The result is validated.
RunConfig load_config(const std::filesystem::path& file, std::span<const std::string> overrides);
/// key=value lines for every key, in table order.
std::string dump_config(const RunConfig& config);
std::string config_help();

std::filesystem::path model_path(const RunConfig& config);
std::filesystem::path index_path(const RunConfig& config, const std::string& scale);

// Each command logs to `log` and returns an exit code; errors never escape.
int cmd_synth(const RunConfig& config, const Flags& flags, std::ostream& log);
int cmd_train(const RunConfig& config, const Flags& flags, std::ostream& log);
int cmd_index(const RunConfig& config, const Flags& flags, std::ostream& log);
int cmd_infer(const RunConfig& config, const Flags& flags, std::ostream& log);
int cmd_eval(const RunConfig& config, const Flags& flags, std::ostream& log);

/// Full command line: psvdd <command> [config-file] [key=value ...] [flags].
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace psvdd::cli
