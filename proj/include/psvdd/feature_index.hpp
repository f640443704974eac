#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "psvdd/numerics/tensor.hpp"

namespace psvdd::index {

using numerics::Tensor;

/// Where a stored feature came from.
struct Provenance {
    std::uint32_t image = 0;
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    bool operator==(const Provenance&) const = default;
};

enum class IndexMode : std::uint32_t { Exact = 0, Approx = 1 };

struct IndexBuildConfig {
    IndexMode mode = IndexMode::Approx;
    std::size_t trees = 8;
    std::size_t leaf_size = 32;
    std::size_t search_budget = 512;  // leaf buckets examined per query
    std::uint64_t seed = 0;

    void validate() const;
};

struct Neighbour {
    float distance = 0;
    std::size_t id = 0;  // insertion order
    Provenance provenance;
};

inline constexpr char kIndexMagic[4] = {'P', 'S', 'I', 'X'};
inline constexpr std::uint32_t kIndexFormatVersion = 1;

/// Immutable nearest-neighbour table over N features of length D. All query
/// methods are const and safe to call from many threads at once.
class FeatureIndex {
   public:
    FeatureIndex() = default;

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return provenance_.size(); }
    IndexMode mode() const { return config_.mode; }
    const IndexBuildConfig& config() const { return config_; }

    std::span<const float> feature(std::size_t id) const;
    const Provenance& provenance(std::size_t id) const { return provenance_.at(id); }

    /// Brute-force scan. Ties go to the lowest insertion index.
    Neighbour nn_exact(std::span<const float> query) const;
    /// Best-bin-first forest search that stops after `budget` leaf buckets
    /// (0 = the build default).
    Neighbour nn_approx(std::span<const float> query, std::size_t budget = 0) const;
    /// nn_exact or nn_approx according to the build mode.
    Neighbour nearest(std::span<const float> query) const;

    /// `nearest` for each row of queries [Q,D], split over `threads` workers.
    std::vector<Neighbour> nearest_batch(const Tensor<float>& queries, std::size_t threads = 1) const;

    void write(std::ostream& out) const;
    static FeatureIndex read(std::istream& in);
    void save(const std::filesystem::path& path) const;
    static FeatureIndex load(const std::filesystem::path& path);

   private:
    struct TreeNode {
        std::int32_t left = -1;  // -1 marks a leaf
        std::int32_t right = -1;
        float threshold = 0;
        std::uint32_t direction = 0;  // offset into directions_, in units of dim_
        std::uint32_t begin = 0;      // leaf range in the tree's order_
        std::uint32_t end = 0;
    };
    struct Tree {
        std::vector<TreeNode> nodes;
        std::vector<std::uint32_t> order;
    };

    friend FeatureIndex build_index(const Tensor<float>&, std::vector<Provenance>, const IndexBuildConfig&);

    void check_query(std::span<const float> query) const;
    double squared_distance(std::span<const float> query, std::size_t id) const;
    void build_forest();

    std::size_t dim_ = 0;
    IndexBuildConfig config_;
    std::vector<float> features_;
    std::vector<Provenance> provenance_;
    std::vector<float> directions_;
    std::vector<Tree> trees_;
};

/// features [N,D] with N >= 1; one provenance entry per row.
FeatureIndex build_index(const Tensor<float>& features, std::vector<Provenance> provenance,
                         const IndexBuildConfig& config);

}  // namespace psvdd::index
