#include "psvdd/feature_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <thread>

#include "psvdd/numerics/serialize.hpp"

namespace psvdd::index {

using numerics::read_u32;
using numerics::write_u32;

void IndexBuildConfig::validate() const {
    if (mode != IndexMode::Exact && mode != IndexMode::Approx) throw ArgumentError("index: unknown mode");
    if (trees == 0 || leaf_size == 0 || search_budget == 0) {
        throw ArgumentError("index: tree count, leaf size and search budget must be positive");
    }
}

std::span<const float> FeatureIndex::feature(std::size_t id) const {
    if (id >= size()) throw ArgumentError("index: feature id out of range");
    return {features_.data() + id * dim_, dim_};
}

void FeatureIndex::check_query(std::span<const float> query) const {
    if (size() == 0) throw ArgumentError("index: empty index");
    if (query.size() != dim_) {
        throw DimensionError("index: query has length " + std::to_string(query.size()) + ", expected " +
                             std::to_string(dim_));
    }
}

double FeatureIndex::squared_distance(std::span<const float> query, std::size_t id) const {
    const float* f = features_.data() + id * dim_;
    double acc = 0;
    for (std::size_t j = 0; j < dim_; ++j) {
        const double d = double(query[j]) - double(f[j]);
        acc += d * d;
    }
    return acc;
}

Neighbour FeatureIndex::nn_exact(std::span<const float> query) const {
    check_query(query);
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < size(); ++i) {
        const double d = squared_distance(query, i);
        if (d < best) {
            best = d;
            arg = i;
        }
    }
    return {static_cast<float>(std::sqrt(best)), arg, provenance_[arg]};
}

namespace {

double project(const float* direction, std::span<const float> v) {
    double acc = 0;
    for (std::size_t j = 0; j < v.size(); ++j) acc += double(direction[j]) * double(v[j]);
    return acc;
}

struct Pending {
    double bound;  // lower bound on the distance to anything below this node
    std::uint32_t tree;
    std::int32_t node;
    bool operator>(const Pending& o) const { return bound > o.bound; }
};

}  // namespace

Neighbour FeatureIndex::nn_approx(std::span<const float> query, std::size_t budget) const {
    check_query(query);
    if (config_.mode != IndexMode::Approx || trees_.empty()) {
        throw ArgumentError("index: approximate search needs an index built in approx mode");
    }
    if (budget == 0) budget = config_.search_budget;

    std::priority_queue<Pending, std::vector<Pending>, std::greater<>> queue;
    for (std::uint32_t t = 0; t < trees_.size(); ++t) queue.push({0.0, t, 0});
    // Per-thread visit stamps; a fresh generation per query avoids clearing.
    thread_local std::vector<std::uint32_t> stamps;
    thread_local std::uint32_t generation = 0;
    if (stamps.size() < size()) stamps.resize(size(), 0);
    if (++generation == 0) {
        std::fill(stamps.begin(), stamps.end(), 0);
        generation = 1;
    }
    double best = std::numeric_limits<double>::infinity();  // squared
    std::size_t arg = 0;
    std::size_t visits = 0;  // leaf buckets examined

    while (!queue.empty() && visits < budget) {
        const Pending top = queue.top();
        queue.pop();
        const Tree& tree = trees_[top.tree];
        const TreeNode& node = tree.nodes[top.node];
        if (node.left < 0) {
            ++visits;
            for (std::uint32_t k = node.begin; k < node.end; ++k) {
                const std::uint32_t id = tree.order[k];
                if (stamps[id] == generation) continue;
                stamps[id] = generation;
                const double d = squared_distance(query, id);
                if (d < best || (d == best && id < arg)) {
                    best = d;
                    arg = id;
                }
            }
            continue;
        }
        const double margin = project(directions_.data() + std::size_t(node.direction) * dim_, query) - node.threshold;
        const std::int32_t near = margin < 0 ? node.left : node.right;
        const std::int32_t far = margin < 0 ? node.right : node.left;
        queue.push({top.bound, top.tree, near});
        queue.push({std::sqrt(top.bound * top.bound + margin * margin), top.tree, far});
    }
    return {static_cast<float>(std::sqrt(best)), arg, provenance_[arg]};
}

Neighbour FeatureIndex::nearest(std::span<const float> query) const {
    return config_.mode == IndexMode::Approx ? nn_approx(query) : nn_exact(query);
}

std::vector<Neighbour> FeatureIndex::nearest_batch(const Tensor<float>& queries, std::size_t threads) const {
    if (queries.rank() != 2 || queries.dim(1) != dim_) {
        throw DimensionError("index: queries must be [Q," + std::to_string(dim_) + "], got " +
                             numerics::shape_string(queries.shape()));
    }
    const std::size_t q = queries.dim(0);
    std::vector<Neighbour> out(q);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) out[i] = nearest({queries.data() + i * dim_, dim_});
    };
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(q, 1));
    if (threads == 1) {
        work(0, q);
        return out;
    }
    std::vector<std::jthread> pool;
    const std::size_t chunk = (q + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t b = t * chunk, e = std::min(q, b + chunk);
        if (b < e) pool.emplace_back(work, b, e);
    }
    pool.clear();  // joins
    return out;
}

void FeatureIndex::build_forest() {
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    trees_.assign(config_.trees, {});
    std::vector<double> proj(size());

    for (auto& tree : trees_) {
        tree.order.resize(size());
        std::iota(tree.order.begin(), tree.order.end(), 0u);
        // Explicit stack of (node index, begin, end) to avoid deep recursion.
        struct Job {
            std::int32_t node;
            std::uint32_t begin, end;
        };
        tree.nodes.push_back({});
        std::vector<Job> stack{{0, 0, static_cast<std::uint32_t>(size())}};
        while (!stack.empty()) {
            const Job job = stack.back();
            stack.pop_back();
            if (job.end - job.begin <= config_.leaf_size) {
                tree.nodes[job.node].begin = job.begin;
                tree.nodes[job.node].end = job.end;
                continue;
            }
            const std::size_t dir = directions_.size() / dim_;
            double norm = 0;
            for (std::size_t j = 0; j < dim_; ++j) {
                const float g = gauss(rng);
                directions_.push_back(g);
                norm += double(g) * g;
            }
            const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm, 1e-30)));
            for (std::size_t j = 0; j < dim_; ++j) directions_[dir * dim_ + j] *= inv;
            const float* d = directions_.data() + dir * dim_;
            for (std::uint32_t k = job.begin; k < job.end; ++k) proj[tree.order[k]] = project(d, feature(tree.order[k]));

            const std::uint32_t mid = job.begin + (job.end - job.begin) / 2;
            auto by_proj = [&](std::uint32_t a, std::uint32_t b) { return proj[a] < proj[b] || (proj[a] == proj[b] && a < b); };
            std::nth_element(tree.order.begin() + job.begin, tree.order.begin() + mid, tree.order.begin() + job.end,
                             by_proj);
            const double hi = proj[tree.order[mid]];
            const double lo = proj[*std::max_element(tree.order.begin() + job.begin, tree.order.begin() + mid, by_proj)];

            const auto left = static_cast<std::int32_t>(tree.nodes.size());
            tree.nodes.push_back({});
            tree.nodes.push_back({});
            TreeNode& node = tree.nodes[job.node];
            node.left = left;
            node.right = left + 1;
            node.direction = static_cast<std::uint32_t>(dir);
            node.threshold = static_cast<float>(0.5 * (lo + hi));
            stack.push_back({left + 1, mid, job.end});
            stack.push_back({left, job.begin, mid});
        }
    }
}

FeatureIndex build_index(const Tensor<float>& features, std::vector<Provenance> provenance,
                         const IndexBuildConfig& config) {
    config.validate();
    if (features.rank() != 2) throw DimensionError("build_index: features must be [N,D]");
    if (features.dim(0) == 0 || features.dim(1) == 0) throw ArgumentError("build_index: empty feature set");
    if (provenance.size() != features.dim(0)) throw DimensionError("build_index: one provenance entry per feature");
    if (!numerics::all_finite(features)) throw NumericalError("build_index: non-finite feature");
    if (features.dim(0) > std::numeric_limits<std::uint32_t>::max()) throw ArgumentError("build_index: too many features");
    FeatureIndex idx;
    idx.dim_ = features.dim(1);
    idx.config_ = config;
    idx.features_.assign(features.data(), features.data() + features.size());
    idx.provenance_ = std::move(provenance);
    if (config.mode == IndexMode::Approx) idx.build_forest();
    return idx;
}

// --- persistence -----------------------------------------------------------

void FeatureIndex::write(std::ostream& out) const {
    out.write(kIndexMagic, 4);
    write_u32(out, kIndexFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(dim_));
    write_u32(out, static_cast<std::uint32_t>(size()));
    write_u32(out, static_cast<std::uint32_t>(config_.mode));
    write_u32(out, static_cast<std::uint32_t>(config_.trees));
    write_u32(out, static_cast<std::uint32_t>(config_.leaf_size));
    write_u32(out, static_cast<std::uint32_t>(config_.search_budget));
    write_u32(out, static_cast<std::uint32_t>(config_.seed & 0xffffffffu));
    write_u32(out, static_cast<std::uint32_t>(config_.seed >> 32));
    numerics::write_f32_array(out, features_.data(), features_.size());
    for (const auto& p : provenance_) {
        write_u32(out, p.image);
        write_u32(out, p.row);
        write_u32(out, p.col);
    }
    write_u32(out, static_cast<std::uint32_t>(trees_.size()));
    write_u32(out, static_cast<std::uint32_t>(directions_.size()));
    numerics::write_f32_array(out, directions_.data(), directions_.size());
    for (const auto& tree : trees_) {
        write_u32(out, static_cast<std::uint32_t>(tree.nodes.size()));
        for (const auto& n : tree.nodes) {
            write_u32(out, static_cast<std::uint32_t>(n.left));
            write_u32(out, static_cast<std::uint32_t>(n.right));
            numerics::write_f32(out, n.threshold);
            write_u32(out, n.direction);
            write_u32(out, n.begin);
            write_u32(out, n.end);
        }
        for (std::uint32_t id : tree.order) write_u32(out, id);
    }
    if (!out) throw IoError("index: write failed");
}

FeatureIndex FeatureIndex::read(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kIndexMagic)) throw IoError("index: bad magic");
    const std::uint32_t version = read_u32(in);
    if (version != kIndexFormatVersion) throw IoError("index: unsupported version " + std::to_string(version));
    FeatureIndex idx;
    idx.dim_ = read_u32(in);
    const std::size_t n = read_u32(in);
    const std::uint32_t mode = read_u32(in);
    if (mode > 1) throw IoError("index: bad mode");
    idx.config_.mode = static_cast<IndexMode>(mode);
    idx.config_.trees = read_u32(in);
    idx.config_.leaf_size = read_u32(in);
    idx.config_.search_budget = read_u32(in);
    idx.config_.seed = read_u32(in);
    idx.config_.seed |= std::uint64_t(read_u32(in)) << 32;
    if (idx.dim_ == 0 || n == 0) throw IoError("index: empty index in file");
    idx.features_.resize(n * idx.dim_);
    numerics::read_f32_array(in, idx.features_.data(), idx.features_.size());
    idx.provenance_.resize(n);
    for (auto& p : idx.provenance_) {
        p.image = read_u32(in);
        p.row = read_u32(in);
        p.col = read_u32(in);
    }
    const std::size_t tree_count = read_u32(in);
    const std::size_t dir_values = read_u32(in);
    if (dir_values % idx.dim_ != 0) throw IoError("index: corrupt direction table");
    idx.directions_.resize(dir_values);
    numerics::read_f32_array(in, idx.directions_.data(), dir_values);
    idx.trees_.resize(tree_count);
    for (auto& tree : idx.trees_) {
        const std::size_t nodes = read_u32(in);
        tree.nodes.resize(nodes);
        for (auto& node : tree.nodes) {
            node.left = static_cast<std::int32_t>(read_u32(in));
            node.right = static_cast<std::int32_t>(read_u32(in));
            node.threshold = numerics::read_f32(in);
            node.direction = read_u32(in);
            node.begin = read_u32(in);
            node.end = read_u32(in);
            const bool leaf = node.left < 0;
            if ((!leaf && (std::size_t(node.left) >= nodes || std::size_t(node.right) >= nodes ||
                           std::size_t(node.direction) * idx.dim_ >= dir_values)) ||
                (leaf && (node.begin > node.end || node.end > n))) {
                throw IoError("index: corrupt tree");
            }
        }
        tree.order.resize(n);
        for (auto& id : tree.order) {
            id = read_u32(in);
            if (id >= n) throw IoError("index: corrupt tree order");
        }
    }
    return idx;
}

void FeatureIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    write(out);
}

FeatureIndex FeatureIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return read(in);
}

}  // namespace psvdd::index
