#include "dehash/vocab.hpp"

#include <numeric>
#include <random>

#include "dehash/binary_io.hpp"
#include "dehash/kmeans.hpp"

namespace dehash {

namespace {

constexpr std::string_view kTreeMagic = "DHTREE01";

std::uint64_t ipow(std::uint64_t base, std::uint32_t exp) {
    std::uint64_t r = 1;
    while (exp-- > 0) r *= base;
    return r;
}

}  // namespace

std::uint64_t TreeShape::nodes_at(std::uint32_t level) const { return ipow(branch, level); }

VocabularyTree::VocabularyTree(TreeShape shape, Matrix vlad_centers, std::vector<Matrix> lower_levels)
    : shape_(shape), vlad_centers_(std::move(vlad_centers)), lower_(std::move(lower_levels)) {
    require(shape_.branch >= 2, "tree: branch must be >= 2");
    require(shape_.vlad_level >= 1 && shape_.vlad_level <= shape_.levels,
            "tree: vlad_level must lie in [1, levels]");
    require(vlad_centers_.rows() > 0, "tree: zero descriptor dimension");
    require(static_cast<std::uint64_t>(vlad_centers_.cols()) == shape_.num_vlad_centers(),
            "tree: VLAD center count does not match branch^vlad_level");
    require(lower_.size() == shape_.levels - shape_.vlad_level,
            "tree: wrong number of levels below the VLAD level");
    for (std::size_t j = 0; j < lower_.size(); ++j) {
        require(lower_[j].rows() == vlad_centers_.rows(), "tree: center dimension mismatch");
        require(static_cast<std::uint64_t>(lower_[j].cols()) ==
                    shape_.nodes_at(shape_.vlad_level + static_cast<std::uint32_t>(j) + 1),
                "tree: level size does not match branch^level");
    }
    require(vlad_centers_.allFinite(), "tree: non-finite center");
    for (const auto& m : lower_) require(m.allFinite(), "tree: non-finite center");
}

void VocabularyTree::check_dim(Eigen::Index n) const {
    if (static_cast<std::size_t>(n) != dim())
        throw Error("descriptor dimension " + std::to_string(n) + " does not match tree dimension " +
                    std::to_string(dim()));
}

CenterId VocabularyTree::parent_of_leaf(LeafId t) const {
    require(t < num_leaves(), "tree: leaf id out of range");
    return static_cast<CenterId>(t / shape_.leaves_per_center());
}

std::pair<LeafId, std::size_t> VocabularyTree::subtree_range(CenterId i) const {
    require(i < num_vlad_centers(), "tree: VLAD center id out of range");
    const auto per = shape_.leaves_per_center();
    return {static_cast<LeafId>(i * per), static_cast<std::size_t>(per)};
}

std::vector<LeafId> VocabularyTree::subtree_leaves(CenterId i) const {
    const auto [first, count] = subtree_range(i);
    std::vector<LeafId> ids(count);
    std::iota(ids.begin(), ids.end(), first);
    return ids;
}

const Matrix& VocabularyTree::level_centers(std::uint32_t level) const {
    require(level >= shape_.vlad_level && level <= shape_.levels, "tree: level not stored");
    return level == shape_.vlad_level ? vlad_centers_ : lower_[level - shape_.vlad_level - 1];
}

CenterId VocabularyTree::quantize_vlad(const Eigen::Ref<const Vector>& d) const {
    check_dim(d.size());
    return nearest_center(vlad_centers_, d);
}

LeafId VocabularyTree::quantize_leaf(const Eigen::Ref<const Vector>& d, LeafSearch mode) const {
    const CenterId top = quantize_vlad(d);
    if (lower_.empty()) return top;
    if (mode == LeafSearch::ExhaustiveSubtree) {
        const auto [first, count] = subtree_range(top);
        return nearest_center(leaf_centers(), d, first, static_cast<Eigen::Index>(count));
    }
    std::uint64_t node = top;
    for (const auto& level : lower_) {
        node = nearest_center(level, d, static_cast<Eigen::Index>(node * shape_.branch), shape_.branch);
    }
    return static_cast<LeafId>(node);
}

// Layout (little-endian): "DHTREE01", u32 D, N, M, branch, levels, vlad_level,
// N*D f32 VLAD centers, M*D f32 leaf centers, M u32 parent ids. Trees with
// intermediate levels between the VLAD level and the leaves append u32 count
// followed by count*D f32 centers of those levels, top level first.
std::vector<std::uint8_t> VocabularyTree::serialize() const {
    io::ByteWriter w;
    w.magic(kTreeMagic);
    w.u32(static_cast<std::uint32_t>(dim()));
    w.u32(static_cast<std::uint32_t>(num_vlad_centers()));
    w.u32(static_cast<std::uint32_t>(num_leaves()));
    w.u32(shape_.branch);
    w.u32(shape_.levels);
    w.u32(shape_.vlad_level);
    w.f32s(vlad_centers_);
    w.f32s(leaf_centers());
    for (LeafId t = 0; t < num_leaves(); ++t) w.u32(parent_of_leaf(t));
    if (lower_.size() > 1) {
        std::uint64_t count = 0;
        for (std::size_t j = 0; j + 1 < lower_.size(); ++j) count += lower_[j].cols();
        w.u32(static_cast<std::uint32_t>(count));
        for (std::size_t j = 0; j + 1 < lower_.size(); ++j) w.f32s(lower_[j]);
    }
    return w.take();
}

VocabularyTree VocabularyTree::deserialize(std::span<const std::uint8_t> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kTreeMagic);
    const auto dim = r.u32();
    const auto n = r.u32();
    const auto m = r.u32();
    TreeShape shape;
    shape.branch = r.u32();
    shape.levels = r.u32();
    shape.vlad_level = r.u32();
    if (dim == 0 || shape.branch < 2 || shape.vlad_level < 1 || shape.vlad_level > shape.levels ||
        shape.levels > 32)
        r.fail("invalid tree header");
    if (shape.num_vlad_centers() != n || shape.num_leaves() != m)
        r.fail("center counts do not match branch/levels");

    Matrix vlad = r.f32_matrix(dim, n);
    Matrix leaves = r.f32_matrix(dim, m);
    const auto per = shape.leaves_per_center();
    for (std::uint32_t t = 0; t < m; ++t) {
        if (r.u32() != t / per) r.fail("parent id inconsistent with tree layout");
    }

    std::vector<Matrix> lower;
    const std::uint32_t depth = shape.levels - shape.vlad_level;
    if (depth > 1) {
        std::uint64_t expected = 0;
        for (std::uint32_t l = shape.vlad_level + 1; l < shape.levels; ++l) expected += shape.nodes_at(l);
        if (r.u32() != expected) r.fail("intermediate center count mismatch");
        for (std::uint32_t l = shape.vlad_level + 1; l < shape.levels; ++l)
            lower.push_back(r.f32_matrix(dim, shape.nodes_at(l)));
    }
    if (depth > 0) lower.push_back(std::move(leaves));
    if (!r.at_end()) r.fail("trailing bytes");
    return VocabularyTree(shape, std::move(vlad), std::move(lower));
}

void VocabularyTree::save(const std::string& path) const { io::write_file(path, serialize()); }

VocabularyTree VocabularyTree::load(const std::string& path) {
    const auto bytes = io::read_file(path);
    return deserialize(bytes, path);
}

VocabularyTree train_vocabulary(const DescriptorSet& descriptors, const TreeOptions& opts) {
    require(descriptors.cols() > 0, "train_vocabulary: empty descriptor set");
    require(descriptors.rows() > 0, "train_vocabulary: zero descriptor dimension");
    require(descriptors.allFinite(), "train_vocabulary: non-finite descriptor");
    require(opts.branch >= 2, "train_vocabulary: branch must be >= 2");
    require(opts.vlad_level >= 1, "train_vocabulary: vlad_level must be >= 1");
    require(opts.vlad_level < opts.levels, "train_vocabulary: vlad_level must be below levels");

    const TreeShape shape{opts.branch, opts.levels, opts.vlad_level};
    const Eigen::Index dim = descriptors.rows();

    // members[j] are the training points routed to node j of the current level
    std::vector<std::vector<std::uint32_t>> members(1);
    members[0].resize(static_cast<std::size_t>(descriptors.cols()));
    std::iota(members[0].begin(), members[0].end(), 0u);
    Matrix parent_centers = descriptors.rowwise().mean();

    Matrix vlad;
    std::vector<Matrix> lower;
    for (std::uint32_t level = 1; level <= opts.levels; ++level) {
        const auto parents = members.size();
        Matrix centers(dim, static_cast<Eigen::Index>(parents * opts.branch));
        std::vector<std::vector<std::uint32_t>> next(parents * opts.branch);

        for (std::size_t p = 0; p < parents; ++p) {
            const auto first = static_cast<Eigen::Index>(p * opts.branch);
            if (members[p].empty()) {
                for (std::uint32_t c = 0; c < opts.branch; ++c)
                    centers.col(first + c) = parent_centers.col(static_cast<Eigen::Index>(p));
                continue;
            }
            std::seed_seq seq{static_cast<std::uint64_t>(opts.seed), static_cast<std::uint64_t>(level),
                              static_cast<std::uint64_t>(p)};
            std::mt19937_64 rng(seq);
            KMeansOptions km{opts.branch, opts.max_iter, opts.move_tol};
            auto res = kmeans(descriptors, members[p], km, rng);
            round_to_float(res.centers);
            centers.middleCols(first, opts.branch) = res.centers;
            for (auto idx : members[p]) {
                const auto c = nearest_center(res.centers, descriptors.col(idx));
                next[p * opts.branch + c].push_back(idx);
            }
        }

        if (level == opts.vlad_level)
            vlad = centers;
        else if (level > opts.vlad_level)
            lower.push_back(centers);
        parent_centers = std::move(centers);
        members = std::move(next);
    }
    return VocabularyTree(shape, std::move(vlad), std::move(lower));
}

}  // namespace dehash
