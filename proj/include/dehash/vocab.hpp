#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dehash/common.hpp"

namespace dehash {

/// Geometry of a complete hierarchical k-means tree. Level 0 is the root;
/// level `vlad_level` holds the VLAD centers and level `levels` the leaves
/// (the BoW visual words).
struct TreeShape {
    std::uint32_t branch = 0;
    std::uint32_t levels = 0;
    std::uint32_t vlad_level = 0;

    std::uint64_t nodes_at(std::uint32_t level) const;
    std::uint64_t num_vlad_centers() const { return nodes_at(vlad_level); }
    std::uint64_t num_leaves() const { return nodes_at(levels); }
    std::uint64_t leaves_per_center() const { return nodes_at(levels - vlad_level); }
};

enum class LeafSearch { GreedyPath, ExhaustiveSubtree };

struct TreeOptions {
    std::uint32_t branch = 8;
    std::uint32_t levels = 3;
    std::uint32_t vlad_level = 1;
    std::uint64_t seed = 0;
    int max_iter = 50;
    double move_tol = 1e-6;
};

/// Two-level view of a hierarchical vocabulary: VLAD centers on top, the
/// leaf visual words of their sub-trees below. Node ids are breadth-first
/// within a level, so the children of node j are j*branch .. j*branch+branch-1
/// and leaf t belongs to VLAD center t / leaves_per_center.
///
/// Immutable once built; all queries are safe from multiple threads.
class VocabularyTree {
public:
    /// `lower_levels[j]` holds the centers of level vlad_level + j + 1 (one
    /// column per node); the last entry is the leaf level. Empty when
    /// vlad_level == levels.
    VocabularyTree(TreeShape shape, Matrix vlad_centers, std::vector<Matrix> lower_levels);

    std::size_t dim() const { return static_cast<std::size_t>(vlad_centers_.rows()); }
    const TreeShape& shape() const { return shape_; }
    std::size_t num_vlad_centers() const { return static_cast<std::size_t>(vlad_centers_.cols()); }
    std::size_t num_leaves() const { return static_cast<std::size_t>(leaf_centers().cols()); }

    const Matrix& vlad_centers() const { return vlad_centers_; }
    const Matrix& leaf_centers() const {
        return lower_.empty() ? vlad_centers_ : lower_.back();
    }
    auto vlad_center(CenterId i) const { return vlad_centers_.col(i); }
    auto leaf_center(LeafId t) const { return leaf_centers().col(t); }

    CenterId parent_of_leaf(LeafId t) const;
    /// Leaf ids under VLAD center `i`, ascending.
    std::vector<LeafId> subtree_leaves(CenterId i) const;
    /// First leaf id and count of the contiguous range under center `i`.
    std::pair<LeafId, std::size_t> subtree_range(CenterId i) const;

    CenterId quantize_vlad(const Eigen::Ref<const Vector>& d) const;
    LeafId quantize_leaf(const Eigen::Ref<const Vector>& d, LeafSearch mode) const;

    /// Centers of every node at `level` (vlad_level <= level <= levels).
    const Matrix& level_centers(std::uint32_t level) const;

    std::vector<std::uint8_t> serialize() const;
    static VocabularyTree deserialize(std::span<const std::uint8_t> bytes,
                                      const std::string& source = "<memory>");
    void save(const std::string& path) const;
    static VocabularyTree load(const std::string& path);

private:
    void check_dim(Eigen::Index n) const;

    TreeShape shape_;
    Matrix vlad_centers_;
    std::vector<Matrix> lower_;
};

/// Hierarchical k-means over `descriptors`, stored at float32 precision.
VocabularyTree train_vocabulary(const DescriptorSet& descriptors, const TreeOptions& opts);

}  // namespace dehash
