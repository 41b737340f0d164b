#pragma once

#include <map>

#include "dehash/common.hpp"
#include "dehash/vocab.hpp"

namespace dehash {

/// Sparse non-negative histogram over the leaf vocabulary. Only strictly
/// positive entries are stored; keys are ascending.
class BowHistogram {
public:
    BowHistogram() = default;
    explicit BowHistogram(std::size_t vocab_size) : vocab_size_(vocab_size) {}

    std::size_t vocab_size() const { return vocab_size_; }
    const std::map<LeafId, double>& entries() const { return entries_; }
    std::size_t nonzeros() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// Adds `value` to entry t; non-positive results are erased.
    void add(LeafId t, double value);
    /// Sets entry t; values <= 0 erase it.
    void set(LeafId t, double value);
    double at(LeafId t) const;
    double l1() const;
    BowHistogram l1_normalized() const;

    bool operator==(const BowHistogram&) const = default;

private:
    std::size_t vocab_size_ = 0;
    std::map<LeafId, double> entries_;
};

enum class VladNorm : std::uint8_t { None = 0, GlobalL2 = 1, IntraGlobalL2 = 2 };

/// Concatenation of N residual sub-vectors of dimension D.
struct VladVector {
    std::size_t dim = 0;      ///< descriptor dimension D
    std::size_t centers = 0;  ///< number of VLAD centers N
    Vector values;            ///< D*N entries, sub-vector i at [i*D, (i+1)*D)
    VladNorm norm = VladNorm::None;

    VladVector() = default;
    VladVector(std::size_t d, std::size_t n) : dim(d), centers(n), values(Vector::Zero(static_cast<Eigen::Index>(d * n))) {}

    auto sub(std::size_t i) { return values.segment(static_cast<Eigen::Index>(i * dim), static_cast<Eigen::Index>(dim)); }
    auto sub(std::size_t i) const { return values.segment(static_cast<Eigen::Index>(i * dim), static_cast<Eigen::Index>(dim)); }
    std::size_t size() const { return dim * centers; }
};

BowHistogram compute_bow(const VocabularyTree& tree, const DescriptorSet& descriptors,
                         LeafSearch mode = LeafSearch::ExhaustiveSubtree);

/// Per-center residual sums, then `norm` applied. Centers without any
/// descriptor contribute zero sub-vectors.
VladVector compute_vlad(const VocabularyTree& tree, const DescriptorSet& descriptors,
                        VladNorm norm = VladNorm::None);

/// Intra mode unit-normalizes every nonzero sub-vector before the global L2
/// step. Zero vectors are returned unchanged.
VladVector normalize_vlad(VladVector v, VladNorm mode);

}  // namespace dehash
