#include "dehash/aggregate.hpp"

namespace dehash {

void BowHistogram::add(LeafId t, double value) {
    require(vocab_size_ == 0 || t < vocab_size_, "histogram: leaf id out of range");
    const double v = at(t) + value;
    set(t, v);
}

void BowHistogram::set(LeafId t, double value) {
    require(vocab_size_ == 0 || t < vocab_size_, "histogram: leaf id out of range");
    if (value > 0.0)
        entries_[t] = value;
    else
        entries_.erase(t);
}

double BowHistogram::at(LeafId t) const {
    const auto it = entries_.find(t);
    return it == entries_.end() ? 0.0 : it->second;
}

double BowHistogram::l1() const {
    double s = 0.0;
    for (const auto& [t, v] : entries_) s += v;
    return s;
}

BowHistogram BowHistogram::l1_normalized() const {
    BowHistogram out(vocab_size_);
    const double s = l1();
    if (s <= 0.0) return out;
    for (const auto& [t, v] : entries_) out.entries_.emplace_hint(out.entries_.end(), t, v / s);
    return out;
}

BowHistogram compute_bow(const VocabularyTree& tree, const DescriptorSet& descriptors, LeafSearch mode) {
    require(descriptors.cols() > 0, "compute_bow: empty descriptor set");
    BowHistogram h(tree.num_leaves());
    for (Eigen::Index j = 0; j < descriptors.cols(); ++j) h.add(tree.quantize_leaf(descriptors.col(j), mode), 1.0);
    return h;
}

VladVector compute_vlad(const VocabularyTree& tree, const DescriptorSet& descriptors, VladNorm norm) {
    require(descriptors.cols() > 0, "compute_vlad: empty descriptor set");
    VladVector v(tree.dim(), tree.num_vlad_centers());
    for (Eigen::Index j = 0; j < descriptors.cols(); ++j) {
        const auto c = tree.quantize_vlad(descriptors.col(j));
        v.sub(c) += descriptors.col(j) - tree.vlad_center(c);
    }
    return normalize_vlad(std::move(v), norm);
}

VladVector normalize_vlad(VladVector v, VladNorm mode) {
    if (mode == VladNorm::None) return v;
    if (mode == VladNorm::IntraGlobalL2) {
        for (std::size_t i = 0; i < v.centers; ++i) {
            const double n = v.sub(i).norm();
            if (n > 0.0) v.sub(i) /= n;
        }
    }
    const double n = v.values.norm();
    if (n > 0.0) v.values /= n;
    v.norm = mode;
    return v;
}

}  // namespace dehash
