#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "dehash/common.hpp"

namespace dehash {

struct KMeansOptions {
    std::size_t k = 2;
    int max_iter = 50;
    double move_tol = 1e-6;  ///< stop once no center moves farther than this
};

struct KMeansResult {
    Matrix centers;                        ///< dim x k
    std::vector<std::uint32_t> assignment; ///< one entry per member, in member order
    int iterations = 0;
};

/// Lloyd's k-means with k-means++ seeding over a subset of the columns of
/// `data`. When there are fewer distinct members than k, the surplus centers
/// are set to the member mean and stay empty. Empty clusters are re-seeded
/// with the point farthest from its center in the currently largest cluster.
/// Requires at least one member.
KMeansResult kmeans(const DescriptorSet& data, std::span<const std::uint32_t> members,
                    const KMeansOptions& opts, std::mt19937_64& rng);

/// Index of the nearest column of `centers` (squared L2, lowest index on ties).
template <typename Derived>
std::uint32_t nearest_center(const Matrix& centers, const Eigen::MatrixBase<Derived>& x,
                             Eigen::Index first = 0, Eigen::Index count = -1) {
    if (count < 0) count = centers.cols() - first;
    std::uint32_t best = static_cast<std::uint32_t>(first);
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = first; c < first + count; ++c) {
        const double d = (centers.col(c) - x).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(c);
        }
    }
    return best;
}

}  // namespace dehash
