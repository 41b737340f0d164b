#include "dehash/kmeans.hpp"

#include <algorithm>
#include <limits>

namespace dehash {

namespace {

Matrix seed_plus_plus(const DescriptorSet& data, std::span<const std::uint32_t> members,
                      std::size_t k, std::mt19937_64& rng) {
    const auto n = members.size();
    Matrix centers(data.rows(), static_cast<Eigen::Index>(k));

    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    centers.col(0) = data.col(members[pick(rng)]);

    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i)
        d2[i] = (data.col(members[i]) - centers.col(0)).squaredNorm();

    Vector mean = Vector::Zero(data.rows());
    for (auto m : members) mean += data.col(m);
    mean /= static_cast<double>(n);

    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (double v : d2) total += v;
        if (total <= 0.0) {
            // every member already coincides with a chosen center
            for (std::size_t r = c; r < k; ++r) centers.col(static_cast<Eigen::Index>(r)) = mean;
            break;
        }
        std::uniform_real_distribution<double> u(0.0, total);
        const double target = u(rng);
        double acc = 0.0;
        std::size_t chosen = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (d2[i] <= 0.0) continue;
            acc += d2[i];
            chosen = i;
            if (acc >= target) break;
        }
        centers.col(static_cast<Eigen::Index>(c)) = data.col(members[chosen]);
        for (std::size_t i = 0; i < n; ++i)
            d2[i] = std::min(d2[i], (data.col(members[i]) - centers.col(static_cast<Eigen::Index>(c))).squaredNorm());
    }
    return centers;
}

void assign(const DescriptorSet& data, std::span<const std::uint32_t> members,
            const Matrix& centers, std::vector<std::uint32_t>& out) {
    out.resize(members.size());
    for (std::size_t i = 0; i < members.size(); ++i)
        out[i] = nearest_center(centers, data.col(members[i]));
}

}  // namespace

KMeansResult kmeans(const DescriptorSet& data, std::span<const std::uint32_t> members,
                    const KMeansOptions& opts, std::mt19937_64& rng) {
    require(!members.empty(), "kmeans: no members");
    require(opts.k >= 1, "kmeans: k must be positive");

    const auto k = static_cast<Eigen::Index>(opts.k);
    KMeansResult res;
    res.centers = seed_plus_plus(data, members, opts.k, rng);

    std::vector<std::size_t> counts(opts.k);
    for (int it = 0; it < opts.max_iter; ++it) {
        res.iterations = it + 1;
        assign(data, members, res.centers, res.assignment);

        Matrix sums = Matrix::Zero(data.rows(), k);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < members.size(); ++i) {
            sums.col(res.assignment[i]) += data.col(members[i]);
            ++counts[res.assignment[i]];
        }

        Matrix next = res.centers;
        for (Eigen::Index c = 0; c < k; ++c)
            if (counts[c] > 0) next.col(c) = sums.col(c) / static_cast<double>(counts[c]);

        for (Eigen::Index c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            const auto largest = static_cast<std::uint32_t>(
                std::max_element(counts.begin(), counts.end()) - counts.begin());
            double far_d = 0.0;
            std::size_t far_i = members.size();
            for (std::size_t i = 0; i < members.size(); ++i) {
                if (res.assignment[i] != largest) continue;
                const double d = (data.col(members[i]) - next.col(largest)).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far_i = i;
                }
            }
            if (far_i == members.size()) continue;  // largest cluster is a single point
            next.col(c) = data.col(members[far_i]);
            res.assignment[far_i] = static_cast<std::uint32_t>(c);
            --counts[largest];
            counts[c] = 1;
        }

        double max_move = 0.0;
        for (Eigen::Index c = 0; c < k; ++c)
            max_move = std::max(max_move, (next.col(c) - res.centers.col(c)).norm());
        res.centers = std::move(next);
        if (max_move < opts.move_tol) break;
    }
    assign(data, members, res.centers, res.assignment);
    return res;
}

}  // namespace dehash
