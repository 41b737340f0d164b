#pragma once

// Server-side de-hashing: from a (possibly approximated) VLAD back to a BoW
// histogram by sparse recovery against per-center residual dictionaries.

#include <optional>
#include <span>
#include <vector>

#include "dehash/aggregate.hpp"
#include "dehash/retrieval.hpp"
#include "dehash/sparse.hpp"
#include "dehash/vocab.hpp"

namespace dehash {

/// Admissible leaf ids per VLAD center. An empty set means the sub-vector is
/// skipped during reconstruction.
struct CandidateVWs {
    std::vector<std::vector<LeafId>> per_center;  ///< each ascending, unique

    static CandidateVWs none(std::size_t centers) { return {std::vector<std::vector<LeafId>>(centers)}; }
    static CandidateVWs full(const VocabularyTree& tree);
    /// Groups the support of the given histograms by owning VLAD center.
    static CandidateVWs from_histograms(const VocabularyTree& tree, std::span<const BowHistogram* const> hists);

    std::size_t total() const;
    bool operator==(const CandidateVWs&) const = default;
};

enum class CombineMode {
    Union,
    Intersection,
    /// Intersection per center, falling back to the union where it is empty.
    IntersectionOrUnion,
};

Dictionary build_dictionary(const VocabularyTree& tree, CenterId vlad_id);

CandidateVWs candidates_from_binary(const DatabaseIndex& index, const VocabularyTree& tree, const Ranking& binary_ranking,
                                    std::size_t top_r);
CandidateVWs candidates_from_gps(const DatabaseIndex& index, const VocabularyTree& tree,
                                 const std::optional<GeoPoint>& query_gps, std::size_t top_r);
CandidateVWs candidates_from_category(const DatabaseIndex& index, const VocabularyTree& tree, std::uint32_t category);
CandidateVWs combine_candidates(std::span<const CandidateVWs> cues, CombineMode mode);

struct ReconstructOptions {
    LassoOptions solver{};
    std::size_t threads = 1;
    double drop_below = 1e-6;   ///< coefficients under this are not reported
    double skip_norm = 1e-8;    ///< sub-vectors with a smaller norm are skipped
};

struct SubvectorReport {
    CenterId center = 0;
    std::size_t columns = 0;
    int iterations = 0;
    bool converged = true;
    bool skipped = false;
};

struct Reconstruction {
    BowHistogram histogram;
    std::vector<SubvectorReport> subvectors;

    bool converged() const;
    std::size_t columns_used() const;
};

/// Solves the non-negative LASSO for every nonzero sub-vector of the raw
/// (unnormalized) VLAD `v` against its center's dictionary, restricted to
/// `candidates` when given, and accumulates the coefficients.
Reconstruction reconstruct_bow(const VladVector& v, const VocabularyTree& tree, double lambda,
                               const CandidateVWs* candidates = nullptr, const ReconstructOptions& opts = {});

/// Mean of the L1-normalized stored histograms of the top_r ranked images.
BowHistogram pseudo_bow(const DatabaseIndex& index, const Ranking& ranking, std::size_t top_r);

struct PriorOptions {
    std::size_t threads = 1;
    double skip_norm = 1e-8;
    /// Estimated feature count of the query; the prior is brought to this L1
    /// mass before solving and the output is rescaled to it before flooring.
    /// Defaults to ||h0||_1.
    std::optional<double> target_mass;
};

/// Tikhonov-regularized reconstruction pulled toward the prior `h0`. Each
/// sub-vector is solved over candidates[i] together with the leaves of
/// support(h0) under center i (only the latter when `candidates` is null).
/// Normalizers are ||v||^2 and ||h0||^2 over the whole vectors, so the
/// per-center solves jointly minimize the full objective. Negative
/// coefficients are clipped and the result floored to integer counts.
Reconstruction reconstruct_bow_with_prior(const VladVector& v, const VocabularyTree& tree, const BowHistogram& h0,
                                          double alpha, const CandidateVWs* candidates = nullptr,
                                          const PriorOptions& opts = {});

}  // namespace dehash
