#include "dehash/dehash.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>

#include "dehash/parallel.hpp"

namespace dehash {

namespace {

std::vector<LeafId> set_union(const std::vector<LeafId>& a, const std::vector<LeafId>& b) {
    std::vector<LeafId> out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

std::vector<LeafId> set_intersection(const std::vector<LeafId>& a, const std::vector<LeafId>& b) {
    std::vector<LeafId> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

std::vector<const BowHistogram*> top_histograms(const DatabaseIndex& index, const Ranking& ranking, std::size_t top_r) {
    std::vector<const BowHistogram*> hists;
    const std::size_t n = std::min(top_r, ranking.items.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& img = index.by_id(ranking.items[i].image);
        if (img.bow.empty()) throw Error("index lacks a stored BoW for image " + std::to_string(img.id));
        hists.push_back(&img.bow);
    }
    return hists;
}

}  // namespace

CandidateVWs CandidateVWs::full(const VocabularyTree& tree) {
    CandidateVWs c;
    for (CenterId i = 0; i < tree.num_vlad_centers(); ++i) c.per_center.push_back(tree.subtree_leaves(i));
    return c;
}

CandidateVWs CandidateVWs::from_histograms(const VocabularyTree& tree, std::span<const BowHistogram* const> hists) {
    auto c = none(tree.num_vlad_centers());
    for (const auto* h : hists)
        for (const auto& [t, v] : h->entries()) c.per_center[tree.parent_of_leaf(t)].push_back(t);
    for (auto& ids : c.per_center) {
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }
    return c;
}

std::size_t CandidateVWs::total() const {
    std::size_t n = 0;
    for (const auto& ids : per_center) n += ids.size();
    return n;
}

Dictionary build_dictionary(const VocabularyTree& tree, CenterId vlad_id) {
    const auto [first, count] = tree.subtree_range(vlad_id);
    Dictionary d;
    d.vlad_id = vlad_id;
    d.columns = tree.leaf_centers().middleCols(first, static_cast<Eigen::Index>(count)).colwise() -
                tree.vlad_center(vlad_id);
    d.column_ids = tree.subtree_leaves(vlad_id);
    return d;
}

CandidateVWs candidates_from_binary(const DatabaseIndex& index, const VocabularyTree& tree, const Ranking& binary_ranking,
                                    std::size_t top_r) {
    require(!binary_ranking.items.empty(), "candidates_from_binary: empty ranking");
    require(top_r >= 1, "candidates_from_binary: top_r must be positive");
    const auto hists = top_histograms(index, binary_ranking, top_r);
    return CandidateVWs::from_histograms(tree, hists);
}

CandidateVWs candidates_from_gps(const DatabaseIndex& index, const VocabularyTree& tree,
                                 const std::optional<GeoPoint>& query_gps, std::size_t top_r) {
    if (!query_gps) throw Error("candidates_from_gps: query carries no GPS");
    require(top_r >= 1, "candidates_from_gps: top_r must be positive");
    const Ranking near = rank_gps(index, *query_gps);
    Ranking located;
    for (const auto& item : near.items)
        if (std::isfinite(item.score)) located.items.push_back(item);
    require(!located.items.empty(), "candidates_from_gps: no database image carries GPS");
    const auto hists = top_histograms(index, located, top_r);
    return CandidateVWs::from_histograms(tree, hists);
}

CandidateVWs candidates_from_category(const DatabaseIndex& index, const VocabularyTree& tree, std::uint32_t category) {
    std::vector<const BowHistogram*> hists;
    for (const auto& img : index.images())
        if (img.category && *img.category == category) hists.push_back(&img.bow);
    if (hists.empty()) throw Error("candidates_from_category: no database image in category " + std::to_string(category));
    return CandidateVWs::from_histograms(tree, hists);
}

CandidateVWs combine_candidates(std::span<const CandidateVWs> cues, CombineMode mode) {
    require(!cues.empty(), "combine_candidates: no cues");
    const std::size_t centers = cues[0].per_center.size();
    for (const auto& c : cues) require(c.per_center.size() == centers, "combine_candidates: center count mismatch");

    CandidateVWs out = cues[0];
    for (std::size_t i = 0; i < centers; ++i) {
        std::vector<LeafId> uni = cues[0].per_center[i];
        std::vector<LeafId> inter = cues[0].per_center[i];
        for (std::size_t c = 1; c < cues.size(); ++c) {
            uni = set_union(uni, cues[c].per_center[i]);
            inter = set_intersection(inter, cues[c].per_center[i]);
        }
        switch (mode) {
            case CombineMode::Union: out.per_center[i] = std::move(uni); break;
            case CombineMode::Intersection: out.per_center[i] = std::move(inter); break;
            case CombineMode::IntersectionOrUnion:
                out.per_center[i] = inter.empty() ? std::move(uni) : std::move(inter);
                break;
        }
    }
    return out;
}

bool Reconstruction::converged() const {
    return std::all_of(subvectors.begin(), subvectors.end(), [](const auto& s) { return s.converged; });
}

std::size_t Reconstruction::columns_used() const {
    std::size_t n = 0;
    for (const auto& s : subvectors) n += s.columns;
    return n;
}

Reconstruction reconstruct_bow(const VladVector& v, const VocabularyTree& tree, double lambda,
                               const CandidateVWs* candidates, const ReconstructOptions& opts) {
    require(v.dim == tree.dim() && v.centers == tree.num_vlad_centers(), "reconstruct_bow: VLAD shape does not match tree");
    require(v.values.allFinite(), "reconstruct_bow: non-finite VLAD");
    if (candidates)
        require(candidates->per_center.size() == v.centers, "reconstruct_bow: candidate sets do not match centers");

    const std::size_t n = v.centers;
    std::vector<SubvectorReport> reports(n);
    std::vector<std::vector<std::pair<LeafId, double>>> found(n);

    parallel_for(n, opts.threads, [&](std::size_t i) {
        auto& rep = reports[i];
        rep.center = static_cast<CenterId>(i);
        const Vector sub = v.sub(i);
        if (sub.norm() < opts.skip_norm || (candidates && candidates->per_center[i].empty())) {
            rep.skipped = true;
            return;
        }
        Dictionary dict = build_dictionary(tree, rep.center);
        if (candidates) dict = dict.restrict_to(candidates->per_center[i]);
        rep.columns = dict.size();
        const auto res = solve_nn_lasso(dict, sub, lambda, opts.solver);
        rep.iterations = res.iterations;
        rep.converged = res.converged;
        for (std::size_t t = 0; t < dict.size(); ++t)
            if (res.coefficients[static_cast<Eigen::Index>(t)] >= opts.drop_below)
                found[i].emplace_back(dict.column_ids[t], res.coefficients[static_cast<Eigen::Index>(t)]);
    });

    Reconstruction out{BowHistogram(tree.num_leaves()), std::move(reports)};
    for (const auto& entries : found)
        for (const auto& [t, value] : entries) out.histogram.set(t, value);
    return out;
}

BowHistogram pseudo_bow(const DatabaseIndex& index, const Ranking& ranking, std::size_t top_r) {
    require(!ranking.items.empty(), "pseudo_bow: empty ranking");
    require(top_r >= 1, "pseudo_bow: top_r must be positive");
    const auto hists = top_histograms(index, ranking, top_r);
    BowHistogram out(hists.front()->vocab_size());
    const double weight = 1.0 / static_cast<double>(hists.size());
    for (const auto* h : hists) {
        const BowHistogram normalized = h->l1_normalized();
        for (const auto& [t, v] : normalized.entries()) out.add(t, weight * v);
    }
    return out;
}

Reconstruction reconstruct_bow_with_prior(const VladVector& v, const VocabularyTree& tree, const BowHistogram& h0,
                                          double alpha, const CandidateVWs* candidates, const PriorOptions& opts) {
    require(v.dim == tree.dim() && v.centers == tree.num_vlad_centers(),
            "reconstruct_bow_with_prior: VLAD shape does not match tree");
    require(!h0.empty(), "reconstruct_bow_with_prior: zero prior histogram");
    require(alpha > 0.0 && alpha < 1.0, "reconstruct_bow_with_prior: alpha must lie in (0, 1)");
    if (candidates)
        require(candidates->per_center.size() == v.centers,
                "reconstruct_bow_with_prior: candidate sets do not match centers");

    const double mass = opts.target_mass.value_or(h0.l1());
    require(mass > 0.0, "reconstruct_bow_with_prior: target mass must be positive");
    const double prior_scale = mass / h0.l1();

    double prior_norm = 0.0;
    for (const auto& [t, value] : h0.entries()) prior_norm += (value * prior_scale) * (value * prior_scale);
    const TikhonovNormalizers norms{v.values.squaredNorm(), prior_norm};
    require(norms.data > 0.0, "reconstruct_bow_with_prior: zero VLAD");

    // support(h0) grouped by center
    const BowHistogram* h0_ptr = &h0;
    const auto prior_support = CandidateVWs::from_histograms(tree, std::span<const BowHistogram* const>(&h0_ptr, 1));

    const std::size_t n = v.centers;
    std::vector<SubvectorReport> reports(n);
    std::vector<std::vector<std::pair<LeafId, double>>> found(n);

    parallel_for(n, opts.threads, [&](std::size_t i) {
        auto& rep = reports[i];
        rep.center = static_cast<CenterId>(i);
        const Vector sub = v.sub(i);
        std::vector<LeafId> allowed = prior_support.per_center[i];
        if (candidates) allowed = set_union(allowed, candidates->per_center[i]);
        if (sub.norm() < opts.skip_norm || allowed.empty()) {
            rep.skipped = true;
            return;
        }
        const Dictionary dict = build_dictionary(tree, rep.center).restrict_to(allowed);
        rep.columns = dict.size();
        Vector prior(static_cast<Eigen::Index>(dict.size()));
        for (std::size_t t = 0; t < dict.size(); ++t)
            prior[static_cast<Eigen::Index>(t)] = h0.at(dict.column_ids[t]) * prior_scale;
        const Vector h = solve_tikhonov(dict, sub, prior, alpha, norms);
        for (std::size_t t = 0; t < dict.size(); ++t)
            if (h[static_cast<Eigen::Index>(t)] > 0.0) found[i].emplace_back(dict.column_ids[t], h[static_cast<Eigen::Index>(t)]);
    });

    double total = 0.0;
    for (const auto& entries : found)
        for (const auto& [t, value] : entries) total += value;

    Reconstruction out{BowHistogram(tree.num_leaves()), std::move(reports)};
    if (total <= 0.0) return out;
    const double scale = mass / total;
    for (const auto& entries : found) {
        for (const auto& [t, value] : entries) {
            const double x = value * scale;
            // round down, forgiving round-off just below an integer
            const double count = std::floor(x + 1e-9 * std::max(1.0, x));
            if (count > 0.0) out.histogram.set(t, count);
        }
    }
    return out;
}

}  // namespace dehash
