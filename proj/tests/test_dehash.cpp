#include <doctest.h>

#include <cmath>
#include <random>

#include "dehash/dataset.hpp"
#include "dehash/dehash.hpp"
#include "oracles.hpp"

using namespace dehash;

namespace {

// D = 16 with 16 leaves per VLAD center: each dictionary is square and, for
// generic training data, has linearly independent columns.
struct ExactFixture {
    VocabularyTree tree;
    SyntheticDataset data;
    DatabaseIndex index;
};

const ExactFixture& exact() {
    static const ExactFixture fx = [] {
        SyntheticSpec spec;
        spec.training_descriptors = 6000;
        spec.seed = 5;
        const auto training = synthesize_training_descriptors(spec);
        auto tree = train_vocabulary(training, {.branch = 4, .levels = 3, .vlad_level = 1, .seed = 3});
        spec.noise_std = 0.0;
        spec.num_objects = 10;
        spec.images_per_object = 4;
        auto data = synthesize_dataset(spec, tree);
        DatabaseIndex index(VladNorm::IntraGlobalL2);
        for (const auto& rec : data.database) {
            IndexedImage img;
            img.id = rec.id;
            img.bow = compute_bow(tree, rec.descriptors);
            img.vlad = compute_vlad(tree, rec.descriptors);
            img.code = BinaryCode(8);
            img.gps = rec.gps;
            img.category = rec.category;
            index.add(std::move(img));
        }
        return ExactFixture{std::move(tree), std::move(data), std::move(index)};
    }();
    return fx;
}

BowHistogram rounded(const BowHistogram& h) {
    BowHistogram out(h.vocab_size());
    for (const auto& [t, v] : h.entries()) out.set(t, std::round(v));
    return out;
}

bool subset_of(const CandidateVWs& a, const CandidateVWs& b) {
    for (std::size_t i = 0; i < a.per_center.size(); ++i)
        if (!std::includes(b.per_center[i].begin(), b.per_center[i].end(), a.per_center[i].begin(), a.per_center[i].end()))
            return false;
    return true;
}

CandidateVWs make_sets(std::vector<std::vector<LeafId>> sets) { return CandidateVWs{std::move(sets)}; }

}  // namespace

TEST_SUITE("dehash") {

TEST_CASE("dictionary columns are leaf minus VLAD center") {
    const auto& tree = exact().tree;
    for (CenterId i = 0; i < tree.num_vlad_centers(); ++i) {
        const auto d = build_dictionary(tree, i);
        CHECK(d.vlad_id == i);
        CHECK(d.column_ids == tree.subtree_leaves(i));
        REQUIRE(d.columns.cols() == 16);
        for (std::size_t k = 0; k < d.size(); ++k)
            CHECK(d.columns.col(static_cast<long>(k)) == tree.leaf_center(d.column_ids[k]) - tree.vlad_center(i));
        // a descriptor placed on a leaf has that column as its residual
        CHECK(Vector(tree.leaf_center(d.column_ids[3]) - tree.vlad_center(i)) == d.columns.col(3));
    }
}

TEST_CASE("leaf sitting on its VLAD center gives a flagged zero column") {
    Matrix vlad(1, 2);
    vlad << 0.0, 10.0;
    Matrix leaves(1, 4);
    leaves << 0.0, 1.0, 9.0, 11.0;
    VocabularyTree tree(TreeShape{2, 2, 1}, vlad, {leaves});
    const auto d = build_dictionary(tree, 0);
    CHECK(d.zero_columns() == std::vector<std::size_t>{0});
    CHECK(d.columns(0, 1) == 1.0);
    CHECK(build_dictionary(tree, 1).zero_columns().empty());
}

TEST_CASE("exact regime round trip") {
    const auto& fx = exact();
    std::size_t match = 0, total = 0;
    for (const auto& rec : fx.data.database) {
        const auto truth = compute_bow(fx.tree, rec.descriptors);
        const auto recon = reconstruct_bow(compute_vlad(fx.tree, rec.descriptors), fx.tree, 1e-4);
        CHECK(recon.converged());
        const auto r = rounded(recon.histogram);
        for (const auto& [t, c] : truth.entries()) {
            ++total;
            match += r.at(t) == c;
        }
    }
    CHECK(double(match) >= 0.95 * double(total));
}

TEST_CASE("generator bookkeeping: zero noise puts descriptors on leaves") {
    const auto& fx = exact();
    for (std::size_t k = 0; k < fx.data.database.size(); ++k) {
        const auto& rec = fx.data.database[k];
        const auto& leaves = fx.data.database_leaves[k];
        for (long j = 0; j < rec.descriptors.cols(); ++j)
            CHECK(rec.descriptors.col(j) == fx.tree.leaf_center(leaves[static_cast<std::size_t>(j)]));
        CHECK(compute_bow(fx.tree, rec.descriptors) == histogram_of(leaves, fx.tree.num_leaves()));
    }
}

TEST_CASE("restriction safety and support bound") {
    const auto& fx = exact();
    std::mt19937_64 rng(4);
    for (std::size_t k = 0; k < 10; ++k) {
        const auto& rec = fx.data.database[k];
        const auto truth = compute_bow(fx.tree, rec.descriptors);
        const auto v = compute_vlad(fx.tree, rec.descriptors);
        const BowHistogram* h[] = {&truth};
        auto cands = CandidateVWs::from_histograms(fx.tree, h);
        // pad with a few extra leaves
        for (auto& set : cands.per_center) {
            if (set.empty()) continue;
            const auto [first, count] = fx.tree.subtree_range(fx.tree.parent_of_leaf(set.front()));
            set.push_back(first + static_cast<LeafId>(rng() % count));
            std::sort(set.begin(), set.end());
            set.erase(std::unique(set.begin(), set.end()), set.end());
        }
        const auto full = reconstruct_bow(v, fx.tree, 1e-4);
        const auto restricted = reconstruct_bow(v, fx.tree, 1e-4, &cands);
        CHECK(rounded(restricted.histogram) == rounded(full.histogram));
        CHECK(restricted.columns_used() <= full.columns_used());
        for (const auto& [t, c] : restricted.histogram.entries()) {
            const auto& set = cands.per_center[fx.tree.parent_of_leaf(t)];
            CHECK(std::binary_search(set.begin(), set.end(), t));
            CHECK(c > 0.0);
        }
    }
}

TEST_CASE("zero VLAD and skipped centers") {
    const auto& tree = exact().tree;
    const auto r = reconstruct_bow(VladVector(tree.dim(), tree.num_vlad_centers()), tree, 0.02);
    CHECK(r.histogram.empty());
    CHECK(r.columns_used() == 0);
    for (const auto& s : r.subvectors) CHECK(s.skipped);

    // an empty candidate set skips its sub-vector even when nonzero
    const auto& rec = exact().data.database[0];
    const auto v = compute_vlad(tree, rec.descriptors);
    const auto none = CandidateVWs::none(tree.num_vlad_centers());
    CHECK(reconstruct_bow(v, tree, 0.02, &none).histogram.empty());
}

TEST_CASE("threaded reconstruction matches serial") {
    const auto& fx = exact();
    const auto v = compute_vlad(fx.tree, fx.data.queries[0].descriptors);
    ReconstructOptions par;
    par.threads = 4;
    CHECK(reconstruct_bow(v, fx.tree, 0.01, nullptr, par).histogram == reconstruct_bow(v, fx.tree, 0.01).histogram);
}

TEST_CASE("binary and GPS candidates") {
    const auto& fx = exact();
    const auto& idx = fx.index;
    Ranking all;
    for (const auto& img : idx.images()) all.items.push_back({img.id, 0.0});

    std::vector<const BowHistogram*> every;
    for (const auto& img : idx.images()) every.push_back(&img.bow);
    const auto db_support = CandidateVWs::from_histograms(fx.tree, every);

    CHECK(candidates_from_binary(idx, fx.tree, all, idx.size()) == db_support);
    const auto one = candidates_from_binary(idx, fx.tree, all, 1);
    CHECK(one.total() == idx.at(0).bow.nonzeros());
    for (std::size_t i = 0; i < one.per_center.size(); ++i)
        for (LeafId t : one.per_center[i]) CHECK(fx.tree.parent_of_leaf(t) == i);

    CHECK(candidates_from_gps(idx, fx.tree, idx.at(3).gps, idx.size()) == db_support);
    const auto near = candidates_from_gps(idx, fx.tree, idx.at(3).gps, 1);
    CHECK(near.total() == idx.at(3).bow.nonzeros());
    CHECK_THROWS_AS(candidates_from_gps(idx, fx.tree, std::nullopt, 3), Error);
    CHECK_THROWS_AS(candidates_from_binary(idx, fx.tree, Ranking{}, 3), Error);
    CHECK(candidates_from_binary(idx, fx.tree, all, 5).total() <= CandidateVWs::full(fx.tree).total());
}

TEST_CASE("category candidates are disjoint across generator categories") {
    const auto& fx = exact();
    std::vector<CandidateVWs> per;
    for (std::uint32_t c = 0; c < 5; ++c) per.push_back(candidates_from_category(fx.index, fx.tree, c));
    for (std::size_t a = 0; a < per.size(); ++a)
        for (std::size_t b = a + 1; b < per.size(); ++b) {
            const std::vector<CandidateVWs> pair{per[a], per[b]};
            CHECK(combine_candidates(pair, CombineMode::Intersection).total() == 0);
        }
    CHECK_THROWS_AS(candidates_from_category(fx.index, fx.tree, 99), Error);

    // a single-category database yields every VW it holds
    DatabaseIndex mono;
    std::vector<const BowHistogram*> hists;
    for (std::size_t k = 0; k < 5; ++k) {
        IndexedImage img = fx.index.at(k);
        img.category = 0;
        mono.add(img);
    }
    for (const auto& img : mono.images()) hists.push_back(&img.bow);
    CHECK(candidates_from_category(mono, fx.tree, 0) == CandidateVWs::from_histograms(fx.tree, hists));
}

TEST_CASE("combining candidate sets") {
    const auto a = make_sets({{1, 2, 3}, {10}, {}});
    const auto b = make_sets({{2, 5}, {}, {20}});
    const auto empty = CandidateVWs::none(3);
    const std::vector<CandidateVWs> aa{a, a}, ae{a, empty}, ab{a, b};
    CHECK(combine_candidates(aa, CombineMode::Union) == a);
    CHECK(combine_candidates(aa, CombineMode::Intersection) == a);
    CHECK(combine_candidates(ae, CombineMode::Intersection) == empty);
    const auto u = combine_candidates(ab, CombineMode::Union);
    CHECK(u == make_sets({{1, 2, 3, 5}, {10}, {20}}));
    CHECK(subset_of(a, u));
    CHECK(subset_of(b, u));
    CHECK(combine_candidates(ab, CombineMode::Intersection) == make_sets({{2}, {}, {}}));
    CHECK(combine_candidates(ab, CombineMode::IntersectionOrUnion) == make_sets({{2}, {10}, {20}}));
    CHECK_THROWS_AS(combine_candidates({}, CombineMode::Union), Error);
}

TEST_CASE("pseudo bow") {
    DatabaseIndex idx;
    auto add = [&](ImageId id, std::vector<std::pair<LeafId, double>> e) {
        IndexedImage img;
        img.id = id;
        img.bow = BowHistogram(10);
        for (auto [t, c] : e) img.bow.set(t, c);
        img.vlad = VladVector(1, 1);
        img.code = BinaryCode(1);
        idx.add(std::move(img));
    };
    add(0, {{1, 3.0}, {2, 1.0}});
    add(1, {{1, 3.0}, {2, 1.0}});
    add(2, {{7, 4.0}});
    add(3, {{8, 1.0}});
    auto ranking = [](std::vector<ImageId> ids) {
        Ranking r;
        for (ImageId id : ids) r.items.push_back({id, 0.0});
        return r;
    };
    const auto top1 = pseudo_bow(idx, ranking({0, 1, 2}), 1);
    CHECK(top1 == idx.at(0).bow.l1_normalized());
    CHECK(pseudo_bow(idx, ranking({0, 1, 2}), 2) == top1);
    const auto two = pseudo_bow(idx, ranking({2, 3}), 2);
    CHECK(two.nonzeros() == 2);
    CHECK(two.at(7) == 0.5);
    CHECK(two.at(8) == 0.5);
    CHECK(pseudo_bow(idx, ranking({3}), 10).at(8) == 1.0);
    CHECK_THROWS_AS(pseudo_bow(idx, Ranking{}, 1), Error);
}

TEST_CASE("prior refinement limits") {
    const auto& fx = exact();
    for (std::size_t k = 0; k < 5; ++k) {
        const auto& rec = fx.data.database[k];
        const auto truth = compute_bow(fx.tree, rec.descriptors);
        const auto v = compute_vlad(fx.tree, rec.descriptors);

        // data term and prior agree: the truth comes back
        CHECK(reconstruct_bow_with_prior(v, fx.tree, truth, 1.0 - 1e-9).histogram == truth);

        // prior dominates: floor of the rescaled prior
        // prior from another image, kept to centers where v has features (others are skipped)
        const auto foreign = compute_bow(fx.tree, fx.data.database[k + 20].descriptors);
        BowHistogram other(foreign.vocab_size());
        for (const auto& [t, c] : foreign.entries())
            if (v.sub(fx.tree.parent_of_leaf(t)).norm() > 0.0) other.set(t, c);
        REQUIRE_FALSE(other.empty());
        const double mass = 1.5 * other.l1();
        PriorOptions opts;
        opts.target_mass = mass;
        const auto r = reconstruct_bow_with_prior(v, fx.tree, other, 1e-12, nullptr, opts);
        BowHistogram want(other.vocab_size());
        for (const auto& [t, c] : other.entries()) want.set(t, std::floor(c * 1.5 + 1e-9));
        CHECK(r.histogram == want);

        // support bound with candidates
        const auto cands = candidates_from_category(fx.index, fx.tree, *rec.category);
        const auto prior = pseudo_bow(fx.index, rank_bow(fx.index, truth), 3);
        const auto refined = reconstruct_bow_with_prior(v, fx.tree, prior, 0.5, &cands, {.target_mass = truth.l1()});
        for (const auto& [t, c] : refined.histogram.entries()) {
            const auto& set = cands.per_center[fx.tree.parent_of_leaf(t)];
            CHECK((std::binary_search(set.begin(), set.end(), t) || prior.at(t) > 0.0));
            CHECK(c == std::floor(c));
            CHECK(c >= 1.0);
        }
    }
    const auto v = compute_vlad(fx.tree, fx.data.database[0].descriptors);
    CHECK_THROWS_AS(reconstruct_bow_with_prior(v, fx.tree, BowHistogram(64), 0.5), Error);
    const auto h = compute_bow(fx.tree, fx.data.database[0].descriptors);
    CHECK_THROWS_AS(reconstruct_bow_with_prior(v, fx.tree, h, 0.0), Error);
    CHECK_THROWS_AS(reconstruct_bow_with_prior(v, fx.tree, h, 1.0), Error);
}

}  // TEST_SUITE
