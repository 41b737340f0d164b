#include <doctest.h>

#include <random>
#include <sstream>

#include "dehash/retrieval.hpp"
#include "oracles.hpp"

using namespace dehash;

namespace {

struct Toy {
    DatabaseIndex index;
    std::vector<std::vector<double>> dense_bow;
};

// n images with random sparse histograms over M words, random raw VLADs,
// random codes and GPS near Oxford.
Toy make_toy(std::size_t n, std::size_t m, VladNorm norm, std::uint64_t seed, bool inverted = false) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> count(0, 3);
    std::bernoulli_distribution coin(0.5);
    Toy toy{DatabaseIndex(norm), {}};
    for (std::size_t i = 0; i < n; ++i) {
        IndexedImage img;
        img.id = static_cast<ImageId>(100 + 3 * i);
        img.bow = BowHistogram(m);
        std::vector<double> dense(m, 0.0);
        for (std::size_t t = 0; t < m; ++t)
            if (coin(rng)) {
                const int c = count(rng);
                if (c > 0) {
                    img.bow.set(static_cast<LeafId>(t), c);
                    dense[t] = c;
                }
            }
        if (img.bow.empty()) {
            img.bow.set(0, 1.0);
            dense[0] = 1.0;
        }
        img.vlad = VladVector(3, 4);
        img.vlad.values = oracle::gaussian_matrix(12, 1, rng);
        img.code = BinaryCode(40);
        for (std::uint32_t k = 0; k < 40; ++k) img.code.set(k, coin(rng));
        img.gps = simulate_gps(GeoPoint{51.75, -1.25}, 3000.0, rng);
        img.category = static_cast<std::uint32_t>(i % 3);
        toy.index.add(std::move(img));
        toy.dense_bow.push_back(std::move(dense));
    }
    if (inverted) toy.index.build_inverted_file();
    return toy;
}

std::vector<std::pair<double, ImageId>> sorted_pairs(std::vector<std::pair<double, ImageId>> v) {
    std::sort(v.begin(), v.end());
    return v;
}

void check_matches(const Ranking& r, const std::vector<std::pair<double, ImageId>>& ref, double tol) {
    REQUIRE(r.size() == ref.size());
    for (std::size_t k = 0; k < ref.size(); ++k) {
        CHECK(r.items[k].image == ref[k].second);
        if (tol == 0.0)
            CHECK(r.items[k].score == ref[k].first);
        else
            CHECK(r.items[k].score == doctest::Approx(ref[k].first).epsilon(tol));
    }
}

}  // namespace

TEST_SUITE("retrieval") {

TEST_CASE("bow ranking equals a dense L1 scan, with and without inverted file") {
    const auto toy = make_toy(50, 30, VladNorm::GlobalL2, 1);
    const auto inv = make_toy(50, 30, VladNorm::GlobalL2, 1, true);
    REQUIRE(inv.index.has_inverted_file());
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> c(0, 4);
    for (int q = 0; q < 20; ++q) {
        BowHistogram h(30);
        std::vector<double> dense(30, 0.0);
        for (LeafId t = 0; t < 30; ++t)
            if (int x = c(rng); x > 2) {
                h.set(t, x);
                dense[t] = x;
            }
        if (h.empty()) continue;
        const double qs = std::accumulate(dense.begin(), dense.end(), 0.0);
        std::vector<std::pair<double, ImageId>> ref;
        for (std::size_t i = 0; i < toy.dense_bow.size(); ++i) {
            const auto& d = toy.dense_bow[i];
            const double ds = std::accumulate(d.begin(), d.end(), 0.0);
            double l1 = 0.0;
            for (std::size_t t = 0; t < 30; ++t) l1 += std::abs(dense[t] / qs - d[t] / ds);
            ref.push_back({l1, toy.index.at(i).id});
        }
        const auto sorted = sorted_pairs(ref);
        const auto lin = rank_bow(toy.index, h);
        const auto fast = rank_bow(inv.index, h);
        // oracle scores tie-break identically only up to rounding, so compare scores then ids of exact ties
        REQUIRE(lin.size() == sorted.size());
        for (std::size_t k = 0; k < sorted.size(); ++k) CHECK(lin.items[k].score == doctest::Approx(sorted[k].first).epsilon(1e-12));
        CHECK(fast.items == lin.items);
        CHECK(rank_bow_linear(inv.index, h).items == lin.items);
    }
}

TEST_CASE("bow ranking special cases") {
    const auto toy = make_toy(10, 20, VladNorm::GlobalL2, 3);
    const auto& self = toy.index.at(4);
    const auto r = rank_bow(toy.index, self.bow);
    CHECK(r.items.front().score == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(r.rank_of(self.id) == 1u);

    DatabaseIndex two(VladNorm::None);
    for (ImageId id : {1u, 2u}) {
        IndexedImage img;
        img.id = id;
        img.bow = BowHistogram(8);
        img.bow.set(id, 5.0);
        img.vlad = VladVector(1, 2);
        img.code = BinaryCode(4);
        two.add(std::move(img));
    }
    BowHistogram q(8);
    q.set(7, 1.0);
    const auto d = rank_bow(two, q);
    CHECK(d.items[0].score == 2.0);
    CHECK(d.items[1].score == 2.0);
    CHECK(d.items[0].image == 1);  // tie by id
    const auto empty = rank_bow(two, BowHistogram(8));
    CHECK(empty.degenerate);
    CHECK(empty.items[0].image == 1);
}

TEST_CASE("vlad and hamming rankings equal brute force") {
    for (auto norm : {VladNorm::None, VladNorm::GlobalL2, VladNorm::IntraGlobalL2}) {
        const auto toy = make_toy(40, 10, norm, 5);
        std::mt19937_64 rng(6);
        for (int q = 0; q < 10; ++q) {
            VladVector v(3, 4);
            v.values = oracle::gaussian_matrix(12, 1, rng);
            const auto qn = normalize_vlad(v, norm);
            std::vector<std::pair<double, ImageId>> ref;
            for (const auto& img : toy.index.images()) ref.push_back({(img.vlad.values - qn.values).norm(), img.id});
            check_matches(rank_vlad(toy.index, v), sorted_pairs(ref), 1e-12);

            BinaryCode c(40);
            std::bernoulli_distribution coin(0.5);
            for (std::uint32_t k = 0; k < 40; ++k) c.set(k, coin(rng));
            std::vector<std::pair<double, ImageId>> href;
            for (const auto& img : toy.index.images()) {
                int h = 0;
                for (std::uint32_t k = 0; k < 40; ++k) h += img.code.bit(k) != c.bit(k);
                href.push_back({double(h), img.id});
            }
            check_matches(rank_hamming(toy.index, c), sorted_pairs(href), 0.0);
        }
    }
}

TEST_CASE("vlad self match and orthonormal pair") {
    DatabaseIndex idx(VladNorm::GlobalL2);
    for (ImageId id : {0u, 1u}) {
        IndexedImage img;
        img.id = id;
        img.bow = BowHistogram(2);
        img.bow.set(0, 1);
        img.vlad = VladVector(2, 1);
        img.vlad.values(id) = 3.0;
        img.code = BinaryCode(2);
        idx.add(std::move(img));
    }
    VladVector q(2, 1);
    q.values(0) = 1.0;
    const auto r = rank_vlad(idx, q);
    CHECK(r.items[0].image == 0);
    CHECK(r.items[0].score == 0.0);
    CHECK(r.items[1].score == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("ADC with zero quantization error reproduces exact L2") {
    // every 2-d sub-vector takes one of 4 values, so 2^2 centers hold them exactly
    const double vals[4][2] = {{0.0, 0.0}, {1.0, 0.5}, {-0.75, 2.0}, {3.0, -1.25}};
    DatabaseIndex idx(VladNorm::None);
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> pick(0, 3);
    std::vector<Vector> train;
    for (ImageId id = 0; id < 30; ++id) {
        IndexedImage img;
        img.id = id;
        img.bow = BowHistogram(1);
        img.bow.set(0, 1);
        img.vlad = VladVector(2, 3);
        for (std::size_t s = 0; s < 3; ++s) {
            const int p = id < 4 ? static_cast<int>(id) : pick(rng);
            img.vlad.sub(s) << vals[p][0], vals[p][1];
        }
        img.code = BinaryCode(1);
        train.push_back(img.vlad.values);
        idx.add(std::move(img));
    }
    idx.attach_pq(train_pq(train, 3, 2, 11));
    for (int q = 0; q < 20; ++q) {
        VladVector v(2, 3);
        v.values = oracle::gaussian_matrix(6, 1, rng);
        const auto adc = rank_adc(idx, v);
        const auto exact = rank_vlad(idx, v);
        REQUIRE(adc.size() == exact.size());
        for (std::size_t k = 0; k < adc.size(); ++k) {
            CHECK(adc.items[k].image == exact.items[k].image);
            CHECK(adc.items[k].score == doctest::Approx(exact.items[k].score * exact.items[k].score).epsilon(1e-12));
        }
    }
}

TEST_CASE("ADC equals a table-free recomputation") {
    auto toy = make_toy(60, 5, VladNorm::IntraGlobalL2, 8);
    std::vector<Vector> data;
    for (const auto& img : toy.index.images()) data.push_back(img.vlad.values);
    auto pq = train_pq(data, 4, 3, 1);
    CHECK(pq.sub_dim == 3);
    toy.index.attach_pq(pq);
    std::mt19937_64 rng(9);
    VladVector v(3, 4);
    v.values = oracle::gaussian_matrix(12, 1, rng);
    const auto r = rank_adc(toy.index, v);
    const auto qn = normalize_vlad(v, VladNorm::IntraGlobalL2);
    for (const auto& item : r.items) {
        const auto& img = toy.index.by_id(item.image);
        Vector recon(12);
        for (std::size_t j = 0; j < 4; ++j) recon.segment(static_cast<long>(j) * 3, 3) = pq.centers[j].col(img.pq_code[j]);
        CHECK(item.score >= 0.0);
        CHECK(item.score == doctest::Approx((recon - qn.values).squaredNorm()).epsilon(1e-6));
    }
    // codes are nearest centers
    for (const auto& img : toy.index.images())
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(img.pq_code[j] == oracle::nearest_column(pq.centers[j], img.vlad.values.segment(static_cast<long>(j) * 3, 3)));
}

TEST_CASE("PQ argument errors") {
    std::vector<Vector> data{Vector::Ones(6), Vector::Zero(6)};
    CHECK_THROWS_AS(train_pq(data, 4, 2, 0), Error);
    CHECK_THROWS_AS(train_pq({}, 2, 2, 0), Error);
    auto toy = make_toy(3, 4, VladNorm::None, 1);
    CHECK_THROWS_AS(rank_adc(toy.index, VladVector(3, 4)), Error);
}

TEST_CASE("haversine against a chord oracle") {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> lat(-89.0, 89.0), lon(-180.0, 180.0);
    for (int k = 0; k < 500; ++k) {
        const GeoPoint a{lat(rng), lon(rng)};
        const GeoPoint b = k % 2 ? GeoPoint{lat(rng), lon(rng)} : simulate_gps(a, 100.0, rng);
        const double ref = oracle::chord_distance_meters(a.lat, a.lon, b.lat, b.lon, kEarthRadiusMeters);
        CHECK(std::abs(haversine_meters(a, b) - ref) <= 1e-9 * std::max(1.0, ref) + 1e-6);
    }
    CHECK(haversine_meters({10.0, 20.0}, {10.0, 20.0}) == 0.0);
}

TEST_CASE("GPS simulation") {
    const GeoPoint truth{51.752, -1.258};
    CHECK(simulate_gps(truth, 0.0, 3) == truth);
    std::mt19937_64 rng(12);
    double sum = 0.0;
    const int n = 10000;
    for (int k = 0; k < n; ++k) sum += haversine_meters(truth, simulate_gps(truth, 50.0, rng));
    const double expected = 50.0 * std::sqrt(M_PI / 2.0);
    CHECK(std::abs(sum / n - expected) <= 0.03 * expected);
    CHECK(simulate_gps(truth, 50.0, 99) == simulate_gps(truth, 50.0, 99));
    CHECK_THROWS_AS(simulate_gps(GeoPoint{91.0, 0.0}, 10.0, 1), Error);
}

TEST_CASE("GPS ranking is nearest first and images without GPS come last") {
    auto toy = make_toy(30, 5, VladNorm::None, 13);
    IndexedImage blind;
    blind.id = 1;
    blind.bow = BowHistogram(5);
    blind.bow.set(1, 1);
    blind.vlad = VladVector(3, 4);
    blind.code = BinaryCode(40);
    toy.index.add(std::move(blind));
    const GeoPoint q = *toy.index.at(7).gps;
    const auto r = rank_gps(toy.index, q);
    CHECK(r.items.front().image == toy.index.at(7).id);
    CHECK(r.items.front().score == 0.0);
    CHECK(r.items.back().image == 1);
    std::vector<std::pair<double, ImageId>> ref;
    for (const auto& img : toy.index.images())
        if (img.gps) ref.push_back({oracle::chord_distance_meters(q.lat, q.lon, img.gps->lat, img.gps->lon, kEarthRadiusMeters), img.id});
    ref = sorted_pairs(ref);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(r.items[k].image == ref[k].second);
}

TEST_CASE("metrics") {
    SUBCASE("ndcg values") {
        CHECK(ndcg(1) == 1.0);
        CHECK(ndcg(3) == 0.5);
        CHECK(ndcg(7) == 1.0 / 3.0);
        CHECK_THROWS_AS(ndcg(0), Error);
    }
    SUBCASE("trivial AP cases") {
        Ranking r;
        for (ImageId i : {4u, 5u, 6u, 7u}) r.items.push_back({i, double(i)});
        CHECK(average_precision(r, {4, 5}) == 1.0);
        CHECK(average_precision(r, {5}) == 0.5);
        CHECK_THROWS_AS(average_precision(r, {}), Error);
    }
    SUBCASE("random rankings against brute force") {
        std::mt19937_64 rng(14);
        std::vector<Ranking> rankings;
        std::vector<std::set<ImageId>> relevant;
        std::vector<ImageId> refs;
        std::vector<std::vector<unsigned>> orders;
        std::vector<std::set<unsigned>> rel_u;
        for (int q = 0; q < 100; ++q) {
            std::vector<unsigned> order(40);
            std::iota(order.begin(), order.end(), 0u);
            std::shuffle(order.begin(), order.end(), rng);
            std::set<unsigned> rel;
            const int nrel = 1 + static_cast<int>(rng() % 6);
            while (static_cast<int>(rel.size()) < nrel) rel.insert(static_cast<unsigned>(rng() % 40));
            Ranking r;
            for (std::size_t k = 0; k < order.size(); ++k) r.items.push_back({order[k], double(k)});
            rankings.push_back(r);
            relevant.push_back(std::set<ImageId>(rel.begin(), rel.end()));
            refs.push_back(*rel.begin());
            orders.push_back(order);
            rel_u.push_back(rel);
            CHECK(std::abs(average_precision(r, relevant.back()) - oracle::average_precision(order, rel)) <= 1e-9);
        }
        double ref_map = 0.0;
        for (int q = 0; q < 100; ++q) ref_map += oracle::average_precision(orders[static_cast<std::size_t>(q)], rel_u[static_cast<std::size_t>(q)]);
        CHECK(std::abs(mean_average_precision(rankings, relevant) - ref_map / 100.0) <= 1e-9);
        std::vector<unsigned> refs_u(refs.begin(), refs.end());
        for (std::size_t n : {1u, 5u, 10u, 40u})
            CHECK(std::abs(recall_at(rankings, refs, n) - oracle::recall_at(orders, refs_u, n)) <= 1e-9);
    }
    SUBCASE("metrics ignore monotone score transforms") {
        std::mt19937_64 rng(15);
        auto toy = make_toy(30, 8, VladNorm::GlobalL2, 16);
        VladVector v(3, 4);
        v.values = oracle::gaussian_matrix(12, 1, rng);
        Ranking r = rank_vlad(toy.index, v);
        Ranking t = r;
        for (auto& item : t.items) item.score = std::exp(3.0 * item.score) + 1.0;
        sort_ranking(t);
        const std::set<ImageId> rel{toy.index.at(2).id, toy.index.at(9).id};
        CHECK(average_precision(r, rel) == average_precision(t, rel));
        for (std::size_t k = 0; k < r.size(); ++k) CHECK(t.items[k].image == r.items[k].image);
    }
    SUBCASE("recall needs the reference in the ranking") {
        Ranking r;
        r.items.push_back({1, 0.0});
        std::vector<Ranking> rs{r};
        std::vector<ImageId> ref{2};
        CHECK_THROWS_AS(recall_at(rs, ref, 1), Error);
    }
}

TEST_CASE("index round trip and ranking dump") {
    auto toy = make_toy(20, 12, VladNorm::IntraGlobalL2, 17, true);
    std::vector<Vector> data;
    for (const auto& img : toy.index.images()) data.push_back(img.vlad.values);
    toy.index.attach_pq(train_pq(data, 2, 2, 5));
    const auto bytes = toy.index.serialize();
    const auto back = DatabaseIndex::deserialize(bytes);
    CHECK(back.serialize() == bytes);
    CHECK(back.size() == toy.index.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.at(i).pq_code == toy.index.at(i).pq_code);
        CHECK(back.at(i).bow == toy.index.at(i).bow);
        CHECK(back.at(i).gps == toy.index.at(i).gps);
    }
    for (std::size_t cut = 0; cut < bytes.size(); cut += 37) {
        std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
        CHECK_THROWS_AS(DatabaseIndex::deserialize(part), FormatError);
    }

    Ranking r;
    r.items = {{7, 0.5}, {3, 1.25}};
    std::ostringstream out;
    write_ranking_dump(out, 1000, r);
    CHECK(out.str() == "1000 7 1 0.5\n1000 3 2 1.25\n");
}

TEST_CASE("duplicate ids are rejected") {
    DatabaseIndex idx;
    IndexedImage img;
    img.id = 5;
    img.bow = BowHistogram(1);
    img.vlad = VladVector(1, 1);
    img.code = BinaryCode(1);
    idx.add(img);
    CHECK_THROWS_AS(idx.add(img), Error);
    CHECK_THROWS_AS(rank_bow(DatabaseIndex(), BowHistogram(1)), Error);
}

}  // TEST_SUITE
