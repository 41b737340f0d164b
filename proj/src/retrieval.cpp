#include "dehash/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>

#include "dehash/binary_io.hpp"
#include "dehash/kmeans.hpp"

namespace dehash {

namespace {

constexpr std::string_view kIndexMagic = "DHINDX01";

Ranking finish(Ranking r) {
    sort_ranking(r);
    return r;
}

double radians(double deg) { return deg * std::numbers::pi / 180.0; }
double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }

}  // namespace

std::optional<std::size_t> Ranking::rank_of(ImageId image) const {
    for (std::size_t i = 0; i < items.size(); ++i)
        if (items[i].image == image) return i + 1;
    return std::nullopt;
}

void sort_ranking(Ranking& r) {
    std::sort(r.items.begin(), r.items.end(), [](const RankedItem& a, const RankedItem& b) {
        if (a.score != b.score) return a.score < b.score;
        return a.image < b.image;
    });
}

// ---------------------------------------------------------------------------
// Product quantization

std::vector<std::uint16_t> PQCodebooks::encode(const Vector& x) const {
    require(trained(), "pq: codebooks are not trained");
    require(static_cast<std::size_t>(x.size()) == sub_dim * subquantizers, "pq: vector dimension mismatch");
    std::vector<std::uint16_t> code(subquantizers);
    const auto sd = static_cast<Eigen::Index>(sub_dim);
    for (std::uint32_t j = 0; j < subquantizers; ++j)
        code[j] = static_cast<std::uint16_t>(nearest_center(centers[j], x.segment(j * sd, sd)));
    return code;
}

PQCodebooks train_pq(std::span<const Vector> data, std::uint32_t m, std::uint32_t b, std::uint64_t seed) {
    require(!data.empty(), "train_pq: empty training set");
    require(m >= 1, "train_pq: need at least one sub-quantizer");
    require(b >= 1 && b <= 16, "train_pq: code bits must lie in [1, 16]");
    const auto full = static_cast<std::size_t>(data[0].size());
    require(full % m == 0, "train_pq: m must divide the vector dimension");

    PQCodebooks pq;
    pq.subquantizers = m;
    pq.code_bits = b;
    pq.sub_dim = full / m;
    const auto sd = static_cast<Eigen::Index>(pq.sub_dim);

    std::vector<std::uint32_t> members(data.size());
    for (std::uint32_t i = 0; i < members.size(); ++i) members[i] = i;

    for (std::uint32_t j = 0; j < m; ++j) {
        DescriptorSet sub(sd, static_cast<Eigen::Index>(data.size()));
        for (std::size_t i = 0; i < data.size(); ++i) {
            require(static_cast<std::size_t>(data[i].size()) == full, "train_pq: inconsistent dimensions");
            sub.col(static_cast<Eigen::Index>(i)) = data[i].segment(j * sd, sd);
        }
        std::seed_seq seq{seed, static_cast<std::uint64_t>(j)};
        std::mt19937_64 rng(seq);
        KMeansOptions opts;
        opts.k = std::size_t{1} << b;
        Matrix centers = kmeans(sub, members, opts, rng).centers;
        round_to_float(centers);
        pq.centers.push_back(std::move(centers));
    }
    return pq;
}

// ---------------------------------------------------------------------------
// Index

void DatabaseIndex::add(IndexedImage image) {
    require(!by_id_.contains(image.id), "index: duplicate image id");
    if (!images_.empty()) {
        const auto& first = images_.front();
        require(image.vlad.dim == first.vlad.dim && image.vlad.centers == first.vlad.centers,
                "index: VLAD shape differs from the rest of the database");
        require(image.code.size() == first.code.size(), "index: code length differs from the rest of the database");
    }
    // raw VLADs are normalized here; already-normalized ones are kept as is
    require(image.vlad.norm == VladNorm::None || image.vlad.norm == vlad_norm_,
            "index: VLAD normalized with a different mode");
    if (image.vlad.norm != vlad_norm_) image.vlad = normalize_vlad(std::move(image.vlad), vlad_norm_);
    round_to_float(image.vlad.values);
    by_id_.emplace(image.id, images_.size());
    normalized_.push_back(image.bow.l1_normalized());
    images_.push_back(std::move(image));
    postings_.clear();
}

void DatabaseIndex::attach_pq(PQCodebooks codebooks) {
    require(codebooks.trained(), "index: PQ codebooks are not trained");
    for (auto& img : images_) img.pq_code = codebooks.encode(img.vlad.values);
    pq_ = std::move(codebooks);
}

void DatabaseIndex::build_inverted_file() {
    postings_.clear();
    for (std::uint32_t pos = 0; pos < images_.size(); ++pos)
        for (const auto& [t, w] : normalized_[pos].entries()) postings_[t].push_back({pos, w});
}

const IndexedImage& DatabaseIndex::by_id(ImageId id) const {
    const auto it = by_id_.find(id);
    if (it == by_id_.end()) throw Error("index: unknown image id " + std::to_string(id));
    return images_[it->second];
}

// Layout: "DHINDX01", u32 count, u32 D, u32 N, u32 M, u32 K, u8 VLAD
// normalization; then per image u32 id, u8 flags (bit0 GPS, bit1 category),
// f64 lat + f64 lon if GPS, u32 category if set, u32 nnz, nnz x (u32 leaf,
// f32 count), D*N f32 normalized VLAD, ceil(K/8) code bytes. A trailing u8
// marks PQ codebooks, followed when set by u32 m, u32 b and m blocks of
// (D*N/m) x 2^b f32 centers; codes are re-derived on load.
std::vector<std::uint8_t> DatabaseIndex::serialize() const {
    io::ByteWriter w;
    w.magic(kIndexMagic);
    w.u32(static_cast<std::uint32_t>(images_.size()));
    const std::uint32_t dim = images_.empty() ? 0 : static_cast<std::uint32_t>(images_[0].vlad.dim);
    const std::uint32_t centers = images_.empty() ? 0 : static_cast<std::uint32_t>(images_[0].vlad.centers);
    const std::uint32_t vocab = images_.empty() ? 0 : static_cast<std::uint32_t>(images_[0].bow.vocab_size());
    const std::uint32_t bits = images_.empty() ? 0 : images_[0].code.size();
    w.u32(dim);
    w.u32(centers);
    w.u32(vocab);
    w.u32(bits);
    w.u8(static_cast<std::uint8_t>(vlad_norm_));
    for (const auto& img : images_) {
        w.u32(img.id);
        w.u8(static_cast<std::uint8_t>((img.gps ? 1 : 0) | (img.category ? 2 : 0)));
        if (img.gps) {
            w.f64(img.gps->lat);
            w.f64(img.gps->lon);
        }
        if (img.category) w.u32(*img.category);
        w.u32(static_cast<std::uint32_t>(img.bow.nonzeros()));
        for (const auto& [t, v] : img.bow.entries()) {
            w.u32(t);
            w.f32(static_cast<float>(v));
        }
        w.f32s(img.vlad.values);
        w.bytes(img.code.to_bytes());
    }
    w.u8(pq_.trained() ? 1 : 0);
    if (pq_.trained()) {
        w.u32(pq_.subquantizers);
        w.u32(pq_.code_bits);
        for (const auto& c : pq_.centers) w.f32s(c);
    }
    return w.take();
}

DatabaseIndex DatabaseIndex::deserialize(std::span<const std::uint8_t> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kIndexMagic);
    const auto count = r.u32();
    const auto dim = r.u32();
    const auto centers = r.u32();
    const auto vocab = r.u32();
    const auto bits = r.u32();
    const auto norm = r.u8();
    if (norm > static_cast<std::uint8_t>(VladNorm::IntraGlobalL2)) r.fail("unknown VLAD normalization");
    DatabaseIndex index(static_cast<VladNorm>(norm));
    for (std::uint32_t i = 0; i < count; ++i) {
        IndexedImage img;
        img.id = r.u32();
        const auto flags = r.u8();
        if (flags > 3) r.fail("unknown image flags");
        if (flags & 1) {
            GeoPoint g;
            g.lat = r.f64();
            g.lon = r.f64();
            img.gps = g;
        }
        if (flags & 2) img.category = r.u32();
        img.bow = BowHistogram(vocab);
        const auto nnz = r.u32();
        for (std::uint32_t e = 0; e < nnz; ++e) {
            const auto t = r.u32();
            const auto v = r.f32();
            if (t >= vocab || !(v > 0.0f)) r.fail("bad histogram entry");
            img.bow.set(t, v);
        }
        img.vlad = VladVector(dim, centers);
        img.vlad.values = r.f32_matrix(static_cast<std::size_t>(dim) * centers, 1);
        img.vlad.norm = static_cast<VladNorm>(norm);
        img.code = BinaryCode::from_bytes(bits, r.bytes((static_cast<std::size_t>(bits) + 7) / 8));
        try {
            index.add(std::move(img));
        } catch (const Error& e) {
            r.fail(e.what());
        }
    }
    const auto has_pq = r.u8();
    if (has_pq > 1) r.fail("bad PQ marker");
    if (has_pq) {
        PQCodebooks pq;
        pq.subquantizers = r.u32();
        pq.code_bits = r.u32();
        const std::size_t full = static_cast<std::size_t>(dim) * centers;
        if (pq.subquantizers == 0 || full % pq.subquantizers != 0) r.fail("PQ sub-quantizer count does not divide D*N");
        if (pq.code_bits == 0 || pq.code_bits > 16) r.fail("PQ code bits outside [1, 16]");
        pq.sub_dim = full / pq.subquantizers;
        for (std::uint32_t j = 0; j < pq.subquantizers; ++j)
            pq.centers.push_back(r.f32_matrix(pq.sub_dim, std::size_t{1} << pq.code_bits));
        index.attach_pq(std::move(pq));
    }
    if (!r.at_end()) r.fail("trailing bytes");
    return index;
}

void DatabaseIndex::save(const std::string& path) const { io::write_file(path, serialize()); }

DatabaseIndex DatabaseIndex::load(const std::string& path) {
    const auto bytes = io::read_file(path);
    return deserialize(bytes, path);
}

// ---------------------------------------------------------------------------
// Ranking

Ranking rank_bow_linear(const DatabaseIndex& index, const BowHistogram& h) {
    require(!index.empty(), "rank_bow: empty index");
    const BowHistogram q = h.l1_normalized();
    const double qnorm = q.empty() ? 0.0 : 1.0;
    Ranking r;
    r.degenerate = q.empty();
    r.items.reserve(index.size());
    for (std::size_t pos = 0; pos < index.size(); ++pos) {
        const auto& d = index.normalized_bow(pos).entries();
        double overlap = 0.0;
        auto a = q.entries().begin();
        auto b = d.begin();
        while (a != q.entries().end() && b != d.end()) {
            if (a->first < b->first)
                ++a;
            else if (b->first < a->first)
                ++b;
            else {
                overlap += std::min(a->second, b->second);
                ++a;
                ++b;
            }
        }
        const double dnorm = d.empty() ? 0.0 : 1.0;
        r.items.push_back({index.at(pos).id, qnorm + dnorm - 2.0 * overlap});
    }
    return finish(std::move(r));
}

Ranking rank_bow(const DatabaseIndex& index, const BowHistogram& h) {
    if (!index.has_inverted_file()) return rank_bow_linear(index, h);
    require(!index.empty(), "rank_bow: empty index");
    const BowHistogram q = h.l1_normalized();
    std::vector<double> overlap(index.size(), 0.0);
    for (const auto& [t, w] : q.entries()) {
        const auto it = index.postings().find(t);
        if (it == index.postings().end()) continue;
        for (const auto& p : it->second) overlap[p.pos] += std::min(w, p.weight);
    }
    const double qnorm = q.empty() ? 0.0 : 1.0;
    Ranking r;
    r.degenerate = q.empty();
    r.items.reserve(index.size());
    for (std::size_t pos = 0; pos < index.size(); ++pos) {
        const double dnorm = index.normalized_bow(pos).empty() ? 0.0 : 1.0;
        r.items.push_back({index.at(pos).id, qnorm + dnorm - 2.0 * overlap[pos]});
    }
    return finish(std::move(r));
}

Ranking rank_vlad(const DatabaseIndex& index, const VladVector& v) {
    require(!index.empty(), "rank_vlad: empty index");
    const VladVector q = normalize_vlad(v, index.vlad_norm());
    Ranking r;
    r.degenerate = q.values.squaredNorm() == 0.0;
    r.items.reserve(index.size());
    for (const auto& img : index.images()) {
        require(img.vlad.values.size() == q.values.size(), "rank_vlad: dimension mismatch");
        r.items.push_back({img.id, (img.vlad.values - q.values).norm()});
    }
    return finish(std::move(r));
}

Ranking rank_hamming(const DatabaseIndex& index, const BinaryCode& c) {
    require(!index.empty(), "rank_hamming: empty index");
    Ranking r;
    r.items.reserve(index.size());
    for (const auto& img : index.images()) r.items.push_back({img.id, static_cast<double>(img.code.hamming(c))});
    return finish(std::move(r));
}

Ranking rank_adc(const DatabaseIndex& index, const VladVector& v) {
    require(!index.empty(), "rank_adc: empty index");
    const auto& pq = index.pq();
    require(pq.trained(), "rank_adc: index has no PQ codebooks");
    const VladVector q = normalize_vlad(v, index.vlad_norm());
    require(static_cast<std::size_t>(q.values.size()) == pq.sub_dim * pq.subquantizers, "rank_adc: dimension mismatch");

    const auto sd = static_cast<Eigen::Index>(pq.sub_dim);
    const Eigen::Index k = pq.centers[0].cols();
    Matrix table(k, pq.subquantizers);
    for (std::uint32_t j = 0; j < pq.subquantizers; ++j)
        table.col(j) = (pq.centers[j].colwise() - q.values.segment(j * sd, sd)).colwise().squaredNorm().transpose();

    Ranking r;
    r.items.reserve(index.size());
    for (const auto& img : index.images()) {
        double d = 0.0;
        for (std::uint32_t j = 0; j < pq.subquantizers; ++j) d += table(img.pq_code[j], j);
        r.items.push_back({img.id, d});
    }
    return finish(std::move(r));
}

Ranking rank_gps(const DatabaseIndex& index, const GeoPoint& query) {
    require(!index.empty(), "rank_gps: empty index");
    Ranking r;
    r.items.reserve(index.size());
    for (const auto& img : index.images()) {
        const double d = img.gps ? haversine_meters(query, *img.gps) : std::numeric_limits<double>::infinity();
        r.items.push_back({img.id, d});
    }
    return finish(std::move(r));
}

// ---------------------------------------------------------------------------
// Geography

double haversine_meters(const GeoPoint& a, const GeoPoint& b) {
    const double dlat = radians(b.lat - a.lat);
    const double dlon = radians(b.lon - a.lon);
    const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(radians(a.lat)) * std::cos(radians(b.lat)) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * kEarthRadiusMeters * std::asin(std::min(1.0, std::sqrt(s)));
}

GeoPoint simulate_gps(const GeoPoint& truth, double sigma_meters, std::mt19937_64& rng) {
    require(std::abs(truth.lat) <= 90.0, "simulate_gps: latitude outside [-90, 90]");
    require(sigma_meters >= 0.0, "simulate_gps: negative sigma");
    if (sigma_meters == 0.0) return truth;
    std::normal_distribution<double> gauss(0.0, sigma_meters);
    const double north = gauss(rng);
    const double east = gauss(rng);
    GeoPoint out;
    out.lat = std::clamp(truth.lat + degrees(north / kEarthRadiusMeters), -90.0, 90.0);
    const double cos_lat = std::max(std::cos(radians(truth.lat)), 1e-12);
    out.lon = truth.lon + degrees(east / (kEarthRadiusMeters * cos_lat));
    if (out.lon >= 180.0) out.lon -= 360.0;
    if (out.lon < -180.0) out.lon += 360.0;
    return out;
}

GeoPoint simulate_gps(const GeoPoint& truth, double sigma_meters, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return simulate_gps(truth, sigma_meters, rng);
}

// ---------------------------------------------------------------------------
// Metrics

double average_precision(const Ranking& ranking, const std::set<ImageId>& relevant) {
    require(!relevant.empty(), "average_precision: query has no relevant images");
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.items.size(); ++i) {
        if (!relevant.contains(ranking.items[i].image)) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(relevant.size());
}

double mean_average_precision(std::span<const Ranking> rankings, std::span<const std::set<ImageId>> relevant) {
    require(rankings.size() == relevant.size(), "mean_average_precision: one relevant set per query");
    require(!rankings.empty(), "mean_average_precision: no queries");
    double sum = 0.0;
    for (std::size_t q = 0; q < rankings.size(); ++q) sum += average_precision(rankings[q], relevant[q]);
    return sum / static_cast<double>(rankings.size());
}

double recall_at(std::span<const Ranking> rankings, std::span<const ImageId> reference, std::size_t n) {
    require(rankings.size() == reference.size(), "recall_at: one reference per query");
    require(!rankings.empty(), "recall_at: no queries");
    std::size_t found = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto r = rankings[q].rank_of(reference[q]);
        if (!r) throw Error("recall_at: reference image missing from ranking");
        if (*r <= n) ++found;
    }
    return static_cast<double>(found) / static_cast<double>(rankings.size());
}

double ndcg(std::size_t rank) {
    require(rank >= 1, "ndcg: ranks are 1-based");
    return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

void write_ranking_dump(std::ostream& out, ImageId query, const Ranking& ranking) {
    const auto flags = out.flags();
    const auto prec = out.precision();
    out << std::setprecision(17);
    for (std::size_t i = 0; i < ranking.items.size(); ++i)
        out << query << ' ' << ranking.items[i].image << ' ' << (i + 1) << ' ' << ranking.items[i].score << '\n';
    out.flags(flags);
    out.precision(prec);
}

}  // namespace dehash
