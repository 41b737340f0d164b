#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dehash/aggregate.hpp"
#include "dehash/context.hpp"
#include "dehash/hashing.hpp"

namespace dehash {

struct RankedItem {
    ImageId image = 0;
    double score = 0.0;
    bool operator==(const RankedItem&) const = default;
};

/// Best first. Distances ascend; ties go to the lower image id.
struct Ranking {
    std::vector<RankedItem> items;
    bool degenerate = false;  ///< query carried no information (e.g. empty histogram)

    std::size_t size() const { return items.size(); }
    /// 1-based rank of `image`, or nullopt when absent.
    std::optional<std::size_t> rank_of(ImageId image) const;
};

struct PQCodebooks {
    std::uint32_t subquantizers = 0;  ///< m
    std::uint32_t code_bits = 0;      ///< b, 2^b centers per sub-quantizer
    std::size_t sub_dim = 0;
    std::vector<Matrix> centers;      ///< m matrices of sub_dim x 2^b

    bool trained() const { return !centers.empty(); }
    std::vector<std::uint16_t> encode(const Vector& x) const;
};

PQCodebooks train_pq(std::span<const Vector> data, std::uint32_t m, std::uint32_t b, std::uint64_t seed);

struct IndexedImage {
    ImageId id = 0;
    BowHistogram bow;                     ///< raw counts
    VladVector vlad;                      ///< normalized for ranking
    BinaryCode code;
    std::vector<std::uint16_t> pq_code;   ///< empty unless PQ-encoded
    std::optional<GeoPoint> gps;
    std::optional<std::uint32_t> category;
};

/// Linear-scan database over every representation of each image, with an
/// optional inverted file over the BoW histograms. Immutable once built.
class DatabaseIndex {
public:
    explicit DatabaseIndex(VladNorm vlad_norm = VladNorm::IntraGlobalL2) : vlad_norm_(vlad_norm) {}

    /// The VLAD is stored after normalization at float32 precision.
    void add(IndexedImage image);
    /// Trains nothing: encodes every stored VLAD with `codebooks`.
    void attach_pq(PQCodebooks codebooks);
    void build_inverted_file();

    std::size_t size() const { return images_.size(); }
    bool empty() const { return images_.empty(); }
    const std::vector<IndexedImage>& images() const { return images_; }
    const IndexedImage& at(std::size_t pos) const { return images_.at(pos); }
    const IndexedImage& by_id(ImageId id) const;
    VladNorm vlad_norm() const { return vlad_norm_; }
    const PQCodebooks& pq() const { return pq_; }
    bool has_inverted_file() const { return !postings_.empty(); }

    /// L1-normalized stored histogram of image at position `pos`.
    const BowHistogram& normalized_bow(std::size_t pos) const { return normalized_.at(pos); }

    struct Posting {
        std::uint32_t pos;
        double weight;
    };
    const std::map<LeafId, std::vector<Posting>>& postings() const { return postings_; }

    std::vector<std::uint8_t> serialize() const;
    static DatabaseIndex deserialize(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
    void save(const std::string& path) const;
    static DatabaseIndex load(const std::string& path);

private:
    VladNorm vlad_norm_;
    std::vector<IndexedImage> images_;
    std::vector<BowHistogram> normalized_;
    std::map<ImageId, std::size_t> by_id_;
    std::map<LeafId, std::vector<Posting>> postings_;
    PQCodebooks pq_;
};

/// L1 distance between L1-normalized histograms. Uses the inverted file when
/// the index has one; the result is identical either way.
Ranking rank_bow(const DatabaseIndex& index, const BowHistogram& h);
Ranking rank_bow_linear(const DatabaseIndex& index, const BowHistogram& h);
/// L2 distance; the query is normalized with the index's VLAD mode.
Ranking rank_vlad(const DatabaseIndex& index, const VladVector& v);
Ranking rank_hamming(const DatabaseIndex& index, const BinaryCode& c);
/// Asymmetric distance: squared L2 from the (normalized) uncompressed query to
/// each stored PQ reconstruction, evaluated through per-query lookup tables.
Ranking rank_adc(const DatabaseIndex& index, const VladVector& v);
/// Haversine distance in meters; images without GPS rank last.
Ranking rank_gps(const DatabaseIndex& index, const GeoPoint& query);

/// Sorts by (score, image id).
void sort_ranking(Ranking& r);

// --- geography ------------------------------------------------------------

constexpr double kEarthRadiusMeters = 6371008.8;

double haversine_meters(const GeoPoint& a, const GeoPoint& b);

/// Independent Gaussian displacement of std `sigma_meters` along the local
/// north and east axes, converted to degrees.
GeoPoint simulate_gps(const GeoPoint& truth, double sigma_meters, std::mt19937_64& rng);
GeoPoint simulate_gps(const GeoPoint& truth, double sigma_meters, std::uint64_t seed);

// --- metrics --------------------------------------------------------------

double average_precision(const Ranking& ranking, const std::set<ImageId>& relevant);
double mean_average_precision(std::span<const Ranking> rankings, std::span<const std::set<ImageId>> relevant);
/// Fraction of queries whose reference image appears in the top n.
double recall_at(std::span<const Ranking> rankings, std::span<const ImageId> reference, std::size_t n);
/// 1 / log2(r + 1) for a single relevant image at 1-based rank r.
double ndcg(std::size_t rank);

/// One line per result: "query_id image_id rank score".
void write_ranking_dump(std::ostream& out, ImageId query, const Ranking& ranking);

}  // namespace dehash
