#include "dehash/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dehash/binary_io.hpp"
#include "dehash/retrieval.hpp"

namespace dehash {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kDescMagic = "DHDESC01";

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end;
}

}  // namespace

std::vector<std::uint8_t> serialize_descriptors(const DescriptorSet& d) {
    io::ByteWriter w;
    w.magic(kDescMagic);
    w.u32(static_cast<std::uint32_t>(d.rows()));
    w.u32(static_cast<std::uint32_t>(d.cols()));
    w.f32s(d);
    return w.take();
}

DescriptorSet deserialize_descriptors(std::span<const std::uint8_t> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kDescMagic);
    const auto dim = r.u32();
    const auto count = r.u32();
    if (dim == 0) r.fail("descriptor dimension is zero");
    if (static_cast<std::uint64_t>(dim) * count * 4 != r.remaining()) r.fail("payload size does not match header");
    DescriptorSet d = r.f32_matrix(dim, count);
    if (!d.allFinite()) r.fail("non-finite descriptor value");
    return d;
}

void save_descriptors(const std::string& path, const DescriptorSet& d) { io::write_file(path, serialize_descriptors(d)); }

DescriptorSet load_descriptors(const std::string& path) { return deserialize_descriptors(io::read_file(path), path); }

std::vector<ImageRecord> ingest_dataset(const std::string& manifest_path) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw Error("cannot open manifest " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    std::vector<ImageRecord> records;
    std::set<ImageId> seen;
    std::string line;
    std::uint64_t offset = 0;
    while (std::getline(in, line)) {
        const std::uint64_t line_start = offset;
        offset += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto bad = [&](const std::string& what) { throw FormatError(manifest_path, line_start, what); };

        const auto f = split(line, '\t');
        if (f.size() != 6) bad("expected 6 tab-separated fields, got " + std::to_string(f.size()));
        ImageRecord rec;
        if (!parse_number(f[0], rec.id)) bad("bad image id '" + f[0] + "'");
        if (!seen.insert(rec.id).second) bad("duplicate image id " + f[0]);

        if ((f[2] == "-") != (f[3] == "-")) bad("lat and lon must be both present or both absent");
        if (f[2] != "-") {
            GeoPoint g;
            if (!parse_number(f[2], g.lat) || !parse_number(f[3], g.lon)) bad("bad coordinates");
            if (std::abs(g.lat) > 90.0 || std::abs(g.lon) > 180.0) bad("coordinates out of range");
            rec.gps = g;
        }
        if (f[4] != "-") {
            std::uint32_t c;
            if (!parse_number(f[4], c)) bad("bad category '" + f[4] + "'");
            rec.category = c;
        }
        if (f[5] != "-") {
            for (const auto& s : split(f[5], ',')) {
                ImageId r;
                if (!parse_number(s, r)) bad("bad relevant id '" + s + "'");
                rec.relevant.push_back(r);
            }
        }

        fs::path p(f[1]);
        if (p.is_relative()) p = base / p;
        rec.descriptors = load_descriptors(p.string());
        if (rec.descriptors.cols() == 0) throw FormatError(p.string(), 16, "descriptor file holds no descriptors");
        if (!records.empty() && rec.descriptors.rows() != records.front().descriptors.rows())
            bad("descriptor dimension " + std::to_string(rec.descriptors.rows()) + " differs from " +
                std::to_string(records.front().descriptors.rows()));
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw Error("manifest " + manifest_path + " lists no images");
    return records;
}

std::string write_dataset(const std::string& dir, const std::string& prefix, std::span<const ImageRecord> records) {
    fs::create_directories(dir);
    const std::string manifest = (fs::path(dir) / (prefix + "manifest.tsv")).string();
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw Error("cannot write " + manifest);
    out.precision(17);
    for (const auto& rec : records) {
        const std::string file = prefix + std::to_string(rec.id) + ".desc";
        save_descriptors((fs::path(dir) / file).string(), rec.descriptors);
        out << rec.id << '\t' << file << '\t';
        if (rec.gps)
            out << rec.gps->lat << '\t' << rec.gps->lon << '\t';
        else
            out << "-\t-\t";
        if (rec.category)
            out << *rec.category;
        else
            out << '-';
        out << '\t';
        if (rec.relevant.empty()) out << '-';
        for (std::size_t i = 0; i < rec.relevant.size(); ++i) out << (i ? "," : "") << rec.relevant[i];
        out << '\n';
    }
    if (!out) throw Error("failed writing " + manifest);
    return manifest;
}

DescriptorSet synthesize_training_descriptors(const SyntheticSpec& spec) {
    require(spec.dim > 0 && spec.training_descriptors > 0 && spec.mixture_components > 0,
            "synthesize_training_descriptors: empty spec");
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix means(spec.dim, spec.mixture_components);
    for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = gauss(rng);
    std::uniform_int_distribution<std::size_t> pick(0, spec.mixture_components - 1);
    DescriptorSet out(spec.dim, spec.training_descriptors);
    for (std::size_t j = 0; j < spec.training_descriptors; ++j) {
        const auto c = pick(rng);
        for (std::size_t r = 0; r < spec.dim; ++r) out(r, j) = means(r, c) + spec.mixture_std * gauss(rng);
        out.col(static_cast<Eigen::Index>(j)).normalize();  // unit length, like SIFT/SURF
    }
    round_to_float(out);
    return out;
}

BowHistogram histogram_of(std::span<const LeafId> leaves, std::size_t vocab_size) {
    BowHistogram h(vocab_size);
    for (LeafId t : leaves) h.add(t, 1.0);
    return h;
}

SyntheticDataset synthesize_dataset(const SyntheticSpec& spec, const VocabularyTree& tree) {
    require(spec.noise_std >= 0.0, "synthesize_dataset: negative noise std");
    require(spec.dim == tree.dim(), "synthesize_dataset: spec dimension does not match tree");
    require(spec.num_categories >= 1 && spec.num_objects >= 1, "synthesize_dataset: need categories and objects");
    require(spec.min_descriptors >= 1 && spec.min_descriptors <= spec.max_descriptors,
            "synthesize_dataset: bad descriptor count range");
    require(spec.distractor_fraction >= 0.0 && spec.distractor_fraction <= 1.0,
            "synthesize_dataset: distractor fraction outside [0, 1]");
    const std::size_t m = tree.num_leaves();
    if (spec.num_categories > m) throw Error("synthesize_dataset: more categories than leaves");
    const std::size_t per_category = m / spec.num_categories;
    if (spec.words_per_object == 0 || spec.words_per_object > per_category)
        throw Error("synthesize_dataset: words_per_object must lie in [1, leaves per category]");

    std::mt19937_64 rng(spec.seed ^ 0x5eed5eed5eedULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    SyntheticDataset out;

    // Shuffle leaves so that every category spans many VLAD centers.
    std::vector<LeafId> leaves(m);
    std::iota(leaves.begin(), leaves.end(), 0);
    std::shuffle(leaves.begin(), leaves.end(), rng);
    out.category_words.resize(spec.num_categories);
    for (std::size_t c = 0; c < spec.num_categories; ++c) {
        auto& w = out.category_words[c];
        w.assign(leaves.begin() + static_cast<std::ptrdiff_t>(c * per_category),
                 leaves.begin() + static_cast<std::ptrdiff_t>((c + 1) * per_category));
        std::sort(w.begin(), w.end());
    }

    std::vector<GeoPoint> clusters;
    for (std::size_t c = 0; c < spec.num_categories; ++c)
        clusters.push_back(simulate_gps(spec.origin, spec.category_spread_m, rng));

    struct Object {
        std::uint32_t category;
        std::vector<LeafId> words;
        std::vector<LeafId> others;
        GeoPoint location;
    };
    std::vector<Object> objects;
    for (std::size_t o = 0; o < spec.num_objects; ++o) {
        Object obj;
        obj.category = static_cast<std::uint32_t>(o % spec.num_categories);
        std::vector<LeafId> pool = out.category_words[obj.category];
        std::shuffle(pool.begin(), pool.end(), rng);
        obj.words.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.words_per_object));
        obj.others.assign(pool.begin() + static_cast<std::ptrdiff_t>(spec.words_per_object), pool.end());
        obj.location = simulate_gps(clusters[obj.category], spec.object_spread_m, rng);
        objects.push_back(std::move(obj));
    }

    std::uniform_int_distribution<std::size_t> count_dist(spec.min_descriptors, spec.max_descriptors);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto make_image = [&](ImageId id, const Object& obj, std::vector<LeafId>& drawn) {
        ImageRecord rec;
        rec.id = id;
        rec.category = obj.category;
        rec.gps = simulate_gps(obj.location, spec.gps_sigma_m, rng);
        const std::size_t n = count_dist(rng);
        rec.descriptors.resize(static_cast<Eigen::Index>(spec.dim), static_cast<Eigen::Index>(n));
        drawn.clear();
        for (std::size_t j = 0; j < n; ++j) {
            const bool distract = !obj.others.empty() && unit(rng) < spec.distractor_fraction;
            const auto& from = distract ? obj.others : obj.words;
            const LeafId t = from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
            drawn.push_back(t);
            auto col = rec.descriptors.col(static_cast<Eigen::Index>(j));
            col = tree.leaf_center(t);
            if (spec.noise_std > 0.0)
                for (Eigen::Index r = 0; r < col.size(); ++r) col[r] += spec.noise_std * gauss(rng);
        }
        round_to_float(rec.descriptors);
        return rec;
    };

    std::vector<std::vector<ImageId>> members(spec.num_objects);
    std::vector<LeafId> drawn;
    for (std::size_t o = 0; o < spec.num_objects; ++o) {
        for (std::size_t k = 0; k < spec.images_per_object; ++k) {
            const auto id = static_cast<ImageId>(out.database.size());
            out.database.push_back(make_image(id, objects[o], drawn));
            out.database_leaves.push_back(drawn);
            members[o].push_back(id);
        }
    }
    for (std::size_t k = 0; k < spec.queries_per_object; ++k) {
        for (std::size_t o = 0; o < spec.num_objects; ++o) {
            const auto id = static_cast<ImageId>(kFirstQueryId + out.queries.size());
            auto rec = make_image(id, objects[o], drawn);
            rec.relevant = members[o];
            out.queries.push_back(std::move(rec));
            out.query_leaves.push_back(drawn);
        }
    }
    return out;
}

}  // namespace dehash
