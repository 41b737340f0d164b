#include "dehash/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dehash/wire.hpp"

namespace dehash {

using nlohmann::json;

namespace {

constexpr const char* kModeNames[] = {"bow",       "vlad",      "hamming", "approx-vlad", "adc",
                                      "vlad-to-bow", "recon-bow", "cads",    "brpk",        "gps"};

bool needs_reversal(Mode m) {
    return m == Mode::ApproxVlad || m == Mode::Adc || m == Mode::ReconBow || m == Mode::Cads || m == Mode::Brpk;
}

bool has_mode(std::span<const Mode> modes, Mode m) { return std::find(modes.begin(), modes.end(), m) != modes.end(); }

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Times `fn` and re-throws failures tagged with the stage name.
template <typename Fn>
auto stage(const char* name, std::vector<std::pair<std::string, double>>& timings, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    auto record = [&] {
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
        timings.emplace_back(name, dt.count());
    };
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            record();
        } else {
            auto out = fn();
            record();
            return out;
        }
    } catch (const std::exception& e) {
        throw Error(std::string("[") + name + "] " + e.what());
    }
}

ReconRecord make_record(ImageId q, Mode mode, double lambda, const Reconstruction& rec) {
    ReconRecord r;
    r.query = q;
    r.mode = mode;
    r.lambda = lambda;
    for (const auto& s : rec.subvectors) {
        r.columns.push_back(s.columns);
        r.iterations.push_back(s.iterations);
    }
    r.converged = rec.converged();
    r.vws = rec.histogram.nonzeros();
    return r;
}

json synth_to_json(const SyntheticSpec& s) {
    return json{{"dim", s.dim},
                {"training_descriptors", s.training_descriptors},
                {"mixture_components", s.mixture_components},
                {"mixture_std", s.mixture_std},
                {"num_objects", s.num_objects},
                {"images_per_object", s.images_per_object},
                {"queries_per_object", s.queries_per_object},
                {"min_descriptors", s.min_descriptors},
                {"max_descriptors", s.max_descriptors},
                {"words_per_object", s.words_per_object},
                {"distractor_fraction", s.distractor_fraction},
                {"noise_std", s.noise_std},
                {"num_categories", s.num_categories},
                {"origin_lat", s.origin.lat},
                {"origin_lon", s.origin.lon},
                {"category_spread_m", s.category_spread_m},
                {"object_spread_m", s.object_spread_m},
                {"gps_sigma_m", s.gps_sigma_m},
                {"seed", s.seed}};
}

template <typename T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const json& j, const json& known, const std::string& where) {
    for (const auto& [k, v] : j.items())
        if (!known.contains(k)) throw Error("config: unknown key '" + k + "'" + where);
}

SyntheticSpec synth_from_json(const json& j, SyntheticSpec s) {
    check_keys(j, synth_to_json(s), " in synth");
    take(j, "dim", s.dim);
    take(j, "training_descriptors", s.training_descriptors);
    take(j, "mixture_components", s.mixture_components);
    take(j, "mixture_std", s.mixture_std);
    take(j, "num_objects", s.num_objects);
    take(j, "images_per_object", s.images_per_object);
    take(j, "queries_per_object", s.queries_per_object);
    take(j, "min_descriptors", s.min_descriptors);
    take(j, "max_descriptors", s.max_descriptors);
    take(j, "words_per_object", s.words_per_object);
    take(j, "distractor_fraction", s.distractor_fraction);
    take(j, "noise_std", s.noise_std);
    take(j, "num_categories", s.num_categories);
    take(j, "origin_lat", s.origin.lat);
    take(j, "origin_lon", s.origin.lon);
    take(j, "category_spread_m", s.category_spread_m);
    take(j, "object_spread_m", s.object_spread_m);
    take(j, "gps_sigma_m", s.gps_sigma_m);
    take(j, "seed", s.seed);
    return s;
}

json config_json(const ExperimentConfig& c) {
    json modes = json::array();
    for (auto m : c.modes) modes.push_back(to_string(m));
    json cues = json::array();
    for (auto q : c.cues) cues.push_back(to_string(q));
    return json{{"branch", c.branch},
                {"levels", c.levels},
                {"vlad_level", c.vlad_level},
                {"tree_seed", c.tree_seed},
                {"variant", to_string(c.variant)},
                {"bits", c.bits},
                {"hash_seed", c.hash_seed},
                {"random_rotation", c.random_rotation},
                {"vlad_norm", to_string(c.vlad_norm)},
                {"lambda", c.lambda},
                {"lambda_auto", c.lambda_auto},
                {"alpha", c.alpha},
                {"top_r", c.top_r},
                {"prior_top_r", c.prior_top_r},
                {"cues", cues},
                {"combine", to_string(c.combine)},
                {"threads", c.threads},
                {"pq_m", c.pq_m},
                {"pq_b", c.pq_b},
                {"pq_seed", c.pq_seed},
                {"modes", modes},
                {"recall_at", c.recall_at},
                {"lambda_sweep", c.lambda_sweep},
                {"sweep_queries", c.sweep_queries},
                {"database_manifest", c.database_manifest},
                {"query_manifest", c.query_manifest},
                {"synth", synth_to_json(c.synth)},
                {"output_dir", c.output_dir}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Names

const char* to_string(Mode m) { return kModeNames[static_cast<int>(m)]; }

Mode parse_mode(const std::string& s) {
    for (int i = 0; i < static_cast<int>(std::size(kModeNames)); ++i)
        if (s == kModeNames[i]) return static_cast<Mode>(i);
    throw Error("unknown mode '" + s + "'");
}

std::vector<Mode> all_modes() {
    std::vector<Mode> out;
    for (int i = 0; i < static_cast<int>(std::size(kModeNames)); ++i) out.push_back(static_cast<Mode>(i));
    return out;
}

const char* to_string(Cue c) {
    switch (c) {
        case Cue::Binary: return "binary";
        case Cue::Gps: return "gps";
        case Cue::Category: return "category";
    }
    return "?";
}

Cue parse_cue(const std::string& s) {
    if (s == "binary" || s == "b") return Cue::Binary;
    if (s == "gps" || s == "g") return Cue::Gps;
    if (s == "category" || s == "c") return Cue::Category;
    throw Error("unknown cue '" + s + "'");
}

const char* to_string(CombineMode m) {
    switch (m) {
        case CombineMode::Union: return "union";
        case CombineMode::Intersection: return "intersection";
        case CombineMode::IntersectionOrUnion: return "intersection-or-union";
    }
    return "?";
}

CombineMode parse_combine_mode(const std::string& s) {
    if (s == "union") return CombineMode::Union;
    if (s == "intersection") return CombineMode::Intersection;
    if (s == "intersection-or-union") return CombineMode::IntersectionOrUnion;
    throw Error("unknown combine mode '" + s + "'");
}

const char* to_string(VladNorm n) {
    switch (n) {
        case VladNorm::None: return "none";
        case VladNorm::GlobalL2: return "global-l2";
        case VladNorm::IntraGlobalL2: return "intra-global-l2";
    }
    return "?";
}

VladNorm parse_vlad_norm(const std::string& s) {
    if (s == "none") return VladNorm::None;
    if (s == "global-l2") return VladNorm::GlobalL2;
    if (s == "intra-global-l2" || s == "intra") return VladNorm::IntraGlobalL2;
    throw Error("unknown VLAD normalization '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config

std::string config_to_json(const ExperimentConfig& cfg, int indent) { return config_json(cfg).dump(indent); }

ExperimentConfig config_from_json(const std::string& text, const ExperimentConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    if (!j.is_object()) throw Error("config: top level must be an object");
    check_keys(j, config_json(base), "");
    ExperimentConfig c = base;
    try {
        take(j, "branch", c.branch);
        take(j, "levels", c.levels);
        take(j, "vlad_level", c.vlad_level);
        take(j, "tree_seed", c.tree_seed);
        if (j.contains("variant")) c.variant = parse_hash_variant(j.at("variant").get<std::string>());
        take(j, "bits", c.bits);
        take(j, "hash_seed", c.hash_seed);
        take(j, "random_rotation", c.random_rotation);
        if (j.contains("vlad_norm")) c.vlad_norm = parse_vlad_norm(j.at("vlad_norm").get<std::string>());
        take(j, "lambda", c.lambda);
        take(j, "lambda_auto", c.lambda_auto);
        take(j, "alpha", c.alpha);
        take(j, "top_r", c.top_r);
        take(j, "prior_top_r", c.prior_top_r);
        if (j.contains("cues")) {
            c.cues.clear();
            for (const auto& s : j.at("cues")) c.cues.push_back(parse_cue(s.get<std::string>()));
        }
        if (j.contains("combine")) c.combine = parse_combine_mode(j.at("combine").get<std::string>());
        take(j, "threads", c.threads);
        take(j, "pq_m", c.pq_m);
        take(j, "pq_b", c.pq_b);
        take(j, "pq_seed", c.pq_seed);
        if (j.contains("modes")) {
            c.modes.clear();
            for (const auto& s : j.at("modes")) c.modes.push_back(parse_mode(s.get<std::string>()));
        }
        take(j, "recall_at", c.recall_at);
        take(j, "lambda_sweep", c.lambda_sweep);
        take(j, "sweep_queries", c.sweep_queries);
        take(j, "database_manifest", c.database_manifest);
        take(j, "query_manifest", c.query_manifest);
        if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"), c.synth);
        take(j, "output_dir", c.output_dir);
    } catch (const json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::string& path, const ExperimentConfig& base) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return config_from_json(ss.str(), base);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

void validate_config(const ExperimentConfig& c) {
    require(c.branch >= 2, "config: branch must be at least 2");
    require(c.vlad_level >= 1 && c.vlad_level < c.levels, "config: need 1 <= vlad_level < levels");
    require(c.lambda >= 0.0, "config: lambda must be >= 0");
    require(c.alpha > 0.0 && c.alpha < 1.0, "config: alpha must lie in (0, 1)");
    require(c.top_r >= 1 && c.prior_top_r >= 1, "config: top_r and prior_top_r must be positive");
    require(c.threads >= 1, "config: threads must be positive");
    require(c.pq_b >= 1 && c.pq_b <= 16, "config: pq_b must lie in [1, 16]");
    require(!c.modes.empty(), "config: no modes requested");
    require(!c.recall_at.empty(), "config: recall_at is empty");
    for (auto n : c.recall_at) require(n >= 1, "config: recall_at entries must be positive");
    for (auto l : c.lambda_sweep) require(l >= 0.0, "config: lambda_sweep entries must be >= 0");
    require(!c.lambda_auto || !c.lambda_sweep.empty(), "config: lambda_auto needs a lambda_sweep");
    require(c.database_manifest.empty() == c.query_manifest.empty(),
            "config: give both database_manifest and query_manifest, or neither");
    if (c.variant == HashVariant::RandomProjection)
        for (auto m : c.modes)
            if (needs_reversal(m))
                throw Error(std::string("config: mode ") + to_string(m) + " needs a reversible hashing variant");
    if (has_mode(c.modes, Mode::Cads) || has_mode(c.modes, Mode::Brpk))
        require(!c.cues.empty(), "config: context-aware modes need at least one cue");
    if (has_mode(c.modes, Mode::Brpk))
        require(has_mode(c.modes, Mode::Cads), "config: brpk refines the cads output, request both");

    // rank and divisibility rules that only need the tree shape
    if (c.database_manifest.empty()) {
        const std::uint64_t n = TreeShape{c.branch, c.levels, c.vlad_level}.num_vlad_centers();
        const std::uint64_t d = c.synth.dim;
        const std::uint64_t k = c.bits == 0 ? d * n : c.bits;
        switch (c.variant) {
            case HashVariant::Joint:
                require(k <= d * n, "config: joint bits exceed D*N");
                require(k + 1 <= c.synth.num_objects * c.synth.images_per_object,
                        "config: joint bits exceed the training rank bound");
                break;
            case HashVariant::Independent:
            case HashVariant::Shared:
                require(k % n == 0, "config: bits must be divisible by N for split variants");
                require(k / n <= d, "config: bits per sub-vector exceed D");
                break;
            case HashVariant::SignBaseline: require(k == d * n, "config: sign baseline needs bits = D*N"); break;
            case HashVariant::RandomProjection: break;
        }
        const std::uint64_t m = c.pq_m == 0 ? n : c.pq_m;
        require((d * n) % m == 0, "config: pq_m must divide D*N");
    }
}

std::string config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : config_json(cfg).dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return hex64(h);
}

// ---------------------------------------------------------------------------
// Building blocks

DescriptorSet pool_descriptors(std::span<const ImageRecord> records) {
    require(!records.empty(), "pool_descriptors: no images");
    Eigen::Index total = 0;
    for (const auto& r : records) total += r.descriptors.cols();
    DescriptorSet out(records[0].descriptors.rows(), total);
    Eigen::Index at = 0;
    for (const auto& r : records) {
        out.middleCols(at, r.descriptors.cols()) = r.descriptors;
        at += r.descriptors.cols();
    }
    return out;
}

VocabularyTree build_tree(const ExperimentConfig& cfg, const DescriptorSet& training) {
    TreeOptions opts;
    opts.branch = cfg.branch;
    opts.levels = cfg.levels;
    opts.vlad_level = cfg.vlad_level;
    opts.seed = cfg.tree_seed;
    return train_vocabulary(training, opts);
}

HashingModel build_hashing(const ExperimentConfig& cfg, const VocabularyTree& tree, std::span<const ImageRecord> database) {
    std::vector<VladVector> vlads;
    vlads.reserve(database.size());
    for (const auto& r : database) vlads.push_back(compute_vlad(tree, r.descriptors, VladNorm::None));
    HashOptions opts;
    opts.variant = cfg.variant;
    opts.bits = cfg.bits == 0 ? static_cast<std::uint32_t>(tree.dim() * tree.num_vlad_centers()) : cfg.bits;
    opts.seed = cfg.hash_seed;
    opts.random_rotation = cfg.random_rotation;
    return train_hashing(vlads, opts);
}

DatabaseIndex build_index(const ExperimentConfig& cfg, const VocabularyTree& tree, const HashingModel& hashing,
                          std::span<const ImageRecord> database) {
    DatabaseIndex index(cfg.vlad_norm);
    for (const auto& r : database) {
        IndexedImage img;
        img.id = r.id;
        img.bow = compute_bow(tree, r.descriptors);
        img.vlad = compute_vlad(tree, r.descriptors, VladNorm::None);
        img.code = hashing.encode(img.vlad);
        img.gps = r.gps;
        img.category = r.category;
        index.add(std::move(img));
    }
    std::vector<Vector> stored;
    stored.reserve(index.size());
    for (const auto& img : index.images()) stored.push_back(img.vlad.values);
    const std::uint32_t m = cfg.pq_m == 0 ? static_cast<std::uint32_t>(tree.num_vlad_centers()) : cfg.pq_m;
    index.attach_pq(train_pq(stored, m, cfg.pq_b, cfg.pq_seed));
    index.build_inverted_file();
    return index;
}

std::pair<Dataset, VocabularyTree> prepare_data(const ExperimentConfig& cfg) {
    if (cfg.database_manifest.empty()) {
        auto tree = build_tree(cfg, synthesize_training_descriptors(cfg.synth));
        auto synth = synthesize_dataset(cfg.synth, tree);
        return {Dataset{std::move(synth.database), std::move(synth.queries)}, std::move(tree)};
    }
    Dataset data{ingest_dataset(cfg.database_manifest), ingest_dataset(cfg.query_manifest)};
    require(data.database.front().descriptors.rows() == data.queries.front().descriptors.rows(),
            "query descriptors differ in dimension from the database");
    auto tree = build_tree(cfg, pool_descriptors(data.database));
    return {std::move(data), std::move(tree)};
}

// ---------------------------------------------------------------------------
// Queries

QueryResult process_query(const ExperimentConfig& cfg, const Engine& engine, const ImageRecord& query,
                          std::span<const Mode> modes, double lambda) {
    const auto& tree = engine.tree;
    const auto& index = engine.index;
    QueryResult out;
    out.query = query.id;

    // device side
    const VladVector raw = compute_vlad(tree, query.descriptors, VladNorm::None);
    const BinaryCode code = engine.hashing.encode(raw);
    ContextTag context;
    context.gps = query.gps;
    context.category = query.category;
    const auto wire = wire_encode(code, context);
    out.wire_bytes = wire.size();

    // server side
    const WireMessage msg = wire_decode(wire);
    const bool reversible = engine.hashing.variant() != HashVariant::RandomProjection;
    std::optional<VladVector> approx;
    if (reversible) approx = engine.hashing.approximate_vlad(msg.code);
    const Ranking binary = rank_hamming(index, msg.code);

    ReconstructOptions ropts;
    ropts.threads = cfg.threads;
    std::optional<CandidateVWs> cands;
    std::optional<Reconstruction> cads;

    for (Mode m : modes) {
        switch (m) {
            case Mode::Bow: out.rankings[m] = rank_bow(index, compute_bow(tree, query.descriptors)); break;
            case Mode::Vlad: out.rankings[m] = rank_vlad(index, raw); break;
            case Mode::Hamming: out.rankings[m] = binary; break;
            case Mode::ApproxVlad: out.rankings[m] = rank_vlad(index, *approx); break;
            case Mode::Adc: out.rankings[m] = rank_adc(index, *approx); break;
            case Mode::Gps:
                if (!msg.context.gps) throw Error("query " + std::to_string(query.id) + " carries no GPS");
                out.rankings[m] = rank_gps(index, *msg.context.gps);
                break;
            case Mode::VladToBow:
            case Mode::ReconBow: {
                const auto rec = reconstruct_bow(m == Mode::VladToBow ? raw : *approx, tree, lambda, nullptr, ropts);
                out.recon.push_back(make_record(query.id, m, lambda, rec));
                out.rankings[m] = rank_bow(index, rec.histogram);
                break;
            }
            case Mode::Cads:
            case Mode::Brpk: {
                if (!cads) {
                    std::vector<CandidateVWs> cues;
                    for (Cue c : cfg.cues) {
                        if (c == Cue::Binary) cues.push_back(candidates_from_binary(index, tree, binary, cfg.top_r));
                        if (c == Cue::Gps && msg.context.gps)
                            cues.push_back(candidates_from_gps(index, tree, msg.context.gps, cfg.top_r));
                        if (c == Cue::Category && msg.context.category)
                            cues.push_back(candidates_from_category(index, tree, *msg.context.category));
                    }
                    if (cues.empty())
                        throw Error("query " + std::to_string(query.id) + " carries none of the configured cues");
                    cands = combine_candidates(cues, cfg.combine);
                    cads = reconstruct_bow(*approx, tree, lambda, &*cands, ropts);
                    out.recon.push_back(make_record(query.id, Mode::Cads, lambda, *cads));
                    out.rankings[Mode::Cads] = rank_bow(index, cads->histogram);
                }
                if (m == Mode::Brpk) {
                    const Ranking& initial = out.rankings.at(Mode::Cads);
                    const BowHistogram h0 = pseudo_bow(index, initial, cfg.prior_top_r);
                    PriorOptions popts;
                    popts.threads = cfg.threads;
                    // feature-count estimate: the preliminary LASSO mass, else
                    // the mean raw count of the pooled images
                    double mass = cads->histogram.l1();
                    if (!(mass > 0.0)) {
                        const std::size_t n = std::min(cfg.prior_top_r, initial.items.size());
                        for (std::size_t i = 0; i < n; ++i) mass += index.by_id(initial.items[i].image).bow.l1();
                        mass /= static_cast<double>(n);
                    }
                    popts.target_mass = mass;
                    const auto rec = reconstruct_bow_with_prior(*approx, tree, h0, cfg.alpha, &*cands, popts);
                    auto record = make_record(query.id, Mode::Brpk, lambda, rec);
                    record.lambda = 0.0;
                    out.recon.push_back(std::move(record));
                    out.rankings[m] = rank_bow(index, rec.histogram);
                }
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::size_t first_relevant_rank(const Ranking& r, std::span<const ImageId> relevant) {
    require(!relevant.empty(), "query has no relevant images");
    const std::set<ImageId> rel(relevant.begin(), relevant.end());
    for (std::size_t i = 0; i < r.items.size(); ++i)
        if (rel.contains(r.items[i].image)) return i + 1;
    throw Error("no relevant image appears in the ranking");
}

MetricRow evaluate(Mode mode, std::span<const Ranking> rankings, std::span<const ImageRecord> queries,
                   std::span<const std::size_t> cutoffs) {
    require(rankings.size() == queries.size(), "evaluate: one ranking per query");
    MetricRow row;
    row.mode = mode;
    std::vector<std::set<ImageId>> relevant;
    std::vector<ImageId> reference;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        relevant.emplace_back(queries[q].relevant.begin(), queries[q].relevant.end());
        const std::size_t r = first_relevant_rank(rankings[q], queries[q].relevant);
        reference.push_back(rankings[q].items[r - 1].image);
        row.ndcg += ndcg(r);
        if (rankings[q].degenerate) ++row.degenerate;
    }
    row.map = mean_average_precision(rankings, relevant);
    row.ndcg /= static_cast<double>(queries.size());
    for (auto n : cutoffs) row.recall.emplace_back(n, recall_at(rankings, reference, n));
    return row;
}

std::vector<MemoryRow> memory_table(std::uint64_t dim, std::uint64_t centers, std::uint32_t bits, std::uint32_t branch,
                                    std::uint32_t vlad_level) {
    std::vector<MemoryRow> rows;
    for (auto v : {HashVariant::Joint, HashVariant::Independent, HashVariant::Shared, HashVariant::SignBaseline,
                   HashVariant::RandomProjection}) {
        MemoryRow r;
        r.variant = v;
        r.bits = bits;
        r.projection_bytes = projection_bytes(v, dim, centers, bits);
        r.tree_bytes = device_tree_bytes(dim, branch, vlad_level);
        r.mobile_bytes = mobile_memory_bytes(v, dim, centers, bits, branch, vlad_level);
        rows.push_back(r);
    }
    return rows;
}

TransmissionRow transmission_row(std::uint32_t bits) {
    TransmissionRow t;
    t.bits = bits;
    t.code_bytes = transmission_size(bits, ContextTag{});
    t.with_gps = transmission_size(bits, ContextTag{GeoPoint{}, std::nullopt});
    t.with_gps_category = transmission_size(bits, ContextTag{GeoPoint{}, 0u});
    t.wire_bytes = wire_size(bits, ContextTag{GeoPoint{}, std::nullopt});
    return t;
}

std::vector<SweepRow> sweep_lambda(const ExperimentConfig& cfg, const Engine& engine, std::span<const ImageRecord> queries) {
    const std::size_t n = std::min(cfg.sweep_queries, queries.size());
    require(n >= 1, "sweep_lambda: no queries");
    std::vector<VladVector> raw;
    for (std::size_t q = 0; q < n; ++q) raw.push_back(compute_vlad(engine.tree, queries[q].descriptors, VladNorm::None));
    ReconstructOptions ropts;
    ropts.threads = cfg.threads;

    std::vector<SweepRow> rows;
    for (double lambda : cfg.lambda_sweep) {
        SweepRow row;
        row.lambda = lambda;
        std::vector<Ranking> rankings;
        for (std::size_t q = 0; q < n; ++q) {
            const auto rec = reconstruct_bow(raw[q], engine.tree, lambda, nullptr, ropts);
            row.vws += rec.histogram.nonzeros();
            rankings.push_back(rank_bow(engine.index, rec.histogram));
        }
        row.mean_vws = static_cast<double>(row.vws) / static_cast<double>(n);
        row.map = evaluate(Mode::VladToBow, rankings, queries.first(n), cfg.recall_at).map;
        rows.push_back(row);
    }
    return rows;
}

double pick_lambda(std::span<const SweepRow> sweep, double target_vws) {
    require(!sweep.empty(), "pick_lambda: empty sweep");
    const SweepRow* best = &sweep[0];
    for (const auto& r : sweep) {
        const double gap = std::abs(r.mean_vws - target_vws);
        const double best_gap = std::abs(best->mean_vws - target_vws);
        if (gap < best_gap || (gap == best_gap && r.lambda > best->lambda)) best = &r;
    }
    return best->lambda;
}

// ---------------------------------------------------------------------------
// Pipeline

const MetricRow* Report::metric(Mode m) const {
    for (const auto& r : metrics)
        if (r.mode == m) return &r;
    return nullptr;
}

Report run_pipeline(const ExperimentConfig& cfg) {
    Report rep;
    rep.config = cfg;
    rep.hash = config_hash(cfg);
    auto& tm = rep.timings;

    stage("config", tm, [&] { validate_config(cfg); });
    auto [data, tree] = stage("data", tm, [&] { return prepare_data(cfg); });
    auto hashing = stage("hashing", tm, [&] { return build_hashing(cfg, tree, data.database); });
    auto index = stage("index", tm, [&] { return build_index(cfg, tree, hashing, data.database); });
    const Engine engine{std::move(tree), std::move(hashing), std::move(index)};

    rep.database_size = data.database.size();
    rep.query_count = data.queries.size();
    rep.dim = engine.tree.dim();
    rep.vlad_centers = engine.tree.num_vlad_centers();
    rep.leaves = engine.tree.num_leaves();

    if (!cfg.lambda_sweep.empty())
        rep.sweep = stage("lambda-sweep", tm, [&] { return sweep_lambda(cfg, engine, data.queries); });
    rep.lambda = cfg.lambda;
    if (cfg.lambda_auto) {
        double support = 0.0;
        for (const auto& img : engine.index.images()) support += static_cast<double>(img.bow.nonzeros());
        rep.lambda = pick_lambda(rep.sweep, support / static_cast<double>(engine.index.size()));
    }

    std::vector<QueryResult> results = stage("queries", tm, [&] {
        std::vector<QueryResult> out;
        for (const auto& q : data.queries) out.push_back(process_query(cfg, engine, q, cfg.modes, rep.lambda));
        return out;
    });

    stage("metrics", tm, [&] {
        for (Mode m : all_modes()) {
            if (!has_mode(cfg.modes, m)) continue;
            std::vector<Ranking> rankings;
            for (const auto& r : results) rankings.push_back(r.rankings.at(m));
            rep.metrics.push_back(evaluate(m, rankings, data.queries, cfg.recall_at));
        }
    });

    std::size_t full = 0, cads = 0, full_n = 0, cads_n = 0;
    for (const auto& r : results) {
        for (const auto& rec : r.recon) {
            std::size_t cols = 0;
            for (auto c : rec.columns) cols += c;
            if (rec.mode == Mode::ReconBow) full += cols, ++full_n;
            if (rec.mode == Mode::Cads) cads += cols, ++cads_n;
            rep.recon.push_back(rec);
        }
    }
    if (full_n) rep.full_width = static_cast<double>(full) / static_cast<double>(full_n);
    if (cads_n) rep.cads_width = static_cast<double>(cads) / static_cast<double>(cads_n);

    rep.memory = memory_table(rep.dim, rep.vlad_centers, engine.hashing.bits(), cfg.branch, cfg.vlad_level);
    rep.transmission = transmission_row(engine.hashing.bits());
    return rep;
}

// ---------------------------------------------------------------------------
// Output

std::string report_json(const Report& r) {
    json j;
    j["config"] = config_json(r.config);
    j["config_hash"] = r.hash;
    j["dataset"] = {{"database", r.database_size}, {"queries", r.query_count}, {"dim", r.dim},
                    {"vlad_centers", r.vlad_centers}, {"leaves", r.leaves}};
    j["lambda"] = r.lambda;
    j["metrics"] = json::array();
    for (const auto& m : r.metrics) {
        json rec = json::object();
        for (const auto& [n, v] : m.recall) rec[std::to_string(n)] = v;
        j["metrics"].push_back({{"mode", to_string(m.mode)}, {"map", m.map}, {"recall_at", rec}, {"ndcg", m.ndcg},
                                {"degenerate", m.degenerate}});
    }
    j["memory"] = json::array();
    for (const auto& m : r.memory)
        j["memory"].push_back({{"variant", to_string(m.variant)}, {"bits", m.bits},
                               {"projection_bytes", m.projection_bytes}, {"tree_bytes", m.tree_bytes},
                               {"mobile_bytes", m.mobile_bytes}, {"configured", m.variant == r.config.variant}});
    j["transmission"] = {{"bits", r.transmission.bits},
                         {"code_bytes", r.transmission.code_bytes},
                         {"with_gps", r.transmission.with_gps},
                         {"with_gps_category", r.transmission.with_gps_category},
                         {"wire_bytes", r.transmission.wire_bytes}};
    j["lambda_sweep"] = json::array();
    for (const auto& s : r.sweep)
        j["lambda_sweep"].push_back({{"lambda", s.lambda}, {"vws", s.vws}, {"mean_vws", s.mean_vws}, {"map", s.map}});
    j["dictionary_width"] = {{"full", r.full_width}, {"cads", r.cads_width}};
    j["reconstruction"] = json::array();
    for (const auto& rec : r.recon)
        j["reconstruction"].push_back({{"query", rec.query}, {"mode", to_string(rec.mode)}, {"lambda", rec.lambda},
                                       {"columns", rec.columns}, {"iterations", rec.iterations},
                                       {"converged", rec.converged}, {"vws", rec.vws}});
    return j.dump(1) + "\n";
}

std::string report_summary(const Report& r) {
    std::ostringstream out;
    char line[256];
    out << "config " << r.hash << "\n";
    out << "database " << r.database_size << " images, " << r.query_count << " queries, D=" << r.dim
        << " N=" << r.vlad_centers << " M=" << r.leaves << ", lambda " << r.lambda << "\n\n";

    out << "mode          MAP     ";
    for (const auto& [n, v] : r.metrics.empty() ? decltype(r.metrics[0].recall){} : r.metrics[0].recall) {
        std::snprintf(line, sizeof line, "R@%-5zu ", n);
        out << line;
    }
    out << "NDCG\n";
    for (const auto& m : r.metrics) {
        std::snprintf(line, sizeof line, "%-12s  %.4f  ", to_string(m.mode), m.map);
        out << line;
        for (const auto& [n, v] : m.recall) {
            std::snprintf(line, sizeof line, "%.4f  ", v);
            out << line;
        }
        std::snprintf(line, sizeof line, "%.4f\n", m.ndcg);
        out << line;
    }

    out << "\nvariant       bits   projection_B  tree_B  mobile_B\n";
    for (const auto& m : r.memory) {
        std::snprintf(line, sizeof line, "%-12s  %-5u  %-12llu  %-6llu  %llu%s\n", to_string(m.variant), m.bits,
                      static_cast<unsigned long long>(m.projection_bytes), static_cast<unsigned long long>(m.tree_bytes),
                      static_cast<unsigned long long>(m.mobile_bytes), m.variant == r.config.variant ? "  *" : "");
        out << line;
    }
    std::snprintf(line, sizeof line, "\ntransmission: %llu B code, %llu B with GPS, %llu B with GPS+category, %llu B framed\n",
                  static_cast<unsigned long long>(r.transmission.code_bytes),
                  static_cast<unsigned long long>(r.transmission.with_gps),
                  static_cast<unsigned long long>(r.transmission.with_gps_category),
                  static_cast<unsigned long long>(r.transmission.wire_bytes));
    out << line;

    if (!r.sweep.empty()) {
        out << "\nlambda    VWs     per query  MAP\n";
        for (const auto& s : r.sweep) {
            std::snprintf(line, sizeof line, "%-8g  %-6zu  %-9.2f  %.4f\n", s.lambda, s.vws, s.mean_vws, s.map);
            out << line;
        }
    }
    if (r.full_width > 0.0 || r.cads_width > 0.0) {
        std::snprintf(line, sizeof line, "\ndictionary columns per query: full %.1f, context-selected %.1f\n",
                      r.full_width, r.cads_width);
        out << line;
    }
    return out.str();
}

std::string timings_json(const Report& r) {
    json j = json::object();
    for (const auto& [name, s] : r.timings) j[name] = s;
    return j.dump(1) + "\n";
}

std::string write_report(const Report& r) {
    namespace fs = std::filesystem;
    fs::create_directories(r.config.output_dir);
    const fs::path dir(r.config.output_dir);
    auto put = [](const fs::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::binary);
        out << text;
        if (!out) throw Error("cannot write " + p.string());
    };
    const fs::path json_path = dir / ("report-" + r.hash + ".json");
    put(json_path, report_json(r));
    put(dir / ("report-" + r.hash + ".txt"), report_summary(r));
    put(dir / ("timings-" + r.hash + ".json"), timings_json(r));
    return json_path.string();
}

}  // namespace dehash
