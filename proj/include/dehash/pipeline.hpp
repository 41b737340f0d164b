#pragma once

// End-to-end experiment runner: data, tree, hashing, index, queries through the
// wire format, de-hashing, ranking and evaluation.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dehash/dataset.hpp"
#include "dehash/dehash.hpp"
#include "dehash/hashing.hpp"
#include "dehash/retrieval.hpp"
#include "dehash/vocab.hpp"

namespace dehash {

enum class Mode {
    Bow,         ///< query BoW, L1
    Vlad,        ///< uncompressed query VLAD, L2
    Hamming,     ///< query code, Hamming
    ApproxVlad,  ///< VLAD reversed from the code, L2
    Adc,         ///< reversed VLAD against PQ-encoded database
    VladToBow,   ///< BoW reconstructed from the uncompressed VLAD
    ReconBow,    ///< BoW reconstructed from the reversed VLAD, full dictionaries
    Cads,        ///< as ReconBow with context-selected dictionaries
    Brpk,        ///< prior-regularized refinement of the Cads output
    Gps,         ///< distance of the transmitted GPS
};

const char* to_string(Mode m);
Mode parse_mode(const std::string& s);
std::vector<Mode> all_modes();

enum class Cue { Binary, Gps, Category };
const char* to_string(Cue c);
Cue parse_cue(const std::string& s);

const char* to_string(CombineMode m);
CombineMode parse_combine_mode(const std::string& s);
const char* to_string(VladNorm n);
VladNorm parse_vlad_norm(const std::string& s);

struct ExperimentConfig {
    // vocabulary
    std::uint32_t branch = 8;
    std::uint32_t levels = 3;
    std::uint32_t vlad_level = 1;
    std::uint64_t tree_seed = 1;
    // hashing
    HashVariant variant = HashVariant::Shared;
    std::uint32_t bits = 0;  ///< 0 means D*N
    std::uint64_t hash_seed = 2;
    bool random_rotation = false;
    VladNorm vlad_norm = VladNorm::IntraGlobalL2;
    // reconstruction
    double lambda = 0.02;
    bool lambda_auto = false;  ///< pick from lambda_sweep to match the database VW count
    double alpha = 0.5;
    std::size_t top_r = 10;        ///< images per cue for candidate selection
    std::size_t prior_top_r = 5;   ///< images pooled into the pseudo-BoW
    std::vector<Cue> cues{Cue::Gps, Cue::Binary};
    CombineMode combine = CombineMode::IntersectionOrUnion;
    std::size_t threads = 1;
    // product quantization
    std::uint32_t pq_m = 0;  ///< 0 means N
    std::uint32_t pq_b = 8;
    std::uint64_t pq_seed = 3;
    // evaluation
    std::vector<Mode> modes = all_modes();
    std::vector<std::size_t> recall_at{1, 5, 10};
    std::vector<double> lambda_sweep{0.001, 0.005, 0.01, 0.02, 0.05, 0.1};
    std::size_t sweep_queries = 20;
    // data: manifests, or the generator when both are empty
    std::string database_manifest;
    std::string query_manifest;
    SyntheticSpec synth;
    std::string output_dir = "reports";
};

/// Flat object of config fields; the generator spec sits under "synth".
/// Parsing starts from `base` and rejects unknown keys.
std::string config_to_json(const ExperimentConfig& cfg, int indent = 2);
ExperimentConfig config_from_json(const std::string& text, const ExperimentConfig& base = {});
ExperimentConfig load_config(const std::string& path, const ExperimentConfig& base = {});
/// Checks everything that does not depend on the data.
void validate_config(const ExperimentConfig& cfg);
/// FNV-1a 64 of the compact JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

struct Dataset {
    std::vector<ImageRecord> database;
    std::vector<ImageRecord> queries;
};

struct Engine {
    VocabularyTree tree;
    HashingModel hashing;
    DatabaseIndex index;
};

DescriptorSet pool_descriptors(std::span<const ImageRecord> records);
VocabularyTree build_tree(const ExperimentConfig& cfg, const DescriptorSet& training);
/// Trained on the raw (unnormalized) VLADs of `database`.
HashingModel build_hashing(const ExperimentConfig& cfg, const VocabularyTree& tree, std::span<const ImageRecord> database);
/// Stores BoW, normalized VLAD and code per image, PQ codes and an inverted file.
DatabaseIndex build_index(const ExperimentConfig& cfg, const VocabularyTree& tree, const HashingModel& hashing,
                          std::span<const ImageRecord> database);

/// Synthesizes (training the tree on generator data) or ingests both manifests
/// (training the tree on the pooled database descriptors).
std::pair<Dataset, VocabularyTree> prepare_data(const ExperimentConfig& cfg);

struct ReconRecord {
    ImageId query = 0;
    Mode mode = Mode::ReconBow;
    double lambda = 0.0;
    std::vector<std::size_t> columns;  ///< per sub-vector
    std::vector<int> iterations;       ///< per sub-vector
    bool converged = true;
    std::size_t vws = 0;               ///< nonzeros of the output histogram
};

struct QueryResult {
    ImageId query = 0;
    std::uint64_t wire_bytes = 0;
    std::map<Mode, Ranking> rankings;
    std::vector<ReconRecord> recon;
};

/// Runs one query through every requested mode. The code and context travel
/// through wire_encode/wire_decode before the server-side stages.
QueryResult process_query(const ExperimentConfig& cfg, const Engine& engine, const ImageRecord& query,
                          std::span<const Mode> modes, double lambda);

struct MetricRow {
    Mode mode = Mode::Bow;
    double map = 0.0;
    std::vector<std::pair<std::size_t, double>> recall;  ///< (N, R@N)
    double ndcg = 0.0;
    std::size_t degenerate = 0;  ///< queries whose ranking carried no information
};

/// Rank of the best-placed relevant image; every relevant set must be nonempty.
std::size_t first_relevant_rank(const Ranking& r, std::span<const ImageId> relevant);
MetricRow evaluate(Mode mode, std::span<const Ranking> rankings, std::span<const ImageRecord> queries,
                   std::span<const std::size_t> recall_at);

struct MemoryRow {
    HashVariant variant = HashVariant::Shared;
    std::uint32_t bits = 0;
    std::uint64_t projection_bytes = 0;
    std::uint64_t tree_bytes = 0;
    std::uint64_t mobile_bytes = 0;
};

struct TransmissionRow {
    std::uint32_t bits = 0;
    std::uint64_t code_bytes = 0;      ///< no context
    std::uint64_t with_gps = 0;
    std::uint64_t with_gps_category = 0;
    std::uint64_t wire_bytes = 0;      ///< framed message with GPS
};

/// Memory rows for every variant at the given scale.
std::vector<MemoryRow> memory_table(std::uint64_t dim, std::uint64_t centers, std::uint32_t bits, std::uint32_t branch,
                                    std::uint32_t vlad_level);
TransmissionRow transmission_row(std::uint32_t bits);

struct SweepRow {
    double lambda = 0.0;
    std::size_t vws = 0;    ///< total reconstructed VWs over the sweep queries
    double mean_vws = 0.0;
    double map = 0.0;       ///< of the reconstructed BoW over the sweep queries
};

/// Reconstructs the uncompressed VLAD of the first `cfg.sweep_queries`
/// queries at every lambda of `cfg.lambda_sweep`.
std::vector<SweepRow> sweep_lambda(const ExperimentConfig& cfg, const Engine& engine, std::span<const ImageRecord> queries);
/// Sweep entry whose mean VW count is closest to the database's mean BoW
/// support; ties go to the larger lambda.
double pick_lambda(std::span<const SweepRow> sweep, double target_vws);

struct Report {
    ExperimentConfig config;
    std::string hash;
    std::size_t database_size = 0;
    std::size_t query_count = 0;
    std::size_t dim = 0;
    std::size_t vlad_centers = 0;
    std::size_t leaves = 0;
    double lambda = 0.0;
    std::vector<MetricRow> metrics;
    std::vector<MemoryRow> memory;
    TransmissionRow transmission;
    std::vector<SweepRow> sweep;
    double full_width = 0.0;  ///< mean dictionary columns per query, full sub-trees
    double cads_width = 0.0;  ///< mean dictionary columns per query, context-selected
    std::vector<ReconRecord> recon;
    std::vector<std::pair<std::string, double>> timings;  ///< seconds per stage

    const MetricRow* metric(Mode m) const;
};

Report run_pipeline(const ExperimentConfig& cfg);

/// Everything except timings, so equal configs give equal text.
std::string report_json(const Report& r);
std::string report_summary(const Report& r);
std::string timings_json(const Report& r);
/// Writes report-<hash>.json, report-<hash>.txt and timings-<hash>.json into
/// the config's output directory; returns the JSON report path.
std::string write_report(const Report& r);

}  // namespace dehash
