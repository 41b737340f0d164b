// Command-line front end: dataset generation, artifact training, indexing,
// querying and benchmark runs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "dehash/binary_io.hpp"
#include "dehash/pipeline.hpp"

using namespace dehash;

namespace {

// Flags that override config fields; names follow the config keys.
struct Overrides {
    std::string config;
    std::optional<std::uint32_t> branch, levels, vlad_level, bits, pq_m, pq_b;
    std::optional<std::uint64_t> tree_seed, hash_seed, pq_seed;
    std::optional<std::string> variant, vlad_norm, combine;
    std::optional<bool> random_rotation, lambda_auto;
    std::optional<double> lambda, alpha;
    std::optional<std::size_t> top_r, prior_top_r, threads, sweep_queries;
    std::optional<std::vector<std::string>> cues, modes;
    std::optional<std::vector<std::size_t>> recall_at;
    std::optional<std::vector<double>> lambda_sweep;
    std::optional<std::string> database_manifest, query_manifest, output_dir;
    // generator
    std::optional<double> noise_std, distractor_fraction, gps_sigma_m;
    std::optional<std::size_t> num_objects, images_per_object, num_categories, dim;
    std::optional<std::uint64_t> synth_seed;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "JSON config file; flags override it");
        app->add_option("--branch", branch);
        app->add_option("--levels", levels);
        app->add_option("--vlad_level", vlad_level);
        app->add_option("--tree_seed", tree_seed);
        app->add_option("--variant", variant, "joint | independent | shared | sign | rp");
        app->add_option("--bits", bits, "code length K; 0 means D*N");
        app->add_option("--hash_seed", hash_seed);
        app->add_option("--random_rotation", random_rotation);
        app->add_option("--vlad_norm", vlad_norm, "none | global-l2 | intra-global-l2");
        app->add_option("--lambda", lambda);
        app->add_option("--lambda_auto", lambda_auto);
        app->add_option("--alpha", alpha);
        app->add_option("--top_r", top_r);
        app->add_option("--prior_top_r", prior_top_r);
        app->add_option("--cues", cues, "binary, gps, category");
        app->add_option("--combine", combine, "union | intersection | intersection-or-union");
        app->add_option("--threads", threads);
        app->add_option("--pq_m", pq_m);
        app->add_option("--pq_b", pq_b);
        app->add_option("--pq_seed", pq_seed);
        app->add_option("--modes", modes);
        app->add_option("--recall_at", recall_at);
        app->add_option("--lambda_sweep", lambda_sweep);
        app->add_option("--sweep_queries", sweep_queries);
        app->add_option("--database_manifest", database_manifest);
        app->add_option("--query_manifest", query_manifest);
        app->add_option("--output_dir", output_dir);
        app->add_option("--noise_std", noise_std, "generator placement noise");
        app->add_option("--distractor_fraction", distractor_fraction);
        app->add_option("--gps_sigma_m", gps_sigma_m);
        app->add_option("--num_objects", num_objects);
        app->add_option("--images_per_object", images_per_object);
        app->add_option("--num_categories", num_categories);
        app->add_option("--dim", dim);
        app->add_option("--synth_seed", synth_seed);
    }

    ExperimentConfig resolve() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
        auto set = [](auto& field, const auto& opt) {
            if (opt) field = *opt;
        };
        set(c.branch, branch);
        set(c.levels, levels);
        set(c.vlad_level, vlad_level);
        set(c.tree_seed, tree_seed);
        if (variant) c.variant = parse_hash_variant(*variant);
        set(c.bits, bits);
        set(c.hash_seed, hash_seed);
        set(c.random_rotation, random_rotation);
        if (vlad_norm) c.vlad_norm = parse_vlad_norm(*vlad_norm);
        set(c.lambda, lambda);
        set(c.lambda_auto, lambda_auto);
        set(c.alpha, alpha);
        set(c.top_r, top_r);
        set(c.prior_top_r, prior_top_r);
        if (cues) {
            c.cues.clear();
            for (const auto& s : *cues) c.cues.push_back(parse_cue(s));
        }
        if (combine) c.combine = parse_combine_mode(*combine);
        set(c.threads, threads);
        set(c.pq_m, pq_m);
        set(c.pq_b, pq_b);
        set(c.pq_seed, pq_seed);
        if (modes) {
            c.modes.clear();
            for (const auto& s : *modes) c.modes.push_back(parse_mode(s));
        }
        set(c.recall_at, recall_at);
        set(c.lambda_sweep, lambda_sweep);
        set(c.sweep_queries, sweep_queries);
        set(c.database_manifest, database_manifest);
        set(c.query_manifest, query_manifest);
        set(c.output_dir, output_dir);
        set(c.synth.noise_std, noise_std);
        set(c.synth.distractor_fraction, distractor_fraction);
        set(c.synth.gps_sigma_m, gps_sigma_m);
        set(c.synth.num_objects, num_objects);
        set(c.synth.images_per_object, images_per_object);
        set(c.synth.num_categories, num_categories);
        set(c.synth.dim, dim);
        set(c.synth.seed, synth_seed);
        return c;
    }
};

template <typename Fn>
auto tagged(const char* stage, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        const std::string what = e.what();
        if (!what.empty() && what[0] == '[') throw;
        throw Error(std::string("[") + stage + "] " + what);
    }
}

void print_metrics(const std::vector<MetricRow>& rows) {
    for (const auto& m : rows) {
        std::cout << to_string(m.mode) << "  MAP " << m.map;
        for (const auto& [n, v] : m.recall) std::cout << "  R@" << n << " " << v;
        std::cout << "  NDCG " << m.ndcg << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Binary-code retrieval with BoW reconstruction"};
    app.require_subcommand(1);

    Overrides ov;

    // synth
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark and its vocabulary tree");
    ov.attach(synth);
    synth->add_option("--out", synth_out, "output directory")->required();

    // train-tree
    std::string manifest, tree_path, hash_path, index_path, out_path;
    auto* train_tree = app.add_subcommand("train-tree", "Train a vocabulary tree on a manifest's descriptors");
    ov.attach(train_tree);
    train_tree->add_option("--manifest", manifest)->required();
    train_tree->add_option("--out", out_path)->required();

    auto* train_hash = app.add_subcommand("train-hash", "Train a hashing model on a manifest's VLADs");
    ov.attach(train_hash);
    train_hash->add_option("--tree", tree_path)->required();
    train_hash->add_option("--manifest", manifest)->required();
    train_hash->add_option("--out", out_path)->required();

    auto* index_cmd = app.add_subcommand("index", "Build a database index");
    ov.attach(index_cmd);
    index_cmd->add_option("--tree", tree_path)->required();
    index_cmd->add_option("--hash", hash_path)->required();
    index_cmd->add_option("--manifest", manifest)->required();
    index_cmd->add_option("--out", out_path)->required();

    std::string mode_name = "cads";
    auto* query_cmd = app.add_subcommand("query", "Rank the images of a query manifest");
    ov.attach(query_cmd);
    query_cmd->add_option("--tree", tree_path)->required();
    query_cmd->add_option("--hash", hash_path)->required();
    query_cmd->add_option("--index", index_path)->required();
    query_cmd->add_option("--queries", manifest, "query manifest")->required();
    query_cmd->add_option("--mode", mode_name, "ranking mode");
    query_cmd->add_option("--out", out_path, "ranking dump (default stdout)");

    auto* bench = app.add_subcommand("benchmark", "Run the full experiment and write a report");
    ov.attach(bench);

    auto* sweep = app.add_subcommand("sweep-lambda", "Reconstructed-VW counts over the lambda sweep");
    ov.attach(sweep);

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = tagged("config", [&] { return ov.resolve(); });

        if (synth->parsed()) {
            tagged("config", [&] { validate_config(cfg); return 0; });
            auto tree = tagged("tree", [&] { return build_tree(cfg, synthesize_training_descriptors(cfg.synth)); });
            auto data = tagged("synth", [&] { return synthesize_dataset(cfg.synth, tree); });
            tagged("write", [&] {
                std::filesystem::create_directories(synth_out);
                tree.save((std::filesystem::path(synth_out) / "tree.bin").string());
                const auto db = write_dataset(synth_out, "db_", data.database);
                const auto q = write_dataset(synth_out, "query_", data.queries);
                std::cout << "tree " << (std::filesystem::path(synth_out) / "tree.bin").string() << "\n"
                          << "database " << db << " (" << data.database.size() << " images)\n"
                          << "queries " << q << " (" << data.queries.size() << " images)\n";
                return 0;
            });
        } else if (train_tree->parsed()) {
            auto records = tagged("ingest", [&] { return ingest_dataset(manifest); });
            auto tree = tagged("tree", [&] { return build_tree(cfg, pool_descriptors(records)); });
            tagged("write", [&] { tree.save(out_path); return 0; });
            std::cout << "tree: " << tree.num_vlad_centers() << " VLAD centers, " << tree.num_leaves() << " leaves\n";
        } else if (train_hash->parsed()) {
            auto tree = tagged("load", [&] { return VocabularyTree::load(tree_path); });
            auto records = tagged("ingest", [&] { return ingest_dataset(manifest); });
            auto model = tagged("hashing", [&] { return build_hashing(cfg, tree, records); });
            tagged("write", [&] { model.save(out_path); return 0; });
            std::cout << to_string(model.variant()) << " model, " << model.bits() << " bits, "
                      << model.projection_bytes() << " projection bytes\n";
        } else if (index_cmd->parsed()) {
            auto tree = tagged("load", [&] { return VocabularyTree::load(tree_path); });
            auto model = tagged("load", [&] { return HashingModel::load(hash_path); });
            auto records = tagged("ingest", [&] { return ingest_dataset(manifest); });
            auto index = tagged("index", [&] { return build_index(cfg, tree, model, records); });
            tagged("write", [&] { index.save(out_path); return 0; });
            std::cout << "indexed " << index.size() << " images\n";
        } else if (query_cmd->parsed()) {
            const Mode mode = tagged("config", [&] { return parse_mode(mode_name); });
            auto tree = tagged("load", [&] { return VocabularyTree::load(tree_path); });
            auto model = tagged("load", [&] { return HashingModel::load(hash_path); });
            auto index = tagged("load", [&] {
                auto ix = DatabaseIndex::load(index_path);
                ix.build_inverted_file();
                return ix;
            });
            auto queries = tagged("ingest", [&] { return ingest_dataset(manifest); });
            const Engine engine{std::move(tree), std::move(model), std::move(index)};
            std::vector<Mode> modes{mode};
            if (mode == Mode::Brpk) modes.insert(modes.begin(), Mode::Cads);

            std::ofstream file;
            if (!out_path.empty()) {
                file.open(out_path);
                if (!file) throw Error("[write] cannot open " + out_path);
            }
            std::ostream& out = out_path.empty() ? std::cout : file;
            std::vector<Ranking> rankings;
            bool judged = true;
            for (const auto& q : queries) {
                auto res = tagged("query", [&] { return process_query(cfg, engine, q, modes, cfg.lambda); });
                write_ranking_dump(out, q.id, res.rankings.at(mode));
                rankings.push_back(res.rankings.at(mode));
                judged = judged && !q.relevant.empty();
            }
            if (judged && !out_path.empty())
                print_metrics({evaluate(mode, rankings, queries, cfg.recall_at)});
        } else if (bench->parsed()) {
            const Report rep = run_pipeline(cfg);
            const auto path = tagged("write", [&] { return write_report(rep); });
            std::cout << report_summary(rep) << "\nreport " << path << "\n";
        } else if (sweep->parsed()) {
            tagged("config", [&] { validate_config(cfg); return 0; });
            auto [data, tree] = tagged("data", [&] { return prepare_data(cfg); });
            auto model = tagged("hashing", [&] { return build_hashing(cfg, tree, data.database); });
            auto index = tagged("index", [&] { return build_index(cfg, tree, model, data.database); });
            const Engine engine{std::move(tree), std::move(model), std::move(index)};
            const auto rows = tagged("lambda-sweep", [&] { return sweep_lambda(cfg, engine, data.queries); });
            std::cout << "lambda\tVWs\tper_query\tMAP\n";
            for (const auto& r : rows) std::cout << r.lambda << "\t" << r.vws << "\t" << r.mean_vws << "\t" << r.map << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
