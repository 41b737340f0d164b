#pragma once

// Descriptor files, dataset manifests and the synthetic benchmark generator.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dehash/aggregate.hpp"
#include "dehash/common.hpp"
#include "dehash/context.hpp"
#include "dehash/vocab.hpp"

namespace dehash {

struct ImageRecord {
    ImageId id = 0;
    DescriptorSet descriptors;  ///< one descriptor per column
    std::optional<GeoPoint> gps;
    std::optional<std::uint32_t> category;
    std::vector<ImageId> relevant;  ///< ground truth, queries only
};

std::vector<std::uint8_t> serialize_descriptors(const DescriptorSet& d);
DescriptorSet deserialize_descriptors(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
void save_descriptors(const std::string& path, const DescriptorSet& d);
DescriptorSet load_descriptors(const std::string& path);

/// Reads a tab-separated manifest:
///   image_id  descriptor_path  lat  lon  category  relevant_ids
/// with "-" for absent fields and comma-separated relevant ids. Relative
/// descriptor paths resolve against the manifest's directory. Lines starting
/// with '#' and blank lines are ignored.
std::vector<ImageRecord> ingest_dataset(const std::string& manifest_path);

/// Writes every record's descriptors to `<dir>/<prefix><id>.desc` and the
/// manifest to `<dir>/<prefix>manifest.tsv`; returns the manifest path.
std::string write_dataset(const std::string& dir, const std::string& prefix, std::span<const ImageRecord> records);

struct SyntheticSpec {
    std::size_t dim = 16;
    // vocabulary training data: Gaussian mixture
    std::size_t training_descriptors = 20000;
    std::size_t mixture_components = 64;
    double mixture_std = 0.35;

    std::size_t num_objects = 50;
    std::size_t images_per_object = 20;
    std::size_t queries_per_object = 1;
    std::size_t min_descriptors = 20;
    std::size_t max_descriptors = 40;
    std::size_t words_per_object = 12;
    double distractor_fraction = 0.3;
    double noise_std = 0.01;  ///< placement noise around leaf centers
    std::size_t num_categories = 5;

    GeoPoint origin{51.752, -1.258};
    double category_spread_m = 20000.0;  ///< spread of category cluster centers
    double object_spread_m = 1500.0;     ///< spread of objects around their cluster
    double gps_sigma_m = 50.0;           ///< per-image GPS error

    std::uint64_t seed = 1;
};

struct SyntheticDataset {
    std::vector<ImageRecord> database;
    std::vector<ImageRecord> queries;
    /// The exact leaf drawn for every descriptor, aligned with descriptor columns.
    std::vector<std::vector<LeafId>> database_leaves;
    std::vector<std::vector<LeafId>> query_leaves;
    /// Disjoint leaf vocabularies, one per category, ascending.
    std::vector<std::vector<LeafId>> category_words;
};

constexpr ImageId kFirstQueryId = 1000000;

DescriptorSet synthesize_training_descriptors(const SyntheticSpec& spec);

/// Each object belongs to one category and draws `words_per_object` leaves
/// from that category's vocabulary. An image samples its descriptors from the
/// object's words, with a `distractor_fraction` share drawn from the rest of
/// the category's vocabulary; each descriptor is the leaf center plus
/// isotropic Gaussian noise. Database image ids are 0.., query ids start at
/// kFirstQueryId, and a query's relevant set is every database image of its
/// object.
SyntheticDataset synthesize_dataset(const SyntheticSpec& spec, const VocabularyTree& tree);

/// Counts of a sampled leaf multiset.
BowHistogram histogram_of(std::span<const LeafId> leaves, std::size_t vocab_size);

}  // namespace dehash
