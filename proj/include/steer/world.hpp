#pragma once

// Synthetic concept dataset and frozen "encoder": concepts live on a smooth
// low-dimensional manifold inside a shared multimodal embedding space.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer/tensor.hpp"

namespace steer {

enum class Split { train, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct WorldConfig {
    std::size_t embed_dim = 32;
    std::size_t latent_dim = 4;
    std::size_t n_concepts = 96;
    std::size_t samples_per_concept = 32;
    double sample_noise = 0.05;
    double modality_gap = 0.1;
    std::uint64_t seed = 0;
    double train_frac = 0.8;
    double test_frac = 0.2;
    std::size_t source_pool_size = 256;
    // Upper bound on cosine(source row, any concept center).
    double source_cos_cap = 0.6;
    // Weight of a shared direction added to every concept center. Real text
    // encoders place all embeddings in a narrow cone; 0 gives a symmetric manifold.
    double cone_offset = 1.0;

    void validate() const;
};

struct ConceptSpec {
    std::size_t id = 0;
    Tensor latent;         // [latent_dim]
    Tensor center;         // [embed_dim], unit norm
    Tensor samples_text;   // [N x embed_dim], unit rows
    Tensor samples_image;  // [N x embed_dim], unit rows
    Split split = Split::train;
};

struct SourcePool {
    Tensor samples;  // [M x embed_dim], unit rows
};

struct World {
    WorldConfig config;
    std::vector<ConceptSpec> concepts;
    SourcePool source;

    std::vector<std::size_t> ids_in(Split s) const;
    const ConceptSpec& concept_by_id(std::size_t id) const;
};

World build_world(const WorldConfig& cfg);

// Conditioning embedding: unit-normalized mean of the rows, or a single row.
struct Encoding {
    std::optional<std::size_t> single;  // empty = average all rows

    static Encoding average() { return {}; }
    static Encoding row(std::size_t i) { return {i}; }
};

Tensor encode(const Tensor& samples, Encoding mode = Encoding::average());

// Rows of `samples` selected by index, as a new [k x d] tensor.
Tensor select_rows(const Tensor& samples, const std::vector<std::size_t>& rows);

double cosine(std::span<const double> a, std::span<const double> b);

struct QuantileSummary {
    double q25 = 0.0;
    double q50 = 0.0;
    double q75 = 0.0;
};

struct DifficultyEntry {
    std::size_t concept_id = 0;
    double mean_distance = 0.0;  // to all training centers
    double min_distance = 0.0;   // to the closest training center
};

struct DistanceReport {
    std::vector<std::size_t> ids;                 // row order of `distances`
    Tensor distances;                             // [n x n] cosine distances between centers
    std::vector<QuantileSummary> quantiles;       // per concept, over distances to every other concept
    std::vector<Split> splits;                    // per concept
    double median_q50_train = 0.0;
    double median_q50_test = 0.0;
    std::vector<DifficultyEntry> difficulty;      // per test concept
    double difficulty_pearson = 0.0;              // mean vs min distance
};

// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
double percentile(std::vector<double> values, double q);
double pearson(std::span<const double> x, std::span<const double> y);

DistanceReport concept_distance_stats(const std::vector<ConceptSpec>& concepts);

nlohmann::json to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const World& world);
World world_from_json(const nlohmann::json& j);

}  // namespace steer
