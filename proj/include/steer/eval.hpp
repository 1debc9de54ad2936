#pragma once

// Output-space analogs of the steering metrics.
//   input fidelity:   mean_x cos(G(x; θ), G(x))
//   concept fidelity: mean_x cos(G(x; θ) - baseline, target_mean - baseline)
// where baseline is the mean unsteered output over the evaluation inputs and
// target_mean the mean unsteered output over the concept's own samples.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "steer/estimators.hpp"
#include "steer/generator.hpp"
#include "steer/hypernet.hpp"
#include "steer/world.hpp"

namespace steer {

struct EvalConfig {
    std::uint64_t seed = 0;  // fit/eval source split and N-shot draws
    std::size_t n_workers = 1;
    Weights weights = Weights::ema;
    std::vector<Split> splits{Split::test};
    EstimatorConfig estimator;  // method is overridden per comparison row
    LossConfig loss;

    void validate() const;
};

// Two disjoint source sets of samples_per_concept rows each: one to fit
// per-concept baselines, one on which every method is scored.
struct SourceSplit {
    Tensor fit;
    Tensor eval;
};
SourceSplit split_source(const World& world, std::uint64_t seed);

struct ConceptReference {
    Tensor unsteered;     // G(eval inputs)
    Tensor baseline;      // mean row of `unsteered`
    Tensor target_mean;   // mean row of G(concept samples)
    ActivationRecord target_record;
};
ConceptReference concept_reference(const Generator& g, const Tensor& eval_inputs, const Tensor& concept_samples);

double input_fidelity(const Generator& g, const Tensor& inputs, const InterventionParams& params);
double concept_fidelity(const Generator& g, const Tensor& inputs, const InterventionParams& params,
                        const Tensor& target_mean, const Tensor& src_baseline);

struct Scores {
    double input_fidelity = 0.0;
    double concept_fidelity = 0.0;
    double loss = 0.0;  // alignment loss of steered eval activations vs the concept's

    friend bool operator==(const Scores&, const Scores&) = default;
};
// params == nullptr scores the unsteered generator.
Scores score(const Generator& g, const Tensor& eval_inputs, const InterventionParams* params, const ConceptReference& ref,
             const LossConfig& loss = {});

struct Stat {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation; 0 for a single value
    std::size_t n = 0;
};
Stat summarize(const std::vector<double>& values);

struct ConceptResult {
    std::string method;
    Split split = Split::test;
    std::size_t concept_id = 0;
    Scores scores;
    double seconds = 0.0;
};

struct MethodRow {
    std::string method;
    Split split = Split::test;
    Stat input_fidelity;
    Stat concept_fidelity;
    Stat loss;
    double seconds = 0.0;  // mean fit or predict time per concept
};

struct EvalReport {
    std::vector<MethodRow> rows;
    std::vector<ConceptResult> concepts;

    const MethodRow& row(const std::string& method, Split split = Split::test) const;
};

// Rows per split: unsteered, each method in order, then the hypernet if given.
EvalReport compare_methods(const World& world, const Generator& g, const std::vector<Method>& methods,
                           const HypernetState* hypernet, const EvalConfig& cfg);

std::vector<double> default_lambda_grid();

struct LambdaRow {
    double lambda = 0.0;
    double input_fidelity = 0.0;
    double concept_fidelity = 0.0;
    double mean = 0.0;  // arithmetic mean of the two fidelities
};
std::vector<LambdaRow> lambda_sweep(const Generator& g, const InterventionParams& params, const Tensor& eval_inputs,
                                    const ConceptReference& ref, const std::vector<double>& grid = default_lambda_grid());

struct LambdaSweepReport {
    std::string source;  // "hypernet" or the fitted method
    std::vector<LambdaRow> rows;  // averaged over concepts
    std::vector<std::size_t> concept_ids;
    std::vector<std::vector<LambdaRow>> per_concept;
    double monotone_fraction = 0.0;  // concepts whose concept fidelity never drops over grid points in [0, 1]
};
// Params come from the hypernet when given, otherwise from a per-concept fit.
LambdaSweepReport lambda_sweep_concepts(const World& world, const Generator& g, const HypernetState* hypernet,
                                        const EvalConfig& cfg, const std::vector<double>& grid = default_lambda_grid());

std::vector<std::size_t> default_shots();

struct NShotRow {
    std::size_t shots = 0;
    Stat input_fidelity;
    Stat concept_fidelity;
    Stat loss;
};
struct NShotReport {
    std::vector<NShotRow> rows;
    Stat unsteered_concept_fidelity;
};
// Conditions on the average of `shots` distinct concept samples; one shot uses a single row.
NShotReport nshot_sweep(const World& world, const Generator& g, const HypernetState& hypernet,
                        const std::vector<std::size_t>& shots, const EvalConfig& cfg);
std::vector<std::size_t> nshot_rows(const World& world, const ConceptSpec& spec, std::size_t shots, std::uint64_t seed);

struct CrossmodalConcept {
    std::size_t concept_id = 0;
    Scores text;
    Scores image;
};
struct CrossmodalReport {
    std::vector<CrossmodalConcept> concepts;
    Stat text_concept_fidelity;
    Stat image_concept_fidelity;
    Stat text_input_fidelity;
    Stat image_input_fidelity;
    double delta_concept_fidelity = 0.0;  // image - text, averaged
    double delta_input_fidelity = 0.0;
    double relative_delta = 0.0;  // |delta_concept_fidelity| / |text mean|
};
CrossmodalReport crossmodal_eval(const World& world, const Generator& g, const HypernetState& hypernet,
                                 const EvalConfig& cfg);

void write_table_csv(const std::filesystem::path& path, const EvalReport& report);
void write_timing_csv(const std::filesystem::path& path, const EvalReport& report);
void write_concepts_csv(const std::filesystem::path& path, const EvalReport& report);
void write_lambda_csv(const std::filesystem::path& path, const LambdaSweepReport& report);
void write_nshot_csv(const std::filesystem::path& path, const NShotReport& report);
void write_crossmodal_csv(const std::filesystem::path& path, const CrossmodalReport& report);
void write_distances_csv(const std::filesystem::path& path, const DistanceReport& report);

std::string format_table(const EvalReport& report, bool with_time = true);
std::string format_lambda(const LambdaSweepReport& report);
std::string format_nshot(const NShotReport& report);
std::string format_crossmodal(const CrossmodalReport& report);
std::string format_distances(const DistanceReport& report);

}  // namespace steer
