#pragma once

// Amortized training: for each spec, predict an intervention from a
// conditioning subset, steer the frozen generator on source inputs and pull
// its activations toward the concept's own activations.
//
// Concepts are processed in groups of `concepts_per_step`. Within a group
// every concept's gradient is computed against the same parameter snapshot,
// possibly on several worker threads, and the gradients are averaged in
// concept order before a single AdamW step. The thread count therefore never
// changes the result.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "steer/generator.hpp"
#include "steer/hypernet.hpp"
#include "steer/optim.hpp"
#include "steer/transport.hpp"
#include "steer/world.hpp"

namespace steer {

struct TrainConfig {
    std::size_t epochs = 300;
    double lr = 1e-4;
    AdamWConfig adamw;
    double final_lr_factor = 1e-3;
    double ema_decay = 0.99;
    bool use_ema = true;
    std::size_t n_workers = 4;
    std::size_t concepts_per_step = 4;
    std::size_t cond_subset = 16;
    std::size_t target_subset = 16;
    std::size_t source_subset = 16;
    LossConfig loss;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ConceptDraw {
    std::vector<std::size_t> cond_rows;    // into the concept's text samples
    std::vector<std::size_t> target_rows;  // into the concept's text samples
    std::vector<std::size_t> source_rows;  // into the source pool
};

// Disjoint conditioning/target subsets when the concept has enough samples,
// independent draws with replacement otherwise.
ConceptDraw draw_subsets(const World& world, const ConceptSpec& spec, const TrainConfig& cfg, std::uint64_t epoch);

struct StepResult {
    double loss = 0.0;
    std::vector<Tensor> grads;  // aligned with state.names
};

// Loss and gradient for one concept against the live parameters. Does not
// modify the state.
StepResult train_step(const World& world, const Generator& g, const HypernetState& state, const ConceptSpec& spec,
                      const TrainConfig& cfg, std::uint64_t epoch);

// Elementwise mean in the given order.
std::vector<Tensor> average_gradients(const std::vector<StepResult>& results);

struct TrainLog {
    std::vector<double> epoch_loss;     // mean concept loss per epoch
    std::vector<double> step_lr;        // lr used at each optimizer step
    std::vector<double> epoch_seconds;  // wall time per epoch
    double wall_seconds = 0.0;
    std::size_t steps_per_epoch = 0;
    std::size_t first_epoch = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, const HypernetState&)>;

// Trains from state.step onward (a resumed state continues its schedule).
TrainLog train(const World& world, const Generator& g, HypernetState& state, const TrainConfig& cfg,
               const EpochCallback& on_epoch = {});

std::size_t steps_per_epoch(const World& world, const TrainConfig& cfg);

HypernetConfig hypernet_config_for(const World& world, const Generator& g);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// epoch,mean_loss,lr (lr at the epoch's last step)
void write_train_csv(const std::filesystem::path& path, const TrainLog& log);
// step,lr
void write_lr_csv(const std::filesystem::path& path, const TrainLog& log);
// epoch,seconds
void write_timing_csv(const std::filesystem::path& path, const TrainLog& log);

}  // namespace steer
