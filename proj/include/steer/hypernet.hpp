#pragma once

// MLP hypernetwork: conditioning embedding -> affine intervention at every
// hook site, in one pass.
//
// Every site contributes two weight queries (one for w, one for b). A query
// is [site key | shape embedding of the site width | state key]; it is
// appended to the adapted task vector and decoded by a shared MLP whose
// output is truncated to the site width. Output rule: w = 1 + raw, b = raw.
// The input adapter is a bias-free linear map followed by a layer norm with
// its own gain and shift.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer/autodiff.hpp"
#include "steer/intervention.hpp"
#include "steer/optim.hpp"

namespace steer {

struct HypernetConfig {
    std::size_t encoder_dim = 32;
    std::size_t adapter_out = 256;
    std::size_t key_dim = 128;
    std::size_t shape_dim = 64;
    std::size_t state_key_dim = 64;
    std::vector<std::size_t> decoder_hidden{1024, 1024};
    std::vector<HookSite> sites;

    std::size_t query_dim() const { return key_dim + shape_dim + state_key_dim; }
    std::size_t max_out() const;
    std::vector<std::size_t> distinct_widths() const;  // in order of first appearance
    std::size_t shape_index(std::size_t site) const;
    std::size_t n_queries() const { return 2 * sites.size(); }
    void validate() const;

    friend bool operator==(const HypernetConfig&, const HypernetConfig&) = default;
};

struct HypernetState {
    HypernetConfig config;
    std::vector<std::string> names;  // fixed parameter order
    std::vector<std::shared_ptr<Tensor>> live;
    std::vector<std::shared_ptr<Tensor>> shadow;  // EMA copy
    AdamWState optimizer;
    std::size_t step = 0;

    std::size_t index(const std::string& name) const;
    const Tensor& param(const std::string& name) const { return *live[index(name)]; }
    const Tensor& ema(const std::string& name) const { return *shadow[index(name)]; }
    std::size_t param_count() const;
};

HypernetState init_hypernet(const HypernetConfig& cfg, std::uint64_t seed);

enum class Weights { live, ema };

// Parameters as graph leaves (requires_grad) sharing storage with the state.
std::vector<ad::Node> as_leaves(const HypernetState& state, Weights which = Weights::live);

// Differentiable prediction; `params` follow state.names order. lambda is 1.
InterventionNodes predict_graph(const HypernetConfig& cfg, const std::vector<ad::Node>& params, const ad::Node& embedding);

// Graph-free prediction for evaluation and timing.
InterventionParams predict(const HypernetState& state, const Tensor& embedding, Weights which = Weights::ema);

void ema_update(HypernetState& state, double decay = 0.99);

// Component -> parameter count, plus "Total".
std::map<std::string, std::size_t> count_params(const HypernetState& state);

nlohmann::json to_json(const HypernetConfig& cfg);
HypernetConfig hypernet_config_from_json(const nlohmann::json& j);

// Manifest at `path` (JSON) with the raw little-endian float64 arrays in a
// sibling file sharing its stem and ending in ".bin".
void save_checkpoint(const std::filesystem::path& path, const HypernetState& state);
HypernetState load_checkpoint(const std::filesystem::path& path);

}  // namespace steer
