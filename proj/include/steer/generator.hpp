#pragma once

// Frozen toy one-step generator: a stack of linear -> norm -> activation
// blocks and a linear readout. A hook site sits right after each block's
// normalization; interventions are applied there and the post-intervention
// activation is both captured and passed downstream.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer/autodiff.hpp"
#include "steer/intervention.hpp"
#include "steer/tensor.hpp"

namespace steer {

enum class NormKind { layer, none };
enum class Activation { tanh, identity };

struct GeneratorConfig {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden_dims{64, 48, 64};
    std::size_t output_dim = 16;
    double norm_eps = 1e-5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct GeneratorLayer {
    std::shared_ptr<const Tensor> weight;  // [in x out]
    std::shared_ptr<const Tensor> bias;    // [out]
    NormKind norm = NormKind::layer;
    std::shared_ptr<const Tensor> gain;    // [out], frozen affine after normalization
    std::shared_ptr<const Tensor> shift;   // [out]
    Activation activation = Activation::tanh;
};

// Site name -> activations [N x width]; every site shares the same row order.
using ActivationRecord = std::map<std::string, Tensor>;

struct GraphCapture {
    ad::Node outputs;
    std::map<std::string, ad::Node> record;
};

struct ForwardResult {
    Tensor outputs;
    ActivationRecord record;
};

class Generator {
public:
    // Hand-assembled generators (any depth >= 1), used for constructed test
    // cases. Readout may be empty, in which case the last block is the output.
    Generator(std::vector<GeneratorLayer> layers, std::shared_ptr<const Tensor> readout_weight,
              std::shared_ptr<const Tensor> readout_bias, double norm_eps = 1e-5, GeneratorConfig config = {});

    const std::vector<HookSite>& sites() const { return sites_; }
    const HookSite& site(const std::string& name) const;
    const std::vector<GeneratorLayer>& layers() const { return layers_; }
    const GeneratorConfig& config() const { return config_; }
    const std::shared_ptr<const Tensor>& readout_weight() const { return readout_weight_; }
    const std::shared_ptr<const Tensor>& readout_bias() const { return readout_bias_; }
    double norm_eps() const { return norm_eps_; }
    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t param_count() const;

    // Checks that an intervention addresses known sites with matching widths.
    void check(const InterventionParams& params) const;
    void check(const InterventionNodes& params) const;

    GraphCapture forward_graph(const ad::Node& inputs, const InterventionNodes* intervention = nullptr) const;
    ForwardResult forward_capture(const Tensor& inputs, const InterventionParams* intervention = nullptr) const;
    Tensor forward(const Tensor& inputs, const InterventionParams* intervention = nullptr) const;

    // Flat copy of every weight, for frozen-ness checks.
    std::vector<double> flat_weights() const;

private:
    GeneratorConfig config_;
    std::vector<GeneratorLayer> layers_;
    std::shared_ptr<const Tensor> readout_weight_;
    std::shared_ptr<const Tensor> readout_bias_;
    double norm_eps_;
    std::vector<HookSite> sites_;
};

Generator build_generator(const GeneratorConfig& cfg);

// Unnormalized linear chain of width-preserving blocks: block i multiplies by
// gains[i] (times the identity), has no bias and no nonlinearity. The last
// block is the output. gains {1} is an identity generator with one site.
Generator make_linear_chain(std::size_t width, const std::vector<double>& gains);

std::string site_name(std::size_t layer_index, NormKind norm);

nlohmann::json to_json(const Generator& g);
Generator generator_from_json(const nlohmann::json& j);

}  // namespace steer
