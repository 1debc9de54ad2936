#pragma once

// Per-concept baselines that fit an InterventionParams for one concept:
// CAA (mean shift), ITI (logistic-probe direction), Linear-AcT (closed-form
// affine transport per neuron) and LinEAS (end-to-end gradient descent),
// plus layer-by-layer incremental fitting for the first three.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "steer/generator.hpp"
#include "steer/intervention.hpp"
#include "steer/transport.hpp"

namespace steer {

enum class Method { caa, iti, linact, lineas };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct EstimatorConfig {
    Method method = Method::linact;
    bool incremental = true;
    std::size_t lineas_steps = 400;
    double lineas_lr = 1e-2;
    double lineas_final_factor = 1e-3;
    double iti_l2 = 1e-2;
    std::size_t iti_steps = 200;
    double iti_lr = 0.5;
    double eps_var = 1e-8;
    LossConfig loss;

    void validate() const;
};

struct SiteLoss {
    double before = 0.0;
    double after = 0.0;
};

struct FitReport {
    InterventionParams params;
    std::map<std::string, SiteLoss> site_loss;
    double wall_seconds = 0.0;
    Method method = Method::linact;
    bool incremental = false;
    std::vector<double> loss_trace;  // LinEAS only: loss before each step

    double loss_before() const;
    double loss_after() const;
};

InterventionParams estimate_caa(const ActivationRecord& src, const ActivationRecord& tgt);
InterventionParams estimate_iti(const ActivationRecord& src, const ActivationRecord& tgt, const EstimatorConfig& cfg = {});

struct AffineFit {
    double w = 1.0;
    double b = 0.0;
};
AffineFit estimate_linact_site(const Tensor& src_col, const Tensor& tgt_col, double eps_var = 1e-8);
InterventionParams estimate_linact(const ActivationRecord& src, const ActivationRecord& tgt,
                                   const EstimatorConfig& cfg = {});

// Generator-level fits. src_inputs and tgt_inputs are [N x input_dim] with equal N.
FitReport estimate_lineas(const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                          const EstimatorConfig& cfg = {});
FitReport estimate_incremental(Method base, const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                               const EstimatorConfig& cfg = {});
// Each site fitted on unintervened activations.
FitReport estimate_independent(Method base, const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                               const EstimatorConfig& cfg = {});

// Dispatch on cfg.method and cfg.incremental.
FitReport fit_concept(const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                      const EstimatorConfig& cfg);

nlohmann::json to_json(const EstimatorConfig& cfg);
EstimatorConfig estimator_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FitReport& report);

}  // namespace steer
