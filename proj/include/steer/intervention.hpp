#pragma once

// Affine-elementwise interventions: at each hook site,
//   I(a) = (1 - lambda) * a + lambda * (w ⊙ a + b)
// broadcast over sample rows, with one global strength lambda.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer/autodiff.hpp"
#include "steer/tensor.hpp"

namespace steer {

struct HookSite {
    std::string name;
    std::size_t layer_index = 0;
    std::size_t width = 0;

    friend bool operator==(const HookSite&, const HookSite&) = default;
};

struct SiteParams {
    Tensor w;  // [width]
    Tensor b;  // [width]

    friend bool operator==(const SiteParams&, const SiteParams&) = default;
};

class InterventionParams {
public:
    std::map<std::string, SiteParams> sites;
    double lambda = 1.0;
    std::string provenance;  // estimator that produced the params

    const SiteParams& site(const std::string& name) const;
    bool has_site(const std::string& name) const { return sites.contains(name); }
    void validate() const;

    friend bool operator==(const InterventionParams&, const InterventionParams&) = default;
};

// Same parameters held as graph nodes, so predicted or optimized values stay
// connected to whatever produced them.
struct SiteNodes {
    ad::Node w;
    ad::Node b;
};

struct InterventionNodes {
    std::map<std::string, SiteNodes> sites;
    ad::Node lambda;  // rank-0

    bool has_site(const std::string& name) const { return sites.contains(name); }
};

InterventionNodes as_constants(const InterventionParams& params);
// Every w, b becomes a leaf; lambda stays constant unless requested.
InterventionNodes as_leaves(const InterventionParams& params, bool lambda_requires_grad = false);
InterventionParams detach(const InterventionNodes& nodes, std::string provenance = {});

// a is [N x width]; throws on unknown site or width mismatch.
ad::Node apply(const InterventionNodes& params, const std::string& site, const ad::Node& a);
Tensor apply(const InterventionParams& params, const std::string& site, const Tensor& a);

// Inverse of apply for one site; requires lambda*w_j + (1 - lambda) != 0 for every j.
Tensor invert(const InterventionParams& params, const std::string& site, const Tensor& y);

// Single lambda=1 intervention equal to applying `first` then `second` at every site.
InterventionParams compose(const InterventionParams& first, const InterventionParams& second);

InterventionParams identity_params(const std::vector<HookSite>& sites);
InterventionParams with_strength(const InterventionParams& params, double lambda);

nlohmann::json to_json(const InterventionParams& params);
InterventionParams intervention_from_json(const nlohmann::json& j);

}  // namespace steer
