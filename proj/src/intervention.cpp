#include "steer/intervention.hpp"

#include <cmath>
#include <stdexcept>

#include "steer/json_io.hpp"

namespace steer {

const SiteParams& InterventionParams::site(const std::string& name) const {
    auto it = sites.find(name);
    if (it == sites.end()) throw std::out_of_range("intervention has no site '" + name + "'");
    return it->second;
}

void InterventionParams::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite and >= 0");
    for (const auto& [name, p] : sites) {
        if (p.w.rank() != 1 || p.w.shape() != p.b.shape())
            throw DimensionError("site '" + name + "': w " + shape_str(p.w.shape()) + " vs b " + shape_str(p.b.shape()));
        if (!p.w.all_finite() || !p.b.all_finite()) throw std::domain_error("site '" + name + "': non-finite parameters");
    }
}

InterventionNodes as_constants(const InterventionParams& params) {
    params.validate();
    InterventionNodes out;
    for (const auto& [name, p] : params.sites) out.sites[name] = {ad::Node::constant(p.w), ad::Node::constant(p.b)};
    out.lambda = ad::Node::constant(Tensor::scalar(params.lambda));
    return out;
}

InterventionNodes as_leaves(const InterventionParams& params, bool lambda_requires_grad) {
    params.validate();
    InterventionNodes out;
    for (const auto& [name, p] : params.sites) out.sites[name] = {ad::Node::leaf(p.w), ad::Node::leaf(p.b)};
    out.lambda = lambda_requires_grad ? ad::Node::leaf(Tensor::scalar(params.lambda))
                                      : ad::Node::constant(Tensor::scalar(params.lambda));
    return out;
}

InterventionParams detach(const InterventionNodes& nodes, std::string provenance) {
    InterventionParams out;
    for (const auto& [name, n] : nodes.sites) out.sites[name] = {n.w.value(), n.b.value()};
    out.lambda = nodes.lambda.item();
    out.provenance = std::move(provenance);
    return out;
}

ad::Node apply(const InterventionNodes& params, const std::string& site, const ad::Node& a) {
    auto it = params.sites.find(site);
    if (it == params.sites.end()) throw std::out_of_range("intervention has no site '" + site + "'");
    const auto& [w, b] = it->second;
    if (a.value().rank() != 2 || a.value().cols() != w.numel())
        throw DimensionError("site '" + site + "': activation " + shape_str(a.shape()) + " vs width " +
                             std::to_string(w.numel()));
    auto one = ad::Node::constant(Tensor::scalar(1.0));
    auto affine = ad::add_rows(ad::mul_rows(a, w), b);
    return ad::add(ad::mul(ad::sub(one, params.lambda), a), ad::mul(params.lambda, affine));
}

Tensor apply(const InterventionParams& params, const std::string& site, const Tensor& a) {
    return apply(as_constants(params), site, ad::Node::constant(a)).value();
}

Tensor invert(const InterventionParams& params, const std::string& site, const Tensor& y) {
    const auto& p = params.site(site);
    if (y.rank() != 2 || y.cols() != p.w.numel()) throw DimensionError("invert: width mismatch at '" + site + "'");
    const double lam = params.lambda;
    Tensor a = y;
    for (std::size_t j = 0; j < y.cols(); ++j) {
        double slope = lam * p.w[j] + (1.0 - lam);
        if (slope == 0.0) throw std::domain_error("invert: feature " + std::to_string(j) + " is collapsed");
        for (std::size_t r = 0; r < y.rows(); ++r) a.at(r, j) = (y.at(r, j) - lam * p.b[j]) / slope;
    }
    return a;
}

InterventionParams compose(const InterventionParams& first, const InterventionParams& second) {
    // Each site is the map a -> slope * a + offset with slope = (1 - l) + l * w, offset = l * b.
    InterventionParams out;
    out.lambda = 1.0;
    out.provenance = "compose(" + first.provenance + "," + second.provenance + ")";
    auto slope_offset = [](const InterventionParams& p, const std::string& name, std::size_t j) {
        if (!p.has_site(name)) return std::pair{1.0, 0.0};
        const auto& s = p.site(name);
        return std::pair{(1.0 - p.lambda) + p.lambda * s.w[j], p.lambda * s.b[j]};
    };
    std::map<std::string, std::size_t> widths;
    for (const auto& [name, s] : first.sites) widths[name] = s.w.numel();
    for (const auto& [name, s] : second.sites) {
        if (widths.contains(name) && widths[name] != s.w.numel()) throw DimensionError("compose: width mismatch at '" + name + "'");
        widths[name] = s.w.numel();
    }
    for (const auto& [name, width] : widths) {
        SiteParams sp{Tensor::zeros({width}), Tensor::zeros({width})};
        for (std::size_t j = 0; j < width; ++j) {
            auto [s1, o1] = slope_offset(first, name, j);
            auto [s2, o2] = slope_offset(second, name, j);
            sp.w[j] = s2 * s1;
            sp.b[j] = s2 * o1 + o2;
        }
        out.sites[name] = std::move(sp);
    }
    return out;
}

InterventionParams identity_params(const std::vector<HookSite>& sites) {
    InterventionParams out;
    for (const auto& s : sites) out.sites[s.name] = {Tensor::filled({s.width}, 1.0), Tensor::zeros({s.width})};
    out.lambda = 1.0;
    out.provenance = "identity";
    return out;
}

InterventionParams with_strength(const InterventionParams& params, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("with_strength: lambda must be >= 0");
    InterventionParams out = params;
    out.lambda = lambda;
    return out;
}

nlohmann::json to_json(const InterventionParams& params) {
    nlohmann::json sites = nlohmann::json::object();
    for (const auto& [name, p] : params.sites) sites[name] = {{"w", p.w.values()}, {"b", p.b.values()}};
    return {{"kind", "steer.intervention"}, {"lambda", params.lambda}, {"provenance", params.provenance}, {"sites", sites}};
}

InterventionParams intervention_from_json(const nlohmann::json& j) {
    if (j.value("kind", "") != "steer.intervention") throw std::runtime_error("not an intervention file");
    InterventionParams out;
    out.lambda = j.at("lambda");
    out.provenance = j.value("provenance", "");
    for (const auto& [name, s] : j.at("sites").items())
        out.sites[name] = {Tensor::vector(s.at("w").get<std::vector<double>>()),
                           Tensor::vector(s.at("b").get<std::vector<double>>())};
    out.validate();
    return out;
}

}  // namespace steer
