#pragma once

// 1D Wasserstein distances between equal-size empirical distributions,
// computed from order statistics, and the per-neuron alignment loss.

#include <map>
#include <optional>
#include <string>

#include "steer/autodiff.hpp"
#include "steer/generator.hpp"
#include "steer/tensor.hpp"

namespace steer {

struct LossConfig {
    int p = 1;
    std::optional<std::map<std::string, double>> site_weights;  // missing sites weigh 1

    void validate() const;
    double weight(const std::string& site) const;
};

// x is differentiable through its sort; y is a constant target.
ad::Node wp_distance(const ad::Node& x, const Tensor& y, int p);
double wp_distance(const Tensor& x, const Tensor& y, int p);

// Sum over sites, then neurons, of W_p between the N-sample columns.
ad::Node alignment_loss(const std::map<std::string, ad::Node>& steered, const ActivationRecord& target,
                        const LossConfig& cfg = {});
double alignment_loss(const ActivationRecord& steered, const ActivationRecord& target, const LossConfig& cfg = {});

// Per-site share of the loss above.
std::map<std::string, double> site_losses(const ActivationRecord& steered, const ActivationRecord& target,
                                          const LossConfig& cfg = {});

// W_p between (1 - lambda) s + lambda (w s + b) and the target.
double transport_gap(const Tensor& source, const Tensor& target, double w, double b, double lambda, int p);

}  // namespace steer
