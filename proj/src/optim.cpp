#include "steer/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace steer {

double cosine_lr(std::size_t step, std::size_t total, double lr0, double final_factor) {
    if (step > total)
        throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " past total " + std::to_string(total));
    if (total == 0) return lr0;
    const double end = lr0 * final_factor;
    const double t = static_cast<double>(step) / static_cast<double>(total);
    return end + (lr0 - end) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

void adamw_step(const std::vector<ParamRef>& params, AdamWState& state, double lr, const AdamWConfig& cfg) {
    for (const auto& p : params) {
        if (p.value->shape() != p.grad->shape())
            throw DimensionError("adamw: '" + p.name + "' is " + shape_str(p.value->shape()) + " but its gradient is " +
                                 shape_str(p.grad->shape()));
        for (double g : p.grad->data())
            if (!std::isfinite(g)) throw std::domain_error("adamw: non-finite gradient in '" + p.name + "'");
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Tensor::zeros(p.value->shape()));
            state.v.push_back(Tensor::zeros(p.value->shape()));
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adamw: optimizer state tracks a different parameter list");

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto x = params[k].value->data();
        auto g = params[k].grad->data();
        auto m = state.m[k].data();
        auto v = state.v[k].data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            x[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * x[i]);
        }
    }
}

}  // namespace steer
