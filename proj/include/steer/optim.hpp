#pragma once

#include <string>
#include <vector>

#include "steer/tensor.hpp"

namespace steer {

// Cosine decay from lr0 at step 0 to lr0 * final_factor at step == total.
double cosine_lr(std::size_t step, std::size_t total, double lr0, double final_factor);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

struct AdamWState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;

    friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

struct ParamRef {
    std::string name;
    Tensor* value;
    const Tensor* grad;
};

// One decoupled-weight-decay Adam update with bias-corrected moments. Moment
// buffers are created on the first call. Every gradient is checked before
// anything is written, so a NaN leaves parameters and state untouched.
void adamw_step(const std::vector<ParamRef>& params, AdamWState& state, double lr, const AdamWConfig& cfg = {});

}  // namespace steer
