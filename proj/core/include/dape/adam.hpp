#pragma once

#include <vector>

#include "dape/tensor.hpp"

namespace dape {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
};

struct AdamState {
    long step = 0;
    std::vector<double> m;  // first moment, same length as the parameter
    std::vector<double> v;  // second moment, entries stay non-negative
};

// Bias-corrected Adam update over aligned (params, states); gradients are
// zeroed afterwards. lr_scale multiplies the base rate (warmup). Missing
// gradients are a contract error.
void adam_step(std::vector<Tensor>& params, std::vector<AdamState>& states, const AdamConfig& cfg,
               double lr_scale = 1.0);

double global_grad_norm(const std::vector<Tensor>& params);

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg);

    // One update; applies clipping first when configured. Returns the
    // global gradient norm seen before any clipping.
    double step(double lr_scale = 1.0);

    std::vector<Tensor>& params() { return params_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamState> states_;
    AdamConfig cfg_;
};

}  // namespace dape
