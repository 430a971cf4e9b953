#include "dape/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace dape {

void adam_step(std::vector<Tensor>& params, std::vector<AdamState>& states, const AdamConfig& cfg,
               double lr_scale) {
    if (params.size() != states.size())
        throw std::runtime_error("contract error: adam_step params and states misaligned");
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        if (!t.has_grad())
            throw std::runtime_error("contract error: adam_step on parameter without gradient");
        AdamState& st = states[p];
        if (st.m.size() != t.numel()) {
            st.m.assign(t.numel(), 0.0);
            st.v.assign(t.numel(), 0.0);
        }
        st.step += 1;
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
        double lr = cfg.lr * lr_scale;
        std::vector<double>& g = t.grad();
        std::vector<double>& x = t.data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = st.m[i] / bc1;
            double vhat = st.v[i] / bc2;
            x[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        t.zero_grad();
    }
}

double global_grad_norm(const std::vector<Tensor>& params) {
    double sq = 0.0;
    for (const Tensor& t : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    return std::sqrt(sq);
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (Tensor& t : params) {
            if (!t.has_grad()) continue;
            for (double& g : t.grad()) g *= s;
        }
    }
    return norm;
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {}

double AdamOptimizer::step(double lr_scale) {
    double norm = cfg_.clip_norm > 0.0 ? clip_grad_norm(params_, cfg_.clip_norm)
                                       : global_grad_norm(params_);
    adam_step(params_, states_, cfg_, lr_scale);
    return norm;
}

}  // namespace dape
