#pragma once

#include <string>
#include <vector>

#include "dape/ops.hpp"
#include "dape/rng.hpp"
#include "dape/tensor.hpp"

namespace dape {

enum class PeKind {
    nope,
    sinusoidal_ape,
    learned_ape,
    rope,
    randomized_rope,
    t5_bias,
    alibi,
    kerple,
    fire
};

enum class DapeVariant { add_residual, concate, concate_residual };

PeKind pe_kind_from_name(const std::string& name);
std::string pe_kind_name(PeKind kind);
DapeVariant dape_variant_from_name(const std::string& name);
std::string dape_variant_name(DapeVariant v);

// True for kinds realized as an additive [h x n x n] bias matrix; only
// these can sit inside the adaptive wrapper.
bool is_additive_bias(PeKind kind);

// ---- static encodings ----

// [n x d]; entry (pos, 2i) = sin(pos / 10000^(2i/d)), (pos, 2i+1) = cos(...)
Tensor sinusoidal_ape(int n, int d_model);

// geometric slope schedule 2^(-8k/h), k = 1..h
std::vector<double> default_alibi_slopes(int heads);

// [h x n x n]; entry (i,j) = -slope_h * |i-j|; constant, no gradient
Tensor alibi_bias(int n, const std::vector<double>& slopes);

// [h x n x n]; entry (i,j) = -r1 * ln(1 + r2 * |i-j|) with r = softplus(raw);
// differentiable in raw_r1 / raw_r2 (each [h])
Tensor kerple_bias(int n, const Tensor& raw_r1, const Tensor& raw_r2);
double softplus(double x);
double softplus_inverse(double y);

// relative-distance bucket index (exact for small distances, log-spaced up
// to max_distance, clamped beyond)
int t5_bucket(int distance, int num_buckets, int max_distance);
// [h x n x n] gathered from the learnable table [h x num_buckets]
Tensor t5_bucket_bias(int n, int num_buckets, int max_distance, const Tensor& table);

struct FireParams {
    Tensor w1;     // [1 x D]
    Tensor b1;     // [D]
    Tensor w2;     // [D x h]
    Tensor b2;     // [h]
    Tensor raw_c;  // [1]; c = softplus(raw_c) keeps the log transform monotone
    int threshold = 1;  // L
    double leaky_slope = 0.01;
};
FireParams init_fire(int heads, int hidden, int threshold, double leaky_slope, Rng& rng);
// [h x n x n]; per cell the MLP maps psi(dist)/psi(max(L, i)) to one bias
// per head, psi(x) = ln(c*x + 1)
Tensor fire_bias(int n, const FireParams& params);
// the normalized scalar inputs [n*n x 1] (exposed for tests)
Tensor fire_normalized_input(int n, const Tensor& raw_c, int threshold);

// ---- rotary ----

std::vector<int> identity_positions(int n);
// n distinct sorted draws from [0, pool); used while training randomized
// rope. Callers fall back to identity positions when n exceeds the pool.
std::vector<int> sample_randomized_positions(int n, int pool, Rng& rng);

// ---- adaptive wrapper ----

struct DapeParams {
    Tensor w1;  // [in_ch x D]
    Tensor b1;  // [D]
    Tensor w2;  // [D x h]
    Tensor b2;  // [h]
    DapeVariant variant = DapeVariant::concate_residual;
    int heads = 0;
    int hidden = 0;
    double leaky_slope = 0.01;
    bool bias_terms = true;

    int in_channels() const { return variant == DapeVariant::add_residual ? heads : 2 * heads; }
};

// weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero;
// hidden <= 0 selects D = heads
DapeParams init_dape(int heads, int hidden, DapeVariant variant, double leaky_slope, bool bias_terms,
                     Rng& rng);

// the MLP's per-head output f(...) for every (b, i, j) cell
Tensor dape_correction(const Tensor& attn_logits, const Tensor& bias, const DapeParams& params);

// attn_logits [B x h x n x n] + bias [h x n x n] -> adjusted logits:
//   add_residual:     A + B + f(A + B)
//   concate:          A + f(A, B)
//   concate_residual: A + B + f(A, B)
Tensor dape_apply(const Tensor& attn_logits, const Tensor& bias, const DapeParams& params);

}  // namespace dape
