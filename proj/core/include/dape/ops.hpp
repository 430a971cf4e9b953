#pragma once

#include <cstdint>
#include <vector>

#include "dape/rng.hpp"
#include "dape/tensor.hpp"

namespace dape {

// All operations run eagerly on float64 data. When a TapeScope is active
// and an input requires grad, the op appends its backward rule to the tape.

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// b's shape must be a suffix of a's shape; b is broadcast over the leading dims
Tensor add_bcast(const Tensor& a, const Tensor& b);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, double drop_prob, Rng& rng);
Tensor sum_all(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> new_shape);

// ---- linear algebra (BLAS-backed) ----
// [... x k] by [k x n] -> [... x n]
Tensor matmul(const Tensor& a, const Tensor& w);
// [... x k] by [n x k] -> [... x n]  (right operand transposed)
Tensor matmul_nt(const Tensor& a, const Tensor& w);
// [S... x n x d] by [S... x m x d] -> [S... x n x m]
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// [S... x n x m] by [S... x m x d] -> [S... x n x d]
Tensor bmm_nn(const Tensor& a, const Tensor& b);

// ---- normalization & loss ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
// Rows sum to 1 over kept entries; dropped entries are exactly 0. The
// keep mask's size must divide x.numel() and be a multiple of the last
// dimension; it broadcasts over leading dims.
Tensor softmax_lastdim(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x, const std::vector<std::uint8_t>& keep_mask);
// logits [... x V]; targets/loss_mask sized to the number of rows. Mean
// negative log-likelihood over unmasked rows.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& loss_mask);

// ---- structure ----
// table [V x d], ids length batch*seq -> [batch x seq x d]
Tensor embedding(const Tensor& table, const std::vector<int>& ids, int batch, int seq);
// [B x n x h*dh] -> [B x h x n x dh]
Tensor split_heads(const Tensor& x, int heads);
// [B x h x n x dh] -> [B x n x h*dh]
Tensor merge_heads(const Tensor& x);
// Rotates consecutive channel pairs of the last dim by pos * theta_base^(-2c/d).
// positions indexes the second-to-last dim.
Tensor rope_rotate(const Tensor& x, const std::vector<int>& positions, double theta_base);

// ---- channel layout for per-entry MLPs over attention matrices ----
// attn [B x h x n x m] (+ bias [h x n x m]) -> rows [B*n*m x h or 2h]
Tensor stack_channels(const Tensor& attn, const Tensor& bias);
Tensor stack_channels(const Tensor& attn);
// rows [B*n*m x h] -> [B x h x n x m]
Tensor unstack_channels(const Tensor& rows, int batch, int n, int m);

// Two-layer leaky-relu MLP applied per attention cell, blocked so the
// [cells x hidden] intermediate never materializes. Channel vector per
// cell: concat(attn[b,:,i,j], bias[:,i,j]) when bias is defined, else
// attn[b,:,i,j] alone. w1 [in_ch x D], b1 [D], w2 [D x h_out], b2 [h_out];
// output [B x h_out x n x m]. Pass undefined b1/b2 to skip bias terms.
Tensor cell_mlp(const Tensor& attn, const Tensor& bias, const Tensor& w1, const Tensor& b1,
                const Tensor& w2, const Tensor& b2, double slope);

}  // namespace dape
