#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "codis/numcore/rng.hpp"
#include "codis/numcore/tensor.hpp"

// Differentiable operations. Matrices are row-major {rows, cols}; "rowwise"
// ops treat a rank-1 tensor as a single row.
namespace codis::ops {

using Mask = std::vector<std::uint8_t>;

// Elementwise arithmetic; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a{m x n} + bias{n}, bias broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
// a{m x n} scaled row i by w[i]; w has m elements.
Tensor scale_rows(const Tensor& a, const Tensor& w);

Tensor matmul(const Tensor& a, const Tensor& b);
// a{m x k} * b{n x k}^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x{m x k} * w{k x n} + bias{n}
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor swish(const Tensor& x);
Tensor exp(const Tensor& x);
// log(max(x, floor))
Tensor log_clamped(const Tensor& x, double floor = 1e-12);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Rowwise inner product of two {m x n} tensors -> {m}.
Tensor row_dot(const Tensor& a, const Tensor& b);
// Mean over the rows of {m x n} -> {n}.
Tensor mean_rows(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
// out[i] = table[ids[i]]; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  return gather_rows(table, ids);
}

Tensor log_softmax(const Tensor& x);
Tensor softmax(const Tensor& x);
// Rowwise softmax restricted to mask==1 entries; masked entries are exactly 0
// and receive exactly zero gradient. A mask of one row broadcasts.
Tensor masked_softmax(const Tensor& scores, const Mask& mask);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-8);
// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

// Identity forward; backward multiplies the upstream gradient by -lambda.
Tensor grad_reverse(const Tensor& x, double lambda);
// Identity forward; no gradient flows to x.
Tensor stop_gradient(const Tensor& x);

// Rowwise KL(p || q) with entries clamped below by eps before the logs.
// q may have one row (broadcast). Rows must lie on the simplex.
Tensor kl_categorical(const Tensor& p, const Tensor& q, double eps = 1e-12);
// Rowwise KL(N(mu, diag(exp(log_var))) || N(0, I)).
Tensor kl_diag_gaussian_to_std(const Tensor& mu, const Tensor& log_var);
// mu + exp(0.5 log_var) * eps, eps ~ N(0, I). With zero_noise the draw is
// skipped and z == mu.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng,
                      bool zero_noise = false);
// Rowwise soft-target binary cross entropy on probabilities, clamped at eps.
Tensor binary_cross_entropy(const Tensor& p, std::span<const double> target,
                            double eps = 1e-12);

// Multi-head causal self-attention over `batch` sequences of length `steps`
// packed as {batch*steps x width} rows. Position t attends to positions
// s <= t with key_valid[s] != 0; rows with no admissible key output zeros.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t steps,
                        std::size_t heads, const Mask& key_valid);

// Mean of the admissible rows s <= t (key_valid[s] != 0) of each sequence;
// zero rows where none exist.
Tensor causal_prefix_mean(const Tensor& x, std::size_t batch, std::size_t steps,
                          const Mask& valid);

// Router attribution scores. contexts is {N x h(h+1)}; row n splits into
// W_n = row[:h^2] reshaped h x h and a_n = row[h^2:]. Returns {m x N} with
// s[t][n] = <a_n, swish(W_n e_t)>.
Tensor router_scores(const Tensor& embeddings, const Tensor& contexts);

// Per-row InfoNCE against rows of `table`: candidates is {rows x C} item ids
// with the positive in column 0. Returns {rows} losses
// -log softmax(query . table[c] / tau)[0].
Tensor info_nce_rows(const Tensor& queries, const Tensor& table,
                     std::span<const std::size_t> candidates,
                     std::size_t per_row, double tau);

}  // namespace codis::ops
