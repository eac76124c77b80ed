#pragma once

#include <random>
#include <vector>

#include "fmc/tensor.hpp"

// Differentiable operations on Tensor. Layouts: sequences are [B, C, L]
// (batch, channels, time); matrices are row-major.
namespace fmc {

// Elementwise, same shape.
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &x, double s);
Tensor add_scalar(const Tensor &x, double s);
Tensor square(const Tensor &x);
Tensor abs(const Tensor &x);
Tensor exp(const Tensor &x);
Tensor sin(const Tensor &x);
Tensor gelu(const Tensor &x); // exact erf form
Tensor silu(const Tensor &x);

Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);

// Batched matrix product over leading dims; a: [..., M, K], b: [..., K, N].
Tensor matmul(const Tensor &a, const Tensor &b);
// Swaps the last two axes.
Tensor transpose_last2(const Tensor &x);
Tensor reshape(const Tensor &x, Shape shape);
// Concatenates [B, Ca, L] and [B, Cb, L] along channels.
Tensor concat_channels(const Tensor &a, const Tensor &b);
// x[..., start : start + length] along the last axis.
Tensor slice_last(const Tensor &x, Index start, Index length);
// Repeats edge samples along the last axis.
Tensor pad_edge_last(const Tensor &x, Index left, Index right);

// input [B, Cin, L], kernel [Cout, Cin/groups, K], bias [Cout] or undefined.
Tensor conv1d(const Tensor &input, const Tensor &kernel, const Tensor &bias,
              Index stride = 1, Index padding = 0, Index groups = 1);
// input [B, Cin, L], kernel [Cin, Cout, K], bias [Cout] or undefined.
// Output length (L - 1) * stride - 2 * padding + K.
Tensor conv_transpose1d(const Tensor &input, const Tensor &kernel,
                        const Tensor &bias, Index stride = 1,
                        Index padding = 0);

// x [B, In], weight [Out, In], bias [Out] or undefined.
Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias);
// x [B, C, L] + v [B, C] broadcast over L.
Tensor add_broadcast_time(const Tensor &x, const Tensor &v);

// Normalizes each (b, l) column over channels. x [B, C, L], gain/bias [C].
Tensor layer_norm_channels(const Tensor &x, const Tensor &gain,
                           const Tensor &bias, double eps = 1e-6);
// x [B, C, L], gain/bias [C].
Tensor group_norm(const Tensor &x, Index groups, const Tensor &gain,
                  const Tensor &bias, double eps = 1e-5);
// Global response normalization:
//   g_c = ||x_c||_2 over L, n_c = g_c / (mean_c g_c + eps),
//   out = gain * (x * n) + bias + x.
Tensor grn(const Tensor &x, const Tensor &gain, const Tensor &bias,
           double eps = 1e-6);
// x + 1/(exp(log_beta) + 1e-9) * sin^2(exp(log_alpha) * x), per channel.
Tensor snakebeta(const Tensor &x, const Tensor &log_alpha,
                 const Tensor &log_beta);
Tensor softmax_last(const Tensor &x);
// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor &x, double p, std::mt19937_64 &rng);

enum class LossKind { L1, L2, MSE };
// l1 = mean|a - b|; l2 = mse = mean (a - b)^2.
Tensor reduce_loss(LossKind kind, const Tensor &a, const Tensor &b);
Tensor l1_loss(const Tensor &a, const Tensor &b);
Tensor mse_loss(const Tensor &a, const Tensor &b);

// Rows of table [K, C] selected by index -> [N, C]; scatters grads back.
Tensor gather_rows(const Tensor &table, const std::vector<Index> &rows);
// Forward value of `zq`, identity gradient into `z`, nothing into `zq`.
Tensor straight_through(const Tensor &z, const Tensor &zq);

} // namespace fmc
