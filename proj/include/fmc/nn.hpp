#pragma once

#include <random>
#include <span>
#include <string>

#include "fmc/ops.hpp"
#include "fmc/params.hpp"

namespace fmc::nn {

// Training mode enables dropout, which draws from `rng`.
struct ForwardContext {
  bool training = false;
  std::mt19937_64 *rng = nullptr;
};

// Layers hold parameter handles; the owning ParameterSet registers them under
// "<prefix>.<field>" names. Weights start uniform in +-1/sqrt(fan_in).

struct Conv1d {
  Tensor weight; // [Cout, Cin / groups, K]
  Tensor bias;   // [Cout]
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;

  static Conv1d create(ParameterSet &ps, const std::string &prefix, Index cin,
                       Index cout, Index kernel, std::mt19937_64 &rng,
                       Index stride = 1, Index padding = -1, Index groups = 1);
  Tensor operator()(const Tensor &x) const;
};

struct ConvTranspose1d {
  Tensor weight; // [Cin, Cout, K]
  Tensor bias;   // [Cout]
  Index stride = 1;
  Index padding = 0;

  static ConvTranspose1d create(ParameterSet &ps, const std::string &prefix,
                                Index cin, Index cout, Index kernel,
                                Index stride, Index padding,
                                std::mt19937_64 &rng);
  Tensor operator()(const Tensor &x) const;
};

struct Linear {
  Tensor weight; // [Out, In]
  Tensor bias;   // [Out]

  static Linear create(ParameterSet &ps, const std::string &prefix, Index in,
                       Index out, std::mt19937_64 &rng);
  Tensor operator()(const Tensor &x) const;
};

// Per-position normalization over channels.
struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParameterSet &ps, const std::string &prefix,
                          Index channels);
  Tensor operator()(const Tensor &x) const;
};

struct GroupNorm {
  Index groups = 8;
  Tensor gain;
  Tensor bias;

  static GroupNorm create(ParameterSet &ps, const std::string &prefix,
                          Index channels, Index groups);
  Tensor operator()(const Tensor &x) const;
};

// depthwise conv k7 -> layer norm -> pointwise x2 -> GELU -> GRN ->
// pointwise back, plus the block input.
struct ConvNeXtBlock {
  Conv1d depthwise;
  LayerNorm norm;
  Conv1d pw1;
  Tensor grn_gain;
  Tensor grn_bias;
  Conv1d pw2;

  static ConvNeXtBlock create(ParameterSet &ps, const std::string &prefix,
                              Index channels, std::mt19937_64 &rng,
                              Index kernel = 7);
  Tensor operator()(const Tensor &x) const;
};

// conv k3 -> groupnorm -> SiLU -> + time projection -> conv k3 -> groupnorm,
// summed with a 1x1 projection of the input.
struct ResnetBlock {
  Conv1d conv1;
  GroupNorm norm1;
  Linear time_proj;
  Conv1d conv2;
  GroupNorm norm2;
  Conv1d residual;

  static ResnetBlock create(ParameterSet &ps, const std::string &prefix,
                            Index cin, Index cout, Index time_dim,
                            std::mt19937_64 &rng, Index groups = 8);
  Tensor operator()(const Tensor &x, const Tensor &t_emb) const;
};

// Pre-norm multi-head self-attention over time followed by a SnakeBeta
// feed-forward, both residual. The projected time embedding is added to the
// attention input only. No positional encoding.
struct AttentionBlock {
  Index heads = 2;
  Index head_dim = 64;
  double dropout = 0.0;
  Linear time_proj;
  LayerNorm norm1;
  Conv1d query, key, value, out;
  LayerNorm norm2;
  Conv1d ff_in;
  Tensor snake_log_alpha;
  Tensor snake_log_beta;
  Conv1d ff_out;

  static AttentionBlock create(ParameterSet &ps, const std::string &prefix,
                               Index channels, Index heads, Index head_dim,
                               Index time_dim, double dropout,
                               std::mt19937_64 &rng, Index ff_mult = 4);
  // `weights`, when given, receives the [B * heads, L, L] attention matrix.
  Tensor operator()(const Tensor &x, const Tensor &t_emb,
                    const ForwardContext &ctx = {},
                    Tensor *weights = nullptr) const;
};

// [B, dim]: first half sin(1000 t f_i), second half cos(1000 t f_i) with f_i
// geometrically spaced from 1 down to 1/10000.
Tensor sinusoidal_features(std::span<const double> t, Index dim);

struct TimeEmbedding {
  Index dim = 256;
  Linear fc1;
  Linear fc2;

  static TimeEmbedding create(ParameterSet &ps, const std::string &prefix,
                              Index dim, std::mt19937_64 &rng);
  // t values must lie in [0, 1]. Returns [B, dim].
  Tensor operator()(std::span<const double> t) const;
};

} // namespace fmc::nn
