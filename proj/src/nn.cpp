#include "fmc/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace fmc::nn {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (double &x : v)
    x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor constant(Shape shape, double value) {
  return Tensor::full(std::move(shape), value, true);
}

} // namespace

Conv1d Conv1d::create(ParameterSet &ps, const std::string &prefix, Index cin,
                      Index cout, Index kernel, std::mt19937_64 &rng,
                      Index stride, Index padding, Index groups) {
  if (cin % groups != 0 || cout % groups != 0)
    throw std::invalid_argument(prefix + ": channels not divisible by groups");
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin / groups * kernel));
  Conv1d c;
  c.weight = ps.add(prefix + ".weight", uniform({cout, cin / groups, kernel}, bound, rng));
  c.bias = ps.add(prefix + ".bias", uniform({cout}, bound, rng));
  c.stride = stride;
  c.padding = padding < 0 ? (kernel - 1) / 2 : padding;
  c.groups = groups;
  return c;
}

Tensor Conv1d::operator()(const Tensor &x) const {
  return conv1d(x, weight, bias, stride, padding, groups);
}

ConvTranspose1d ConvTranspose1d::create(ParameterSet &ps,
                                        const std::string &prefix, Index cin,
                                        Index cout, Index kernel, Index stride,
                                        Index padding, std::mt19937_64 &rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cout * kernel));
  ConvTranspose1d c;
  c.weight = ps.add(prefix + ".weight", uniform({cin, cout, kernel}, bound, rng));
  c.bias = ps.add(prefix + ".bias", uniform({cout}, bound, rng));
  c.stride = stride;
  c.padding = padding;
  return c;
}

Tensor ConvTranspose1d::operator()(const Tensor &x) const {
  return conv_transpose1d(x, weight, bias, stride, padding);
}

Linear Linear::create(ParameterSet &ps, const std::string &prefix, Index in,
                      Index out, std::mt19937_64 &rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = ps.add(prefix + ".weight", uniform({out, in}, bound, rng));
  l.bias = ps.add(prefix + ".bias", uniform({out}, bound, rng));
  return l;
}

Tensor Linear::operator()(const Tensor &x) const {
  return linear(x, weight, bias);
}

LayerNorm LayerNorm::create(ParameterSet &ps, const std::string &prefix,
                            Index channels) {
  LayerNorm n;
  n.gain = ps.add(prefix + ".gain", constant({channels}, 1.0));
  n.bias = ps.add(prefix + ".bias", constant({channels}, 0.0));
  return n;
}

Tensor LayerNorm::operator()(const Tensor &x) const {
  return layer_norm_channels(x, gain, bias);
}

GroupNorm GroupNorm::create(ParameterSet &ps, const std::string &prefix,
                            Index channels, Index groups) {
  if (groups < 1 || channels % groups != 0)
    throw std::invalid_argument(prefix + ": " + std::to_string(channels) +
                                " channels not divisible by " +
                                std::to_string(groups) + " groups");
  GroupNorm n;
  n.groups = groups;
  n.gain = ps.add(prefix + ".gain", constant({channels}, 1.0));
  n.bias = ps.add(prefix + ".bias", constant({channels}, 0.0));
  return n;
}

Tensor GroupNorm::operator()(const Tensor &x) const {
  return group_norm(x, groups, gain, bias);
}

ConvNeXtBlock ConvNeXtBlock::create(ParameterSet &ps, const std::string &prefix,
                                    Index channels, std::mt19937_64 &rng,
                                    Index kernel) {
  ConvNeXtBlock b;
  b.depthwise = Conv1d::create(ps, prefix + ".dw", channels, channels, kernel,
                               rng, 1, -1, channels);
  b.norm = LayerNorm::create(ps, prefix + ".norm", channels);
  b.pw1 = Conv1d::create(ps, prefix + ".pw1", channels, 2 * channels, 1, rng);
  b.grn_gain = ps.add(prefix + ".grn.gain", constant({2 * channels}, 0.0));
  b.grn_bias = ps.add(prefix + ".grn.bias", constant({2 * channels}, 0.0));
  b.pw2 = Conv1d::create(ps, prefix + ".pw2", 2 * channels, channels, 1, rng);
  return b;
}

Tensor ConvNeXtBlock::operator()(const Tensor &x) const {
  if (x.rank() != 3 || x.dim(1) != depthwise.weight.dim(0))
    throw std::invalid_argument("ConvNeXtBlock: input " + shape_str(x.shape()) +
                                " does not match block width " +
                                std::to_string(depthwise.weight.dim(0)));
  Tensor h = norm(depthwise(x));
  h = grn(gelu(pw1(h)), grn_gain, grn_bias);
  return add(x, pw2(h));
}

ResnetBlock ResnetBlock::create(ParameterSet &ps, const std::string &prefix,
                                Index cin, Index cout, Index time_dim,
                                std::mt19937_64 &rng, Index groups) {
  ResnetBlock b;
  b.conv1 = Conv1d::create(ps, prefix + ".conv1", cin, cout, 3, rng);
  b.norm1 = GroupNorm::create(ps, prefix + ".norm1", cout, groups);
  b.time_proj = Linear::create(ps, prefix + ".time", time_dim, cout, rng);
  b.conv2 = Conv1d::create(ps, prefix + ".conv2", cout, cout, 3, rng);
  b.norm2 = GroupNorm::create(ps, prefix + ".norm2", cout, groups);
  b.residual = Conv1d::create(ps, prefix + ".res", cin, cout, 1, rng);
  return b;
}

Tensor ResnetBlock::operator()(const Tensor &x, const Tensor &t_emb) const {
  Tensor h = silu(norm1(conv1(x)));
  h = add_broadcast_time(h, time_proj(t_emb));
  h = norm2(conv2(h));
  return add(h, residual(x));
}

AttentionBlock AttentionBlock::create(ParameterSet &ps, const std::string &prefix,
                                      Index channels, Index heads,
                                      Index head_dim, Index time_dim,
                                      double dropout, std::mt19937_64 &rng,
                                      Index ff_mult) {
  if (heads < 1 || head_dim < 1)
    throw std::invalid_argument(prefix + ": heads and head_dim must be positive");
  const Index inner = heads * head_dim;
  AttentionBlock b;
  b.heads = heads;
  b.head_dim = head_dim;
  b.dropout = dropout;
  b.time_proj = Linear::create(ps, prefix + ".time", time_dim, channels, rng);
  b.norm1 = LayerNorm::create(ps, prefix + ".norm1", channels);
  b.query = Conv1d::create(ps, prefix + ".q", channels, inner, 1, rng);
  b.key = Conv1d::create(ps, prefix + ".k", channels, inner, 1, rng);
  b.value = Conv1d::create(ps, prefix + ".v", channels, inner, 1, rng);
  b.out = Conv1d::create(ps, prefix + ".out", inner, channels, 1, rng);
  b.norm2 = LayerNorm::create(ps, prefix + ".norm2", channels);
  b.ff_in = Conv1d::create(ps, prefix + ".ff_in", channels, ff_mult * channels, 1, rng);
  b.snake_log_alpha = ps.add(prefix + ".snake.log_alpha", constant({ff_mult * channels}, 0.0));
  b.snake_log_beta = ps.add(prefix + ".snake.log_beta", constant({ff_mult * channels}, 0.0));
  b.ff_out = Conv1d::create(ps, prefix + ".ff_out", ff_mult * channels, channels, 1, rng);
  return b;
}

Tensor AttentionBlock::operator()(const Tensor &x, const Tensor &t_emb,
                                  const ForwardContext &ctx,
                                  Tensor *weights) const {
  if (x.rank() != 3 || x.dim(1) != norm1.gain.dim(0))
    throw std::invalid_argument("AttentionBlock: input " + shape_str(x.shape()) +
                                " does not match block width");
  const Index B = x.dim(0), L = x.dim(2);
  const Index inner = heads * head_dim;
  auto drop = [&](const Tensor &t) {
    if (!ctx.training || dropout == 0.0)
      return t;
    if (!ctx.rng)
      throw std::invalid_argument("AttentionBlock: training mode needs an rng");
    return fmc::dropout(t, dropout, *ctx.rng);
  };

  Tensor a = norm1(add_broadcast_time(x, time_proj(t_emb)));
  Tensor q = reshape(query(a), {B * heads, head_dim, L});
  Tensor k = reshape(key(a), {B * heads, head_dim, L});
  Tensor v = reshape(value(a), {B * heads, head_dim, L});
  Tensor scores = scale(matmul(transpose_last2(q), k),
                        1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor attn = softmax_last(scores); // [B*H, L_query, L_key]
  if (weights)
    *weights = attn;
  Tensor mixed = reshape(matmul(v, transpose_last2(attn)), {B, inner, L});
  Tensor x1 = add(x, drop(out(mixed)));

  Tensor f = snakebeta(ff_in(norm2(x1)), snake_log_alpha, snake_log_beta);
  return add(x1, ff_out(drop(f)));
}

Tensor sinusoidal_features(std::span<const double> t, Index dim) {
  if (dim < 4 || dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_features: dim must be even and >= 4");
  const Index half = dim / 2;
  const Index B = static_cast<Index>(t.size());
  std::vector<double> out(static_cast<std::size_t>(B * dim));
  for (Index b = 0; b < B; ++b) {
    if (!(t[b] >= 0.0 && t[b] <= 1.0))
      throw std::invalid_argument("time embedding: t must lie in [0, 1]");
    for (Index i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half - 1));
      const double arg = 1000.0 * t[b] * freq;
      out[b * dim + i] = std::sin(arg);
      out[b * dim + half + i] = std::cos(arg);
    }
  }
  return Tensor::from({B, dim}, std::move(out));
}

TimeEmbedding TimeEmbedding::create(ParameterSet &ps, const std::string &prefix,
                                    Index dim, std::mt19937_64 &rng) {
  TimeEmbedding e;
  e.dim = dim;
  e.fc1 = Linear::create(ps, prefix + ".fc1", dim, dim, rng);
  e.fc2 = Linear::create(ps, prefix + ".fc2", dim, dim, rng);
  return e;
}

Tensor TimeEmbedding::operator()(std::span<const double> t) const {
  return fc2(silu(fc1(sinusoidal_features(t, dim))));
}

} // namespace fmc::nn
