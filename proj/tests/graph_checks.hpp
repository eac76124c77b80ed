#pragma once

// Whole-objective gradient checks. The numeric side rebuilds each objective
// with its surrogate pieces (quantizer decisions, straight-through offset,
// stop-gradient targets) frozen at the base point, so central differences
// see the function whose gradient the autodiff graph claims to compute.

#include <cmath>

#include "fmc/coding.hpp"
#include "fmc/refine.hpp"
#include "gradcheck.hpp"

namespace fmc::testing {

struct GraphCheck {
  double value_gap = 0.0; // |numeric - analytic| loss value at the base point
  double grad_error = 0.0;
};

inline GraphCheck coding_graph_check(CodingModel &model, const Tensor &mel) {
  const CodingConfig &cfg = model.config();
  CodingForward base = coding_forward(model, mel);
  const std::vector<Index> tokens = base.tokens;
  const Tensor z0 = base.z.detach(), zhat0 = base.zhat.detach();
  const Tensor offset = sub(zhat0, z0);

  auto analytic = [&] { return coding_forward(model, mel).loss; };
  auto numeric = [&] {
    Tensor zb = model.encode_tensor(mel);
    const Index B = zb.dim(0), C = zb.dim(1), Np = zb.dim(2);
    Tensor z = reshape(transpose_last2(zb), {B * Np, C});
    Tensor zhat = gather_rows(model.codebook(), tokens);
    Tensor st = add(z, offset);
    Tensor recon = model.decode_tensor(transpose_last2(reshape(st, {B, Np, C})));
    Tensor vq = add(mse_loss(z0, zhat), scale(mse_loss(z, zhat0), cfg.eta));
    return add(scale(mel_rec_loss(mel, recon), cfg.lambda_mel), scale(vq, cfg.lambda_vq));
  };
  std::vector<Tensor> leaves;
  for (auto &[name, p] : model.params().entries())
    leaves.push_back(p);
  return {std::abs(numeric().item() - analytic().item()),
          gradcheck(analytic, numeric, leaves)};
}

// lambda_cfm * L_cfm + lambda_sc * L_sc with fixed draws; dropout must be 0.
inline GraphCheck refine_graph_check(VelocityNet &net, const Tensor &M0, const Tensor &M,
                                     const Tensor &cond, const std::vector<double> &t,
                                     const SelfConsistencyDraw &draw) {
  const RefineConfig &cfg = net.config();
  VelocityFn v = [&](const Tensor &mt, std::span<const double> tt, bool training) {
    return net.forward(mt, tt, cond, nn::ForwardContext{training, nullptr});
  };
  auto analytic = [&] {
    return add(scale(cfm_loss(v, M0, M, t), cfg.lambda_cfm),
               scale(self_consistency_loss(v, M0, M, draw, cfg), cfg.lambda_sc));
  };
  const Index B = M.dim(0), per = M.numel() / B;
  std::vector<double> active(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b)
    active[b] = draw.t[b] + draw.dt[b] < 1.0 - cfg.eps ? 1.0 : 0.0;

  Tensor target, mask;
  {
    NoGradGuard ng;
    Tensor mt = interpolate_batch(M0, M, draw.t);
    Tensor pred = v(mt, draw.t, false);
    std::vector<double> next(mt.data().begin(), mt.data().end());
    std::vector<double> tn(draw.t.size()), m(static_cast<std::size_t>(M.numel()));
    for (Index b = 0; b < B; ++b) {
      const double dt = active[b] > 0.0 ? draw.dt[b] : 0.0;
      for (Index i = b * per; i < (b + 1) * per; ++i) {
        next[i] += dt * pred.data()[i];
        m[i] = active[b];
      }
      tn[b] = draw.t[b] + dt;
    }
    target = v(Tensor::from(M.shape(), next), tn, false).detach();
    mask = Tensor::from(M.shape(), std::move(m));
  }
  auto numeric = [&] {
    Tensor pred = v(interpolate_batch(M0, M, draw.t), draw.t, true);
    Tensor sc = scale(sum(mul(square(sub(pred, target)), mask)), 1.0 / static_cast<double>(M.numel()));
    return add(scale(cfm_loss(v, M0, M, t), cfg.lambda_cfm), scale(sc, cfg.lambda_sc));
  };
  // The key bias of every attention block is cancelled by softmax; its true
  // gradient is zero and a relative check would compare noise.
  std::vector<Tensor> leaves;
  for (auto &[name, p] : net.params().entries())
    if (!name.ends_with(".k.bias"))
      leaves.push_back(p);
  return {std::abs(numeric().item() - analytic().item()),
          gradcheck(analytic, numeric, leaves)};
}

} // namespace fmc::testing
