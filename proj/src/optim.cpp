#include "fmc/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fmc {

void adamw_step(std::span<double> param, std::span<const double> grad,
                AdamMoments &state, const AdamWConfig &cfg) {
  if (!grad.empty() && grad.size() != param.size())
    throw std::invalid_argument("adamw_step: gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size())
    throw std::invalid_argument("adamw_step: moment size mismatch");
  for (double g : grad)
    if (!std::isfinite(g))
      throw std::domain_error("adamw_step: non-finite gradient");

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    param[i] *= 1.0 - cfg.lr * cfg.weight_decay;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

AdamW::AdamW(ParameterSet &params, AdamWConfig cfg)
    : params_(params), cfg_(cfg), state_(params.size()) {}

void AdamW::step() {
  if (state_.size() != params_.size())
    throw std::logic_error("AdamW: parameter set changed after construction");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor &p = params_.entries()[i].second;
    adamw_step(p.mutable_data(), p.grad(), state_[i], cfg_);
  }
}

} // namespace fmc
