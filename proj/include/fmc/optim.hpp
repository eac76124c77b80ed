#pragma once

#include <span>
#include <vector>

#include "fmc/params.hpp"

namespace fmc {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double weight_decay = 0.0;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  Index step = 0;
};

// One decoupled-weight-decay Adam update of `param` in place.
void adamw_step(std::span<double> param, std::span<const double> grad,
                AdamMoments &state, const AdamWConfig &cfg);

class AdamW {
public:
  AdamW(ParameterSet &params, AdamWConfig cfg);

  // Parameters without an accumulated gradient are treated as zero-grad.
  void step();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

private:
  ParameterSet &params_;
  AdamWConfig cfg_;
  std::vector<AdamMoments> state_;
};

} // namespace fmc
