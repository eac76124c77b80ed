#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "fmc/coding.hpp"
#include "fmc/nn.hpp"
#include "fmc/optim.hpp"

// Flow-matching refinement of the decoded coarse mel.
namespace fmc {

struct RefineConfig {
  Index mel_bins = 80;
  Index hidden = 256;
  Index levels = 2; // up/down submodules
  Index bridge = 2;
  Index heads = 2;
  Index head_dim = 64;
  Index time_dim = 256;
  Index groups = 8;
  double dropout = 0.05;
  int iterations = 4;
  double lambda_cfm = 45.0;
  double lambda_sc = 10.0;
  double eps = 0.01;
  double sigma = 0.3;
  double dt_min = 0.005;
  double dt_max = 0.02;

  void validate() const;
};

// ---- flow algebra on frame-major matrices ----

struct FlowState {
  Matrix m;
  double t = 0.0;
};

inline void check_time(double t, const char *what) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument(std::string(what) + ": t must lie in [0, 1]");
}

// (1 - t) M0 + t M.
template <typename A, typename B>
FlowState interpolate_state(const Eigen::MatrixBase<A> &M0,
                            const Eigen::MatrixBase<B> &M, double t) {
  if (M0.rows() != M.rows() || M0.cols() != M.cols())
    throw std::invalid_argument("interpolate_state: shape mismatch");
  check_time(t, "interpolate_state");
  return {(1.0 - t) * M0 + t * M, t};
}

// One jump to the endpoint: M_t + (1 - t) V.
template <typename A>
Matrix ideal_terminal_operator(const FlowState &s, const Eigen::MatrixBase<A> &V) {
  if (s.m.rows() != V.rows() || s.m.cols() != V.cols())
    throw std::invalid_argument("ideal_terminal_operator: shape mismatch");
  return s.m + (1.0 - s.t) * V;
}

template <typename A>
FlowState rollout_step(const FlowState &s, double dt, const Eigen::MatrixBase<A> &V) {
  if (dt < 0.0 || s.t + dt > 1.0 + 1e-12)
    throw std::invalid_argument("rollout_step: t + dt exceeds 1");
  if (s.m.rows() != V.rows() || s.m.cols() != V.cols())
    throw std::invalid_argument("rollout_step: shape mismatch");
  return {s.m + dt * V, s.t + dt};
}

// Explicit Euler from t = 0 to 1 in `iterations` steps; `field(M, t)`
// returns dM/dt.
template <typename Field>
Matrix euler_solve(Matrix M, Field &&field, int iterations) {
  if (iterations < 1)
    throw std::invalid_argument("euler_solve: iterations must be >= 1");
  const double dt = 1.0 / iterations;
  for (int i = 0; i < iterations; ++i) {
    M += dt * field(static_cast<const Matrix &>(M), i * dt);
    if (!M.allFinite())
      throw std::runtime_error("euler_solve: state became non-finite at step " +
                               std::to_string(i));
  }
  return M;
}

// ---- velocity network ----

class VelocityNet {
public:
  VelocityNet(const RefineConfig &cfg, std::uint64_t seed);
  VelocityNet(const VelocityNet &) = delete;
  VelocityNet &operator=(const VelocityNet &) = delete;
  VelocityNet(VelocityNet &&) = default;

  const RefineConfig &config() const { return cfg_; }
  ParameterSet &params() { return params_; }
  const ParameterSet &params() const { return params_; }
  // Frame multiple required by the strided path.
  Index frame_multiple() const { return Index{1} << cfg_.levels; }

  // mt, cond: [B, D, N] with N a multiple of frame_multiple(); t: B values.
  Tensor forward(const Tensor &mt, std::span<const double> t, const Tensor &cond,
                 const nn::ForwardContext &ctx = {}) const;
  // Eval mode on one frame-major state; pads N by edge repetition and trims.
  Matrix operator()(const Matrix &mt, double t, const Matrix &cond) const;

  nn::Conv1d &head_out() { return head_out_; }

private:
  struct Down {
    nn::ResnetBlock res;
    nn::AttentionBlock attn;
    nn::Conv1d down;
  };
  struct Up {
    nn::ConvTranspose1d up;
    nn::AttentionBlock attn;
    nn::ResnetBlock res;
  };
  struct Bridge {
    nn::ResnetBlock res;
    nn::AttentionBlock attn;
  };

  RefineConfig cfg_;
  ParameterSet params_;
  nn::TimeEmbedding time_;
  nn::Conv1d in_proj_;
  std::vector<Down> downs_;
  std::vector<Bridge> bridge_;
  std::vector<Up> ups_;
  nn::Conv1d head_in_;
  nn::Conv1d head_out_;
};

// ---- losses ----

// v(M_t, t, train) -> velocity, all [B, D, N]. The condition is bound by
// the caller.
using VelocityFn =
    std::function<Tensor(const Tensor &mt, std::span<const double> t, bool training)>;

// (1 - t_b) M0_b + t_b M_b per batch element; plain values, no graph.
Tensor interpolate_batch(const Tensor &M0, const Tensor &M, std::span<const double> t);

// mean || v(M_t, t) - (M - M0) ||^2.
Tensor cfm_loss(const VelocityFn &v, const Tensor &M0, const Tensor &M,
                std::span<const double> t);

// |N(0, sigma^2)| rejected above 1 - eps.
double sample_truncated_time(std::mt19937_64 &rng, double sigma, double eps);

struct SelfConsistencyDraw {
  std::vector<double> t;
  std::vector<double> dt;
};
SelfConsistencyDraw draw_self_consistency(Index batch, std::mt19937_64 &rng,
                                          const RefineConfig &cfg);

// Per element b: zero if t + dt >= 1 - eps, else
//   || v(M_t, t) - sg[v(M_t + dt sg[v(M_t, t)], t + dt)] ||^2,
// summed and divided by the total element count. The target branch runs in
// eval mode.
Tensor self_consistency_loss(const VelocityFn &v, const Tensor &M0, const Tensor &M,
                             const SelfConsistencyDraw &draw, const RefineConfig &cfg);

// ---- inference ----

// Draws M0 ~ N(0, I) and integrates; `evaluations`, when given, is
// incremented per velocity-net call.
Matrix refine(const Matrix &coarse, const VelocityNet &net, int iterations,
              std::mt19937_64 &rng, Index *evaluations = nullptr);

// ---- training ----

struct RefineTrainConfig {
  AdamWConfig optim;
  double lr_decay = 0.999;
  double segment_seconds = 1.0;
  Index batch_size = 16;
  Index phase1_steps = 2000;
  Index phase2_steps = 300;
  std::uint64_t seed = 0;
};

// Target mel and the frozen coding stage's reconstruction of it.
struct RefinePair {
  Matrix target;
  Matrix coarse;
};
std::vector<RefinePair> refine_pairs(const CodingModel &coding, const std::vector<Matrix> &mels);

struct RefineStepLog {
  Index step = 0;
  int phase = 1;
  double cfm = 0.0;
  double self_consistency = 0.0;
  double loss = 0.0;
};

class RefineTrainer {
public:
  RefineTrainer(VelocityNet &net, const std::vector<RefinePair> &data,
                const MelConfig &mel_cfg, const RefineTrainConfig &tc);

  // Phase 1 optimizes lambda_cfm * L_cfm; phase 2 adds lambda_sc * L_sc.
  RefineStepLog step(int phase);
  std::vector<RefineStepLog> run(int phase, Index steps,
                                 const std::function<void(const RefineStepLog &)> &on_step = {});
  Index steps_done() const { return step_; }
  Index epoch_steps() const { return epoch_steps_; }

private:
  VelocityNet &net_;
  const std::vector<RefinePair> &data_;
  RefineTrainConfig tc_;
  Index frames_ = 0;
  Index epoch_steps_ = 1;
  Index step_ = 0;
  std::mt19937_64 data_rng_;
  std::mt19937_64 noise_rng_;
  std::mt19937_64 dropout_rng_;
  AdamW opt_;
};

std::vector<RefineStepLog> train_refine(VelocityNet &net, const std::vector<RefinePair> &data,
                                        const MelConfig &mel_cfg, const RefineTrainConfig &tc,
                                        const std::function<void(const RefineStepLog &)> &on_step = {});

} // namespace fmc
