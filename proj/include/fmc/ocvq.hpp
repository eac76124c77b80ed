#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "fmc/ops.hpp"
#include "fmc/types.hpp"

// Single-codebook vector quantizer with online-clustering reactivation.
namespace fmc::vq {

// Usage-rate EMAs of each codeword plus the refresh constants.
struct ClusterState {
  Vector pi;
  double rho = 0.999;
  double delta = 1e-3;

  static ClusterState zeros(Index K, double rho = 0.999, double delta = 1e-3);
  Index size() const { return pi.size(); }
};

struct Quantized {
  std::vector<Index> tokens;
  Matrix zhat;
};

// Nearest codeword per row of Z (squared Euclidean); ties go to the lowest
// index. W is K x C.
template <typename DerivedZ, typename DerivedW>
Quantized quantize(const Eigen::MatrixBase<DerivedZ> &Z,
                   const Eigen::MatrixBase<DerivedW> &W) {
  if (W.rows() == 0)
    throw std::invalid_argument("quantize: empty codebook");
  if (Z.cols() != W.cols())
    throw std::invalid_argument("quantize: latent dim " + std::to_string(Z.cols()) +
                                " != codebook dim " + std::to_string(W.cols()));
  Quantized q;
  q.tokens.resize(static_cast<std::size_t>(Z.rows()));
  q.zhat.resize(Z.rows(), W.cols());
  for (Index n = 0; n < Z.rows(); ++n) {
    Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < W.rows(); ++k) {
      const double d = (W.row(k) - Z.row(n)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    q.tokens[n] = best;
    q.zhat.row(n) = W.row(best);
  }
  return q;
}

// f_s / (r * w_s) * log2(K), bits per second.
double bitrate(double sample_rate, Index r, Index hop, Index K);

Matrix init_codebook(Index K, Index C, std::mt19937_64 &rng);

// Assignment histogram of `tokens` over K codewords.
std::vector<Index> count_tokens(std::span<const Index> tokens, Index K);

// pi <- rho * pi + (1 - rho) * counts / n_batch.
void update_usage_ema(ClusterState &state, std::span<const Index> counts,
                      Index n_batch);

// gamma_k = exp(-10 * pi_k * K / (1 - rho) - delta).
Vector refresh_coefficients(const ClusterState &state);

// One anchor per codeword, drawn from the batch rows with probability
// softmax over the Euclidean distances to that codeword (far is likely).
Matrix sample_anchors(const Matrix &Z, const Matrix &W, std::mt19937_64 &rng);

// EMA update from this batch's assignments, then
//   w_k <- (1 - gamma_k) w_k + gamma_k a_k.
// Meant to run after the gradient step of the same iteration.
void online_cluster_step(Eigen::Ref<Matrix> W, ClusterState &state, const Matrix &Z,
                         std::span<const Index> tokens, std::mt19937_64 &rng);

// mse(sg[Z], Zhat) + eta * mse(Z, sg[Zhat]).
Tensor vq_loss(const Tensor &Z, const Tensor &Zhat, double eta = 4.0);

// Fraction of codewords assigned at least once since the last reset.
class UsageTracker {
public:
  explicit UsageTracker(Index K) : seen_(static_cast<std::size_t>(K), false) {}
  void add(std::span<const Index> tokens);
  double utilization() const;
  Index used() const;
  void reset();

private:
  std::vector<bool> seen_;
};

} // namespace fmc::vq
