#include "fmc/ocvq.hpp"

#include <algorithm>
#include <numeric>

namespace fmc::vq {

ClusterState ClusterState::zeros(Index K, double rho, double delta) {
  if (K < 2)
    throw std::invalid_argument("ClusterState: K must be >= 2");
  if (!(rho > 0.0 && rho < 1.0))
    throw std::invalid_argument("ClusterState: rho must lie in (0, 1)");
  return ClusterState{Vector::Zero(K), rho, delta};
}

double bitrate(double sample_rate, Index r, Index hop, Index K) {
  if (sample_rate <= 0.0 || r <= 0 || hop <= 0 || K <= 0)
    throw std::invalid_argument("bitrate: arguments must be positive");
  return sample_rate / static_cast<double>(r * hop) * std::log2(static_cast<double>(K));
}

Matrix init_codebook(Index K, Index C, std::mt19937_64 &rng) {
  if (K < 2 || C < 1)
    throw std::invalid_argument("init_codebook: need K >= 2 and C >= 1");
  const double b = 1.0 / std::sqrt(static_cast<double>(C));
  std::uniform_real_distribution<double> u(-b, b);
  Matrix W(K, C);
  for (Index i = 0; i < W.size(); ++i)
    W.data()[i] = u(rng);
  return W;
}

std::vector<Index> count_tokens(std::span<const Index> tokens, Index K) {
  std::vector<Index> counts(static_cast<std::size_t>(K), 0);
  for (Index t : tokens) {
    if (t < 0 || t >= K)
      throw std::out_of_range("count_tokens: token " + std::to_string(t) +
                              " outside [0, " + std::to_string(K) + ")");
    ++counts[t];
  }
  return counts;
}

void update_usage_ema(ClusterState &state, std::span<const Index> counts,
                      Index n_batch) {
  if (static_cast<Index>(counts.size()) != state.size())
    throw std::invalid_argument("update_usage_ema: counts size != K");
  if (n_batch <= 0)
    throw std::invalid_argument("update_usage_ema: n_batch must be positive");
  Index total = 0;
  for (Index c : counts) {
    if (c < 0)
      throw std::invalid_argument("update_usage_ema: negative count");
    total += c;
  }
  if (total != n_batch)
    throw std::invalid_argument("update_usage_ema: counts sum to " +
                                std::to_string(total) + ", expected " +
                                std::to_string(n_batch));
  const double inv = 1.0 / static_cast<double>(n_batch);
  for (Index k = 0; k < state.size(); ++k)
    state.pi[k] = state.rho * state.pi[k] +
                  (1.0 - state.rho) * static_cast<double>(counts[k]) * inv;
}

Vector refresh_coefficients(const ClusterState &state) {
  const double K = static_cast<double>(state.size());
  return (-10.0 * K / (1.0 - state.rho) * state.pi.array() - state.delta).exp().matrix();
}

Matrix sample_anchors(const Matrix &Z, const Matrix &W, std::mt19937_64 &rng) {
  if (Z.rows() == 0)
    throw std::invalid_argument("sample_anchors: empty batch");
  if (Z.cols() != W.cols())
    throw std::invalid_argument("sample_anchors: dimension mismatch");
  const Index N = Z.rows();
  Matrix anchors(W.rows(), W.cols());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector p(N);
  for (Index k = 0; k < W.rows(); ++k) {
    for (Index n = 0; n < N; ++n)
      p[n] = (Z.row(n) - W.row(k)).norm();
    p = (p.array() - p.maxCoeff()).exp().matrix();
    const double target = u(rng) * p.sum();
    Index pick = N - 1;
    double acc = 0.0;
    for (Index n = 0; n < N; ++n) {
      acc += p[n];
      if (target < acc) {
        pick = n;
        break;
      }
    }
    anchors.row(k) = Z.row(pick);
  }
  return anchors;
}

void online_cluster_step(Eigen::Ref<Matrix> W, ClusterState &state, const Matrix &Z,
                         std::span<const Index> tokens, std::mt19937_64 &rng) {
  if (static_cast<Index>(tokens.size()) != Z.rows())
    throw std::invalid_argument("online_cluster_step: one token per batch row needed");
  if (W.rows() != state.size())
    throw std::invalid_argument("online_cluster_step: codebook/state size mismatch");
  update_usage_ema(state, count_tokens(tokens, W.rows()), Z.rows());
  const Vector gamma = refresh_coefficients(state);
  const Matrix anchors = sample_anchors(Z, W, rng);
  for (Index k = 0; k < W.rows(); ++k)
    W.row(k) = (1.0 - gamma[k]) * W.row(k) + gamma[k] * anchors.row(k);
  if (!W.allFinite())
    throw std::runtime_error("online_cluster_step: codebook became non-finite");
}

Tensor vq_loss(const Tensor &Z, const Tensor &Zhat, double eta) {
  if (Z.shape() != Zhat.shape())
    throw std::invalid_argument("vq_loss: shape mismatch " + shape_str(Z.shape()) +
                                " vs " + shape_str(Zhat.shape()));
  if (eta < 0.0)
    throw std::invalid_argument("vq_loss: eta must be non-negative");
  return add(mse_loss(Z.detach(), Zhat), scale(mse_loss(Z, Zhat.detach()), eta));
}

void UsageTracker::add(std::span<const Index> tokens) {
  for (Index t : tokens) {
    if (t < 0 || t >= static_cast<Index>(seen_.size()))
      throw std::out_of_range("UsageTracker: token out of range");
    seen_[t] = true;
  }
}

Index UsageTracker::used() const {
  return std::count(seen_.begin(), seen_.end(), true);
}

double UsageTracker::utilization() const {
  return static_cast<double>(used()) / static_cast<double>(seen_.size());
}

void UsageTracker::reset() { std::fill(seen_.begin(), seen_.end(), false); }

} // namespace fmc::vq
