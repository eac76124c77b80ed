#include "fmc/refine.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fmc {

void RefineConfig::validate() const {
  if (mel_bins < 1 || hidden < 1 || time_dim < 4 || heads < 1 || head_dim < 1)
    throw std::invalid_argument("refine config: widths must be positive");
  if (levels < 0 || bridge < 0)
    throw std::invalid_argument("refine config: level counts must be >= 0");
  if (iterations < 1)
    throw std::invalid_argument("refine config: iterations must be >= 1");
  if (!(dt_min >= 0.0 && dt_min < dt_max && dt_max < 1.0))
    throw std::invalid_argument("refine config: need 0 <= dt_min < dt_max < 1");
  if (!(eps > 0.0 && eps < 1.0))
    throw std::invalid_argument("refine config: eps must lie in (0, 1)");
  if (sigma <= 0.0 || lambda_cfm < 0.0 || lambda_sc < 0.0)
    throw std::invalid_argument("refine config: sigma > 0 and lambdas >= 0 required");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("refine config: dropout must lie in [0, 1)");
}

VelocityNet::VelocityNet(const RefineConfig &cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const Index H = cfg_.hidden, T = cfg_.time_dim;
  auto attention = [&](const std::string &name, Index ch) {
    return nn::AttentionBlock::create(params_, name, ch, cfg_.heads, cfg_.head_dim, T,
                                      cfg_.dropout, rng);
  };
  time_ = nn::TimeEmbedding::create(params_, "time", T, rng);
  in_proj_ = nn::Conv1d::create(params_, "in", 2 * cfg_.mel_bins, H, 1, rng);
  for (Index i = 0; i < cfg_.levels; ++i) {
    const std::string p = "down" + std::to_string(i);
    Down d;
    d.res = nn::ResnetBlock::create(params_, p + ".res", H, H, T, rng, cfg_.groups);
    d.attn = attention(p + ".attn", H);
    d.down = nn::Conv1d::create(params_, p + ".down", H, H, 3, rng, 2, 1);
    downs_.push_back(std::move(d));
  }
  for (Index i = 0; i < cfg_.bridge; ++i) {
    const std::string p = "bridge" + std::to_string(i);
    Bridge b;
    b.res = nn::ResnetBlock::create(params_, p + ".res", H, H, T, rng, cfg_.groups);
    b.attn = attention(p + ".attn", H);
    bridge_.push_back(std::move(b));
  }
  for (Index i = 0; i < cfg_.levels; ++i) {
    const std::string p = "up" + std::to_string(i);
    Up u;
    u.up = nn::ConvTranspose1d::create(params_, p + ".up", H, H, 4, 2, 1, rng);
    u.attn = attention(p + ".attn", 2 * H);
    u.res = nn::ResnetBlock::create(params_, p + ".res", 2 * H, H, T, rng, cfg_.groups);
    ups_.push_back(std::move(u));
  }
  head_in_ = nn::Conv1d::create(params_, "head.conv", H, H, 3, rng);
  head_out_ = nn::Conv1d::create(params_, "head.out", H, cfg_.mel_bins, 1, rng);
}

Tensor VelocityNet::forward(const Tensor &mt, std::span<const double> t, const Tensor &cond,
                            const nn::ForwardContext &ctx) const {
  if (mt.rank() != 3 || mt.shape() != cond.shape() || mt.dim(1) != cfg_.mel_bins)
    throw std::invalid_argument("velocity net: state " + shape_str(mt.shape()) +
                                " and condition " + shape_str(cond.shape()) +
                                " must both be [B, " + std::to_string(cfg_.mel_bins) + ", N]");
  if (static_cast<Index>(t.size()) != mt.dim(0))
    throw std::invalid_argument("velocity net: need one t per batch element");
  if (mt.dim(2) % frame_multiple() != 0)
    throw std::invalid_argument("velocity net: frame count must be a multiple of " +
                                std::to_string(frame_multiple()));

  const Tensor temb = time_(t);
  Tensor h = in_proj_(concat_channels(mt, cond));
  std::vector<Tensor> skips;
  for (const Down &d : downs_) {
    h = d.attn(d.res(h, temb), temb, ctx);
    skips.push_back(h);
    h = d.down(h);
  }
  for (const Bridge &b : bridge_)
    h = b.attn(b.res(h, temb), temb, ctx);
  for (const Up &u : ups_) {
    h = concat_channels(u.up(h), skips.back());
    skips.pop_back();
    h = u.res(u.attn(h, temb, ctx), temb);
  }
  return head_out_(silu(head_in_(h)));
}

Matrix VelocityNet::operator()(const Matrix &mt, double t, const Matrix &cond) const {
  if (mt.rows() != cond.rows() || mt.cols() != cond.cols())
    throw std::invalid_argument("velocity net: state and condition shapes differ");
  const Index n = mt.rows(), m = frame_multiple();
  const Index pad = (m - n % m) % m;
  NoGradGuard ng;
  Tensor a = frames_to_tensor(mt), c = frames_to_tensor(cond);
  if (pad > 0) {
    a = pad_edge_last(a, 0, pad);
    c = pad_edge_last(c, 0, pad);
  }
  const double tt[1] = {t};
  return tensor_to_frames(forward(a, tt, c)).topRows(n);
}

Tensor interpolate_batch(const Tensor &M0, const Tensor &M, std::span<const double> t) {
  if (M0.shape() != M.shape() || M.rank() != 3)
    throw std::invalid_argument("interpolate_batch: shape mismatch");
  const Index B = M.dim(0), per = M.numel() / std::max<Index>(B, 1);
  if (static_cast<Index>(t.size()) != B)
    throw std::invalid_argument("interpolate_batch: need one t per batch element");
  std::vector<double> out(M.data().size());
  for (Index b = 0; b < B; ++b) {
    check_time(t[b], "interpolate_batch");
    for (Index i = b * per; i < (b + 1) * per; ++i)
      out[i] = (1.0 - t[b]) * M0.data()[i] + t[b] * M.data()[i];
  }
  return Tensor::from(M.shape(), std::move(out));
}

Tensor cfm_loss(const VelocityFn &v, const Tensor &M0, const Tensor &M,
                std::span<const double> t) {
  const Tensor mt = interpolate_batch(M0, M, t);
  const Tensor target = sub(M.detach(), M0.detach());
  return mse_loss(v(mt, t, true), target);
}

double sample_truncated_time(std::mt19937_64 &rng, double sigma, double eps) {
  std::normal_distribution<double> n(0.0, sigma);
  for (;;) {
    const double t = std::abs(n(rng));
    if (t <= 1.0 - eps)
      return t;
  }
}

SelfConsistencyDraw draw_self_consistency(Index batch, std::mt19937_64 &rng,
                                          const RefineConfig &cfg) {
  SelfConsistencyDraw d;
  std::uniform_real_distribution<double> u(cfg.dt_min, cfg.dt_max);
  for (Index b = 0; b < batch; ++b) {
    d.t.push_back(sample_truncated_time(rng, cfg.sigma, cfg.eps));
    d.dt.push_back(u(rng));
  }
  return d;
}

Tensor self_consistency_loss(const VelocityFn &v, const Tensor &M0, const Tensor &M,
                             const SelfConsistencyDraw &draw, const RefineConfig &cfg) {
  const Index B = M.dim(0), per = M.numel() / std::max<Index>(B, 1);
  if (static_cast<Index>(draw.t.size()) != B || static_cast<Index>(draw.dt.size()) != B)
    throw std::invalid_argument("self_consistency_loss: draw size != batch");

  std::vector<double> mask(static_cast<std::size_t>(M.numel()), 0.0);
  std::vector<double> t_next(static_cast<std::size_t>(B));
  bool any = false;
  for (Index b = 0; b < B; ++b) {
    const bool active = draw.t[b] + draw.dt[b] < 1.0 - cfg.eps;
    any = any || active;
    // Inactive elements are masked out; clamp only keeps the embedding valid.
    t_next[b] = std::min(1.0, draw.t[b] + draw.dt[b]);
    if (active)
      std::fill(mask.begin() + b * per, mask.begin() + (b + 1) * per, 1.0);
  }
  if (!any)
    return Tensor::scalar(0.0);

  const Tensor mt = interpolate_batch(M0, M, draw.t);
  const Tensor pred = v(mt, draw.t, true);
  Tensor target;
  {
    NoGradGuard ng;
    std::vector<double> next(mt.data().begin(), mt.data().end());
    for (Index b = 0; b < B; ++b)
      for (Index i = b * per; i < (b + 1) * per; ++i)
        next[i] += draw.dt[b] * pred.data()[i];
    target = v(Tensor::from(M.shape(), std::move(next)), t_next, false).detach();
  }
  const Tensor sq = mul(square(sub(pred, target)), Tensor::from(M.shape(), std::move(mask)));
  return scale(sum(sq), 1.0 / static_cast<double>(M.numel()));
}

Matrix refine(const Matrix &coarse, const VelocityNet &net, int iterations,
              std::mt19937_64 &rng, Index *evaluations) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix M0(coarse.rows(), coarse.cols());
  for (Index i = 0; i < M0.size(); ++i)
    M0.data()[i] = n(rng);
  return euler_solve(
      std::move(M0),
      [&](const Matrix &m, double t) {
        if (evaluations)
          ++*evaluations;
        return net(m, t, coarse);
      },
      iterations);
}

std::vector<RefinePair> refine_pairs(const CodingModel &coding, const std::vector<Matrix> &mels) {
  std::vector<RefinePair> out;
  for (const Matrix &m : mels) {
    Index pad = 0;
    const Matrix z = coding.encode(m, &pad);
    out.push_back({m, coding.decode(coding.quantize(z).zhat, pad)});
  }
  return out;
}

RefineTrainer::RefineTrainer(VelocityNet &net, const std::vector<RefinePair> &data,
                             const MelConfig &mel_cfg, const RefineTrainConfig &tc)
    : net_(net), data_(data), tc_(tc), data_rng_(tc.seed),
      noise_rng_(tc.seed ^ 0xA5A5A5A5DEADBEEFull), dropout_rng_(tc.seed + 17),
      opt_(net.params(), tc.optim) {
  if (data_.empty())
    throw std::invalid_argument("refine training: empty corpus");
  if (tc_.batch_size < 1 || tc_.segment_seconds <= 0)
    throw std::invalid_argument("refine training: bad batch or segment settings");
  const Index m = net_.frame_multiple();
  frames_ = std::lround(tc_.segment_seconds * mel_cfg.sample_rate / mel_cfg.hop);
  frames_ = std::max<Index>(m, (frames_ + m - 1) / m * m);
  double seconds = 0.0;
  for (const RefinePair &p : data_)
    seconds += static_cast<double>(p.target.rows()) * mel_cfg.hop / mel_cfg.sample_rate;
  epoch_steps_ = std::max<Index>(
      1, static_cast<Index>(std::ceil(seconds / (tc_.batch_size * tc_.segment_seconds))));
}

RefineStepLog RefineTrainer::step(int phase) {
  const RefineConfig &cfg = net_.config();
  if (step_ > 0 && step_ % epoch_steps_ == 0)
    opt_.set_lr(tc_.optim.lr * std::pow(tc_.lr_decay, static_cast<double>(step_ / epoch_steps_)));

  const Index B = tc_.batch_size, D = cfg.mel_bins, F = frames_;
  std::vector<double> target(static_cast<std::size_t>(B * D * F)), coarse(target.size());
  std::uniform_int_distribution<std::size_t> pick_file(0, data_.size() - 1);
  for (Index b = 0; b < B; ++b) {
    const RefinePair &p = data_[pick_file(data_rng_)];
    std::uniform_int_distribution<Index> pick_off(0, std::max<Index>(0, p.target.rows() - F));
    const Index off = pick_off(data_rng_);
    for (Index f = 0; f < F; ++f) {
      const Index src = std::min(off + f, p.target.rows() - 1);
      for (Index d = 0; d < D; ++d) {
        target[(b * D + d) * F + f] = p.target(src, d);
        coarse[(b * D + d) * F + f] = p.coarse(src, d);
      }
    }
  }
  const Tensor M = Tensor::from({B, D, F}, std::move(target));
  const Tensor cond = Tensor::from({B, D, F}, std::move(coarse));
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> noise(static_cast<std::size_t>(B * D * F));
  for (double &x : noise)
    x = n(noise_rng_);
  const Tensor M0 = Tensor::from({B, D, F}, std::move(noise));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> t(static_cast<std::size_t>(B));
  for (double &x : t)
    x = u(noise_rng_);

  VelocityFn v = [&](const Tensor &mt, std::span<const double> tt, bool training) {
    return net_.forward(mt, tt, cond, nn::ForwardContext{training, &dropout_rng_});
  };

  RefineStepLog log;
  log.step = step_;
  log.phase = phase;
  net_.params().zero_grad();
  try {
    const Tensor cfm = cfm_loss(v, M0, M, t);
    Tensor loss = scale(cfm, cfg.lambda_cfm);
    log.cfm = cfm.item();
    if (phase == 2 && cfg.lambda_sc > 0.0) {
      const SelfConsistencyDraw draw = draw_self_consistency(B, noise_rng_, cfg);
      const Tensor sc = self_consistency_loss(v, M0, M, draw, cfg);
      log.self_consistency = sc.item();
      loss = add(loss, scale(sc, cfg.lambda_sc));
    }
    log.loss = loss.item();
    backward(loss);
    opt_.step();
  } catch (const std::exception &e) {
    throw std::runtime_error("train_refine: step " + std::to_string(step_) + ": " + e.what());
  }
  ++step_;
  return log;
}

std::vector<RefineStepLog> RefineTrainer::run(int phase, Index steps,
                                              const std::function<void(const RefineStepLog &)> &on_step) {
  if (phase != 1 && phase != 2)
    throw std::invalid_argument("refine training: phase must be 1 or 2");
  std::vector<RefineStepLog> logs;
  for (Index i = 0; i < steps; ++i) {
    logs.push_back(step(phase));
    if (on_step)
      on_step(logs.back());
  }
  return logs;
}

std::vector<RefineStepLog> train_refine(VelocityNet &net, const std::vector<RefinePair> &data,
                                        const MelConfig &mel_cfg, const RefineTrainConfig &tc,
                                        const std::function<void(const RefineStepLog &)> &on_step) {
  RefineTrainer trainer(net, data, mel_cfg, tc);
  auto logs = trainer.run(1, tc.phase1_steps, on_step);
  auto more = trainer.run(2, tc.phase2_steps, on_step);
  logs.insert(logs.end(), more.begin(), more.end());
  return logs;
}

} // namespace fmc
