#include "fmc/coding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fmc {

namespace {

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

// Repeats the last row until the row count is a multiple of r.
Matrix pad_rows(const Matrix &m, Index r, Index &pad) {
  pad = (r - m.rows() % r) % r;
  if (pad == 0)
    return m;
  Matrix out(m.rows() + pad, m.cols());
  out.topRows(m.rows()) = m;
  out.bottomRows(pad) = m.row(m.rows() - 1).replicate(pad, 1);
  return out;
}

} // namespace

void CodingConfig::validate() const {
  if (mel_bins < 1 || hidden < 1 || code_dim < 1)
    throw std::invalid_argument("coding config: widths must be positive");
  if (blocks < 0)
    throw std::invalid_argument("coding config: blocks must be >= 0");
  if (downsample < 1)
    throw std::invalid_argument("coding config: downsample r must be >= 1");
  if (codebook_size < 2)
    throw std::invalid_argument("coding config: codebook size must be >= 2");
  if (lambda_mel < 0 || lambda_vq < 0 || eta < 0)
    throw std::invalid_argument("coding config: loss weights must be >= 0");
}

Tensor frames_to_tensor(const Matrix &m) {
  const Matrix t = m.transpose();
  return Tensor::from({1, m.cols(), m.rows()},
                      std::vector<double>(t.data(), t.data() + t.size()));
}

Matrix tensor_to_frames(const Tensor &t, Index batch) {
  if (t.rank() != 3)
    throw std::invalid_argument("tensor_to_frames: expected [B, C, L], got " +
                                shape_str(t.shape()));
  const Index C = t.dim(1), L = t.dim(2);
  ConstMatrixMap cl(t.data().data() + batch * C * L, C, L);
  return cl.transpose();
}

CodingModel::CodingModel(const CodingConfig &cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const Index H = cfg_.hidden, r = cfg_.downsample;
  enc_in_ = nn::Conv1d::create(params_, "enc.in", cfg_.mel_bins, H, 7, rng);
  for (Index i = 0; i < cfg_.blocks; ++i)
    enc_blocks_.push_back(
        nn::ConvNeXtBlock::create(params_, "enc.block" + std::to_string(i), H, rng));
  enc_down_ = nn::Conv1d::create(params_, "enc.down", H, H, 7, rng, r, 3);
  enc_reduce_ = nn::Conv1d::create(params_, "enc.reduce", H, cfg_.code_dim, 7, rng);

  dec_expand_ = nn::Conv1d::create(params_, "dec.expand", cfg_.code_dim, H, 7, rng);
  // Kernel 4r; output is trimmed to exactly N' r below.
  dec_up_ = nn::ConvTranspose1d::create(params_, "dec.up", H, H, 4 * r, r, 3 * r / 2, rng);
  for (Index i = 0; i < cfg_.blocks; ++i)
    dec_blocks_.push_back(
        nn::ConvNeXtBlock::create(params_, "dec.block" + std::to_string(i), H, rng));
  dec_out_ = nn::Conv1d::create(params_, "dec.out", H, cfg_.mel_bins, 7, rng);

  const Matrix W = vq::init_codebook(cfg_.codebook_size, cfg_.code_dim, rng);
  codebook_ = params_.add("vq.codebook",
                          Tensor::from({W.rows(), W.cols()},
                                       std::vector<double>(W.data(), W.data() + W.size()),
                                       true));
  cluster_ = vq::ClusterState::zeros(cfg_.codebook_size, cfg_.rho, cfg_.delta);
}

Tensor CodingModel::encode_tensor(const Tensor &mel) const {
  if (mel.rank() != 3 || mel.dim(1) != cfg_.mel_bins)
    throw std::invalid_argument("encode: expected [B, " + std::to_string(cfg_.mel_bins) +
                                ", N], got " + shape_str(mel.shape()));
  if (mel.dim(2) == 0 || mel.dim(2) % cfg_.downsample != 0)
    throw std::invalid_argument("encode: frame count " + std::to_string(mel.dim(2)) +
                                " is not a positive multiple of r");
  Tensor h = enc_in_(mel);
  for (const auto &b : enc_blocks_)
    h = b(h);
  return enc_reduce_(enc_down_(h));
}

Tensor CodingModel::decode_tensor(const Tensor &z) const {
  if (z.rank() != 3 || z.dim(1) != cfg_.code_dim)
    throw std::invalid_argument("decode: expected [B, " + std::to_string(cfg_.code_dim) +
                                ", N'], got " + shape_str(z.shape()));
  const Index n = z.dim(2) * cfg_.downsample;
  Tensor h = dec_up_(dec_expand_(z));
  if (h.dim(2) != n)
    h = slice_last(h, 0, n);
  for (const auto &b : dec_blocks_)
    h = b(h);
  return dec_out_(h);
}

Matrix CodingModel::encode(const Matrix &mel, Index *pad_frames) const {
  if (mel.rows() == 0)
    throw std::invalid_argument("encode: empty mel-spectrogram");
  Index pad = 0;
  const Matrix padded = pad_rows(mel, cfg_.downsample, pad);
  if (pad_frames)
    *pad_frames = pad;
  NoGradGuard ng;
  return tensor_to_frames(encode_tensor(frames_to_tensor(padded)));
}

Matrix CodingModel::decode(const Matrix &zhat, Index pad_frames) const {
  if (zhat.cols() != cfg_.code_dim)
    throw std::invalid_argument("decode: latent dim " + std::to_string(zhat.cols()) +
                                " != " + std::to_string(cfg_.code_dim));
  NoGradGuard ng;
  Matrix out = tensor_to_frames(decode_tensor(frames_to_tensor(zhat)));
  if (pad_frames < 0 || pad_frames >= out.rows())
    throw std::invalid_argument("decode: pad count out of range");
  return out.topRows(out.rows() - pad_frames);
}

vq::Quantized CodingModel::quantize(const Matrix &z) const {
  return vq::quantize(z, ConstMatrixMap(codebook_.data().data(), cfg_.codebook_size,
                                        cfg_.code_dim));
}

Matrix CodingModel::lookup(const std::vector<Index> &tokens) const {
  ConstMatrixMap W(codebook_.data().data(), cfg_.codebook_size, cfg_.code_dim);
  Matrix out(static_cast<Index>(tokens.size()), cfg_.code_dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg_.codebook_size)
      throw std::out_of_range("lookup: token " + std::to_string(tokens[i]) + " out of range");
    out.row(static_cast<Index>(i)) = W.row(tokens[i]);
  }
  return out;
}

ParameterSet CodingModel::state() const {
  ParameterSet s;
  s.append(params_);
  const Vector &pi = cluster_.pi;
  s.add("vq.usage", Tensor::from({pi.size()}, std::vector<double>(pi.data(), pi.data() + pi.size())));
  return s;
}

void CodingModel::load_state(const ParameterSet &state) {
  params_.assign_from(state, true);
  if (state.contains("vq.usage")) {
    const Tensor &u = state.get("vq.usage");
    if (u.numel() != cluster_.size())
      throw std::runtime_error("checkpoint usage vector has the wrong size");
    std::copy(u.data().begin(), u.data().end(), cluster_.pi.data());
  }
}

Tensor mel_rec_loss(const Tensor &mel, const Tensor &recon) {
  if (mel.shape() != recon.shape())
    throw std::invalid_argument("mel_rec_loss: shape mismatch " + shape_str(mel.shape()) +
                                " vs " + shape_str(recon.shape()));
  return add(l1_loss(mel, recon), mse_loss(mel, recon));
}

Tensor coding_total_loss(const Tensor &mel, const Tensor &recon, const Tensor &z,
                         const Tensor &zhat, const CodingConfig &cfg) {
  return add(scale(mel_rec_loss(mel, recon), cfg.lambda_mel),
             scale(vq::vq_loss(z, zhat, cfg.eta), cfg.lambda_vq));
}

CodingForward coding_forward(const CodingModel &model, const Tensor &mel,
                             bool bypass_quantizer) {
  const CodingConfig &cfg = model.config();
  CodingForward f;
  Tensor z_bcn = model.encode_tensor(mel);
  const Index B = z_bcn.dim(0), C = z_bcn.dim(1), Np = z_bcn.dim(2);
  f.z = reshape(transpose_last2(z_bcn), {B * Np, C});

  Tensor dec_in;
  if (bypass_quantizer) {
    f.zhat = f.z;
    dec_in = f.z;
    f.vq = Tensor::scalar(0.0);
  } else {
    f.tokens = model.quantize(ConstMatrixMap(f.z.data().data(), B * Np, C)).tokens;
    f.zhat = gather_rows(model.codebook(), f.tokens);
    dec_in = straight_through(f.z, f.zhat);
    f.vq = vq::vq_loss(f.z, f.zhat, cfg.eta);
  }
  f.recon = model.decode_tensor(transpose_last2(reshape(dec_in, {B, Np, C})));
  f.mel_rec = mel_rec_loss(mel, f.recon);
  f.loss = add(scale(f.mel_rec, cfg.lambda_mel), scale(f.vq, cfg.lambda_vq));
  return f;
}

std::vector<Matrix> corpus_mels(const std::vector<Waveform> &corpus,
                                const MelConfig &mel_cfg) {
  if (corpus.empty())
    throw std::invalid_argument("training corpus is empty");
  std::vector<Matrix> out;
  out.reserve(corpus.size());
  for (const Waveform &w : corpus) {
    if (w.sample_rate != mel_cfg.sample_rate)
      throw std::invalid_argument("corpus file at " + std::to_string(w.sample_rate) +
                                  " Hz, config expects " +
                                  std::to_string(mel_cfg.sample_rate));
    out.push_back(mel_spectrogram(w.samples, mel_cfg).values);
  }
  return out;
}

Tensor sample_mel_batch(const std::vector<Matrix> &mels, Index batch, Index frames,
                        std::mt19937_64 &rng) {
  if (mels.empty())
    throw std::invalid_argument("sample_mel_batch: no mel-spectrograms");
  const Index D = mels.front().cols();
  std::vector<double> out(static_cast<std::size_t>(batch * D * frames));
  std::uniform_int_distribution<std::size_t> pick_file(0, mels.size() - 1);
  for (Index b = 0; b < batch; ++b) {
    const Matrix &m = mels[pick_file(rng)];
    std::uniform_int_distribution<Index> pick_off(0, std::max<Index>(0, m.rows() - frames));
    const Index off = pick_off(rng);
    for (Index f = 0; f < frames; ++f) {
      const Index src = std::min(off + f, m.rows() - 1);
      for (Index d = 0; d < D; ++d)
        out[(b * D + d) * frames + f] = m(src, d);
    }
  }
  return Tensor::from({batch, D, frames}, std::move(out));
}

CodingTrainResult train_coding(CodingModel &model, const std::vector<Matrix> &mels,
                               const MelConfig &mel_cfg, const CodingTrainConfig &tc,
                               const std::function<void(const CodingStepLog &)> &on_step) {
  const CodingConfig &cfg = model.config();
  if (mels.empty())
    throw std::invalid_argument("train_coding: empty corpus");
  if (tc.batch_size < 1 || tc.steps < 0 || tc.segment_seconds <= 0)
    throw std::invalid_argument("train_coding: bad batch/steps/segment settings");

  const Index r = cfg.downsample;
  Index frames = std::lround(tc.segment_seconds * mel_cfg.sample_rate / mel_cfg.hop);
  frames = std::max<Index>(r, (frames + r - 1) / r * r);

  double corpus_seconds = 0.0;
  for (const Matrix &m : mels)
    corpus_seconds += static_cast<double>(m.rows()) * mel_cfg.hop / mel_cfg.sample_rate;

  CodingTrainResult result;
  result.epoch_steps = std::max<Index>(
      1, static_cast<Index>(std::ceil(corpus_seconds / (tc.batch_size * tc.segment_seconds))));

  std::mt19937_64 data_rng(tc.seed);
  std::mt19937_64 oc_rng(tc.seed ^ 0x9E3779B97F4A7C15ull);
  AdamW opt(model.params(), tc.optim);
  vq::UsageTracker epoch_usage(cfg.codebook_size), final_usage(cfg.codebook_size);
  const Index final_start = std::max<Index>(0, tc.steps - result.epoch_steps);

  for (Index step = 0; step < tc.steps; ++step) {
    if (step > 0 && step % result.epoch_steps == 0) {
      opt.set_lr(tc.optim.lr * std::pow(tc.lr_decay, static_cast<double>(step / result.epoch_steps)));
      epoch_usage.reset();
    }
    Tensor batch = sample_mel_batch(mels, tc.batch_size, frames, data_rng);
    model.params().zero_grad();
    CodingForward f;
    try {
      f = coding_forward(model, batch, tc.bypass_quantizer);
      backward(f.loss);
      opt.step();
    } catch (const std::exception &e) {
      throw std::runtime_error("train_coding: step " + std::to_string(step) + ": " + e.what());
    }

    if (!tc.bypass_quantizer) {
      if (cfg.online_clustering) {
        MatrixMap W(model.codebook().mutable_data().data(), cfg.codebook_size, cfg.code_dim);
        Matrix Z = ConstMatrixMap(f.z.data().data(), f.z.dim(0), f.z.dim(1));
        vq::online_cluster_step(W, model.cluster(), Z, f.tokens, oc_rng);
      }
      epoch_usage.add(f.tokens);
      if (step >= final_start)
        final_usage.add(f.tokens);
    }

    CodingStepLog log{step, f.mel_rec.item(), f.vq.item(), f.loss.item(),
                      epoch_usage.utilization()};
    result.log.push_back(log);
    if (on_step)
      on_step(log);
  }
  result.final_epoch_utilization = final_usage.utilization();
  return result;
}

} // namespace fmc
