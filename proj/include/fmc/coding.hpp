#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "fmc/dsp.hpp"
#include "fmc/nn.hpp"
#include "fmc/ocvq.hpp"
#include "fmc/optim.hpp"

// Mel coding stage: ConvNeXt encoder, OC-VQ bottleneck, ConvNeXt decoder.
namespace fmc {

struct CodingConfig {
  Index mel_bins = 80;
  Index hidden = 256;
  Index blocks = 8;
  Index downsample = 4;
  Index code_dim = 32;
  Index codebook_size = 1024;
  double lambda_mel = 45.0;
  double lambda_vq = 2.5;
  double eta = 4.0;
  double rho = 0.999;
  double delta = 1e-3;
  bool online_clustering = true;

  void validate() const;
};

struct CodingTrainConfig {
  AdamWConfig optim;
  double lr_decay = 0.999; // per epoch
  double segment_seconds = 1.0;
  Index batch_size = 16;
  Index steps = 200;
  std::uint64_t seed = 0;
  // Autoencoder sanity mode: Zhat := Z, no VQ term.
  bool bypass_quantizer = false;
};

class CodingModel {
public:
  CodingModel(const CodingConfig &cfg, std::uint64_t seed);
  CodingModel(const CodingModel &) = delete;
  CodingModel &operator=(const CodingModel &) = delete;
  CodingModel(CodingModel &&) = default;

  const CodingConfig &config() const { return cfg_; }
  ParameterSet &params() { return params_; }
  const ParameterSet &params() const { return params_; }
  Tensor codebook() const { return codebook_; }
  vq::ClusterState &cluster() { return cluster_; }
  const vq::ClusterState &cluster() const { return cluster_; }

  // [B, D, N] -> [B, C, N / r]; N must be a multiple of r.
  Tensor encode_tensor(const Tensor &mel) const;
  // [B, C, N'] -> [B, D, N' r].
  Tensor decode_tensor(const Tensor &z) const;

  // Frame-major wrappers. encode pads N up to a multiple of r by repeating
  // the last frame and reports the pad count; decode trims it again.
  Matrix encode(const Matrix &mel, Index *pad_frames = nullptr) const;
  Matrix decode(const Matrix &zhat, Index pad_frames = 0) const;
  vq::Quantized quantize(const Matrix &z) const;
  Matrix lookup(const std::vector<Index> &tokens) const;
  nn::Conv1d &output_conv() { return dec_out_; }

  // Parameters plus the usage EMA ("vq.usage"), for checkpoints.
  ParameterSet state() const;
  void load_state(const ParameterSet &state);

private:
  CodingConfig cfg_;
  ParameterSet params_;
  nn::Conv1d enc_in_;
  std::vector<nn::ConvNeXtBlock> enc_blocks_;
  nn::Conv1d enc_down_;
  nn::Conv1d enc_reduce_;
  nn::Conv1d dec_expand_;
  nn::ConvTranspose1d dec_up_;
  std::vector<nn::ConvNeXtBlock> dec_blocks_;
  nn::Conv1d dec_out_;
  Tensor codebook_; // [K, C]
  vq::ClusterState cluster_;
};

// mean|M - M~| + mean (M - M~)^2.
Tensor mel_rec_loss(const Tensor &mel, const Tensor &recon);
// lambda_mel * mel_rec + lambda_vq * vq_loss.
Tensor coding_total_loss(const Tensor &mel, const Tensor &recon, const Tensor &z,
                         const Tensor &zhat, const CodingConfig &cfg);

struct CodingForward {
  Tensor recon;   // [B, D, N]
  Tensor z;       // [B N', C]
  Tensor zhat;    // [B N', C], rows of the codebook
  Tensor mel_rec;
  Tensor vq;
  Tensor loss;
  std::vector<Index> tokens;
};

// Full training graph for a [B, D, N] mel batch.
CodingForward coding_forward(const CodingModel &model, const Tensor &mel,
                             bool bypass_quantizer = false);

struct CodingStepLog {
  Index step = 0;
  double mel_rec = 0.0;
  double vq = 0.0;
  double loss = 0.0;
  double utilization = 0.0; // within the current epoch so far
};

struct CodingTrainResult {
  std::vector<CodingStepLog> log;
  Index epoch_steps = 0;
  double final_epoch_utilization = 0.0;
};

// Precomputed log-mels of every corpus file; training crops frame windows
// of segment_seconds at random offsets.
std::vector<Matrix> corpus_mels(const std::vector<Waveform> &corpus,
                                const MelConfig &mel_cfg);

// Crops `frames`-long windows (padding short files by edge repetition) and
// stacks them to [B, D, frames].
Tensor sample_mel_batch(const std::vector<Matrix> &mels, Index batch,
                        Index frames, std::mt19937_64 &rng);

CodingTrainResult train_coding(CodingModel &model, const std::vector<Matrix> &mels,
                               const MelConfig &mel_cfg, const CodingTrainConfig &tc,
                               const std::function<void(const CodingStepLog &)> &on_step = {});

// [N, D] frame-major matrix <-> [1, D, N] tensor.
Tensor frames_to_tensor(const Matrix &m);
Matrix tensor_to_frames(const Tensor &t, Index batch = 0);

} // namespace fmc
