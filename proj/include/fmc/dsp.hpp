#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "fmc/types.hpp"

namespace fmc {

struct MelConfig {
  int sample_rate = 16000;
  int frame_length = 640;
  int hop = 160;
  int fft_size = 1024;
  int n_mels = 80;
  double fmin = 0.0;
  // Non-positive means sample_rate / 2.
  double fmax = 0.0;
  double log_floor = 1e-5;

  double upper_frequency() const {
    return fmax > 0.0 ? fmax : 0.5 * sample_rate;
  }
  int n_bins() const { return fft_size / 2 + 1; }
  // Throws std::invalid_argument on inconsistent fields.
  void validate() const;
};

// N x D log-mel energies, one row per frame.
struct MelSpectrogram {
  Matrix values;
  MelConfig config;

  Index frames() const { return values.rows(); }
  Index bins() const { return values.cols(); }
};

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  double duration() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate
                           : 0.0;
  }
};

// 16-bit PCM mono RIFF/WAVE only.
Waveform load_wav(const std::filesystem::path &path);
// Samples are clipped to [-1, 1] and stored as round(x * 32768) saturated.
void save_wav(const std::filesystem::path &path, std::span<const double> samples,
              int sample_rate);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Periodic Hann window of frame_length.
std::vector<double> hann_window(int length);

// Frame n is centered on sample n * hop (reflect padding at the edges) and
// holds a Hann-windowed frame zero-padded to fft_size.
// Returns ceil(len / hop) rows of fft_size / 2 + 1 bins.
ComplexMatrix stft(std::span<const double> x, const MelConfig &cfg);
// Windowed overlap-add inverse of stft, first `length` samples.
std::vector<double> istft(const ComplexMatrix &spec, const MelConfig &cfg,
                          Index length);

// D x (fft_size / 2 + 1) triangular filters, peak value 1, equally spaced
// on the mel scale between fmin and fmax.
Matrix mel_filterbank(const MelConfig &cfg);

MelSpectrogram mel_spectrogram(std::span<const double> x, const MelConfig &cfg);

// Non-negative least-squares inversion of the filterbank per frame.
Matrix mel_to_linear(const MelSpectrogram &mel, int nnls_iterations = 200);
// Griffin-Lim from a linear magnitude spectrogram, zero initial phase.
std::vector<double> griffin_lim(const Matrix &magnitude, const MelConfig &cfg,
                                int iterations);
// Deterministic mel -> waveform path; output length frames * hop.
std::vector<double> mel_to_waveform(const MelSpectrogram &mel, int iterations = 32);

} // namespace fmc
