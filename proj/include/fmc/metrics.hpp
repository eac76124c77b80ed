#pragma once

#include "fmc/dsp.hpp"
#include "fmc/types.hpp"

namespace fmc {

// Orthonormal DCT-II basis, n x n; row k holds coefficient k.
Matrix dct2_matrix(Index n);

// Mel cepstral distortion in dB between frame-major log-mels. Frames are
// trimmed to the shorter input; cepstra 1..13 of each frame are compared
// (c0 excluded) and the per-frame distances averaged.
double mcd(const Matrix &ref, const Matrix &deg, Index coefficients = 13);

// Mean absolute / squared log-mel difference over the common frames.
double mel_l1(const Matrix &ref, const Matrix &deg);
double mel_l2(const Matrix &ref, const Matrix &deg);

struct Metrics {
  double mcd_db = 0.0;
  double mel_l1 = 0.0;
  double mel_l2 = 0.0;
  double seconds = 0.0;
};

// Both waveforms must share a sample rate; mels use `cfg` with that rate.
Metrics compare_waveforms(const Waveform &ref, const Waveform &deg, MelConfig cfg);

} // namespace fmc
