#include "fmc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fmc {

Matrix dct2_matrix(Index n) {
  Matrix B(n, n);
  for (Index k = 0; k < n; ++k) {
    const double norm = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
    for (Index i = 0; i < n; ++i)
      B(k, i) = norm * std::cos(std::numbers::pi * static_cast<double>(k) *
                                (2.0 * static_cast<double>(i) + 1.0) /
                                (2.0 * static_cast<double>(n)));
  }
  return B;
}

namespace {

Index common_frames(const Matrix &ref, const Matrix &deg, const char *what) {
  if (ref.rows() == 0 || deg.rows() == 0 || ref.cols() == 0)
    throw std::invalid_argument(std::string(what) + ": empty input");
  if (ref.cols() != deg.cols())
    throw std::invalid_argument(std::string(what) + ": mel bin count differs");
  return std::min(ref.rows(), deg.rows());
}

} // namespace

double mcd(const Matrix &ref, const Matrix &deg, Index coefficients) {
  const Index n = common_frames(ref, deg, "mcd");
  const Index D = ref.cols();
  if (coefficients < 1 || coefficients >= D)
    throw std::invalid_argument("mcd: coefficient count must lie in [1, bins)");
  // Rows 1..coefficients of the basis; c0 carries the frame mean and is skipped.
  const Matrix B = dct2_matrix(D).middleRows(1, coefficients);
  const Matrix diff = (ref.topRows(n) - deg.topRows(n)) * B.transpose();
  const double k = 10.0 / std::log(10.0);
  double total = 0.0;
  for (Index f = 0; f < n; ++f)
    total += k * std::sqrt(2.0 * diff.row(f).squaredNorm());
  return total / static_cast<double>(n);
}

double mel_l1(const Matrix &ref, const Matrix &deg) {
  const Index n = common_frames(ref, deg, "mel_l1");
  return (ref.topRows(n) - deg.topRows(n)).cwiseAbs().mean();
}

double mel_l2(const Matrix &ref, const Matrix &deg) {
  const Index n = common_frames(ref, deg, "mel_l2");
  return (ref.topRows(n) - deg.topRows(n)).array().square().mean();
}

Metrics compare_waveforms(const Waveform &ref, const Waveform &deg, MelConfig cfg) {
  if (ref.sample_rate != deg.sample_rate)
    throw std::invalid_argument("compare_waveforms: sample rates differ (" +
                                std::to_string(ref.sample_rate) + " vs " +
                                std::to_string(deg.sample_rate) + ")");
  cfg.sample_rate = ref.sample_rate;
  const Matrix a = mel_spectrogram(ref.samples, cfg).values;
  const Matrix b = mel_spectrogram(deg.samples, cfg).values;
  return {mcd(a, b), mel_l1(a, b), mel_l2(a, b), ref.duration()};
}

} // namespace fmc
