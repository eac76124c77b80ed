#include "fmc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace fmc::synth {

namespace {

constexpr double two_pi = 2.0 * std::numbers::pi;

double formant_gain(double f, double f1, double f2) {
  auto peak = [](double f, double c, double bw) {
    const double d = (f - c) / bw;
    return 1.0 / (1.0 + d * d);
  };
  return peak(f, f1, 90.0) + 0.6 * peak(f, f2, 140.0) + 0.02;
}

} // namespace

Waveform utterance(double seconds, int sample_rate, std::uint64_t seed) {
  if (seconds <= 0.0 || sample_rate <= 0)
    throw std::invalid_argument("utterance: duration and rate must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const Index n = static_cast<Index>(std::lround(seconds * sample_rate));
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(static_cast<std::size_t>(n), 0.0);
  const double nyquist = 0.5 * sample_rate;

  Index pos = 0;
  double phase0 = 0.0;
  while (pos < n) {
    const double kind = u(rng);
    const Index len = static_cast<Index>((0.08 + 0.22 * u(rng)) * sample_rate);
    const Index end = std::min(n, pos + len);
    if (kind < 0.7) {
      // Voiced: pitch glide, formants drifting between two vowel targets.
      const double f0a = 90.0 + 160.0 * u(rng), f0b = f0a * (0.8 + 0.4 * u(rng));
      const double f1a = 300.0 + 500.0 * u(rng), f1b = 300.0 + 500.0 * u(rng);
      const double f2a = 900.0 + 1600.0 * u(rng), f2b = 900.0 + 1600.0 * u(rng);
      const double amp = 0.15 + 0.2 * u(rng);
      double phase = phase0;
      for (Index i = pos; i < end; ++i) {
        const double a = static_cast<double>(i - pos) / std::max<Index>(1, end - pos);
        const double f0 = f0a + (f0b - f0a) * a;
        const double f1 = f1a + (f1b - f1a) * a, f2 = f2a + (f2b - f2a) * a;
        phase += two_pi * f0 / sample_rate;
        double s = 0.0;
        for (int h = 1; h * f0 < std::min(nyquist, 5000.0); ++h)
          s += formant_gain(h * f0, f1, f2) * std::sin(h * phase) / std::sqrt(h);
        const double env = std::sin(std::numbers::pi * a);
        w.samples[i] = amp * env * s / 3.0;
      }
      phase0 = std::fmod(phase, two_pi);
    } else if (kind < 0.88) {
      // Fricative: first-differenced (high-tilted) noise.
      const double amp = 0.03 + 0.05 * u(rng);
      double prev = 0.0;
      for (Index i = pos; i < end; ++i) {
        const double a = static_cast<double>(i - pos) / std::max<Index>(1, end - pos);
        const double e = noise(rng);
        w.samples[i] = amp * std::sin(std::numbers::pi * a) * (e - 0.7 * prev);
        prev = e;
      }
    } else {
      for (Index i = pos; i < end; ++i)
        w.samples[i] = 0.002 * noise(rng);
    }
    pos = end;
  }
  for (double &s : w.samples)
    s = std::clamp(s, -0.95, 0.95);
  return w;
}

std::vector<Waveform> toy_corpus(Index files, double seconds, int sample_rate,
                                 std::uint64_t seed) {
  std::vector<Waveform> out;
  for (Index i = 0; i < files; ++i)
    out.push_back(utterance(seconds, sample_rate, seed + static_cast<std::uint64_t>(i)));
  return out;
}

} // namespace fmc::synth
