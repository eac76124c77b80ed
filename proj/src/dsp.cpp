#include "fmc/dsp.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCore>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fmc {

void MelConfig::validate() const {
  auto fail = [](const std::string &m) {
    throw std::invalid_argument("MelConfig: " + m);
  };
  if (sample_rate <= 0)
    fail("sample_rate must be positive");
  if (hop < 1 || frame_length < 1 || fft_size < 2)
    fail("hop, frame_length and fft_size must be positive");
  if (frame_length > fft_size)
    fail("frame_length exceeds fft_size");
  if (hop > frame_length)
    fail("hop exceeds frame_length");
  if (n_mels < 1)
    fail("n_mels must be at least 1");
  if (!(fmin >= 0.0 && fmin < upper_frequency() &&
        upper_frequency() <= 0.5 * sample_rate))
    fail("need 0 <= fmin < fmax <= sample_rate / 2");
  if (!(log_floor > 0.0))
    fail("log_floor must be positive");
}

// ---------------------------------------------------------------------------
// WAV I/O

namespace {

std::uint32_t read_u32(const unsigned char *p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char *p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<unsigned char> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::vector<unsigned char> &out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

} // namespace

Waveform load_wav(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open " + path.string());
  const std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
  auto bad = [&](const std::string &m) {
    return std::runtime_error(path.string() + ": " + m);
  };
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 ||
      std::memcmp(b.data() + 8, "WAVE", 4) != 0)
    throw bad("not a RIFF/WAVE file");

  Waveform w;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const unsigned char *chunk = b.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || body + 16 > b.size())
        throw bad("malformed fmt chunk");
      const std::uint16_t format = read_u16(b.data() + body);
      const std::uint16_t channels = read_u16(b.data() + body + 2);
      w.sample_rate = static_cast<int>(read_u32(b.data() + body + 4));
      const std::uint16_t bits = read_u16(b.data() + body + 14);
      if (format != 1 || bits != 16)
        throw bad("only 16-bit PCM is supported");
      if (channels != 1)
        throw bad("only mono audio is supported");
      if (w.sample_rate <= 0)
        throw bad("invalid sample rate");
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt)
        throw bad("data chunk before fmt chunk");
      if (body + size > b.size() || size % 2 != 0)
        throw bad("truncated data chunk");
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto s = static_cast<std::int16_t>(read_u16(b.data() + body + 2 * i));
        w.samples[i] = static_cast<double>(s) / 32768.0;
      }
      return w;
    }
    pos = body + size + (size & 1u);
  }
  throw bad(have_fmt ? "missing data chunk" : "missing fmt chunk");
}

void save_wav(const std::filesystem::path &path, std::span<const double> samples,
              int sample_rate) {
  if (sample_rate <= 0)
    throw std::invalid_argument("save_wav: invalid sample rate");
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (double x : samples) {
    const double clipped = std::isfinite(x) ? std::clamp(x, -1.0, 1.0) : 0.0;
    const long q = std::clamp(std::lround(clipped * 32768.0), -32768L, 32767L);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char *>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f)
    throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Analysis

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

std::vector<double> hann_window(int length) {
  std::vector<double> w(static_cast<std::size_t>(length));
  for (int k = 0; k < length; ++k)
    w[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * k / length);
  return w;
}

namespace {

Index reflect_index(Index i, Index n) {
  if (n == 1)
    return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0)
    i += period;
  return i < n ? i : period - i;
}

// Window of frame_length centered inside an fft_size buffer.
std::vector<double> padded_window(const MelConfig &cfg) {
  std::vector<double> w(static_cast<std::size_t>(cfg.fft_size), 0.0);
  const auto hann = hann_window(cfg.frame_length);
  const int offset = (cfg.fft_size - cfg.frame_length) / 2;
  std::copy(hann.begin(), hann.end(), w.begin() + offset);
  return w;
}

Index frame_count(Index length, int hop) { return (length + hop - 1) / hop; }

} // namespace

ComplexMatrix stft(std::span<const double> x, const MelConfig &cfg) {
  cfg.validate();
  if (x.empty())
    throw std::invalid_argument("stft: empty input");
  const Index n = static_cast<Index>(x.size());
  const Index frames = frame_count(n, cfg.hop);
  const int nfft = cfg.fft_size;
  const auto window = padded_window(cfg);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> buf(static_cast<std::size_t>(nfft));
  std::vector<std::complex<double>> spec;
  ComplexMatrix out(frames, cfg.n_bins());
  for (Index f = 0; f < frames; ++f) {
    const Index start = f * cfg.hop - nfft / 2;
    for (int j = 0; j < nfft; ++j)
      buf[j] = window[j] == 0.0 ? 0.0 : x[reflect_index(start + j, n)] * window[j];
    fft.fwd(spec, buf);
    for (int k = 0; k < cfg.n_bins(); ++k)
      out(f, k) = spec[k];
  }
  return out;
}

std::vector<double> istft(const ComplexMatrix &spec, const MelConfig &cfg,
                          Index length) {
  cfg.validate();
  if (spec.cols() != cfg.n_bins())
    throw std::invalid_argument("istft: bin count does not match fft_size");
  const int nfft = cfg.fft_size;
  const Index frames = spec.rows();
  const auto window = padded_window(cfg);
  const Index offset = nfft / 2;
  const Index total = (frames - 1) * cfg.hop + nfft;
  std::vector<double> acc(static_cast<std::size_t>(total), 0.0);
  std::vector<double> norm(acc.size(), 0.0);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<std::complex<double>> bins(static_cast<std::size_t>(cfg.n_bins()));
  std::vector<double> frame;
  for (Index f = 0; f < frames; ++f) {
    for (int k = 0; k < cfg.n_bins(); ++k)
      bins[k] = spec(f, k);
    fft.inv(frame, bins, nfft);
    for (int j = 0; j < nfft; ++j) {
      acc[f * cfg.hop + j] += frame[j] * window[j];
      norm[f * cfg.hop + j] += window[j] * window[j];
    }
  }
  std::vector<double> out(static_cast<std::size_t>(std::max<Index>(length, 0)), 0.0);
  for (Index i = 0; i < length; ++i) {
    const Index j = i + offset;
    if (j < total && norm[j] > 1e-11)
      out[i] = acc[j] / norm[j];
  }
  return out;
}

Matrix mel_filterbank(const MelConfig &cfg) {
  cfg.validate();
  const int d = cfg.n_mels;
  const double lo = hz_to_mel(cfg.fmin);
  const double hi = hz_to_mel(cfg.upper_frequency());
  std::vector<double> edges(static_cast<std::size_t>(d + 2));
  for (int i = 0; i < d + 2; ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * i / (d + 1));

  Matrix fb = Matrix::Zero(d, cfg.n_bins());
  for (int m = 0; m < d; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < cfg.n_bins(); ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      const double rise = (f - left) / (center - left);
      const double fall = (right - f) / (right - center);
      fb(m, k) = std::max(0.0, std::min(rise, fall));
    }
    if (fb.row(m).maxCoeff() <= 0.0)
      throw std::invalid_argument(
          "mel_filterbank: filter " + std::to_string(m) +
          " is empty; too many mel bins for the FFT resolution");
  }
  return fb;
}

MelSpectrogram mel_spectrogram(std::span<const double> x, const MelConfig &cfg) {
  const Matrix magnitude = stft(x, cfg).cwiseAbs();
  const Matrix fb = mel_filterbank(cfg);
  MelSpectrogram mel;
  mel.config = cfg;
  mel.values = (magnitude * fb.transpose())
                   .array()
                   .max(cfg.log_floor)
                   .log()
                   .matrix();
  return mel;
}

// ---------------------------------------------------------------------------
// Synthesis fallback

Matrix mel_to_linear(const MelSpectrogram &mel, int nnls_iterations) {
  const MelConfig &cfg = mel.config;
  const Matrix fb = mel_filterbank(cfg);
  if (mel.bins() != fb.rows())
    throw std::invalid_argument("mel_to_linear: bin count does not match config");
  const Matrix target = mel.values.array().exp().matrix();

  Eigen::SparseMatrix<double, Eigen::RowMajor> sparse_fb = fb.sparseView();
  // Step 1/L with L the largest eigenvalue of F F^T.
  const Eigen::MatrixXd gram = fb * fb.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  const double step = 1.0 / eig.eigenvalues().maxCoeff();

  // Start from the projected minimum-norm solution, then accelerated
  // projected gradient on 0.5 * ||S F^T - target||^2 subject to S >= 0.
  const Eigen::MatrixXd gram_inv = gram.ldlt().solve(
      Eigen::MatrixXd::Identity(gram.rows(), gram.cols()));
  Matrix s = (target * gram_inv * fb).cwiseMax(0.0);
  Matrix y = s;
  double momentum = 1.0;
  for (int it = 0; it < nnls_iterations; ++it) {
    const Matrix residual = y * sparse_fb.transpose() - target;
    const Matrix next = (y - step * (residual * sparse_fb)).cwiseMax(0.0);
    const double next_momentum =
        0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    y = next + ((momentum - 1.0) / next_momentum) * (next - s);
    s = next;
    momentum = next_momentum;
  }
  return s;
}

std::vector<double> griffin_lim(const Matrix &magnitude, const MelConfig &cfg,
                                int iterations) {
  if (iterations < 0)
    throw std::invalid_argument("griffin_lim: iterations must be >= 0");
  const Index length = magnitude.rows() * cfg.hop;
  ComplexMatrix spec = magnitude.cast<std::complex<double>>();
  std::vector<double> x = istft(spec, cfg, length);
  for (int it = 0; it < iterations; ++it) {
    const ComplexMatrix estimate = stft(x, cfg);
    for (Index f = 0; f < spec.rows(); ++f)
      for (Index k = 0; k < spec.cols(); ++k) {
        const double a = std::abs(estimate(f, k));
        spec(f, k) = a > 1e-12 ? magnitude(f, k) * estimate(f, k) / a
                               : std::complex<double>(magnitude(f, k), 0.0);
      }
    x = istft(spec, cfg, length);
  }
  return x;
}

std::vector<double> mel_to_waveform(const MelSpectrogram &mel, int iterations) {
  if (iterations < 0)
    throw std::invalid_argument("mel_to_waveform: iterations must be >= 0");
  if (mel.frames() == 0)
    return {};
  if (!mel.values.allFinite())
    throw std::invalid_argument("mel_to_waveform: non-finite mel input");
  return griffin_lim(mel_to_linear(mel), mel.config, iterations);
}

} // namespace fmc
