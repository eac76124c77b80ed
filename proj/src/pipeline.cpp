#include "fmc/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "fmc/synth.hpp"

namespace fmc {

namespace fs = std::filesystem;

std::vector<Waveform> load_corpus(const PipelineConfig &cfg) {
  if (cfg.paths.corpus.empty())
    return synth::toy_corpus(cfg.toy.files, cfg.toy.seconds, cfg.mel.sample_rate, cfg.toy.seed);
  const fs::path dir(cfg.paths.corpus);
  if (!fs::is_directory(dir))
    throw std::runtime_error("corpus directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto &e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw std::runtime_error("no .wav files in " + dir.string());
  std::vector<Waveform> out;
  for (const auto &f : files) {
    out.push_back(load_wav(f));
    if (out.back().sample_rate != cfg.mel.sample_rate)
      throw std::runtime_error(f.string() + ": sample rate " +
                               std::to_string(out.back().sample_rate) + " != configured " +
                               std::to_string(cfg.mel.sample_rate));
  }
  return out;
}

Codec::Codec(const PipelineConfig &c) : cfg(c), coding(c.coding, c.coding_init_seed()) {
  cfg.validate();
}

fs::path sidecar_path(const fs::path &checkpoint) {
  return fs::path(checkpoint.string() + ".json");
}

void save_codec(const fs::path &path, const Codec &codec) {
  ParameterSet all;
  all.append(codec.coding.state(), "coding/");
  if (codec.refiner)
    all.append(codec.refiner->params(), "refine/");
  save_checkpoint(path, all);
  save_config(sidecar_path(path), codec.cfg);
}

Codec load_codec(const fs::path &path) {
  if (!fs::exists(path))
    throw std::runtime_error("model checkpoint not found: " + path.string());
  const fs::path side = sidecar_path(path);
  if (!fs::exists(side))
    throw std::runtime_error("model config not found: " + side.string());
  Codec codec(load_config(side));
  const ParameterSet all = load_checkpoint(path);
  ParameterSet coding, refine;
  for (const auto &[name, t] : all.entries()) {
    if (name.starts_with("coding/"))
      coding.add(name.substr(7), t);
    else if (name.starts_with("refine/"))
      refine.add(name.substr(7), t);
    else
      throw std::runtime_error("checkpoint entry outside coding/ and refine/: " + name);
  }
  codec.coding.load_state(coding);
  if (refine.size() > 0) {
    codec.refiner = std::make_unique<VelocityNet>(codec.cfg.refine, codec.cfg.refine_init_seed());
    codec.refiner->params().assign_from(refine);
  }
  return codec;
}

double EncodedStream::bitrate() const {
  return seconds > 0.0 ? static_cast<double>(tokens.size()) * header.bits_per_token() / seconds
                       : 0.0;
}

EncodedStream encode_waveform(const Codec &codec, const Waveform &wav) {
  const PipelineConfig &c = codec.cfg;
  if (wav.sample_rate != c.mel.sample_rate)
    throw std::invalid_argument("input sample rate " + std::to_string(wav.sample_rate) +
                                " != model sample rate " + std::to_string(c.mel.sample_rate));
  if (wav.samples.empty())
    throw std::invalid_argument("input has no samples");
  const Matrix mel = mel_spectrogram(wav.samples, c.mel).values;
  Index pad = 0;
  const Matrix z = codec.coding.encode(mel, &pad);
  EncodedStream s;
  s.tokens = codec.coding.quantize(z).tokens;
  s.header.sample_rate = static_cast<std::uint32_t>(c.mel.sample_rate);
  s.header.hop = static_cast<std::uint16_t>(c.mel.hop);
  s.header.downsample = static_cast<std::uint8_t>(c.coding.downsample);
  s.header.codebook_size = static_cast<std::uint16_t>(c.coding.codebook_size);
  s.header.mel_bins = static_cast<std::uint8_t>(c.mel.n_mels);
  s.header.token_count = static_cast<std::uint32_t>(s.tokens.size());
  s.header.pad_frames = static_cast<std::uint8_t>(pad);
  s.seconds = wav.duration();
  return s;
}

void check_compatible(const Codec &codec, const StreamHeader &h) {
  const PipelineConfig &c = codec.cfg;
  if (h.sample_rate != static_cast<std::uint32_t>(c.mel.sample_rate) ||
      h.hop != c.mel.hop || h.downsample != c.coding.downsample ||
      h.codebook_size != c.coding.codebook_size || h.mel_bins != c.mel.n_mels)
    throw std::runtime_error("stream header does not match the model (stream: " +
                             std::to_string(h.sample_rate) + " Hz, hop " + std::to_string(h.hop) +
                             ", r " + std::to_string(h.downsample) + ", K " +
                             std::to_string(h.codebook_size) + ", D " +
                             std::to_string(h.mel_bins) + ")");
  if (h.pad_frames >= c.coding.downsample || h.token_count == 0)
    throw std::runtime_error("stream header has an invalid frame layout");
}

Matrix decode_coarse(const Codec &codec, const StreamHeader &header,
                     const std::vector<Index> &tokens) {
  check_compatible(codec, header);
  return codec.coding.decode(codec.coding.lookup(tokens), header.pad_frames);
}

DecodeResult decode_stream(const Codec &codec, const StreamHeader &header,
                           const std::vector<Index> &tokens, const DecodeOptions &opt) {
  DecodeResult r;
  r.mel = decode_coarse(codec, header, tokens);
  if (!opt.refine)
    return r;
  if (!codec.refiner)
    throw std::runtime_error("model has no refinement stage; train it or decode with --no-refine");
  std::mt19937_64 rng(codec.cfg.seed ^ 0x5EEDF10Full);
  r.mel = refine(r.mel, *codec.refiner, opt.iterations, rng, &r.evaluations);
  return r;
}

Waveform mel_to_audio(const Codec &codec, const Matrix &mel, std::size_t samples) {
  Waveform w;
  w.sample_rate = codec.cfg.mel.sample_rate;
  w.samples = mel_to_waveform(MelSpectrogram{mel, codec.cfg.mel});
  if (samples > 0 && samples < w.samples.size())
    w.samples.resize(samples);
  return w;
}

CodingTrainResult train_coding_stage(Codec &codec, const std::vector<Waveform> &corpus,
                                     const std::function<void(const CodingStepLog &)> &on_step) {
  CodingTrainConfig tc = codec.cfg.coding_train;
  tc.seed = codec.cfg.coding_train_seed();
  return train_coding(codec.coding, corpus_mels(corpus, codec.cfg.mel), codec.cfg.mel, tc, on_step);
}

std::vector<RefineStepLog> train_refine_stage(Codec &codec, const std::vector<Waveform> &corpus,
                                              const std::function<void(const RefineStepLog &)> &on_step) {
  RefineTrainConfig tc = codec.cfg.refine_train;
  tc.seed = codec.cfg.refine_train_seed();
  codec.refiner = std::make_unique<VelocityNet>(codec.cfg.refine, codec.cfg.refine_init_seed());
  const auto pairs = refine_pairs(codec.coding, corpus_mels(corpus, codec.cfg.mel));
  return train_refine(*codec.refiner, pairs, codec.cfg.mel, tc, on_step);
}

} // namespace fmc
