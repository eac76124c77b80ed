#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "fmc/bitstream.hpp"
#include "fmc/coding.hpp"
#include "fmc/config.hpp"
#include "fmc/refine.hpp"

// Stage glue shared by the command-line tool and the acceptance run.
namespace fmc {

// Sorted .wav files of cfg.paths.corpus, or the toy corpus when it is empty.
// Every file must match cfg.mel.sample_rate.
std::vector<Waveform> load_corpus(const PipelineConfig &cfg);

// Trained stages plus the configuration that built them. `refiner` is null
// for a coding-only checkpoint.
struct Codec {
  PipelineConfig cfg;
  CodingModel coding;
  std::unique_ptr<VelocityNet> refiner;

  explicit Codec(const PipelineConfig &c);
};

// Combined checkpoint: coding parameters under "coding/", velocity net under
// "refine/". The configuration goes to the sidecar <path>.json.
std::filesystem::path sidecar_path(const std::filesystem::path &checkpoint);
void save_codec(const std::filesystem::path &path, const Codec &codec);
Codec load_codec(const std::filesystem::path &path);

struct EncodedStream {
  StreamHeader header;
  std::vector<Index> tokens;
  double seconds = 0.0;
  // Payload bits per second of input audio.
  double bitrate() const;
};

EncodedStream encode_waveform(const Codec &codec, const Waveform &wav);
// Coarse decoder output for a stream, frame-major log-mel.
Matrix decode_coarse(const Codec &codec, const StreamHeader &header,
                     const std::vector<Index> &tokens);
// Throws if the stream was produced under a different layout.
void check_compatible(const Codec &codec, const StreamHeader &header);

struct DecodeOptions {
  bool refine = true;
  int iterations = 4;
};
struct DecodeResult {
  Matrix mel;
  Index evaluations = 0;
};
// Refinement noise is seeded from the codec seed, so decoding is repeatable.
DecodeResult decode_stream(const Codec &codec, const StreamHeader &header,
                           const std::vector<Index> &tokens, const DecodeOptions &opt);
Waveform mel_to_audio(const Codec &codec, const Matrix &mel, std::size_t samples = 0);

// Stage training on the configured corpus.
CodingTrainResult train_coding_stage(Codec &codec, const std::vector<Waveform> &corpus,
                                     const std::function<void(const CodingStepLog &)> &on_step = {});
std::vector<RefineStepLog> train_refine_stage(Codec &codec, const std::vector<Waveform> &corpus,
                                              const std::function<void(const RefineStepLog &)> &on_step = {});

} // namespace fmc
