#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fmc/coding.hpp"
#include "fmc/dsp.hpp"
#include "fmc/refine.hpp"

#include "json.hpp"

namespace fmc {

// Built-in synthetic corpus used when no corpus directory is given.
struct ToyCorpusConfig {
  int files = 6;
  double seconds = 5.0;
  std::uint64_t seed = 100;
};

struct PathsConfig {
  std::string corpus;   // directory of .wav files; empty selects the toy corpus
  std::string work_dir = "fmc_run";
};

struct PipelineConfig {
  std::string preset = "paper-16k";
  std::uint64_t seed = 0;
  MelConfig mel;
  CodingConfig coding;
  RefineConfig refine;
  CodingTrainConfig coding_train;
  RefineTrainConfig refine_train;
  ToyCorpusConfig toy;
  PathsConfig paths;

  // Cross-field checks: one mel bin count everywhere, and the token rate
  // must fit the bitstream header fields.
  void validate() const;

  // All stage seeds derive from `seed`.
  std::uint64_t coding_init_seed() const { return seed; }
  std::uint64_t coding_train_seed() const { return seed + 1; }
  std::uint64_t refine_init_seed() const { return seed + 2; }
  std::uint64_t refine_train_seed() const { return seed + 3; }
};

// "paper-16k", "paper-48k" or "desk".
PipelineConfig preset_config(std::string_view name);
std::vector<std::string> preset_names();

nlohmann::json config_to_json(const PipelineConfig &cfg);
// Starts from the document's "preset" (default paper-16k) and overrides every
// field present. Unknown keys are errors.
PipelineConfig config_from_json(const nlohmann::json &doc);
PipelineConfig load_config(const std::filesystem::path &path);
void save_config(const std::filesystem::path &path, const PipelineConfig &cfg);

// FMC_SEED, when set, replaces cfg.seed.
void apply_seed_override(PipelineConfig &cfg);

} // namespace fmc
