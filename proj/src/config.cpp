#include "fmc/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <stdexcept>

namespace fmc {

using nlohmann::json;

void PipelineConfig::validate() const {
  mel.validate();
  coding.validate();
  refine.validate();
  if (coding.mel_bins != mel.n_mels || refine.mel_bins != mel.n_mels)
    throw std::invalid_argument("config: mel.n_mels, coding.mel_bins and refine.mel_bins must agree (" +
                                std::to_string(mel.n_mels) + ", " +
                                std::to_string(coding.mel_bins) + ", " +
                                std::to_string(refine.mel_bins) + ")");
  // Stream header widths.
  if (mel.hop > 65535 || coding.downsample > 255 || coding.codebook_size > 65535 ||
      mel.n_mels > 255)
    throw std::invalid_argument("config: hop, downsample, codebook size or mel bins exceed the stream header range");
  if (coding_train.batch_size < 1 || refine_train.batch_size < 1)
    throw std::invalid_argument("config: batch sizes must be positive");
  if (coding_train.steps < 0 || refine_train.phase1_steps < 0 || refine_train.phase2_steps < 0)
    throw std::invalid_argument("config: step counts must be >= 0");
  if (!(coding_train.segment_seconds > 0.0 && refine_train.segment_seconds > 0.0))
    throw std::invalid_argument("config: segment_seconds must be positive");
  if (toy.files < 1 || !(toy.seconds > 0.0))
    throw std::invalid_argument("config: toy corpus needs files >= 1 and seconds > 0");
}

std::vector<std::string> preset_names() { return {"paper-16k", "paper-48k", "desk"}; }

PipelineConfig preset_config(std::string_view name) {
  PipelineConfig c;
  c.preset = std::string(name);
  c.coding_train.steps = 1000000;
  c.refine_train.batch_size = 48;
  c.refine_train.phase1_steps = 1000000;
  c.refine_train.phase2_steps = 150000;
  if (name == "paper-16k")
    return c;
  if (name == "paper-48k") {
    c.mel.sample_rate = 48000;
    c.mel.n_mels = 128;
    c.mel.fmin = 100.0;
    c.coding.mel_bins = 128;
    c.refine.mel_bins = 128;
    return c;
  }
  if (name == "desk") {
    c.coding.hidden = 32;
    c.coding.blocks = 2;
    c.coding.codebook_size = 64;
    c.coding.code_dim = 8;
    c.coding.rho = 0.9;
    c.coding_train.optim.lr = 2e-3;
    c.coding_train.steps = 1000;
    c.refine.hidden = 32;
    c.refine.bridge = 1;
    c.refine.head_dim = 16;
    c.refine.time_dim = 32;
    c.refine_train.optim.lr = 2e-3;
    c.refine_train.batch_size = 16;
    c.refine_train.phase1_steps = 2000;
    c.refine_train.phase2_steps = 300;
    return c;
  }
  throw std::invalid_argument("unknown preset '" + std::string(name) +
                              "' (expected paper-16k, paper-48k or desk)");
}

namespace {

void check_keys(const json &j, std::initializer_list<const char *> keys, const std::string &where) {
  if (!j.is_object())
    throw std::invalid_argument("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char *k : keys)
      known = known || it.key() == k;
    if (!known)
      throw std::invalid_argument("config: unknown key '" + where + "." + it.key() + "'");
  }
}

template <typename T>
void read(const json &j, const char *key, T &value) {
  if (auto it = j.find(key); it != j.end())
    value = it->get<T>();
}

json optim_json(const AdamWConfig &o) {
  return {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2},
          {"weight_decay", o.weight_decay}, {"eps", o.eps}};
}

void read_optim(const json &j, AdamWConfig &o) {
  read(j, "lr", o.lr);
  read(j, "beta1", o.beta1);
  read(j, "beta2", o.beta2);
  read(j, "weight_decay", o.weight_decay);
  read(j, "eps", o.eps);
}

} // namespace

json config_to_json(const PipelineConfig &c) {
  json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["mel"] = {{"sample_rate", c.mel.sample_rate}, {"frame_length", c.mel.frame_length},
              {"hop", c.mel.hop}, {"fft_size", c.mel.fft_size}, {"n_mels", c.mel.n_mels},
              {"fmin", c.mel.fmin}, {"fmax", c.mel.fmax}, {"log_floor", c.mel.log_floor}};
  const CodingConfig &k = c.coding;
  j["coding"] = {{"mel_bins", k.mel_bins}, {"hidden", k.hidden}, {"blocks", k.blocks},
                 {"downsample", k.downsample}, {"code_dim", k.code_dim},
                 {"codebook_size", k.codebook_size}, {"lambda_mel", k.lambda_mel},
                 {"lambda_vq", k.lambda_vq}, {"eta", k.eta}, {"rho", k.rho},
                 {"delta", k.delta}, {"online_clustering", k.online_clustering}};
  const RefineConfig &r = c.refine;
  j["refine"] = {{"mel_bins", r.mel_bins}, {"hidden", r.hidden}, {"levels", r.levels},
                 {"bridge", r.bridge}, {"heads", r.heads}, {"head_dim", r.head_dim},
                 {"time_dim", r.time_dim}, {"groups", r.groups}, {"dropout", r.dropout},
                 {"iterations", r.iterations}, {"lambda_cfm", r.lambda_cfm},
                 {"lambda_sc", r.lambda_sc}, {"eps", r.eps}, {"sigma", r.sigma},
                 {"dt_min", r.dt_min}, {"dt_max", r.dt_max}};
  const CodingTrainConfig &ct = c.coding_train;
  j["coding_train"] = {{"optim", optim_json(ct.optim)}, {"lr_decay", ct.lr_decay},
                       {"segment_seconds", ct.segment_seconds}, {"batch_size", ct.batch_size},
                       {"steps", ct.steps}, {"bypass_quantizer", ct.bypass_quantizer}};
  const RefineTrainConfig &rt = c.refine_train;
  j["refine_train"] = {{"optim", optim_json(rt.optim)}, {"lr_decay", rt.lr_decay},
                       {"segment_seconds", rt.segment_seconds}, {"batch_size", rt.batch_size},
                       {"phase1_steps", rt.phase1_steps}, {"phase2_steps", rt.phase2_steps}};
  j["toy"] = {{"files", c.toy.files}, {"seconds", c.toy.seconds}, {"seed", c.toy.seed}};
  j["paths"] = {{"corpus", c.paths.corpus}, {"work_dir", c.paths.work_dir}};
  return j;
}

PipelineConfig config_from_json(const json &doc) {
  check_keys(doc, {"preset", "seed", "mel", "coding", "refine", "coding_train", "refine_train", "toy", "paths"}, "root");
  PipelineConfig c = preset_config(doc.value("preset", std::string("paper-16k")));
  read(doc, "seed", c.seed);
  try {
    if (doc.contains("mel")) {
      const json &j = doc["mel"];
      check_keys(j, {"sample_rate", "frame_length", "hop", "fft_size", "n_mels", "fmin", "fmax", "log_floor"}, "mel");
      read(j, "sample_rate", c.mel.sample_rate);
      read(j, "frame_length", c.mel.frame_length);
      read(j, "hop", c.mel.hop);
      read(j, "fft_size", c.mel.fft_size);
      read(j, "n_mels", c.mel.n_mels);
      read(j, "fmin", c.mel.fmin);
      read(j, "fmax", c.mel.fmax);
      read(j, "log_floor", c.mel.log_floor);
    }
    if (doc.contains("coding")) {
      const json &j = doc["coding"];
      check_keys(j, {"mel_bins", "hidden", "blocks", "downsample", "code_dim", "codebook_size", "lambda_mel",
                     "lambda_vq", "eta", "rho", "delta", "online_clustering"}, "coding");
      CodingConfig &k = c.coding;
      read(j, "mel_bins", k.mel_bins);
      read(j, "hidden", k.hidden);
      read(j, "blocks", k.blocks);
      read(j, "downsample", k.downsample);
      read(j, "code_dim", k.code_dim);
      read(j, "codebook_size", k.codebook_size);
      read(j, "lambda_mel", k.lambda_mel);
      read(j, "lambda_vq", k.lambda_vq);
      read(j, "eta", k.eta);
      read(j, "rho", k.rho);
      read(j, "delta", k.delta);
      read(j, "online_clustering", k.online_clustering);
    }
    if (doc.contains("refine")) {
      const json &j = doc["refine"];
      check_keys(j, {"mel_bins", "hidden", "levels", "bridge", "heads", "head_dim", "time_dim", "groups", "dropout",
                     "iterations", "lambda_cfm", "lambda_sc", "eps", "sigma", "dt_min", "dt_max"}, "refine");
      RefineConfig &r = c.refine;
      read(j, "mel_bins", r.mel_bins);
      read(j, "hidden", r.hidden);
      read(j, "levels", r.levels);
      read(j, "bridge", r.bridge);
      read(j, "heads", r.heads);
      read(j, "head_dim", r.head_dim);
      read(j, "time_dim", r.time_dim);
      read(j, "groups", r.groups);
      read(j, "dropout", r.dropout);
      read(j, "iterations", r.iterations);
      read(j, "lambda_cfm", r.lambda_cfm);
      read(j, "lambda_sc", r.lambda_sc);
      read(j, "eps", r.eps);
      read(j, "sigma", r.sigma);
      read(j, "dt_min", r.dt_min);
      read(j, "dt_max", r.dt_max);
    }
    if (doc.contains("coding_train")) {
      const json &j = doc["coding_train"];
      check_keys(j, {"optim", "lr_decay", "segment_seconds", "batch_size", "steps", "bypass_quantizer"}, "coding_train");
      CodingTrainConfig &t = c.coding_train;
      if (j.contains("optim")) {
        check_keys(j["optim"], {"lr", "beta1", "beta2", "weight_decay", "eps"}, "coding_train.optim");
        read_optim(j["optim"], t.optim);
      }
      read(j, "lr_decay", t.lr_decay);
      read(j, "segment_seconds", t.segment_seconds);
      read(j, "batch_size", t.batch_size);
      read(j, "steps", t.steps);
      read(j, "bypass_quantizer", t.bypass_quantizer);
    }
    if (doc.contains("refine_train")) {
      const json &j = doc["refine_train"];
      check_keys(j, {"optim", "lr_decay", "segment_seconds", "batch_size", "phase1_steps", "phase2_steps"}, "refine_train");
      RefineTrainConfig &t = c.refine_train;
      if (j.contains("optim")) {
        check_keys(j["optim"], {"lr", "beta1", "beta2", "weight_decay", "eps"}, "refine_train.optim");
        read_optim(j["optim"], t.optim);
      }
      read(j, "lr_decay", t.lr_decay);
      read(j, "segment_seconds", t.segment_seconds);
      read(j, "batch_size", t.batch_size);
      read(j, "phase1_steps", t.phase1_steps);
      read(j, "phase2_steps", t.phase2_steps);
    }
    if (doc.contains("toy")) {
      const json &j = doc["toy"];
      check_keys(j, {"files", "seconds", "seed"}, "toy");
      read(j, "files", c.toy.files);
      read(j, "seconds", c.toy.seconds);
      read(j, "seed", c.toy.seed);
    }
    if (doc.contains("paths")) {
      const json &j = doc["paths"];
      check_keys(j, {"corpus", "work_dir"}, "paths");
      read(j, "corpus", c.paths.corpus);
      read(j, "work_dir", c.paths.work_dir);
    }
  } catch (const json::exception &e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error &e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

void save_config(const std::filesystem::path &path, const PipelineConfig &cfg) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out << config_to_json(cfg).dump(2) << '\n';
}

void apply_seed_override(PipelineConfig &cfg) {
  const char *env = std::getenv("FMC_SEED");
  if (env == nullptr || *env == '\0')
    return;
  char *end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0' || env[0] == '-')
    throw std::invalid_argument(std::string("FMC_SEED is not an unsigned integer: ") + env);
  cfg.seed = v;
}

} // namespace fmc
