#include "fmc/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fmc/metrics.hpp"
#include "fmc/pipeline.hpp"

namespace fmc {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

PipelineConfig resolve_config(const std::string &config_path, const std::string &preset,
                              const std::optional<std::uint64_t> &seed, const std::string &work_dir) {
  PipelineConfig cfg = config_path.empty() ? preset_config(preset.empty() ? "paper-16k" : preset)
                                           : load_config(config_path);
  if (!config_path.empty() && !preset.empty())
    throw std::invalid_argument("--preset and --config are exclusive");
  apply_seed_override(cfg);
  if (seed)
    cfg.seed = *seed;
  if (!work_dir.empty())
    cfg.paths.work_dir = work_dir;
  cfg.validate();
  return cfg;
}

// Writes through a temporary so that a failed command leaves no output file.
template <typename Write>
void write_atomically(const fs::path &dest, Write &&write) {
  const fs::path tmp = fs::path(dest.string() + ".partial");
  try {
    write(tmp);
    fs::rename(tmp, dest);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

MelConfig eval_mel_config(int sample_rate) {
  PipelineConfig cfg = preset_config(sample_rate == 48000 ? "paper-48k" : "paper-16k");
  cfg.mel.sample_rate = sample_rate;
  return cfg.mel;
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
  CLI::App app{"FMelCodec: low-bitrate mel codec with flow-matching refinement", "fmelcodec"};
  app.require_subcommand(1);

  std::string in, model, dest, config, preset, work_dir, stage, ref, deg, stream, csv, coding_ckpt;
  std::optional<std::uint64_t> seed;
  int iters = 0;
  bool no_refine = false;

  auto *enc = app.add_subcommand("encode", "wav -> token stream");
  enc->add_option("--in", in, "input wav")->required();
  enc->add_option("--model", model, "model checkpoint")->required();
  enc->add_option("--out", dest, "output .fmb")->required();

  auto *dec = app.add_subcommand("decode", "token stream -> wav");
  dec->add_option("--in", in, "input .fmb")->required();
  dec->add_option("--model", model, "model checkpoint")->required();
  dec->add_option("--out", dest, "output wav")->required();
  dec->add_option("--iters", iters, "Euler steps (default from the model config)")->check(CLI::PositiveNumber);
  dec->add_flag("--no-refine", no_refine, "skip the refinement stage");

  auto *train = app.add_subcommand("train", "train one stage");
  train->add_option("--stage", stage, "coding or refine")->required()->check(CLI::IsMember({"coding", "refine"}));
  train->add_option("--config", config, "pipeline JSON");
  train->add_option("--preset", preset, "builtin preset")->check(CLI::IsMember(preset_names()));
  train->add_option("--work-dir", work_dir, "output directory (paths.work_dir)");
  train->add_option("--seed", seed, "seed (overrides FMC_SEED and the config)");
  train->add_option("--coding", coding_ckpt, "coding checkpoint for --stage refine");

  auto *ev = app.add_subcommand("eval", "compare two wavs");
  ev->add_option("--ref", ref, "reference wav")->required();
  ev->add_option("--deg", deg, "degraded wav")->required();
  ev->add_option("--stream", stream, "token stream, for the bps column");
  ev->add_option("--csv", csv, "append a CSV row here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    std::ostream &os = e.get_exit_code() == 0 ? out : err;
    return app.exit(e, os, os);
  }

  try {
    if (*enc) {
      const Codec codec = load_codec(model);
      const EncodedStream s = encode_waveform(codec, load_wav(in));
      write_atomically(dest, [&](const fs::path &p) { write_stream(p, s.header, s.tokens); });
      out << fixed(s.bitrate(), 1) << " bps\n";
      out << s.tokens.size() << " tokens, " << s.header.bits_per_token() << " bits each, "
          << fixed(s.seconds, 3) << " s\n";
    } else if (*dec) {
      const Codec codec = load_codec(model);
      std::vector<Index> tokens;
      const StreamHeader h = read_stream(in, tokens);
      DecodeOptions opt;
      opt.refine = !no_refine;
      opt.iterations = iters > 0 ? iters : codec.cfg.refine.iterations;
      const DecodeResult r = decode_stream(codec, h, tokens, opt);
      const Waveform w = mel_to_audio(codec, r.mel);
      write_atomically(dest, [&](const fs::path &p) { save_wav(p, w.samples, w.sample_rate); });
      out << "frames " << r.mel.rows() << ", " << fixed(w.duration(), 3) << " s, velocity evaluations "
          << r.evaluations << "\n";
    } else if (*train) {
      PipelineConfig cfg = resolve_config(config, preset, seed, work_dir);
      const fs::path dir(cfg.paths.work_dir);
      if (stage == "coding") {
        fs::create_directories(dir);
        Codec codec(cfg);
        const auto corpus = load_corpus(cfg);
        std::ofstream log(dir / "coding_loss.csv");
        log << "step,mel_rec,vq,loss,utilization\n" << std::setprecision(10);
        const auto res = train_coding_stage(codec, corpus, [&](const CodingStepLog &l) {
          log << l.step << ',' << l.mel_rec << ',' << l.vq << ',' << l.loss << ',' << l.utilization << '\n';
        });
        save_codec(dir / "coding.fmc", codec);
        out << "coding: " << res.log.size() << " steps, final-epoch utilization "
            << fixed(res.final_epoch_utilization, 4) << ", checkpoint " << (dir / "coding.fmc").string() << "\n";
      } else {
        const fs::path src = coding_ckpt.empty() ? dir / "coding.fmc" : fs::path(coding_ckpt);
        if (!fs::exists(src))
          throw std::runtime_error("refine stage needs a coding checkpoint; " + src.string() +
                                   " does not exist (run --stage coding first)");
        Codec codec = load_codec(src);
        // Architecture comes from the checkpoint; refinement settings from this run.
        PipelineConfig merged = codec.cfg;
        merged.refine = cfg.refine;
        merged.refine_train = cfg.refine_train;
        merged.seed = cfg.seed;
        merged.paths = cfg.paths;
        merged.toy = cfg.toy;
        merged.validate();
        codec.cfg = merged;
        fs::create_directories(dir);
        const auto corpus = load_corpus(codec.cfg);
        std::ofstream log(dir / "refine_loss.csv");
        log << "step,phase,cfm,self_consistency,loss\n" << std::setprecision(10);
        const auto logs = train_refine_stage(codec, corpus, [&](const RefineStepLog &l) {
          log << l.step << ',' << l.phase << ',' << l.cfm << ',' << l.self_consistency << ',' << l.loss << '\n';
        });
        save_codec(dir / "model.fmc", codec);
        out << "refine: " << logs.size() << " steps, checkpoint " << (dir / "model.fmc").string() << "\n";
      }
    } else if (*ev) {
      const Waveform a = load_wav(ref), b = load_wav(deg);
      const Metrics m = compare_waveforms(a, b, eval_mel_config(a.sample_rate));
      std::string bps;
      if (!stream.empty()) {
        std::vector<Index> tokens;
        const StreamHeader h = read_stream(stream, tokens);
        bps = fixed(static_cast<double>(tokens.size()) * h.bits_per_token() / a.duration(), 1);
      }
      out << "mcd_db " << fixed(m.mcd_db, 4) << "\nmel_l1 " << fixed(m.mel_l1, 6) << "\nmel_l2 "
          << fixed(m.mel_l2, 6) << "\nseconds " << fixed(m.seconds, 3) << "\n";
      if (!bps.empty())
        out << "bps " << bps << "\n";
      if (!csv.empty()) {
        const bool fresh = !fs::exists(csv) || fs::file_size(csv) == 0;
        std::ofstream c(csv, std::ios::app);
        if (!c)
          throw std::runtime_error("cannot write " + csv);
        if (fresh)
          c << "file,mcd_db,mel_l1,mel_l2,bps\n";
        c << deg << ',' << fixed(m.mcd_db, 6) << ',' << fixed(m.mel_l1, 6) << ',' << fixed(m.mel_l2, 6)
          << ',' << bps << '\n';
      }
    }
  } catch (const std::exception &e) {
    err << "fmelcodec: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

} // namespace fmc
