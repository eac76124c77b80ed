#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fmc/coding.hpp"
#include "fmc/config.hpp"
#include "fmc/synth.hpp"
#include "graph_checks.hpp"

using namespace fmc;
using fmc::testing::gradcheck;

namespace {

CodingConfig desk_coding() { return preset_config("desk").coding; }

Matrix random_mel(Index n, Index d, std::mt19937_64 &rng) {
  std::normal_distribution<double> g(-4.0, 2.0);
  Matrix m(n, d);
  for (Index i = 0; i < m.size(); ++i)
    m.data()[i] = g(rng);
  return m;
}

} // namespace

TEST_CASE("encode and decode shapes") {
  std::mt19937_64 rng(1);
  SUBCASE("paper-size model on one second") {
    CodingModel model(CodingConfig{}, 7);
    Waveform w = synth::utterance(1.0, 16000, 3);
    MelSpectrogram mel = mel_spectrogram(w.samples, MelConfig{});
    REQUIRE(mel.frames() == 100);
    Index pad = -1;
    Matrix z = model.encode(mel.values, &pad);
    CHECK(pad == 0);
    CHECK(z.rows() == 25);
    CHECK(z.cols() == 32);
    Matrix out = model.decode(model.quantize(z).zhat);
    CHECK(out.rows() == 100);
    CHECK(out.cols() == 80);
  }
  SUBCASE("shape chain with frame padding") {
    CodingModel model(desk_coding(), 2);
    for (Index n : {1, 4, 7, 100, 101, 103}) {
      Index pad = 0;
      Matrix z = model.encode(random_mel(n, 80, rng), &pad);
      CHECK(pad == (4 - n % 4) % 4);
      CHECK(z.rows() == (n + pad) / 4);
      vq::Quantized q = model.quantize(z);
      Matrix out = model.decode(q.zhat, pad);
      CHECK(out.rows() == n);
      CHECK(out.cols() == 80);
      CHECK(out.allFinite());
    }
  }
  SUBCASE("constant input stays finite") {
    CodingModel model(desk_coding(), 2);
    Matrix z = model.encode(Matrix::Constant(40, 80, std::log(1e-5)));
    CHECK(z.allFinite());
  }
  SUBCASE("eval determinism and zeroed output conv") {
    CodingModel model(desk_coding(), 4);
    Matrix zh = model.lookup({1, 5, 9, 63, 0});
    CHECK(model.decode(zh) == model.decode(zh));
    for (double &v : model.output_conv().weight.mutable_data())
      v = 0.0;
    Matrix out = model.decode(zh);
    const auto bias = model.output_conv().bias.data();
    for (Index f = 0; f < out.rows(); ++f)
      for (Index d = 0; d < out.cols(); ++d)
        CHECK(out(f, d) == bias[d]);
  }
  SUBCASE("errors") {
    CodingModel model(desk_coding(), 4);
    CHECK_THROWS(model.encode(Matrix(0, 80)));
    CHECK_THROWS(model.encode(Matrix::Zero(8, 40)));
    CHECK_THROWS(model.decode(Matrix::Zero(3, 5)));
    CHECK_THROWS(model.lookup({64}));
    CodingConfig bad = desk_coding();
    bad.downsample = 0;
    CHECK_THROWS(CodingModel(bad, 1));
  }
}

TEST_CASE("reconstruction losses") {
  Tensor m = Tensor::full({1, 2, 4}, 3.0);
  CHECK(mel_rec_loss(m, m).item() == 0.0);
  CHECK(mel_rec_loss(m, Tensor::full({1, 2, 4}, 2.0)).item() == 2.0);
  CHECK(mel_rec_loss(m, Tensor::full({1, 2, 4}, 1.0)).item() == 6.0);
  CHECK_THROWS(mel_rec_loss(m, Tensor::zeros({1, 2, 3})));

  // Residuals chosen so that both loss terms equal one:
  // c + c^2 = 1 for the mel term, (1 + eta) d^2 = 1 for the vq term.
  CodingConfig cfg;
  const double c = (std::sqrt(5.0) - 1.0) / 2.0;
  const double d = std::sqrt(0.2);
  Tensor recon = Tensor::full({1, 2, 4}, 3.0 - c);
  Tensor z = Tensor::full({3, 2}, d), zhat = Tensor::zeros({3, 2});
  CHECK(mel_rec_loss(m, recon).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(vq::vq_loss(z, zhat, 4.0).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(coding_total_loss(m, recon, z, zhat, cfg).item() ==
        doctest::Approx(47.5).epsilon(1e-14));
  CHECK(coding_total_loss(m, m, zhat, zhat, cfg).item() == 0.0);
  cfg.lambda_vq = 0.0;
  CHECK(coding_total_loss(m, recon, z, zhat, cfg).item() ==
        doctest::Approx(45.0).epsilon(1e-14));
}

TEST_CASE("whole coding graph gradient") {
  CodingConfig cfg;
  cfg.mel_bins = 6;
  cfg.hidden = 8;
  cfg.blocks = 1;
  cfg.downsample = 2;
  cfg.code_dim = 3;
  cfg.codebook_size = 5;
  CodingModel model(cfg, 11);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 0.5);
  for (auto &[name, p] : model.params().entries())
    if (name.find("grn") != std::string::npos)
      for (double &v : p.mutable_data())
        v = g(rng);
  Tensor mel = frames_to_tensor(random_mel(8, 6, rng));

  const auto check = fmc::testing::coding_graph_check(model, mel);
  CHECK(check.value_gap <= 1e-10);
  CHECK(check.grad_error <= 1e-3);
}

TEST_CASE("coding training") {
  const MelConfig mel_cfg;
  const auto corpus = synth::toy_corpus(6, 5.0, 16000, 100); // 30 s
  const auto mels = corpus_mels(corpus, mel_cfg);
  CodingTrainConfig tc;
  tc.seed = 5;
  tc.optim.lr = 2e-3;

  SUBCASE("loss decreases over 200 steps") {
    CodingModel model(desk_coding(), 1);
    tc.steps = 200;
    CodingTrainResult r = train_coding(model, mels, mel_cfg, tc);
    REQUIRE(r.log.size() == 200);
    CHECK(r.epoch_steps == 2);
    auto window = [&](std::size_t from) {
      double s = 0.0;
      for (std::size_t i = from; i < from + 20; ++i)
        s += r.log[i].loss;
      return s / 20.0;
    };
    CHECK(window(180) < window(0));
    for (const auto &l : r.log) {
      CHECK(std::isfinite(l.loss));
      CHECK(l.utilization > 0.0);
      CHECK(l.utilization <= 1.0);
    }
  }
  SUBCASE("same seed, same curve and weights") {
    tc.steps = 6;
    CodingModel a(desk_coding(), 1), b(desk_coding(), 1);
    CodingTrainResult ra = train_coding(a, mels, mel_cfg, tc);
    CodingTrainResult rb = train_coding(b, mels, mel_cfg, tc);
    for (std::size_t i = 0; i < ra.log.size(); ++i) {
      CHECK(ra.log[i].loss == rb.log[i].loss);
      CHECK(ra.log[i].vq == rb.log[i].vq);
    }
    CHECK(serialize_checkpoint(a.state()) == serialize_checkpoint(b.state()));
  }
  SUBCASE("state round trip") {
    CodingModel a(desk_coding(), 1), b(desk_coding(), 2);
    tc.steps = 2;
    train_coding(a, mels, mel_cfg, tc);
    b.load_state(deserialize_checkpoint(serialize_checkpoint(a.state())));
    CHECK(b.cluster().pi == a.cluster().pi);
    Matrix z = a.encode(mels[0]);
    CHECK(b.encode(mels[0]) == z);
    CHECK(b.quantize(z).tokens == a.quantize(z).tokens);
  }
  SUBCASE("autoencoder overfits one sample") {
    CodingConfig cfg = desk_coding();
    cfg.lambda_vq = 0.0;
    CodingModel model(cfg, 3);
    const std::vector<Matrix> one{mels[0].topRows(100)};
    tc.steps = 2000;
    tc.batch_size = 1;
    tc.bypass_quantizer = true;
    CodingTrainResult r = train_coding(model, one, mel_cfg, tc);
    CHECK(r.log.back().mel_rec < 0.05);
    CHECK(r.log.back().vq == 0.0);
  }
  CHECK_THROWS(corpus_mels({}, mel_cfg));
}
