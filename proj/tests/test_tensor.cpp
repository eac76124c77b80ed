#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "fmc/ops.hpp"
#include "fmc/optim.hpp"
#include "fmc/params.hpp"
#include "gradcheck.hpp"

using namespace fmc;
using fmc::testing::gradcheck;
using fmc::testing::project;
using fmc::testing::random_tensor;

namespace {
std::vector<double> values(const Tensor &t) {
  return {t.data().begin(), t.data().end()};
}
} // namespace

TEST_CASE("conv1d examples") {
  Tensor x = Tensor::from({1, 1, 4}, {1, 2, 3, 4});
  Tensor k = Tensor::from({1, 1, 1}, {1});
  CHECK(values(conv1d(x, k, {})) == std::vector<double>{1, 2, 3, 4});

  Tensor x3 = Tensor::from({1, 1, 3}, {1, 2, 3});
  Tensor k3 = Tensor::from({1, 1, 3}, {1, 1, 1});
  CHECK(values(conv1d(x3, k3, {}, 1, 1)) == std::vector<double>{3, 6, 5});

  Tensor long_in = Tensor::zeros({1, 1, 100});
  CHECK(conv1d(long_in, Tensor::zeros({1, 1, 7}), {}, 4, 3).dim(2) == 25);
}

TEST_CASE("conv1d errors") {
  Tensor x = Tensor::zeros({1, 3, 10});
  CHECK_THROWS(conv1d(x, Tensor::zeros({2, 2, 3}), {}));
  CHECK_THROWS(conv1d(x, Tensor::zeros({3, 1, 3}), {}, 1, 0, 2));
  CHECK_THROWS(conv1d(x, Tensor::zeros({1, 3, 11}), {}));
  CHECK_THROWS(conv1d(x, Tensor::zeros({1, 3, 3}), {}, 0));
}

TEST_CASE("transposed conv1d examples") {
  Tensor y = conv_transpose1d(Tensor::from({1, 1, 1}, {2}),
                              Tensor::from({1, 1, 1}, {3}), {});
  CHECK(values(y) == std::vector<double>{6});

  CHECK(conv_transpose1d(Tensor::zeros({1, 2, 25}), Tensor::zeros({2, 3, 16}),
                         {}, 4, 6)
            .dim(2) == 100);

  Tensor bias = Tensor::from({2}, {0.5, -1.5});
  Tensor z = conv_transpose1d(Tensor::zeros({1, 3, 5}), Tensor::full({3, 2, 4}, 0.7),
                              bias, 2, 1);
  for (Index l = 0; l < z.dim(2); ++l) {
    CHECK(z.at({0, 0, l}) == 0.5);
    CHECK(z.at({0, 1, l}) == -1.5);
  }
  CHECK_THROWS(conv_transpose1d(Tensor::zeros({1, 3, 5}), Tensor::zeros({2, 2, 4}), {}));
}

TEST_CASE("matmul examples") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 3}, rng, 1.0, false);
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(values(matmul(eye, a)) == values(a));
  CHECK(values(matmul(Tensor::from({2, 2}, {1, 2, 3, 4}),
                      Tensor::from({2, 1}, {5, 6}))) ==
        std::vector<double>{17, 39});
  Tensor zero = matmul(Tensor::zeros({3, 3}), a);
  for (double v : zero.data())
    CHECK(v == 0.0);
  CHECK_THROWS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})));
}

TEST_CASE("reduce_loss examples") {
  Tensor a = Tensor::from({2}, {0, 0});
  Tensor b = Tensor::from({2}, {3, 4});
  for (auto kind : {LossKind::L1, LossKind::L2, LossKind::MSE})
    CHECK(reduce_loss(kind, b, b).item() == 0.0);
  CHECK(reduce_loss(LossKind::L2, a, b).item() == doctest::Approx(12.5));
  CHECK(reduce_loss(LossKind::L1, a, b).item() == doctest::Approx(3.5));
  CHECK_THROWS(reduce_loss(LossKind::L1, a, Tensor::zeros({3})));
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(square(x)));
  CHECK(values(Tensor::from({3}, std::vector<double>(x.grad().begin(),
                                                     x.grad().end()))) ==
        std::vector<double>{2, 4, 6});

  Tensor used = Tensor::from({2}, {1, 2}, true);
  Tensor unused = Tensor::from({2}, {3, 4}, true);
  unused.zero_grad();
  backward(sum(used));
  for (double g : unused.grad())
    CHECK(g == 0.0);

  CHECK_THROWS(backward(square(used)));
  CHECK_THROWS(backward(Tensor::scalar(1.0)));
}

TEST_CASE("gradients accumulate across uses and calls") {
  Tensor x = Tensor::from({2}, {1.5, -2}, true);
  backward(sum(mul(x, x)));
  backward(sum(x));
  CHECK(x.grad()[0] == doctest::Approx(2 * 1.5 + 1));
  CHECK(x.grad()[1] == doctest::Approx(2 * -2 + 1));
}

TEST_CASE("topological order puts inputs first") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor b = mul(a, a);
  Tensor c = add(b, a);
  Tensor root = sum(mul(c, b));
  auto order = topological_order(root);
  for (std::size_t i = 0; i < order.size(); ++i)
    for (const auto &in : order[i]->inputs) {
      if (!in->requires_grad)
        continue;
      auto pos = std::find(order.begin(), order.end(), in.get());
      REQUIRE(pos != order.end());
      CHECK(pos - order.begin() < static_cast<long>(i));
    }
  CHECK(order.back() == root.node().get());
  CHECK(std::set<detail::Node *>(order.begin(), order.end()).size() ==
        order.size());
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  CHECK_FALSE(square(x).requires_grad());
}

TEST_CASE("non-finite forward values are errors") {
  CHECK_THROWS(exp(Tensor::from({1}, {1000.0})));
  CHECK_THROWS(Tensor::from({2}, {1.0}));
}

TEST_CASE("conv1d gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 4, 9}, rng);
  Tensor k = random_tensor({6, 2, 3}, rng);
  Tensor b = random_tensor({6}, rng);
  Tensor y = random_tensor({2, 6, 5}, rng, 1.0, false);
  auto f = [&] { return mse_loss(conv1d(x, k, b, 2, 1, 2), y); };
  CHECK(gradcheck(f, {x, k, b}) <= 1e-4);
}

TEST_CASE("op gradients match finite differences") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 8, 6}, rng);
  Tensor g = random_tensor({8}, rng);
  Tensor bch = random_tensor({8}, rng);

  SUBCASE("depthwise conv") {
    Tensor k = random_tensor({8, 1, 7}, rng);
    CHECK(gradcheck([&] { return project(conv1d(x, k, bch, 1, 3, 8)); },
                    {x, k, bch}) <= 1e-4);
  }
  SUBCASE("transposed conv") {
    Tensor k = random_tensor({8, 3, 4}, rng);
    Tensor bt = random_tensor({3}, rng);
    CHECK(gradcheck([&] { return project(conv_transpose1d(x, k, bt, 2, 1)); },
                    {x, k, bt}) <= 1e-4);
  }
  SUBCASE("matmul") {
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 4, 5}, rng);
    CHECK(gradcheck([&] { return project(matmul(a, b)); }, {a, b}) <= 1e-4);
  }
  SUBCASE("layer norm") {
    CHECK(gradcheck([&] { return project(layer_norm_channels(x, g, bch)); },
                    {x, g, bch}) <= 1e-4);
  }
  SUBCASE("group norm") {
    CHECK(gradcheck([&] { return project(group_norm(x, 4, g, bch)); },
                    {x, g, bch}) <= 1e-4);
  }
  SUBCASE("grn") {
    CHECK(gradcheck([&] { return project(grn(x, g, bch)); }, {x, g, bch}) <=
          1e-4);
  }
  SUBCASE("snakebeta") {
    Tensor la = random_tensor({8}, rng, 0.3);
    Tensor lb = random_tensor({8}, rng, 0.3);
    CHECK(gradcheck([&] { return project(snakebeta(x, la, lb)); },
                    {x, la, lb}) <= 1e-4);
  }
  SUBCASE("softmax, gelu, silu, sin, exp") {
    CHECK(gradcheck([&] {
      return project(softmax_last(gelu(add(silu(x), sin(exp(scale(x, 0.3)))))));
    }, {x}) <= 1e-4);
  }
  SUBCASE("shape ops") {
    Tensor y = random_tensor({2, 3, 6}, rng);
    CHECK(gradcheck([&] {
      Tensor c = concat_channels(x, y);
      Tensor p = pad_edge_last(slice_last(c, 1, 4), 2, 3);
      return project(reshape(transpose_last2(p), {2 * 9, 11}));
    }, {x, y}) <= 1e-4);
  }
  SUBCASE("linear and time broadcast") {
    Tensor in = random_tensor({2, 5}, rng);
    Tensor w = random_tensor({8, 5}, rng);
    Tensor bl = random_tensor({8}, rng);
    CHECK(gradcheck([&] {
      return project(add_broadcast_time(x, linear(in, w, bl)));
    }, {x, in, w, bl}) <= 1e-4);
  }
  SUBCASE("losses and gather") {
    Tensor table = random_tensor({5, 3}, rng);
    Tensor target = random_tensor({4, 3}, rng, 1.0, false);
    std::vector<Index> rows{4, 0, 4, 2};
    CHECK(gradcheck([&] {
      Tensor r = gather_rows(table, rows);
      return add(l1_loss(r, target), mse_loss(r, target));
    }, {table}) <= 1e-4);
  }
}

TEST_CASE("straight-through passes gradient to z only") {
  Tensor z = Tensor::from({3}, {1, 2, 3}, true);
  Tensor zq = Tensor::from({3}, {0, 0, 5}, true);
  Tensor out = straight_through(z, zq);
  CHECK(values(out) == values(zq));
  zq.zero_grad();
  backward(sum(scale(out, 3.0)));
  for (double g : z.grad())
    CHECK(g == 3.0);
  for (double g : zq.grad())
    CHECK(g == 0.0);
}

TEST_CASE("conv1d is linear in its input") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({1, 3, 12}, rng, 1.0, false);
  Tensor y = random_tensor({1, 3, 12}, rng, 1.0, false);
  Tensor k = random_tensor({4, 3, 5}, rng, 1.0, false);
  const double alpha = 0.7, beta = -1.3;
  Tensor lhs = conv1d(add(scale(x, alpha), scale(y, beta)), k, {}, 2, 2);
  Tensor rhs = add(scale(conv1d(x, k, {}, 2, 2), alpha),
                   scale(conv1d(y, k, {}, 2, 2), beta));
  for (Index i = 0; i < lhs.numel(); ++i)
    CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) <= 1e-12);
}

TEST_CASE("forward passes are bit-identical across runs") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 4, 16}, rng, 1.0, false);
  Tensor k = random_tensor({4, 4, 3}, rng, 1.0, false);
  auto run = [&] { return values(grn(gelu(conv1d(x, k, {}, 1, 1)), Tensor::full({4}, 0.5), Tensor::zeros({4}))); };
  CHECK(run() == run());
}

TEST_CASE("adamw_step") {
  AdamWConfig cfg{.lr = 0.1, .beta1 = 0.8, .beta2 = 0.99, .weight_decay = 0.0};
  std::vector<double> p{1.0, -2.0};
  AdamMoments st;
  adamw_step(p, std::vector<double>{0.0, 0.0}, st, cfg);
  CHECK(p == std::vector<double>{1.0, -2.0});

  // One scalar step from zero state: m_hat = g, v_hat = g^2.
  std::vector<double> q{0.5};
  AdamMoments s2;
  const double g = 0.3;
  adamw_step(q, std::vector<double>{g}, s2, cfg);
  CHECK(q[0] == doctest::Approx(0.5 - 0.1 * g / (std::sqrt(g * g) + 1e-8)).epsilon(1e-14));

  AdamWConfig decay{.lr = 0.01, .weight_decay = 0.1};
  std::vector<double> r{2.0, -4.0};
  AdamMoments s3;
  adamw_step(r, std::vector<double>{0.0, 0.0}, s3, decay);
  CHECK(r[0] == doctest::Approx(2.0 * (1 - 0.01 * 0.1)).epsilon(1e-15));
  CHECK(r[1] == doctest::Approx(-4.0 * (1 - 0.01 * 0.1)).epsilon(1e-15));

  AdamMoments s4;
  CHECK_THROWS(adamw_step(r, std::vector<double>{NAN, 0.0}, s4, cfg));
}

TEST_CASE("checkpoint round trip and format") {
  ParameterSet ps;
  ps.add("a.weight", Tensor::from({2, 2}, {1, 2, 3, 4.5}));
  ps.add("b", Tensor::from({1}, {-0.25}));
  auto bytes = serialize_checkpoint(ps);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FMCK");
  CHECK(bytes[4] == 2);
  CHECK(bytes[5] == 0);
  ParameterSet back = deserialize_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back.entries()[0].first == "a.weight");
  CHECK(values(back.get("a.weight")) == values(ps.get("a.weight")));
  CHECK(back.get("b").shape() == Shape{1});

  bytes[0] = 'X';
  CHECK_THROWS(deserialize_checkpoint(bytes));
  auto truncated = serialize_checkpoint(ps);
  truncated.pop_back();
  CHECK_THROWS(deserialize_checkpoint(truncated));

  auto path = std::filesystem::temp_directory_path() / "fmc_ckpt_test.fmck";
  save_checkpoint(path, ps);
  CHECK(values(load_checkpoint(path).get("b")) == std::vector<double>{-0.25});
  std::filesystem::remove(path);
}
