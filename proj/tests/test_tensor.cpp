#include <catch2/catch_amalgamated.hpp>

#include "dynser/tensor.hpp"
#include "oracles.hpp"

using namespace dynser;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

// Values bounded away from zero, for probing relu off its kink.
Tensor random_offset_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) {
    const double mag = rng.uniform(0.2, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace

TEST_CASE("linear identity and zero-input cases", "[tensor]") {
  Tensor w = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) w.at({i, i}) = 1.0;
  Tensor b = Tensor::zeros({3});
  Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  Tensor y = linear(x, w, b);
  CHECK(y.values() == std::vector<double>{1.0, 2.0, 3.0});

  Rng rng(7);
  Tensor w2 = random_tensor({4, 3}, rng);
  Tensor b2 = random_tensor({4}, rng);
  Tensor zero = Tensor::zeros({2, 3});
  Tensor y2 = linear(zero, w2, b2);
  for (int r = 0; r < 2; ++r) {
    for (int o = 0; o < 4; ++o) {
      CHECK(y2.at({r, o}) == b2.at({o}));
    }
  }
}

TEST_CASE("linear matches nested-loop oracle", "[tensor]") {
  Rng rng(11);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor w = random_tensor({5, 3}, rng);
  Tensor b = random_tensor({5}, rng);
  Tensor y = linear(x, w, b);
  auto ref = oracle::naive_linear(x.values(), 4, 3, w.values(), 5, b.values());
  CHECK(oracle::max_abs_diff(y, ref) < 1e-12);
}

TEST_CASE("linear rejects mismatched axes", "[tensor]") {
  Tensor x = Tensor::zeros({2, 3});
  Tensor w = Tensor::zeros({5, 4});
  Tensor b = Tensor::zeros({5});
  CHECK_THROWS_AS(linear(x, w, b), DimensionError);
  CHECK_THROWS_WITH(linear(x, w, b),
                    Catch::Matchers::ContainsSubstring("3") &&
                        Catch::Matchers::ContainsSubstring("4"));
  Tensor bad_b = Tensor::zeros({4});
  Tensor w_ok = Tensor::zeros({5, 3});
  CHECK_THROWS_AS(linear(x, w_ok, bad_b), DimensionError);
}

TEST_CASE("convolution 1x1 kernels: identity and scaling", "[tensor]") {
  Rng rng(3);
  Tensor x = random_tensor({1, 4, 5}, rng);
  Tensor k1 = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor y1 = convolution(x, k1, Tensor(), 1, 0, 2);
  CHECK(oracle::max_abs_diff(y1, x) == 0.0);

  Tensor k2 = Tensor::from_data({1, 1, 1, 1}, {2.0});
  Tensor y2 = convolution(x, k2, Tensor(), 1, 0, 2);
  for (std::int64_t i = 0; i < x.size(); ++i) {
    CHECK(y2.data()[i] == 2.0 * x.data()[i]);
  }
}

TEST_CASE("convolution matches six-nested-loop oracle", "[tensor]") {
  Rng rng(5);
  Tensor x = random_tensor({1, 5, 6}, rng);
  Tensor k = random_tensor({2, 1, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  Tensor y = convolution(x, k, b, 1, 1, 2);
  std::int64_t oh, ow;
  auto ref = oracle::naive_conv2d(x.values(), 1, 5, 6, k.values(), 2, 3, 3,
                                  b.values(), 1, 1, oh, ow);
  REQUIRE(y.shape() == Shape{2, oh, ow});
  CHECK(oracle::max_abs_diff(y, ref) < 1e-12);

  // stride 2, multi-channel, batched
  Tensor xb = random_tensor({3, 4, 7, 9}, rng);
  Tensor kb = random_tensor({5, 4, 3, 3}, rng);
  Tensor bb = random_tensor({5}, rng);
  Tensor yb = convolution(xb, kb, bb, 2, 1, 2);
  for (int e = 0; e < 3; ++e) {
    std::vector<double> xe(xb.data() + e * 4 * 7 * 9,
                           xb.data() + (e + 1) * 4 * 7 * 9);
    auto refe = oracle::naive_conv2d(xe, 4, 7, 9, kb.values(), 5, 3, 3,
                                     bb.values(), 2, 1, oh, ow);
    std::vector<double> ye(yb.data() + e * 5 * oh * ow,
                           yb.data() + (e + 1) * 5 * oh * ow);
    CHECK(oracle::max_abs_diff(ye, refe) < 1e-12);
  }
}

TEST_CASE("rank-1 convolution matches loop oracle", "[tensor]") {
  Rng rng(9);
  Tensor x = random_tensor({2, 11}, rng);
  Tensor k = random_tensor({3, 2, 5}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor y = convolution(x, k, b, 2, 2, 1);
  std::int64_t ol;
  auto ref = oracle::naive_conv1d(x.values(), 2, 11, k.values(), 3, 5,
                                  b.values(), 2, 2, ol);
  REQUIRE(y.shape() == Shape{3, ol});
  CHECK(oracle::max_abs_diff(y, ref) < 1e-12);
}

TEST_CASE("convolution rejects oversized kernels", "[tensor]") {
  Tensor x = Tensor::zeros({1, 3, 3});
  Tensor k = Tensor::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(convolution(x, k, Tensor(), 1, 0, 2), DimensionError);
  Tensor k_ch = Tensor::zeros({1, 2, 3, 3});
  CHECK_THROWS_AS(convolution(x, k_ch, Tensor(), 1, 0, 2), DimensionError);
}

TEST_CASE("same-padding convolution preserves spatial dims", "[tensor]") {
  Rng rng(13);
  for (std::int64_t k : {1, 3, 5, 7}) {
    Tensor x = random_tensor({2, 9, 12}, rng);
    Tensor w = random_tensor({3, 2, k, k}, rng);
    Tensor y = convolution(x, w, Tensor(), 1, (k - 1) / 2, 2);
    CHECK(y.shape() == Shape{3, 9, 12});
  }
}

TEST_CASE("pool trivial cases", "[tensor]") {
  Tensor c = Tensor::filled({1, 2, 2}, 3.25);
  Tensor g = pool(c, PoolKind::kAvg, 0, 0, PoolScope::kGlobal);
  REQUIRE(g.shape() == Shape{1});
  CHECK(g.item() == 3.25);

  Tensor v = Tensor::from_data({1, 3}, {1.0, 3.0, 2.0});
  Tensor m = pool(v, PoolKind::kMax, 3, 3, PoolScope::kWindowed);
  REQUIRE(m.shape() == Shape{1, 1});
  CHECK(m.item() == 3.0);
}

TEST_CASE("pool matches explicit-loop oracle", "[tensor]") {
  Rng rng(17);
  Tensor x = random_tensor({3, 8, 10}, rng);
  std::int64_t oh, ow;
  {
    Tensor y = pool(reshape(x, {1, 3, 8, 10}), PoolKind::kMax, 2, 2,
                    PoolScope::kWindowed);
    auto ref = oracle::naive_pool2d_max(x.values(), 3, 8, 10, 2, 2, oh, ow);
    REQUIRE(y.shape() == Shape{1, 3, oh, ow});
    CHECK(oracle::max_abs_diff(y, ref) < 1e-12);
  }
  {
    Tensor y = pool(reshape(x, {1, 3, 8, 10}), PoolKind::kAvg, 3, 2,
                    PoolScope::kWindowed);
    auto ref = oracle::naive_pool2d_avg(x.values(), 3, 8, 10, 3, 2, oh, ow);
    CHECK(oracle::max_abs_diff(y, ref) < 1e-12);
  }
  {
    // global avg equals the per-channel mean
    Tensor y = pool(x, PoolKind::kAvg, 0, 0, PoolScope::kGlobal);
    REQUIRE(y.shape() == Shape{3});
    for (int cc = 0; cc < 3; ++cc) {
      double acc = 0.0;
      for (int i = 0; i < 80; ++i) acc += x.data()[cc * 80 + i];
      CHECK(std::abs(y.at({cc}) - acc / 80.0) < 1e-12);
    }
  }
}

TEST_CASE("pool parameter validation", "[tensor]") {
  Tensor x = Tensor::zeros({1, 4});
  CHECK_THROWS_AS(pool(x, PoolKind::kMax, 0, 1, PoolScope::kWindowed),
                  ParameterError);
  CHECK_THROWS_AS(pool(x, PoolKind::kMax, 2, 0, PoolScope::kWindowed),
                  ParameterError);
  CHECK_THROWS_AS(pool(x, PoolKind::kMax, 5, 1, PoolScope::kWindowed),
                  DimensionError);
}

TEST_CASE("maxpool ties route gradient to the first element", "[tensor]") {
  Tensor x = Tensor::from_data({1, 4}, {2.0, 2.0, 1.0, 2.0});
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = pool(x, PoolKind::kMax, 4, 4, PoolScope::kWindowed);
  tape.backward(sum(y));
  CHECK(x.grad() == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("batchnorm constant batch yields beta", "[tensor]") {
  Tensor x = Tensor::filled({4, 2, 3}, 5.0);
  Tensor gamma = Tensor::ones({2});
  Tensor beta = Tensor::from_data({2}, {0.7, -1.2});
  BatchNormState state;
  Tensor y = batchnorm(x, gamma, beta, state, Mode::kTrain);
  for (int b = 0; b < 4; ++b) {
    for (int c = 0; c < 2; ++c) {
      for (int j = 0; j < 3; ++j) {
        CHECK(std::abs(y.at({b, c, j}) - beta.at({c})) < 1e-12);
      }
    }
  }
}

TEST_CASE("batchnorm is identity on a standardized batch", "[tensor]") {
  Rng rng(23);
  Tensor x = random_tensor({6, 3, 4}, rng);
  // standardize each channel with biased statistics
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (int b = 0; b < 6; ++b) {
      for (int j = 0; j < 4; ++j) {
        const double v = x.at({b, c, j});
        s += v;
        s2 += v * v;
      }
    }
    const double m = s / 24.0;
    const double sd = std::sqrt(s2 / 24.0 - m * m);
    for (int b = 0; b < 6; ++b) {
      for (int j = 0; j < 4; ++j) {
        x.at({b, c, j}) = (x.at({b, c, j}) - m) / sd;
      }
    }
  }
  // residual error scales with eps, so pin a small one for the comparison
  BatchNormState state;
  Tensor y = batchnorm(x, Tensor::ones({3}), Tensor::zeros({3}), state,
                       Mode::kTrain, 1e-9);
  CHECK(oracle::max_abs_diff(y, x) < 1e-6);
}

TEST_CASE("batchnorm output statistics match the direct oracle", "[tensor]") {
  Rng rng(29);
  Tensor x = Tensor::uniform({8, 4, 5}, -3.0, 7.0, rng);
  BatchNormState state;
  Tensor y = batchnorm(x, Tensor::ones({4}), Tensor::zeros({4}), state,
                       Mode::kTrain);
  for (int c = 0; c < 4; ++c) {
    double s = 0.0, s2 = 0.0;
    for (int b = 0; b < 8; ++b) {
      for (int j = 0; j < 5; ++j) {
        const double v = y.at({b, c, j});
        s += v;
        s2 += v * v;
      }
    }
    const double m = s / 40.0;
    const double var = s2 / 40.0 - m * m;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps shrinks variance slightly
  }
}

TEST_CASE("batchnorm rejects batch of one in train mode", "[tensor]") {
  Tensor x = Tensor::zeros({1, 2, 3});
  BatchNormState state;
  CHECK_THROWS_AS(
      batchnorm(x, Tensor::ones({2}), Tensor::zeros({2}), state, Mode::kTrain),
      ProtocolError);
  // eval mode accepts it
  CHECK_NOTHROW(
      batchnorm(x, Tensor::ones({2}), Tensor::zeros({2}), state, Mode::kEval));
}

TEST_CASE("batchnorm eval uses running statistics", "[tensor]") {
  Rng rng(31);
  Tensor gamma = Tensor::ones({2});
  Tensor beta = Tensor::zeros({2});
  BatchNormState state;
  state.momentum = 1.0;  // running stats = last batch stats
  Tensor x = Tensor::uniform({16, 2, 1}, 2.0, 4.0, rng);
  batchnorm(x, gamma, beta, state, Mode::kTrain);
  Tensor probe = Tensor::filled({1, 2, 1}, 3.0);
  Tensor y = batchnorm(probe, gamma, beta, state, Mode::kEval);
  // output should be (3 - mean)/std of the training batch, channel-wise
  for (int c = 0; c < 2; ++c) {
    const double expect = (3.0 - state.running_mean[c]) /
                          std::sqrt(state.running_var[c] + 1e-5);
    CHECK(std::abs(y.at({0, c, 0}) - expect) < 1e-12);
  }
}

TEST_CASE("activation analytic values", "[tensor]") {
  Tensor x = Tensor::from_data({3}, {0.0, 0.0, -1.0});
  CHECK(sigmoid(x).at({0}) == 0.5);
  CHECK(tanh_op(x).at({1}) == 0.0);
  CHECK(relu(x).at({2}) == 0.0);
}

TEST_CASE("sigmoid symmetry", "[tensor]") {
  Rng rng(37);
  Tensor x = Tensor::uniform({64}, -6.0, 6.0, rng);
  Tensor a = sigmoid(x);
  Tensor b = sigmoid(affine(x, -1.0, 0.0));
  for (std::int64_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(a.data()[i] + b.data()[i] - 1.0) < 1e-15);
  }
}

TEST_CASE("sigmoid gradient at zero is 0.25", "[tensor]") {
  auto fn = [](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); };
  Tensor x = Tensor::zeros({1});
  CHECK(gradient_check(fn, {x}, 1e-5) < 1e-8);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = sum(sigmoid(x));
  tape.backward(y);
  CHECK(std::abs(x.grad()[0] - 0.25) < 1e-12);
}

TEST_CASE("elementwise identity elements", "[tensor]") {
  Rng rng(41);
  Tensor a = random_tensor({3, 4}, rng);
  CHECK(oracle::max_abs_diff(mul(a, Tensor::ones({3, 4})), a) == 0.0);
  CHECK(oracle::max_abs_diff(add(a, Tensor::zeros({3, 4})), a) == 0.0);
}

TEST_CASE("channel vector broadcasts over the full map", "[tensor]") {
  Rng rng(43);
  Tensor f = random_tensor({3, 2, 2}, rng);  // [C,H,W]
  Tensor gains = Tensor::from_data({3, 1, 1}, {2.0, 0.5, -1.0});
  Tensor y = mul(f, gains);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        CHECK(y.at({c, i, j}) == f.at({c, i, j}) * gains.at({c, 0, 0}));
      }
    }
  }
}

TEST_CASE("broadcast elementwise matches loop oracle", "[tensor]") {
  Rng rng(47);
  Tensor a = random_tensor({2, 3, 4, 5}, rng);
  Tensor b = random_tensor({2, 1, 4, 1}, rng);
  Tensor y = mul(a, b);
  for (int i0 = 0; i0 < 2; ++i0) {
    for (int i1 = 0; i1 < 3; ++i1) {
      for (int i2 = 0; i2 < 4; ++i2) {
        for (int i3 = 0; i3 < 5; ++i3) {
          const double expect =
              a.at({i0, i1, i2, i3}) * b.at({i0, 0, i2, 0});
          CHECK(std::abs(y.at({i0, i1, i2, i3}) - expect) < 1e-12);
        }
      }
    }
  }
  // trailing-rank broadcast
  Tensor c = random_tensor({4, 5}, rng);
  Tensor z = add(a, c);
  CHECK(std::abs(z.at({1, 2, 3, 4}) - (a.at({1, 2, 3, 4}) + c.at({3, 4}))) <
        1e-15);
}

TEST_CASE("elementwise rejects incompatible shapes", "[tensor]") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(mul(a, b), DimensionError);
}

TEST_CASE("backward of sum gives all-ones gradient", "[tensor]") {
  Tensor x = Tensor::zeros({2, 3}, true);
  Tape tape;
  Tensor loss = sum(x);
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>(6, 1.0));
}

TEST_CASE("constant inputs receive no gradient", "[tensor]") {
  Tensor x = Tensor::ones({4}, true);
  Tensor c = Tensor::filled({4}, 2.0);  // no grad requested
  Tape tape;
  Tensor loss = sum(mul(x, c));
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>(4, 2.0));
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("two-op chain matches finite differences", "[tensor]") {
  Rng rng(53);
  Tensor x = random_tensor({4}, rng);
  Tensor w = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3}, rng);
  auto fn = [&](const std::vector<Tensor>& in) {
    return sum(sigmoid(linear(in[0], in[1], in[2])));
  };
  CHECK(gradient_check(fn, {x, w, b}, 1e-5) < 1e-6);
}

TEST_CASE("reused tensor accumulates gradient", "[tensor]") {
  Tensor x = Tensor::from_data({2}, {1.0, -2.0}, true);
  Tape tape;
  Tensor loss = sum(add(x, x));
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("backward rejects non-scalar loss and off-tape loss", "[tensor]") {
  Tensor x = Tensor::ones({3}, true);
  Tape tape;
  Tensor y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), ProtocolError);
  Tensor stray = Tensor::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(stray), ProtocolError);
}

TEST_CASE("gradient_check accepts a correct op and flags a corrupt one",
          "[tensor]") {
  Rng rng(59);
  Tensor x = random_tensor({3}, rng);
  Tensor w = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  auto good = [](const std::vector<Tensor>& in) {
    return sum(linear(in[0], in[1], in[2]));
  };
  CHECK(gradient_check(good, {x, w, b}, 1e-5) < 1e-6);

  // designed negative control: forward 2x, backward claims -2
  auto bad_scale = [](const Tensor& t) {
    Tensor y = Tensor::zeros(t.shape());
    for (std::int64_t i = 0; i < t.size(); ++i) y.data()[i] = 2.0 * t.data()[i];
    if (detail::should_record({&t})) {
      y.set_requires_grad(true);
      auto ti = t.impl(), yi = y.impl();
      Tape::active()->record(yi, {ti}, [ti, yi]() {
        for (std::size_t i = 0; i < ti->grad.size(); ++i) {
          ti->grad[i] += -2.0 * yi->grad[i];
        }
      });
    }
    return y;
  };
  auto bad = [&](const std::vector<Tensor>& in) { return sum(bad_scale(in[0])); };
  CHECK(gradient_check(bad, {x.clone()}, 1e-5) > 0.5);
}

TEST_CASE("gradient_check validates its arguments", "[tensor]") {
  Tensor x = Tensor::ones({2});
  auto vec_fn = [](const std::vector<Tensor>& in) { return add(in[0], in[0]); };
  CHECK_THROWS_AS(gradient_check(vec_fn, {x}, 1e-5), ProtocolError);
  auto ok_fn = [](const std::vector<Tensor>& in) { return sum(in[0]); };
  CHECK_THROWS_AS(gradient_check(ok_fn, {x}, 1e-2), ParameterError);
  CHECK_THROWS_AS(gradient_check(ok_fn, {x}, 1e-8), ParameterError);
}

TEST_CASE("relu probed away from its kink passes gradient check", "[tensor]") {
  Rng rng(61);
  for (int seed = 0; seed < 3; ++seed) {
    Tensor x = random_offset_tensor({8}, rng);
    auto fn = [](const std::vector<Tensor>& in) { return sum(relu(in[0])); };
    CHECK(gradient_check(fn, {x}, 1e-5) < 1e-6);
  }
}

TEST_CASE("every differentiable op passes gradient checks on 10 seeds",
          "[tensor][gradcheck]") {
  for (int seed = 1; seed <= 10; ++seed) {
    Rng rng(seed * 977);
    {
      Tensor x = random_tensor({2, 4}, rng);
      Tensor w = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({3}, rng);
      auto fn = [](const std::vector<Tensor>& in) {
        return sum(tanh_op(linear(in[0], in[1], in[2])));
      };
      CHECK(gradient_check(fn, {x, w, b}, 1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({2, 2, 5, 6}, rng);
      Tensor k = random_tensor({3, 2, 3, 3}, rng);
      Tensor b = random_tensor({3}, rng);
      auto fn = [](const std::vector<Tensor>& in) {
        return mean(convolution(in[0], in[1], in[2], 1, 1, 2));
      };
      CHECK(gradient_check(fn, {x, k, b}, 1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({2, 9}, rng);
      Tensor k = random_tensor({2, 2, 3}, rng);
      auto fn = [](const std::vector<Tensor>& in) {
        return mean(convolution(in[0], in[1], Tensor(), 2, 1, 1));
      };
      CHECK(gradient_check(fn, {x, k}, 1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({1, 2, 6, 6}, rng);
      auto fmax = [](const std::vector<Tensor>& in) {
        return sum(pool(in[0], PoolKind::kMax, 2, 2, PoolScope::kWindowed));
      };
      auto favg = [](const std::vector<Tensor>& in) {
        return sum(pool(in[0], PoolKind::kAvg, 3, 1, PoolScope::kWindowed));
      };
      auto fglob = [](const std::vector<Tensor>& in) {
        return sum(pool(in[0], PoolKind::kMax, 0, 0, PoolScope::kGlobal));
      };
      CHECK(gradient_check(fmax, {x}, 1e-5) < 1e-5);
      CHECK(gradient_check(favg, {x.clone()}, 1e-5) < 1e-5);
      CHECK(gradient_check(fglob, {x.clone()}, 1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({4, 3, 2}, rng);
      Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
      Tensor beta = random_tensor({3}, rng);
      auto ftrain = [](const std::vector<Tensor>& in) {
        BatchNormState state;
        return sum(tanh_op(
            batchnorm(in[0], in[1], in[2], state, Mode::kTrain)));
      };
      CHECK(gradient_check(ftrain, {x, gamma, beta}, 1e-5) < 1e-5);
      auto feval = [](const std::vector<Tensor>& in) {
        BatchNormState state;
        state.running_mean = {0.2, -0.1, 0.4};
        state.running_var = {1.3, 0.8, 2.0};
        return sum(batchnorm(in[0], in[1], in[2], state, Mode::kEval));
      };
      CHECK(gradient_check(feval, {x.clone(), gamma.clone(), beta.clone()},
                           1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({12}, rng);
      for (Act a : {Act::kSigmoid, Act::kTanh}) {
        auto fn = [a](const std::vector<Tensor>& in) {
          return sum(activation(in[0], a));
        };
        CHECK(gradient_check(fn, {x.clone()}, 1e-5) < 1e-5);
      }
      Tensor xo = random_offset_tensor({12}, rng);
      auto frelu = [](const std::vector<Tensor>& in) { return sum(relu(in[0])); };
      CHECK(gradient_check(frelu, {xo}, 1e-5) < 1e-5);
    }
    {
      Tensor a = random_tensor({2, 3, 4}, rng);
      Tensor b = random_tensor({2, 1, 4}, rng);
      auto fmul = [](const std::vector<Tensor>& in) {
        return sum(mul(in[0], in[1]));
      };
      auto fadd = [](const std::vector<Tensor>& in) {
        return sum(tanh_op(add(in[0], in[1])));
      };
      CHECK(gradient_check(fmul, {a, b}, 1e-5) < 1e-5);
      CHECK(gradient_check(fadd, {a.clone(), b.clone()}, 1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({3, 4}, rng);
      auto fn = [](const std::vector<Tensor>& in) {
        Tensor p = permute(in[0], {1, 0});
        Tensor r = reshape(p, {2, 6});
        Tensor n = narrow(r, 1, 1, 4);
        return mean(n);
      };
      CHECK(gradient_check(fn, {x}, 1e-5) < 1e-5);
    }
    {
      Tensor a = random_tensor({2, 3}, rng);
      Tensor b = random_tensor({2, 2}, rng);
      auto fn = [](const std::vector<Tensor>& in) {
        return sum(tanh_op(concat({in[0], in[1]}, 1)));
      };
      CHECK(gradient_check(fn, {a, b}, 1e-5) < 1e-5);
    }
    {
      Tensor x = random_tensor({3, 5}, rng);
      auto fsm = [](const std::vector<Tensor>& in) {
        Tensor s = softmax(in[0]);
        return sum(mul(s, s));
      };
      CHECK(gradient_check(fsm, {x}, 1e-5) < 1e-5);
      auto fred = [](const std::vector<Tensor>& in) {
        Tensor m = reduce_axis(in[0], 1, Reduce::kMean);
        Tensor s = reduce_axis(in[0], 0, Reduce::kSum);
        return add(mean(m), mean(s));
      };
      CHECK(gradient_check(fred, {x.clone()}, 1e-5) < 1e-5);
      auto fmaxr = [](const std::vector<Tensor>& in) {
        return sum(reduce_axis(in[0], 1, Reduce::kMax));
      };
      CHECK(gradient_check(fmaxr, {x.clone()}, 1e-5) < 1e-5);
      auto faff = [](const std::vector<Tensor>& in) {
        return mean(affine(in[0], -1.7, 0.3));
      };
      CHECK(gradient_check(faff, {x.clone()}, 1e-5) < 1e-5);
    }
  }
}

TEST_CASE("forward pass is bit-deterministic", "[tensor]") {
  Rng rng(71);
  Tensor x = random_tensor({2, 3, 8, 9}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  auto run = [&]() {
    Tensor y = convolution(x, k, b, 1, 1, 2);
    Tensor p = pool(y, PoolKind::kMax, 2, 2, PoolScope::kWindowed);
    return sigmoid(p);
  };
  Tensor y1 = run();
  Tensor y2 = run();
  REQUIRE(y1.size() == y2.size());
  for (std::int64_t i = 0; i < y1.size(); ++i) {
    CHECK(y1.data()[i] == y2.data()[i]);
  }
}

TEST_CASE("softmax rows are probability vectors", "[tensor]") {
  Rng rng(73);
  Tensor x = Tensor::uniform({6, 5}, -4.0, 4.0, rng);
  Tensor s = softmax(x);
  for (int r = 0; r < 6; ++r) {
    double acc = 0.0;
    for (int c = 0; c < 5; ++c) {
      const double v = s.at({r, c});
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      acc += v;
    }
    CHECK(std::abs(acc - 1.0) < 1e-12);
  }
}
