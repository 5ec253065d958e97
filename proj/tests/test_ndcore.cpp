#include <doctest.h>

#include <cmath>
#include <limits>

#include "miml/errors.hpp"
#include "miml/layers.hpp"
#include "miml/rng.hpp"
#include "miml/tensor.hpp"
#include "oracles.hpp"

using namespace miml;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul") {
  const auto a = Tensor::matrix({{1, 2}, {3, 4}});
  const auto b = Tensor::matrix({{5, 6}, {7, 8}});
  CHECK(matmul(Tensor::matrix({{1, 0}, {0, 1}}), b) == b);
  CHECK(matmul(a, b) == Tensor::matrix({{19, 22}, {43, 50}}));
  CHECK(max_abs(matmul(a, Tensor({2, 3}))) == 0.0);
  CHECK_THROWS_AS(matmul(a, Tensor({3, 2})), ContractError);

  // The transposed variants agree with explicit transposes.
  RngStream rng(3);
  const auto x = random_tensor({4, 3}, rng);
  const auto y = random_tensor({4, 5}, rng);
  Tensor xt({3, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) xt.at(j, i) = x.at(i, j);
  CHECK(matmul_tn(x, y) == matmul(xt, y));
  const auto z = random_tensor({5, 3}, rng);
  Tensor zt({3, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) zt.at(j, i) = z.at(i, j);
  CHECK(matmul_nt(x, z) == matmul(x, zt));
}

TEST_CASE("sigmoid") {
  CHECK(sigmoid(0.0) == 0.5);
  const double tiny = sigmoid(-1000.0);
  CHECK(tiny >= 0.0);
  CHECK(tiny <= 1e-300);
  CHECK_FALSE(std::isnan(tiny));
  CHECK(sigmoid(1e4) == 1.0);
  CHECK(std::isfinite(sigmoid(-1e4)));

  RngStream rng(11);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-30.0, 30.0);
    CHECK(std::abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-12);
  }
}

TEST_CASE("relu and leaky relu") {
  const auto x = Tensor({2}, {-2.0, 3.0});
  CHECK(relu(x) == Tensor({2}, {0.0, 3.0}));
  CHECK(leaky_relu(Tensor({1}, {-2.0}), 0.01)[0] == doctest::Approx(-0.02).epsilon(1e-15));
  RngStream rng(5);
  const auto r = random_tensor({50}, rng, -10, 10);
  CHECK(leaky_relu(r, 1.0) == r);
  CHECK_THROWS_AS(leaky_relu(r, -0.1), ContractError);
}

TEST_CASE("batchnorm forward") {
  SUBCASE("constant column normalizes to zero then beta") {
    auto state = make_batchnorm(2);
    state.gamma = Tensor({2}, {2.0, 3.0});
    state.beta = Tensor({2}, {0.5, -1.0});
    const auto x = Tensor::matrix({{4, 1}, {4, 2}, {4, 3}});
    const auto out = batchnorm_forward(x, state, Mode::train).output;
    for (std::size_t i = 0; i < 3; ++i) CHECK(out.at(i, 0) == 0.5);
  }
  SUBCASE("eval with unit running stats is the identity up to epsilon") {
    auto state = make_batchnorm(3);
    state.epsilon = 0.0;
    RngStream rng(1);
    const auto x = random_tensor({5, 3}, rng);
    CHECK(batchnorm_forward(x, state, Mode::eval).output == x);
  }
  SUBCASE("train output has mean beta and std |gamma|") {
    auto state = make_batchnorm(3);
    state.gamma = Tensor({3}, {1.5, -0.5, 2.0});
    state.beta = Tensor({3}, {0.1, 0.2, -0.3});
    state.epsilon = 0.0;
    RngStream rng(2);
    const auto x = random_tensor({64, 3}, rng, -5, 5);
    const auto y = batchnorm_forward(x, state, Mode::train).output;
    for (std::size_t j = 0; j < 3; ++j) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < 64; ++i) mean += y.at(i, j);
      mean /= 64;
      for (std::size_t i = 0; i < 64; ++i) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
      CHECK(std::abs(mean - state.beta[j]) < 1e-9);
      CHECK(std::abs(std::sqrt(var / 64) - std::abs(state.gamma[j])) < 1e-9);
    }
  }
  SUBCASE("running statistics move toward the batch") {
    auto state = make_batchnorm(1);
    const auto x = Tensor::matrix({{1}, {3}});
    batchnorm_forward(x, state, Mode::train);
    CHECK(state.running_mean[0] == doctest::Approx(0.2));
    CHECK(state.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));  // unbiased var of {1,3} is 2
  }
  SUBCASE("errors") {
    auto state = make_batchnorm(2);
    CHECK_THROWS_AS(batchnorm_forward(Tensor({1, 2}), state, Mode::train), ContractError);
    state.epsilon = -10.0;
    CHECK_THROWS_AS(batchnorm_forward(Tensor({3, 2}), state, Mode::eval), NumericalError);
    auto ok = make_batchnorm(2);
    const auto eval_cache = batchnorm_forward(Tensor({3, 2}), ok, Mode::eval).cache;
    CHECK_THROWS_AS(batchnorm_backward(Tensor({3, 2}), eval_cache), ContractError);
  }
}

TEST_CASE("batchnorm backward matches finite differences") {
  RngStream rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    auto state = make_batchnorm(3);
    state.gamma = random_tensor({3}, rng, 0.5, 2.0);
    state.beta = random_tensor({3}, rng);
    auto x = random_tensor({4, 3}, rng, -2, 2);
    const auto weights = random_tensor({4, 3}, rng);  // loss = Σ weights ⊙ y

    auto loss = [&] {
      auto s = state;
      const auto y = batchnorm_forward(x, s, Mode::train).output;
      double acc = 0;
      for (std::size_t i = 0; i < y.size(); ++i) acc += weights[i] * y[i];
      return acc;
    };
    auto s = state;
    const auto fwd = batchnorm_forward(x, s, Mode::train);
    const auto g = batchnorm_backward(weights, fwd.cache);

    for (std::size_t i = 0; i < x.size(); ++i) {
      const double num = oracle::central_difference(loss, &x[i]);
      CHECK(oracle::relative_error(g.grad_x[i], num) < 1e-6);
    }
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(oracle::relative_error(g.grad_gamma[j], oracle::central_difference(loss, &state.gamma[j])) < 1e-6);
      CHECK(oracle::relative_error(g.grad_beta[j], oracle::central_difference(loss, &state.beta[j])) < 1e-6);
    }
  }
}

TEST_CASE("batchnorm backward: zero gradient and mean removal") {
  RngStream rng(4);
  auto state = make_batchnorm(3);
  const auto x = random_tensor({6, 3}, rng);
  const auto fwd = batchnorm_forward(x, state, Mode::train);
  const auto zero = batchnorm_backward(Tensor({6, 3}), fwd.cache);
  CHECK(max_abs(zero.grad_x) == 0.0);
  CHECK(max_abs(zero.grad_gamma) == 0.0);
  CHECK(max_abs(zero.grad_beta) == 0.0);

  const auto g = batchnorm_backward(random_tensor({6, 3}, rng), fwd.cache);
  const auto sums = column_sums(g.grad_x);
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(sums[j]) < 1e-12);
}

TEST_CASE("affine and activation backward match finite differences") {
  RngStream rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    auto layer = init_affine(3, 2, rng);
    layer.bias = random_tensor({2}, rng);
    auto x = random_tensor({4, 3}, rng);
    const auto weights = random_tensor({4, 2}, rng);
    // loss = Σ weights ⊙ sigmoid(leaky_relu(x W + b))
    auto loss = [&] {
      const auto y = sigmoid(leaky_relu(affine_forward(x, layer), 0.01));
      double acc = 0;
      for (std::size_t i = 0; i < y.size(); ++i) acc += weights[i] * y[i];
      return acc;
    };
    const auto pre = affine_forward(x, layer);
    const auto act = leaky_relu(pre, 0.01);
    const auto out = sigmoid(act);
    const auto g = affine_backward(leaky_relu_backward(sigmoid_backward(weights, out), pre, 0.01), x, layer);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(oracle::relative_error(g.grad_x[i], oracle::central_difference(loss, &x[i])) < 1e-4);
    for (std::size_t i = 0; i < layer.weight.size(); ++i)
      CHECK(oracle::relative_error(g.grad_weight[i], oracle::central_difference(loss, &layer.weight[i])) < 1e-4);
    for (std::size_t i = 0; i < layer.bias.size(); ++i)
      CHECK(oracle::relative_error(g.grad_bias[i], oracle::central_difference(loss, &layer.bias[i])) < 1e-4);
  }
}

TEST_CASE("dropout") {
  RngStream rng(8);
  const auto x = random_tensor({100}, rng);
  SUBCASE("rate zero") {
    const auto r = dropout(x, 0.0, rng, Mode::train);
    CHECK(r.output == x);
    CHECK(r.mask == Tensor({100}, 1.0));
  }
  SUBCASE("eval is identity") {
    CHECK(dropout(x, 0.6, rng, Mode::eval).output == x);
  }
  SUBCASE("rate 0.6 keeps 40% and preserves the mean") {
    Tensor ones({100000}, 1.0);
    const auto r = dropout(ones, 0.6, rng, Mode::train);
    double kept = 0, mean = 0;
    for (std::size_t i = 0; i < ones.size(); ++i) {
      kept += r.mask[i];
      mean += r.output[i];
    }
    CHECK(std::abs(kept / 1e5 - 0.4) < 0.01);
    CHECK(std::abs(mean / 1e5 - 1.0) < 0.025);
    CHECK(dropout_backward(Tensor({100000}, 1.0), r.mask, r.scale) == r.output);
  }
  SUBCASE("bad rate") {
    CHECK_THROWS_AS(dropout(x, 1.0, rng, Mode::train), ContractError);
    CHECK_THROWS_AS(dropout(x, -0.1, rng, Mode::train), ContractError);
  }
}

TEST_CASE("rng determinism and splitting") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  // Children depend only on (seed, id), not on the parent's position.
  RngStream p(42);
  const auto c1 = p.split(7).seed();
  p.next_u64();
  CHECK(p.split(7).seed() == c1);
  CHECK(p.split(8).seed() != c1);

  // Frozen reference values pin the generator across builds.
  RngStream frozen(0);
  CHECK(frozen.next_u64() == 0x99ec5f36cb75f2b4ULL);

  RngStream u(9);
  double lo = 1, hi = 0, sum = 0;
  for (int i = 0; i < 100000; ++i) {
    const double v = u.uniform();
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(std::abs(sum / 1e5 - 0.5) < 0.01);

  RngStream n(10);
  double m1 = 0, m2 = 0;
  for (int i = 0; i < 100000; ++i) {
    const double v = n.normal();
    m1 += v;
    m2 += v * v;
  }
  CHECK(std::abs(m1 / 1e5) < 0.02);
  CHECK(std::abs(m2 / 1e5 - 1.0) < 0.02);

  RngStream k(12);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) ++hist[k.below(7)];
  for (int h : hist) CHECK(std::abs(h - 10000) < 500);
}
