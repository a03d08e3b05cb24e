#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "dssl/checkpoint.hpp"
#include "dssl/grad_check.hpp"
#include "dssl/ops.hpp"
#include "dssl/tensor.hpp"

using namespace dssl;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Weighted sum so every output coordinate carries a distinct cotangent.
Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, random_tensor(rng, y.shape())));
}

}  // namespace

TEST_CASE("matmul of a row by a column") {
  auto a = Tensor::from({1, 2}, {1, 2});
  auto b = Tensor::from({2, 1}, {3, 4});
  auto c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.item() == 11.0);
}

TEST_CASE("softmax of equal logits is uniform") {
  auto y = ops::softmax(Tensor::from({2}, {0, 0}));
  CHECK(y[0] == 0.5);
  CHECK(y[1] == 0.5);
}

TEST_CASE("relu leaves the identity matrix unchanged") {
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ops::relu(eye);
  for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == eye[i]);
}

TEST_CASE("shape mismatches name both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS(ops::add(Tensor::zeros({3}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_NOTHROW(ops::add(Tensor::zeros({4, 2, 3}), Tensor::zeros({2, 3})));
}

TEST_CASE("non-finite values are rejected") {
  CHECK_THROWS_AS(Tensor::from({1}, {std::numeric_limits<double>::quiet_NaN()}), NumericError);
  auto t = Tensor::zeros({2});
  t.mutable_data()[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ops::relu(t), NumericError);
}

TEST_CASE("backward of x*x at 3 is 6") {
  auto x = Tensor::scalar(3.0, true);
  Tape tape;
  TapeScope scope(tape);
  auto y = ops::mul(x, x);
  backward(tape, y);
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("sum of softmax has zero gradient") {
  std::mt19937_64 rng(7);
  auto v = random_tensor(rng, {5}).clone(true);
  Tape tape;
  TapeScope scope(tape);
  backward(tape, ops::sum(ops::softmax(v)));
  for (double g : v.grad()) CHECK(std::fabs(g) < 1e-15);
}

TEST_CASE("sum(A*B) gradients match finite differences") {
  std::mt19937_64 rng(11);
  auto a = random_tensor(rng, {3, 3}).clone(true);
  auto b = random_tensor(rng, {3, 3}).clone(true);
  std::vector<Tensor> params{a, b};
  const double err = grad_check_params([&] { return ops::sum(ops::matmul(a, b)); }, params, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("backward rejects roots from elsewhere and accumulates on repeat") {
  auto x = Tensor::scalar(2.0, true);
  Tape tape;
  Tape other;
  Tensor y;
  {
    TapeScope scope(tape);
    y = ops::scale(x, 3.0);
  }
  CHECK_THROWS_AS(backward(other, y), std::invalid_argument);
  CHECK_THROWS_AS(backward(tape, x), std::invalid_argument);
  backward(tape, y);
  backward(tape, y);
  CHECK(x.grad()[0] == 6.0);
  x.zero_grad();
  backward(tape, y);
  CHECK(x.grad()[0] == 3.0);
}

TEST_CASE("backward on a sum of leaves yields exact ones") {
  std::mt19937_64 rng(3);
  auto a = random_tensor(rng, {4, 3}).clone(true);
  auto b = random_tensor(rng, {4, 3}).clone(true);
  Tape tape;
  TapeScope scope(tape);
  backward(tape, ops::sum(ops::add(a, b)));
  for (double g : a.grad()) CHECK(g == 1.0);
  for (double g : b.grad()) CHECK(g == 1.0);
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor(rng, {4, 7}, -30.0, 30.0);
    auto y = ops::softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += y.at(r, c);
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("grad_check on sum of squares is exact to rounding") {
  auto f = [](const Tensor& x) { return ops::sum(ops::mul(x, x)); };
  CHECK(grad_check(f, Tensor::full({4}, 1.0), 1e-5) < 1e-8);
}

TEST_CASE("grad_check validates eps and determinism") {
  auto f = [](const Tensor& x) { return ops::sum(x); };
  CHECK_THROWS_AS(grad_check(f, Tensor::full({2}, 1.0), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(grad_check(f, Tensor::full({2}, 1.0), 0.1), std::invalid_argument);
  int calls = 0;
  auto noisy = [&](const Tensor& x) { return ops::add_scalar(ops::sum(x), 1e-3 * ++calls); };
  CHECK_THROWS_AS(grad_check(noisy, Tensor::full({2}, 1.0), 1e-5), std::invalid_argument);
}

TEST_CASE("every op passes randomized gradient checks") {
  using Builder = std::function<void(std::mt19937_64&, std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    Builder build;
    std::function<Tensor(const std::vector<Tensor>&)> f;
  };
  auto rt = [](std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    return random_tensor(rng, std::move(s), lo, hi).clone(true);
  };
  std::vector<Case> cases = {
      {"matmul", [&](auto& r, auto& p) { p = {rt(r, {3, 4}), rt(r, {4, 2})}; },
       [](const auto& p) { return ops::matmul(p[0], p[1]); }},
      {"add", [&](auto& r, auto& p) { p = {rt(r, {3, 4}), rt(r, {4})}; },
       [](const auto& p) { return ops::add(p[0], p[1]); }},
      {"sub", [&](auto& r, auto& p) { p = {rt(r, {2, 3, 2}), rt(r, {3, 2})}; },
       [](const auto& p) { return ops::sub(p[0], p[1]); }},
      {"mul", [&](auto& r, auto& p) { p = {rt(r, {3, 4}), rt(r, {3, 4})}; },
       [](const auto& p) { return ops::mul(p[0], p[1]); }},
      {"div", [&](auto& r, auto& p) { p = {rt(r, {3, 4}), rt(r, {4}, 0.5, 2.0)}; },
       [](const auto& p) { return ops::div(p[0], p[1]); }},
      {"minimum", [&](auto& r, auto& p) { p = {rt(r, {5}), rt(r, {5})}; },
       [](const auto& p) { return ops::minimum(p[0], p[1]); }},
      {"maximum", [&](auto& r, auto& p) { p = {rt(r, {5}), rt(r, {5})}; },
       [](const auto& p) { return ops::maximum(p[0], p[1]); }},
      {"relu", [&](auto& r, auto& p) { p = {rt(r, {3, 5})}; },
       [](const auto& p) { return ops::relu(p[0]); }},
      {"sigmoid", [&](auto& r, auto& p) { p = {rt(r, {3, 5}, -4, 4)}; },
       [](const auto& p) { return ops::sigmoid(p[0]); }},
      {"abs", [&](auto& r, auto& p) { p = {rt(r, {6})}; },
       [](const auto& p) { return ops::abs(p[0]); }},
      {"clamp_min", [&](auto& r, auto& p) { p = {rt(r, {6})}; },
       [](const auto& p) { return ops::clamp_min(p[0], 0.1); }},
      {"logit", [&](auto& r, auto& p) { p = {rt(r, {6}, 0.05, 0.95)}; },
       [](const auto& p) { return ops::logit(p[0]); }},
      {"softmax", [&](auto& r, auto& p) { p = {rt(r, {3, 5}, -3, 3)}; },
       [](const auto& p) { return ops::softmax(p[0]); }},
      {"layernorm", [&](auto& r, auto& p) { p = {rt(r, {3, 6}), rt(r, {6}), rt(r, {6})}; },
       [](const auto& p) { return ops::layernorm(p[0], p[1], p[2]); }},
      {"linear", [&](auto& r, auto& p) { p = {rt(r, {4, 3}), rt(r, {3, 5}), rt(r, {5})}; },
       [](const auto& p) { return ops::linear(p[0], p[1], p[2]); }},
      {"transpose", [&](auto& r, auto& p) { p = {rt(r, {2, 5})}; },
       [](const auto& p) { return ops::transpose(p[0]); }},
      {"slice_cols", [&](auto& r, auto& p) { p = {rt(r, {3, 6})}; },
       [](const auto& p) { return ops::slice_cols(p[0], 1, 4); }},
      {"concat", [&](auto& r, auto& p) { p = {rt(r, {3, 2}), rt(r, {3, 1}), rt(r, {2, 3})}; },
       [](const auto& p) {
         std::vector<Tensor> cols{p[0], p[1]};
         std::vector<Tensor> rows{ops::concat_cols(cols), p[2]};
         return ops::concat_rows(rows);
       }},
      {"gather_rows", [&](auto& r, auto& p) { p = {rt(r, {4, 3})}; },
       [](const auto& p) {
         std::vector<std::size_t> idx{2, 0, 2};
         return ops::gather_rows(ops::slice_rows(p[0], 0, 4), idx);
       }},
      {"im2col", [&](auto& r, auto& p) { p = {rt(r, {5, 4, 2})}; },
       [](const auto& p) { return ops::im2col(p[0], 3, 2, 1); }},
      {"cross_entropy", [&](auto& r, auto& p) { p = {rt(r, {4, 3}, -2, 2)}; },
       [](const auto& p) {
         std::vector<std::size_t> t{0, 2, 1, 2};
         std::vector<double> w{1.0, 0.1, 0.5, 2.0};
         return ops::cross_entropy(p[0], t, w);
       }},
  };
  std::mt19937_64 rng(2024);
  for (auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor> params;
      c.build(rng, params);
      const auto seed = rng();
      worst = std::max(worst, grad_check_params([&] { return project(c.f(params), seed); }, params, 1e-6));
    }
    INFO(c.name);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("tape replay is bit-identical under a fixed seed") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto w = random_tensor(rng, {6, 4}).clone(true);
    auto b = random_tensor(rng, {4}).clone(true);
    auto x = random_tensor(rng, {5, 6});
    Tape tape;
    TapeScope scope(tape);
    auto y = ops::sum(ops::softmax(ops::relu(ops::linear(x, w, b))));
    backward(tape, y);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(y.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "dssl_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "p.bin";
  std::vector<NamedTensor> params{{"w", Tensor::from({2, 2}, {1.5, -2, 3, 4e-9})}, {"b", Tensor::from({1}, {7})}};
  save_checkpoint(path, params);

  std::ifstream is(path, std::ios::binary);
  char magic[5];
  is.read(magic, 5);
  CHECK(std::string(magic, 5) == "DSSL1");
  // u64 name length then the name
  unsigned char len[8];
  is.read(reinterpret_cast<char*>(len), 8);
  CHECK(len[0] == 1);
  CHECK(len[7] == 0);

  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].name == "w");
  CHECK(loaded[0].tensor.shape() == Shape{2, 2});
  CHECK(loaded[0].tensor[3] == 4e-9);

  std::vector<NamedTensor> target{{"w", Tensor::zeros({2, 2})}, {"b", Tensor::zeros({1})}};
  load_checkpoint_into(path, target);
  CHECK(target[1].tensor[0] == 7.0);

  std::vector<NamedTensor> wrong{{"w", Tensor::zeros({2, 3})}, {"b", Tensor::zeros({1})}};
  CHECK_THROWS_AS(load_checkpoint_into(path, wrong), std::runtime_error);
  std::filesystem::remove_all(dir);
}
