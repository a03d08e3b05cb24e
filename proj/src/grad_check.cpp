#include "dssl/grad_check.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <cstring>

namespace dssl {

namespace {

void check_eps(double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-2]");
}

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  Tensor y = f();
  return y.item();
}

}  // namespace

double grad_check_params(const std::function<Tensor()>& f, std::span<Tensor> params, double eps,
                         std::size_t max_coords, std::uint64_t seed) {
  check_eps(eps);
  const double y0 = eval_scalar(f);
  const double y1 = eval_scalar(f);
  if (std::memcmp(&y0, &y1, sizeof(double)) != 0) {
    throw std::invalid_argument("grad_check: function is not deterministic at the probe point");
  }

  std::vector<bool> restore(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    restore[i] = params[i].requires_grad();
    params[i].set_requires_grad(true);
    params[i].zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f();
    if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    tape.backward(y);
    for (auto& p : params) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
      p.zero_grad();
    }
    tape.clear();
  }

  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords != 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (auto c : coords) {
      const double orig = data[c];
      data[c] = orig + eps;
      const double fp = eval_scalar(f);
      data[c] = orig - eps;
      const double fm = eval_scalar(f);
      data[c] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][c];
      worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].set_requires_grad(restore[i]);
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at, double eps) {
  Tensor x = at.clone(true);
  std::array<Tensor, 1> params{x};
  return grad_check_params([&] { return f(x); }, params, eps);
}

}  // namespace dssl
