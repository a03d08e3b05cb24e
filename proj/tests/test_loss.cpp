#include <cmath>
#include <random>

#include "doctest.h"
#include "dssl/grad_check.hpp"
#include "dssl/loss.hpp"
#include "dssl/ops.hpp"
#include "support.hpp"

using namespace dssl;
using dssl::testing::random_tensor;

namespace {

DetectionOutput random_prediction(std::mt19937_64& rng, std::size_t n, std::size_t classes) {
  DetectionOutput out;
  out.logits = random_tensor(rng, {n, classes + 1}, -2.0, 2.0, true);
  out.boxes = random_tensor(rng, {n, 4}, 0.1, 0.9, true);
  return out;
}

TargetSet random_targets(std::mt19937_64& rng, std::size_t k, std::size_t classes) {
  std::uniform_real_distribution<double> u(0.2, 0.8), s(0.05, 0.3);
  TargetSet t;
  for (std::size_t i = 0; i < k; ++i) t.items.push_back({rng() % classes, {u(rng), u(rng), s(rng), s(rng)}});
  return t;
}

// Straightforward re-implementation on plain doubles.
double reference_loss(const DetectionOutput& p, const TargetSet& t, const MatchResult& m, const LossWeights& w) {
  const std::size_t n = p.size(), c1 = p.logits.dim(1);
  double total_cls = 0.0, total_reg = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t cls = c1 - 1;
    double weight = w.noobj_weight;
    for (std::size_t k = 0; k < t.size(); ++k)
      if (m.assignment[k] == j) {
        cls = t.items[k].cls;
        weight = 1.0;
      }
    double mx = -1e300;
    for (std::size_t c = 0; c < c1; ++c) mx = std::max(mx, p.logits.at(j, c));
    double z = 0.0;
    for (std::size_t c = 0; c < c1; ++c) z += std::exp(p.logits.at(j, c) - mx);
    total_cls += weight * -(p.logits.at(j, cls) - mx - std::log(z));
  }
  for (std::size_t k = 0; k < t.size(); ++k) {
    const std::size_t j = m.assignment[k];
    const BoxCxcywh b{p.boxes.at(j, 0), p.boxes.at(j, 1), p.boxes.at(j, 2), p.boxes.at(j, 3)};
    total_reg += box_cost(b, t.items[k].box, w.box);
  }
  return w.alpha_reg * total_reg + w.alpha_cls * total_cls;
}

}  // namespace

TEST_CASE("perfect prediction has zero loss") {
  DetectionOutput p;
  p.logits = Tensor::from({3, 2}, {800, 0, 0, 800, 0, 800});
  p.boxes = Tensor::from({3, 4}, {0.5, 0.5, 0.2, 0.3, 0.3, 0.3, 0.1, 0.1, 0.7, 0.7, 0.1, 0.1});
  TargetSet t;
  t.items = {{0, {0.5, 0.5, 0.2, 0.3}}};
  MatchResult m;
  auto terms = match_and_loss(p, t, {}, &m);
  CHECK(m.assignment == std::vector<std::size_t>{0});
  CHECK(terms.cls.item() == doctest::Approx(0.0));
  CHECK(terms.reg.item() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("empty target set with uniform logits") {
  const std::size_t n = 30;
  DetectionOutput p;
  p.logits = Tensor::zeros({n, 2});
  p.boxes = Tensor::full({n, 4}, 0.5);
  auto terms = match_and_loss(p, TargetSet{}, {});
  CHECK(terms.cls.item() == doctest::Approx(n * 0.1 * std::log(2.0)).epsilon(1e-14));
  CHECK(terms.reg.item() == 0.0);
}

TEST_CASE("loss matches an independent implementation") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t classes = 1 + rng() % 3, n = 4 + rng() % 6, k = rng() % 5;
    auto p = random_prediction(rng, n, classes);
    auto t = random_targets(rng, k, classes);
    LossWeights w;
    MatchResult m;
    auto terms = match_and_loss(p, t, w, &m);
    CHECK(terms.weighted(w).item() == doctest::Approx(reference_loss(p, t, m, w)).epsilon(1e-12));
    CHECK(terms.cls.item() >= 0.0);
    CHECK(terms.reg.item() >= 0.0);
  }
}

TEST_CASE("loss gradient with fixed assignment matches finite differences") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_prediction(rng, 6, 2);
    auto t = random_targets(rng, 1 + rng() % 4, 2);
    MatchResult m;
    match_and_loss(p, t, {}, &m);
    std::vector<Tensor> leaves{p.logits, p.boxes};
    const double err = grad_check_params([&] { return hungarian_loss(p, t, m).weighted({}); }, leaves, 1e-6);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("weighted terms and total loss") {
  LossTerms terms{Tensor::scalar(1.0), Tensor::scalar(0.5)};
  CHECK(terms.weighted({}).item() == 6.0);
  const std::vector<LossTerms> sup{terms}, weak{terms}, none;
  CHECK(total_loss(sup, weak, none).item() == 12.0);
  CHECK(total_loss(none, none, none).item() == 0.0);
  LossTerms doubled{Tensor::scalar(2.0), Tensor::scalar(1.0)};
  const std::vector<LossTerms> sup2{doubled}, weak2{doubled}, unl2{doubled};
  const std::vector<LossTerms> unl{terms};
  CHECK(total_loss(sup2, weak2, unl2).item() == 2.0 * total_loss(sup, weak, unl).item());
  LossWeights bad;
  bad.noobj_weight = -1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("full model loss gradient on a tiny image") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.pyramid_levels = 1;
  cfg.num_queries = 3;
  cfg.ffn_dim = 8;
  cfg.stem_channels1 = 2;
  cfg.stem_channels2 = 4;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  Detector model(cfg, 33);
  std::mt19937_64 rng(33);
  // Jitter every parameter: zero-initialised offsets put samples exactly on
  // grid lines, where bilinear interpolation has a kink.
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (auto& p : model.parameters())
    for (auto& v : p.tensor.mutable_data()) v += jitter(rng);
  Image img(32, 32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& px : img.pixels) px = u(rng);
  auto t = random_targets(rng, 2, 1);
  MatchResult m;
  match_and_loss(model.forward(img), t, {}, &m);
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  const double err =
      grad_check_params([&] { return hungarian_loss(model.forward(img), t, m).weighted({}); }, params, 1e-6, 400, 5);
  CHECK(err < 1e-3);
}

TEST_CASE("every parameter receives a finite gradient") {
  ModelConfig cfg;
  cfg.num_queries = 10;
  Detector model(cfg, 34);
  std::mt19937_64 rng(34);
  Tape tape;
  TapeScope scope(tape);
  Tensor total = Tensor::scalar(0.0);
  for (int b = 0; b < 2; ++b) {
    Image img(64, 64);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& px : img.pixels) px = u(rng);
    auto terms = match_and_loss(model.forward(img), random_targets(rng, 3, 1));
    total = ops::add(total, terms.weighted({}));
  }
  tape.backward(total);
  for (const auto& p : model.parameters()) {
    INFO(p.name);
    bool finite = true, nonzero = false;
    for (double g : p.tensor.grad()) {
      finite = finite && std::isfinite(g);
      nonzero = nonzero || g != 0.0;
    }
    CHECK(finite);
    // Zero-initialised offset/logit projections and final box layer block
    // these paths at initialisation.
    const bool shadowed = p.name == "level_embed" || p.name.starts_with("box_head0") || p.name.starts_with("box_head1");
    if (!shadowed) CHECK(nonzero);
  }
}
