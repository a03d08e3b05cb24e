#include "dssl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "dssl/ops.hpp"
#include "dssl/rng.hpp"

namespace dssl {

namespace {

enum Stream : std::uint64_t {
  kModelInit = 1,
  kShuffle,
  kUnlabeledCycle,
  kStep,
  kLabeledStrong,
  kLabeledWeak,
  kUnlabeledWeak,
  kUnlabeledStrong,
};

LossTerms image_loss(const Detector& model, const Image& image, const TargetSet& targets, const TrainConfig& cfg) {
  if (!cfg.deep_supervision) return match_and_loss(model.forward(image), targets, cfg.loss);
  LossTerms sum;
  bool first = true;
  for (const auto& out : model.forward_all_layers(image)) {
    auto t = match_and_loss(out, targets, cfg.loss);
    sum = first ? t : LossTerms{ops::add(sum.cls, t.cls), ops::add(sum.reg, t.reg)};
    first = false;
  }
  return sum;
}

std::vector<Target> clip_to_unit(std::span<const Target> in) {
  std::vector<Target> out;
  for (const auto& t : in) {
    Box b = to_corners(t.box);
    b = {std::clamp(b.x1, 0.0, 1.0), std::clamp(b.y1, 0.0, 1.0), std::clamp(b.x2, 0.0, 1.0), std::clamp(b.y2, 0.0, 1.0)};
    if (b.width() > 0.0 && b.height() > 0.0) out.push_back({t.cls, to_cxcywh(b)});
  }
  return out;
}

double sum_terms(std::span<const LossTerms> terms, bool cls) {
  double s = 0.0;
  for (const auto& t : terms) s += cls ? t.cls.item() : t.reg.item();
  return s;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void ema_update(std::span<const NamedTensor> teacher, std::span<const NamedTensor> student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("ema_update: momentum must lie in [0, 1]");
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].name != student[i].name || teacher[i].tensor.shape() != student[i].tensor.shape()) {
      throw std::invalid_argument("ema_update: parameter '" + teacher[i].name + "' does not match '" +
                                  student[i].name + "'");
    }
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Tensor t = teacher[i].tensor;
    auto td = t.mutable_data();
    auto sd = student[i].tensor.data();
    for (std::size_t k = 0; k < td.size(); ++k) td[k] = momentum * td[k] + (1.0 - momentum) * sd[k];
  }
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<const NamedTensor> params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("adam: parameter set changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    auto data = p.mutable_data();
    auto grad = p.grad();
    if (grad.size() != data.size()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * grad[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * grad[k] * grad[k];
      data[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

std::vector<Target> PseudoLabelSet::targets() const {
  std::vector<Target> out;
  for (const auto& p : items) out.push_back({p.cls, p.box});
  return out;
}

std::vector<std::pair<double, std::size_t>> foreground_confidence(const DetectionOutput& out) {
  Tensor probs;
  {
    NoGradScope guard;
    probs = ops::softmax(out.logits);
  }
  const std::size_t n = out.size(), c1 = out.logits.dim(1);
  std::vector<std::pair<double, std::size_t>> res(n, {0.0, 0});
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c + 1 < c1; ++c)
      if (c == 0 || probs.at(j, c) > res[j].first) res[j] = {probs.at(j, c), c};
  return res;
}

std::vector<std::size_t> select_by_confidence(std::span<const double> confidence, double tau) {
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < confidence.size(); ++j)
    if (confidence[j] >= tau) keep.push_back(j);
  return keep;
}

PseudoLabelSet filter_pseudo_labels(const DetectionOutput& teacher_out, double tau) {
  PseudoLabelSet set;
  const auto conf = foreground_confidence(teacher_out);
  std::vector<double> scores;
  for (const auto& c : conf) scores.push_back(c.first);
  const auto boxes = teacher_out.boxes.data();
  for (std::size_t j : select_by_confidence(scores, tau)) {
    set.items.push_back(
        {conf[j].second, {boxes[j * 4], boxes[j * 4 + 1], boxes[j * 4 + 2], boxes[j * 4 + 3]}, conf[j].first, j});
  }
  return set;
}

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  weak.validate();
  strong.validate();
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("train config: tau must lie in (0, 1)");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw std::invalid_argument("train config: labeled_fraction must lie in (0, 1]");
  if (epochs == 0 || batch_size == 0) throw std::invalid_argument("train config: epochs and batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (!(burn_in_fraction >= 0.0 && burn_in_fraction <= 1.0))
    throw std::invalid_argument("train config: burn_in_fraction must lie in [0, 1]");
  if (!(lr_drop_fraction >= 0.0 && lr_drop_fraction <= 1.0))
    throw std::invalid_argument("train config: lr_drop_fraction must lie in [0, 1]");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0))
    throw std::invalid_argument("train config: ema_momentum must lie in [0, 1]");
}

std::size_t TrainConfig::burn_in_epochs() const {
  return static_cast<std::size_t>(std::llround(burn_in_fraction * static_cast<double>(epochs)));
}

std::size_t TrainConfig::epoch_steps(std::size_t labeled_count) const {
  return steps_per_epoch ? steps_per_epoch : (labeled_count + batch_size - 1) / batch_size;
}

std::size_t TrainConfig::lr_drop_epoch() const {
  return static_cast<std::size_t>(std::llround(lr_drop_fraction * static_cast<double>(epochs)));
}

TrainState::TrainState(const ModelConfig& cfg, std::uint64_t seed, double lr) : student(cfg, seed), optimizer(lr) {}

void TrainState::start_teacher() { teacher.emplace(student.clone(false)); }

StepStats training_step(TrainState& state, std::span<const LabeledExample> labeled,
                        std::span<const Image* const> unlabeled, const TrainConfig& cfg, std::uint64_t step_seed) {
  const auto params = state.student.parameters();
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  AugPolicy strong_policy = cfg.strong, weak_policy = cfg.weak;
  strong_policy.min_side = weak_policy.min_side = std::max(cfg.strong.min_side, cfg.model.min_image_side());
  StepStats stats;
  std::vector<LossTerms> strong_terms, weak_terms, unsup_terms;
  const std::size_t n_queries = cfg.model.num_queries;
  try {
    Tape tape;
    TapeScope scope(tape);
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      std::mt19937_64 rs(derive_seed(step_seed, {kLabeledStrong, i}));
      const auto s = apply(strong_policy, *labeled[i].image, labeled[i].targets, rs);
      strong_terms.push_back(image_loss(state.student, s.image, {s.targets, TargetOrigin::ground_truth}, cfg));
      std::mt19937_64 rw(derive_seed(step_seed, {kLabeledWeak, i}));
      const auto w = apply(weak_policy, *labeled[i].image, labeled[i].targets, rw);
      weak_terms.push_back(image_loss(state.student, w.image, {w.targets, TargetOrigin::ground_truth}, cfg));
    }
    if (state.teacher) {
      for (std::size_t j = 0; j < unlabeled.size(); ++j) {
        std::mt19937_64 rw(derive_seed(step_seed, {kUnlabeledWeak, j}));
        const auto weak = apply(weak_policy, *unlabeled[j], {}, rw);
        PseudoLabelSet pseudo;
        {
          NoGradScope guard;
          pseudo = filter_pseudo_labels(state.teacher->forward(weak.image), cfg.tau);
        }
        pseudo.teacher_step = state.step;
        stats.pseudo_count += pseudo.items.size();
        for (const auto& p : pseudo.items) stats.pseudo_confidence_sum += p.confidence;
        const auto original = clip_to_unit(invert_boxes(weak.record, pseudo.targets()));
        std::mt19937_64 rs(derive_seed(step_seed, {kUnlabeledStrong, j}));
        const auto strong = apply(strong_policy, *unlabeled[j], original, rs);
        TargetSet targets{strong.targets, TargetOrigin::pseudo};
        if (targets.empty()) continue;  // nothing confident: no unsupervised term
        if (targets.size() > n_queries) targets.items.resize(n_queries);
        unsup_terms.push_back(image_loss(state.student, strong.image, targets, cfg));
      }
    }
    const Tensor total = total_loss(strong_terms, weak_terms, unsup_terms, cfg.loss);
    stats.loss = total.item();
    if (!std::isfinite(stats.loss)) throw NumericError("non-finite total loss");
    tape.backward(total);
  } catch (const NumericError& e) {
    throw TrainingError("training step " + std::to_string(state.step) + " aborted: " + e.what() +
                        " (labeled batch " + std::to_string(labeled.size()) + ", unlabeled batch " +
                        std::to_string(unlabeled.size()) + ", lr " + fmt(state.optimizer.lr()) + ")");
  }
  stats.sup_cls = sum_terms(strong_terms, true) + sum_terms(weak_terms, true);
  stats.sup_reg = sum_terms(strong_terms, false) + sum_terms(weak_terms, false);
  stats.unsup_cls = sum_terms(unsup_terms, true);
  stats.unsup_reg = sum_terms(unsup_terms, false);

  for (const auto& p : params)
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw TrainingError("training step " + std::to_string(state.step) +
                                                 " aborted: non-finite gradient in " + p.name);
  clip_grad_norm(params, cfg.grad_clip);
  state.optimizer.step(params);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  ++state.step;
  if (state.teacher) ema_update(state.teacher->parameters(), params, cfg.ema_momentum);
  return stats;
}

std::vector<Detection> to_detections(const DetectionOutput& out, std::size_t image_index, std::size_t width,
                                     std::size_t height) {
  const auto conf = foreground_confidence(out);
  const auto boxes = out.boxes.data();
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  std::vector<Detection> dets;
  for (std::size_t j = 0; j < conf.size(); ++j) {
    Box b = to_corners({boxes[j * 4], boxes[j * 4 + 1], boxes[j * 4 + 2], boxes[j * 4 + 3]}, w, h);
    b = {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w), std::clamp(b.y2, 0.0, h)};
    if (b.width() > 0.0 && b.height() > 0.0) dets.push_back({image_index, conf[j].second, b, conf[j].first});
  }
  return dets;
}

EvalReport evaluate_model(const Detector& model, const Dataset& dataset, std::span<const std::size_t> indices,
                          std::vector<Detection>* detections) {
  NoGradScope guard;
  std::vector<Detection> dets;
  std::vector<std::vector<Annotation>> anns;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = dataset.images.at(indices[k]);
    auto d = to_detections(model.forward(img.image), k, img.width, img.height);
    dets.insert(dets.end(), d.begin(), d.end());
    anns.push_back(img.annotations);
  }
  const auto report = evaluate(dets, anns, model.config().num_classes);
  if (detections) {
    for (auto& d : dets) d.image = indices[d.image];
    *detections = std::move(dets);
  }
  return report;
}

std::string metrics_csv_header() {
  return "epoch,split,stage,map,ap50,ap75,ar100,precision50,recall50,f1_50,loss,sup_cls,sup_reg,unsup_cls,unsup_reg,"
         "pseudo_count,pseudo_confidence,lr\n";
}

std::string metrics_csv_row(const EpochRecord& r) {
  const auto& t = r.report.thresholds;
  const ThresholdStats at50 = t.empty() ? ThresholdStats{} : t.front();
  std::string s = std::to_string(r.epoch) + "," + r.split + "," + r.stage;
  for (double v : {r.report.map, r.report.ap50, r.report.ap75, r.report.ar100, at50.precision, at50.recall, at50.f1,
                   r.loss, r.sup_cls, r.sup_reg, r.unsup_cls, r.unsup_reg})
    s += "," + fmt(v);
  s += "," + std::to_string(r.pseudo_count) + "," + fmt(r.pseudo_confidence);
  char lr[32];
  std::snprintf(lr, sizeof lr, "%.3g", r.lr);
  return s + "," + lr + "\n";
}

namespace {

// Endless stream over a pool of indices; each pass is a fresh permutation.
class IndexCycle {
 public:
  IndexCycle(std::vector<std::size_t> pool, std::uint64_t seed) : pool_(std::move(pool)), seed_(seed) {}

  std::size_t next() {
    if (pos_ == order_.size()) {
      order_ = pool_;
      std::mt19937_64 rng(derive_seed(seed_, {pass_++}));
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng() % i]);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> pool_, order_;
  std::uint64_t seed_;
  std::size_t pos_ = 0, pass_ = 0;
};

}  // namespace

TrainResult full_train(const Dataset& dataset, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const auto labeled = dataset.indices(Split::labeled);
  if (labeled.empty()) throw std::invalid_argument("full_train: the labeled split is empty");
  const auto unlabeled = cfg.semi_supervised ? dataset.indices(Split::unlabeled) : std::vector<std::size_t>{};
  const auto val = dataset.indices(Split::val);
  const auto test = dataset.indices(Split::test);

  std::vector<LabeledExample> examples(dataset.size());
  for (auto i : labeled) examples[i] = {&dataset.images[i].image, targets_of(dataset.images[i])};

  TrainState state(cfg.model, derive_seed(cfg.seed, {kModelInit}), cfg.lr);
  TrainResult result;
  const std::size_t steps_per_epoch = cfg.epoch_steps(labeled.size());
  const std::size_t burn_in = cfg.burn_in_epochs();
  IndexCycle labeled_cycle(labeled, derive_seed(cfg.seed, {kShuffle}));
  IndexCycle unlabeled_cycle(unlabeled, derive_seed(cfg.seed, {kUnlabeledCycle}));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch == burn_in && !unlabeled.empty()) state.start_teacher();
    state.optimizer.set_lr(epoch >= cfg.lr_drop_epoch() ? cfg.lr * 0.1 : cfg.lr);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.split = "val";
    rec.stage = state.teacher ? "joint" : "burn_in";
    rec.lr = state.optimizer.lr();
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<LabeledExample> batch;
      std::vector<std::size_t> batch_ids, unlabeled_ids;
      for (std::size_t k = 0; k < std::min(cfg.batch_size, labeled.size()); ++k) {
        batch_ids.push_back(labeled_cycle.next());
        batch.push_back(examples[batch_ids.back()]);
      }
      std::vector<const Image*> unl;
      if (state.teacher) {
        for (std::size_t k = 0; k < cfg.unlabeled_batch_size; ++k) {
          unlabeled_ids.push_back(unlabeled_cycle.next());
          unl.push_back(&dataset.images[unlabeled_ids.back()].image);
        }
      }
      StepStats st;
      try {
        st = training_step(state, batch, unl, cfg, derive_seed(cfg.seed, {kStep, state.step}));
      } catch (const TrainingError& e) {
        auto ids = [&](const std::vector<std::size_t>& v) {
          std::string out;
          for (auto i : v) out += (out.empty() ? "" : " ") + std::to_string(dataset.images[i].id);
          return "[" + out + "]";
        };
        throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) + ", seed " +
                            std::to_string(cfg.seed) + ", labeled image ids " + ids(batch_ids) +
                            ", unlabeled image ids " + ids(unlabeled_ids) + ")");
      }
      rec.loss += st.loss;
      rec.sup_cls += st.sup_cls;
      rec.sup_reg += st.sup_reg;
      rec.unsup_cls += st.unsup_cls;
      rec.unsup_reg += st.unsup_reg;
      rec.pseudo_count += st.pseudo_count;
      rec.pseudo_confidence += st.pseudo_confidence_sum;
    }
    const double steps = static_cast<double>(steps_per_epoch);
    rec.loss /= steps;
    rec.sup_cls /= steps;
    rec.sup_reg /= steps;
    rec.unsup_cls /= steps;
    rec.unsup_reg /= steps;
    rec.pseudo_confidence = rec.pseudo_count ? rec.pseudo_confidence / static_cast<double>(rec.pseudo_count) : 0.0;
    result.total_pseudo_labels += rec.pseudo_count;
    if (!val.empty()) rec.report = evaluate_model(state.eval_model(), dataset, val);
    const bool improved = !val.empty() && rec.report.map > result.best_val_map;
    if (improved) {
      result.best_val_map = rec.report.map;
      result.best_epoch = rec.epoch;
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, state, improved);
  }

  EpochRecord final_rec;
  final_rec.epoch = cfg.epochs;
  final_rec.split = "test";
  final_rec.stage = state.teacher ? "joint" : "burn_in";
  final_rec.lr = state.optimizer.lr();
  if (!test.empty()) final_rec.report = evaluate_model(state.eval_model(), dataset, test);
  result.final_test = final_rec.report;
  result.history.push_back(final_rec);
  if (hooks.on_epoch) hooks.on_epoch(final_rec, state, false);
  return result;
}

}  // namespace dssl
