#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dssl/augment.hpp"
#include "dssl/data.hpp"
#include "dssl/loss.hpp"
#include "dssl/metrics.hpp"
#include "dssl/model.hpp"

namespace dssl {

/// theta_t <- m * theta_t + (1 - m) * theta_s, elementwise. Names and shapes
/// must match; m in [0, 1].
void ema_update(std::span<const NamedTensor> teacher, std::span<const NamedTensor> student, double momentum);

class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// One update from the parameters' accumulated gradients.
  void step(std::span<const NamedTensor> params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

struct PseudoLabel {
  std::size_t cls = 0;
  BoxCxcywh box;
  double confidence = 0.0;
  std::size_t query = 0;  // prediction slot it came from
};

struct PseudoLabelSet {
  std::vector<PseudoLabel> items;
  std::size_t teacher_step = 0;

  std::vector<Target> targets() const;
};

/// Per prediction: (max foreground softmax probability, its class).
std::vector<std::pair<double, std::size_t>> foreground_confidence(const DetectionOutput& out);

/// Indices whose confidence is >= tau, in input order.
std::vector<std::size_t> select_by_confidence(std::span<const double> confidence, double tau);

/// Keeps predictions whose foreground confidence is >= tau.
PseudoLabelSet filter_pseudo_labels(const DetectionOutput& teacher_out, double tau);

struct TrainConfig {
  ModelConfig model;
  LossWeights loss;
  AugPolicy weak = AugPolicy::weak();
  AugPolicy strong = AugPolicy::strong();
  double tau = 0.7;
  std::size_t epochs = 60;
  double lr = 1e-3;
  double lr_drop_fraction = 0.8;  // lr x0.1 from this fraction of epochs on
  std::size_t batch_size = 4;
  std::size_t unlabeled_batch_size = 4;
  std::size_t steps_per_epoch = 30;  // 0: one pass over the labeled split
  double labeled_fraction = 0.1;
  double burn_in_fraction = 0.25;
  double ema_momentum = 0.99;
  double grad_clip = 0.0;
  bool semi_supervised = true;
  bool deep_supervision = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t burn_in_epochs() const;
  std::size_t lr_drop_epoch() const;
  std::size_t epoch_steps(std::size_t labeled_count) const;
};

struct LabeledExample {
  const Image* image = nullptr;
  std::vector<Target> targets;
};

struct StepStats {
  double loss = 0.0;
  double sup_cls = 0.0, sup_reg = 0.0;
  double unsup_cls = 0.0, unsup_reg = 0.0;
  std::size_t pseudo_count = 0;
  double pseudo_confidence_sum = 0.0;
};

struct TrainState {
  Detector student;
  std::optional<Detector> teacher;
  Adam optimizer;
  std::size_t step = 0;

  TrainState(const ModelConfig& cfg, std::uint64_t seed, double lr);
  /// Starts the joint stage: the teacher becomes an exact copy of the student.
  void start_teacher();
  /// Model used for evaluation: the teacher once it exists.
  const Detector& eval_model() const { return teacher ? *teacher : student; }
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimizer step: supervised loss on strong and weak views of each
/// labeled example, plus (when a teacher exists) the pseudo-label loss on
/// strong views of the unlabeled images, then backward, Adam and EMA.
/// Augmentation draws are derived from `step_seed` per image.
StepStats training_step(TrainState& state, std::span<const LabeledExample> labeled,
                        std::span<const Image* const> unlabeled, const TrainConfig& cfg, std::uint64_t step_seed);

/// All N predictions as scored detections in pixel coordinates.
std::vector<Detection> to_detections(const DetectionOutput& out, std::size_t image_index, std::size_t width,
                                     std::size_t height);

EvalReport evaluate_model(const Detector& model, const Dataset& dataset, std::span<const std::size_t> indices,
                          std::vector<Detection>* detections = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based; 0 for none
  std::string split;      // "val" each epoch, "test" for the final row
  std::string stage;      // "burn_in" or "joint"
  EvalReport report;
  double loss = 0.0, sup_cls = 0.0, sup_reg = 0.0, unsup_cls = 0.0, unsup_reg = 0.0;
  std::size_t pseudo_count = 0;
  double pseudo_confidence = 0.0;  // mean over kept pseudo-labels
  double lr = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRecord& r);

struct TrainResult {
  std::vector<EpochRecord> history;
  EvalReport final_test;
  std::size_t best_epoch = 0;
  double best_val_map = -1.0;
  std::size_t total_pseudo_labels = 0;
};

struct TrainHooks {
  /// Called after every epoch's evaluation; `improved` marks a new best val mAP.
  std::function<void(const EpochRecord&, const TrainState&, bool improved)> on_epoch;
};

/// Burn-in on labeled data, then (when semi_supervised) the joint stage with
/// an EMA teacher. Evaluates on val each epoch and on test at the end.
TrainResult full_train(const Dataset& dataset, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace dssl
