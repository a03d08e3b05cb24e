#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dssl {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes do not conform; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or Inf reaches an operation.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class Tape;
struct TensorNode;

using BackwardFn = std::function<void(TensorNode& self)>;

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data once requires_grad is set
  bool requires_grad = false;

  // Set only for nodes recorded on a tape.
  const Tape* tape = nullptr;
  std::size_t tape_index = 0;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return tape == nullptr; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major float64 array. Copies share storage; use clone() for a
/// deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// In-place access, intended for optimizers and initializers on leaves.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();

  Tensor clone(bool requires_grad) const;
  Tensor detach() const { return clone(false); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of differentiable operations. Every input of node i is a
/// leaf or was produced by some node j < i, so reverse order is a valid
/// backward schedule.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const std::shared_ptr<TensorNode>& node);
  std::size_t size() const { return nodes_.size(); }
  bool contains(const Tensor& t) const;
  void clear();

  /// Populates grads of every requires_grad leaf reachable from `root`.
  /// Leaf grads accumulate across calls; intermediate grads are rebuilt.
  void backward(const Tensor& root);

 private:
  std::vector<std::shared_ptr<TensorNode>> nodes_;
};

/// Makes `tape` the recording target for operations on this thread until
/// destruction. Nests; the previous tape is restored.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording on this thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

void backward(Tape& tape, const Tensor& root);

/// Builds the result of an operation and records it on the active tape when
/// any input requires a gradient. `fn` reads self.grad and accumulates into
/// the grads of self.inputs that require them.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn fn);

/// Throws NumericError if any value of `t` is NaN or infinite.
void check_finite(const Tensor& t, const char* op);

}  // namespace dssl
