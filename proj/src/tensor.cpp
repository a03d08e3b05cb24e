#include "dssl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dssl {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  Tensor t(std::move(node));
  check_finite(t, "from");
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row, col) needs rank 2, got " + shape_str(shape()));
  return node_->data.at(row * node_->shape[1] + col);
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
  }
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
  auto node = std::make_shared<TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

void Tape::record(const std::shared_ptr<TensorNode>& node) {
  node->tape = this;
  node->tape_index = nodes_.size();
  nodes_.push_back(node);
}

bool Tape::contains(const Tensor& t) const {
  const auto& n = t.node();
  return n && n->tape == this && n->tape_index < nodes_.size() && nodes_[n->tape_index] == n;
}

void Tape::clear() {
  for (auto& n : nodes_) {
    n->tape = nullptr;
    n->inputs.clear();
    n->backward = nullptr;
  }
  nodes_.clear();
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || !contains(root)) {
    throw std::invalid_argument("backward: root tensor was not produced on this tape");
  }
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
  }
  const std::size_t last = root.node()->tape_index;
  for (std::size_t i = 0; i <= last; ++i) {
    auto& g = nodes_[i]->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
  root.node()->grad[0] = 1.0;
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& n = *nodes_[i];
    if (!n.backward) continue;
    if (std::all_of(n.grad.begin(), n.grad.end(), [](double g) { return g == 0.0; })) continue;
    n.backward(n);
  }
}

void backward(Tape& tape, const Tensor& root) { tape.backward(root); }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  Tape* tape = g_active_tape;
  const bool needs = tape != nullptr && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                       return t.requires_grad();
                     });
  if (needs) {
    node->requires_grad = true;
    node->ensure_grad();
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(fn);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in tensor " + shape_str(t.shape()));
    }
  }
}

}  // namespace dssl
