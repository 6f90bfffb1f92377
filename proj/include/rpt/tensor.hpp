#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rpt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Numeric precision of every op output. Values are always held in doubles;
// Standard rounds each produced value to the nearest 32-bit float, Wide keeps
// the full 64 bits (used by gradient checks).
enum class Precision { Standard, Wide };

Precision precision();
void set_precision(Precision p);

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

// Finite-value sweep after every op. On by default in debug builds.
bool debug_checks();
void set_debug_checks(bool enabled);

class DebugChecksScope {
 public:
  explicit DebugChecksScope(bool enabled);
  ~DebugChecksScope();
  DebugChecksScope(const DebugChecksScope&) = delete;
  DebugChecksScope& operator=(const DebugChecksScope&) = delete;

 private:
  bool saved_;
};

// Disables graph recording (outputs never require grad) for its lifetime.
bool grad_enabled();

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};

double round_to_precision(double v);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  // Direct write access, for optimizers and checkpoint loading only.
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  // New leaf holding a copy of the values, disconnected from any graph.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Recorded operations reachable from one output, in topological order
// (inputs precede the operations consuming them).
class Graph {
 public:
  static Graph trace(const Tensor& output);
  const std::vector<Node*>& order() const { return order_; }

 private:
  std::vector<Node*> order_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively.
void backward(const Tensor& loss);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Central finite differences against the analytic gradient of `f` with respect
// to every coordinate of `inputs` (leaf tensors with requires_grad). The
// analytic pass runs at the ambient precision, the differences always in Wide.
// Relative error is |a - n| / max(|a|, |n|, abs_floor).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           double eps = 1e-6, double abs_floor = 1e-6);

}  // namespace rpt
