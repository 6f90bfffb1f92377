#include "rpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "rpt/errors.hpp"

namespace rpt {

namespace {

thread_local Precision g_precision = Precision::Standard;
#ifdef NDEBUG
thread_local bool g_debug_checks = false;
#else
thread_local bool g_debug_checks = true;
#endif
thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }
PrecisionScope::PrecisionScope(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

bool debug_checks() { return g_debug_checks; }
void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
DebugChecksScope::DebugChecksScope(bool enabled) : saved_(g_debug_checks) { g_debug_checks = enabled; }
DebugChecksScope::~DebugChecksScope() { g_debug_checks = saved_; }

bool grad_enabled() { return g_grad_enabled; }
NoGradScope::NoGradScope() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = saved_; }

double round_to_precision(double v) {
  return g_precision == Precision::Standard ? static_cast<double>(static_cast<float>(v)) : v;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (values.size() != numel(shape)) {
    throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  for (auto& v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("non-finite value at tensor creation");
    v = round_to_precision(v);
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({1}, {v}, requires_grad); }

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank()) throw AxisError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->inputs.empty()) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  return Tensor(std::move(n));
}

Graph Graph::trace(const Tensor& output) {
  Graph g;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any tensor requiring grad");
  auto graph = Graph::trace(loss);
  loss.node()->accumulate(0, 1.0);
  const auto& order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double eps,
                           double abs_floor) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ContractError("grad_check eps must lie in [1e-6, 1e-3]");
  for (auto& t : inputs) t.zero_grad();
  {
    Tensor loss = f();
    backward(loss);
  }
  GradCheckResult r;
  NoGradScope no_grad;
  PrecisionScope wide(Precision::Wide);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.size(), 0.0);
    auto vals = x.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double up = f().item();
      vals[i] = orig - eps;
      const double down = f().item();
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++r.coordinates;
      if (err > r.max_relative_error) {
        r.max_relative_error = err;
        r.worst_input = t;
        r.worst_index = i;
        r.analytic = analytic[i];
        r.numeric = numeric;
      }
    }
  }
  return r;
}

}  // namespace rpt
