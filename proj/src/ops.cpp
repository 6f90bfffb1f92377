#include "rpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rpt/errors.hpp"

namespace rpt {

namespace {

using NodePtr = std::shared_ptr<Node>;

Tensor make(Shape shape, std::vector<double> value, const char* op, std::vector<NodePtr> inputs,
            std::function<void(Node&)> bw) {
  for (auto& v : value) v = round_to_precision(v);
  if (debug_checks()) {
    for (double v : value) {
      if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in->requires_grad;
  }
  if (any) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
  }
}

// Elementwise unary op; `deriv(x, y)` gives dy/dx.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto xs = x.values();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make(x.shape(), std::move(out), op, {x.node()}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, "scale", [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(x, "add_scalar", [offset](double v) { return v + offset; },
               [](double, double) { return 1.0; });
}

Tensor gate(const Tensor& x, const Tensor& g) {
  if (g.size() != 1) throw DimensionError("gate: gate must hold one value, got " + to_string(g.shape()));
  const double l = g[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = l * x[i];
  return make(x.shape(), std::move(out), "gate", {x.node(), g.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    Node& l = *self.inputs[1];
    if (in.requires_grad) {
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * l.value[0];
    }
    if (l.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * in.value[i];
      l.accumulate(0, acc);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

Tensor abs(const Tensor& x) {
  return unary(x, "abs", [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
  const auto xs = x.values();
  const double s = std::accumulate(xs.begin(), xs.end(), 0.0);
  return make({1}, {s}, "sum", {x.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto xs = x.values();
  const double n = static_cast<double>(xs.size());
  const double s = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  return make({1}, {s}, "mean", {x.node()}, [n](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

Tensor mean_over_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& shape = x.shape();
  std::vector<bool> reduced(shape.size(), false);
  for (auto a : axes) {
    if (a >= shape.size()) {
      throw AxisError("mean_over_axes: axis " + std::to_string(a) + " out of range for " + to_string(shape));
    }
    if (reduced[a]) throw AxisError("mean_over_axes: axis " + std::to_string(a) + " repeated");
    reduced[a] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) {
      count *= shape[d];
    } else {
      out_shape.push_back(shape[d]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Map every input element to its output slot.
  std::vector<std::size_t> target(x.size());
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (!reduced[d]) o = o * shape[d] + idx[d];
    }
    target[flat] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(numel(out_shape), 0.0);
  for (std::size_t i = 0; i < target.size(); ++i) out[target[i]] += x[i];
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& v : out) v *= inv;
  return make(std::move(out_shape), std::move(out), "mean_over_axes", {x.node()},
              [target = std::move(target), inv](Node& self) {
                auto& g = self.inputs[0]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[target[i]] * inv;
              });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw AxisError("softmax: axis out of range for " + to_string(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  const std::size_t len = shape[axis];
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x[base];
      for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, x[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(x[base + t * inner] - mx);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) out[base + t * inner] /= z;
    }
  }
  return make(shape, std::move(out), "softmax", {x.node()}, [outer, inner, len](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t t = 0; t < len; ++t) dot += self.grad[base + t * inner] * y[base + t * inner];
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = base + t * inner;
          g[i] += y[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make(std::move(shape), std::move(out), "reshape", {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), p = a.extent(1), n = b.extent(1);
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = av[i * p + k];
      if (aik == 0.0) continue;
      const double* brow = &bv[k * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += aik * brow[j];
    }
  }
  return make({m, n}, std::move(out), "matmul", {a.node(), b.node()}, [m, p, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    const auto& G = self.grad;
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < p; ++k) {
          double acc = 0.0;
          const double* brow = &B.value[k * n];
          const double* grow = &G[i * n];
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * p + k] += acc;
        }
      }
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &G[i * n];
        for (std::size_t k = 0; k < p; ++k) {
          const double aik = A.value[i * p + k];
          if (aik == 0.0) continue;
          double* gbrow = &gb[k * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.extent(0), c = x.extent(1);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make({c, r}, std::move(out), "transpose", {x.node()}, [r, c](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t m = bias.size();
  if (bias.rank() != 1 || x.shape().back() != m) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % m];
  return make(x.shape(), std::move(out), "add_bias", {x.node(), bias.node()}, [m](Node& self) {
    Node& in = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (in.requires_grad) {
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % m] += self.grad[i];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() < 1 || count == 0 || start + count > x.extent(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + to_string(x.shape()));
  }
  const std::size_t row = x.size() / x.extent(0);
  Shape shape = x.shape();
  shape[0] = count;
  std::vector<double> out(x.values().begin() + start * row, x.values().begin() + (start + count) * row);
  const std::size_t offset = start * row;
  return make(std::move(shape), std::move(out), "slice_rows", {x.node()}, [offset](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t r = x.extent(0), c = x.extent(1);
  if (count == 0 || start + count > c) throw DimensionError("slice_cols: columns out of range for " + to_string(x.shape()));
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * c + start + j];
  return make({r, count}, std::move(out), "slice_cols", {x.node()}, [r, c, start, count](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + start + j] += self.grad[i * count + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> offsets;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DimensionError("concat_rows: part " + to_string(p.shape()) + " does not match " +
                           to_string(parts[0].shape()));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    rows += p.extent(0);
    inputs.push_back(p.node());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make(std::move(shape), std::move(out), "concat_rows", std::move(inputs),
              [offsets = std::move(offsets)](Node& self) {
                for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                  Node& in = *self.inputs[k];
                  if (!in.requires_grad) continue;
                  auto& g = in.grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
                }
              });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts[0].extent(0);
  std::size_t c = 0;
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.extent(0) != r) {
      throw DimensionError("concat_cols: part " + to_string(p.shape()) + " does not match " +
                           to_string(parts[0].shape()));
    }
    widths.push_back(p.extent(1));
    c += p.extent(1);
    inputs.push_back(p.node());
  }
  std::vector<double> out(r * c);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * c + col + j] = parts[k][i * w + j];
    col += w;
  }
  return make({r, c}, std::move(out), "concat_cols", std::move(inputs),
              [widths = std::move(widths), r, c](Node& self) {
                std::size_t col = 0;
                for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                  Node& in = *self.inputs[k];
                  const std::size_t w = widths[k];
                  if (in.requires_grad) {
                    auto& g = in.grad_buffer();
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * c + col + j];
                  }
                  col += w;
                }
              });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t w = x.shape().back();
  if (gamma.size() != w || beta.size() != w) {
    throw DimensionError("layer_norm: parameters of width " + std::to_string(gamma.size()) + " for input " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.size() / w;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x.values()[r * w];
    double mu = 0.0;
    for (std::size_t j = 0; j < w; ++j) mu += xr[j];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(w);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < w; ++j) {
      xhat[r * w + j] = (xr[j] - mu) * inv_std[r];
      out[r * w + j] = xhat[r * w + j] * gamma[j] + beta[j];
    }
  }
  return make(x.shape(), std::move(out), "layer_norm", {x.node(), gamma.node(), beta.node()},
              [xhat = std::move(xhat), inv_std = std::move(inv_std), w, rows](Node& self) {
                Node& in = *self.inputs[0];
                Node& ga = *self.inputs[1];
                Node& be = *self.inputs[2];
                const auto& G = self.grad;
                if (ga.requires_grad || be.requires_grad) {
                  auto& gg = ga.grad_buffer();
                  auto& gb = be.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j) {
                      gg[j] += G[r * w + j] * xhat[r * w + j];
                      gb[j] += G[r * w + j];
                    }
                }
                if (in.requires_grad) {
                  auto& gx = in.grad_buffer();
                  const double n = static_cast<double>(w);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < w; ++j) {
                      const double d = G[r * w + j] * ga.value[j];
                      s1 += d;
                      s2 += d * xhat[r * w + j];
                    }
                    for (std::size_t j = 0; j < w; ++j) {
                      const double d = G[r * w + j] * ga.value[j];
                      gx[r * w + j] += inv_std[r] * (d - s1 / n - xhat[r * w + j] * s2 / n);
                    }
                  }
                }
              });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na <= 1e-12 || nb <= 1e-12) throw DegenerateVectorError("cosine_similarity: zero-norm input");
  const double cos = dot / (na * nb);
  return make({1}, {cos}, "cosine_similarity", {a.node(), b.node()}, [na, nb, cos](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    const double g = self.grad[0];
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += g * (B.value[i] / (na * nb) - cos * A.value[i] / (na * na));
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] += g * (A.value[i] / (na * nb) - cos * B.value[i] / (nb * nb));
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (std::size_t j = 0; j < c; ++j) n += x[r * c + j] * x[r * c + j];
    n = std::sqrt(n);
    if (n <= 1e-12) throw DegenerateVectorError("normalize_rows: row " + std::to_string(r) + " has zero norm");
    norms[r] = n;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = x[r * c + j] / n;
  }
  return make(x.shape(), std::move(out), "normalize_rows", {x.node()},
              [norms = std::move(norms), c, rows](Node& self) {
                auto& g = self.inputs[0]->grad_buffer();
                const auto& y = self.value;
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < c; ++j) dot += y[r * c + j] * self.grad[r * c + j];
                  for (std::size_t j = 0; j < c; ++j)
                    g[r * c + j] += (self.grad[r * c + j] - y[r * c + j] * dot) / norms[r];
                }
              });
}

Tensor crop(const Tensor& x, std::size_t row, std::size_t col, std::size_t rows, std::size_t cols) {
  require_rank(x, 3, "crop");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (rows == 0 || cols == 0 || row + rows > h || col + cols > w) {
    throw DimensionError("crop: window out of range for " + to_string(x.shape()));
  }
  std::vector<double> out(rows * cols * c);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(i * cols + j) * c + ch] = x[((row + i) * w + col + j) * c + ch];
  return make({rows, cols, c}, std::move(out), "crop", {x.node()}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t ch = 0; ch < c; ++ch)
          g[((row + i) * w + col + j) * c + ch] += self.grad[(i * cols + j) * c + ch];
  });
}

Tensor assemble_grid(std::span<const Tensor> tiles, std::size_t k) {
  if (k == 0 || tiles.size() != k * k) {
    throw DimensionError("assemble_grid: expected " + std::to_string(k * k) + " tiles, got " +
                         std::to_string(tiles.size()));
  }
  const Shape& ts = tiles[0].shape();
  if (ts.size() != 3) throw DimensionError("assemble_grid: tiles must be rank 3, got " + to_string(ts));
  for (const auto& t : tiles) {
    if (t.shape() != ts) throw DimensionError("assemble_grid: tile " + to_string(t.shape()) + " vs " + to_string(ts));
  }
  const std::size_t th = ts[0], tw = ts[1], c = ts[2];
  const std::size_t w = tw * k;
  std::vector<double> out(k * th * w * c);
  std::vector<NodePtr> inputs;
  for (std::size_t a = 0; a < tiles.size(); ++a) {
    const std::size_t r0 = (a / k) * th, c0 = (a % k) * tw;
    for (std::size_t i = 0; i < th; ++i)
      for (std::size_t j = 0; j < tw; ++j)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((r0 + i) * w + c0 + j) * c + ch] = tiles[a][(i * tw + j) * c + ch];
    inputs.push_back(tiles[a].node());
  }
  return make({k * th, w, c}, std::move(out), "assemble_grid", std::move(inputs), [=](Node& self) {
    for (std::size_t a = 0; a < self.inputs.size(); ++a) {
      Node& in = *self.inputs[a];
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      const std::size_t r0 = (a / k) * th, c0 = (a % k) * tw;
      for (std::size_t i = 0; i < th; ++i)
        for (std::size_t j = 0; j < tw; ++j)
          for (std::size_t ch = 0; ch < c; ++ch)
            g[(i * tw + j) * c + ch] += self.grad[((r0 + i) * w + c0 + j) * c + ch];
    }
  });
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;  // weight of hi
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_upsample");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_upsample: zero target extent");
  if (out_h < h || out_w < w) {
    throw DimensionError("bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " smaller than input " + to_string(x.shape()));
  }
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  std::vector<double> out(out_h * out_w * c);
  for (std::size_t i = 0; i < out_h; ++i) {
    const auto& a = ty[i];
    for (std::size_t j = 0; j < out_w; ++j) {
      const auto& b = tx[j];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v00 = x[(a.lo * w + b.lo) * c + ch], v01 = x[(a.lo * w + b.hi) * c + ch];
        const double v10 = x[(a.hi * w + b.lo) * c + ch], v11 = x[(a.hi * w + b.hi) * c + ch];
        const double top = v00 + (v01 - v00) * b.frac;
        const double bot = v10 + (v11 - v10) * b.frac;
        out[(i * out_w + j) * c + ch] = top + (bot - top) * a.frac;
      }
    }
  }
  return make({out_h, out_w, c}, std::move(out), "bilinear_upsample", {x.node()},
              [ty = std::move(ty), tx = std::move(tx), w, c, out_h, out_w](Node& self) {
                auto& g = self.inputs[0]->grad_buffer();
                for (std::size_t i = 0; i < out_h; ++i) {
                  const auto& a = ty[i];
                  for (std::size_t j = 0; j < out_w; ++j) {
                    const auto& b = tx[j];
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const double gv = self.grad[(i * out_w + j) * c + ch];
                      g[(a.lo * w + b.lo) * c + ch] += gv * (1 - a.frac) * (1 - b.frac);
                      g[(a.lo * w + b.hi) * c + ch] += gv * (1 - a.frac) * b.frac;
                      g[(a.hi * w + b.lo) * c + ch] += gv * a.frac * (1 - b.frac);
                      g[(a.hi * w + b.hi) * c + ch] += gv * a.frac * b.frac;
                    }
                  }
                }
              });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const std::size_t h = x.extent(0), w = x.extent(1), cin = x.extent(2);
  const std::size_t kh = weight.extent(0), kw = weight.extent(1), cout = weight.extent(3);
  if (weight.extent(2) != cin || bias.size() != cout || stride == 0) {
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                         " incompatible with input " + to_string(x.shape()));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
  std::vector<double> out(oh * ow * cout);
  const auto xv = x.values();
  const auto wv = weight.values();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* o = &out[(oy * ow + ox) * cout];
      for (std::size_t co = 0; co < cout; ++co) o[co] = bias[co];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const double* xp = &xv[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin];
          const double* wp = &wv[(ky * kw + kx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xval = xp[ci];
            const double* wr = wp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += xval * wr[co];
          }
        }
      }
    }
  }
  return make({oh, ow, cout}, std::move(out), "conv2d", {x.node(), weight.node(), bias.node()},
              [=](Node& self) {
                Node& X = *self.inputs[0];
                Node& Wt = *self.inputs[1];
                Node& B = *self.inputs[2];
                const auto& G = self.grad;
                if (B.requires_grad) {
                  auto& gb = B.grad_buffer();
                  for (std::size_t p = 0; p < oh * ow; ++p)
                    for (std::size_t co = 0; co < cout; ++co) gb[co] += G[p * cout + co];
                }
                std::vector<double>* gx = X.requires_grad ? &X.grad_buffer() : nullptr;
                std::vector<double>* gw = Wt.requires_grad ? &Wt.grad_buffer() : nullptr;
                if (!gx && !gw) return;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const double* g = &G[(oy * ow + ox) * cout];
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                      const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                      if (iy < 0 || iy >= static_cast<long>(h)) continue;
                      for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const std::size_t xbase =
                            (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                        const std::size_t wbase = (ky * kw + kx) * cin * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                          const double* wr = &Wt.value[wbase + ci * cout];
                          if (gx) {
                            double acc = 0.0;
                            for (std::size_t co = 0; co < cout; ++co) acc += g[co] * wr[co];
                            (*gx)[xbase + ci] += acc;
                          }
                          if (gw) {
                            const double xval = X.value[xbase + ci];
                            double* gwr = &(*gw)[wbase + ci * cout];
                            for (std::size_t co = 0; co < cout; ++co) gwr[co] += xval * g[co];
                          }
                        }
                      }
                    }
                  }
                }
              });
}

Tensor binary_cross_entropy(const Tensor& p, std::span<const double> target, double clamp) {
  if (target.size() != p.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(target.size()) + " targets for prediction " +
                         to_string(p.shape()));
  }
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double s = std::clamp(p[i], clamp, 1.0 - clamp);
    total -= target[i] * std::log(s) + (1.0 - target[i]) * std::log(1.0 - s);
  }
  std::vector<double> y(target.begin(), target.end());
  return make({1}, {total / n}, "binary_cross_entropy", {p.node()},
              [y = std::move(y), n, clamp](Node& self) {
                Node& in = *self.inputs[0];
                auto& g = in.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                  const double s = in.value[i];
                  if (s <= clamp || s >= 1.0 - clamp) continue;
                  g[i] += self.grad[0] * (-y[i] / s + (1.0 - y[i]) / (1.0 - s)) / n;
                }
              });
}

Tensor l1_loss(const Tensor& x, std::span<const double> target) {
  if (target.size() != x.size()) {
    throw DimensionError("l1_loss: " + std::to_string(target.size()) + " targets for " + to_string(x.shape()));
  }
  const double n = static_cast<double>(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - target[i]);
  std::vector<double> t(target.begin(), target.end());
  return make({1}, {total / n}, "l1_loss", {x.node()}, [t = std::move(t), n](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = in.value[i] - t[i];
      g[i] += self.grad[0] * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n;
    }
  });
}

}  // namespace rpt
