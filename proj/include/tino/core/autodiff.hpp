#pragma once

// Minimal reverse-mode automatic differentiation over CHW tensors.
//
// A Var is a shared handle to a graph node. Ops build new nodes eagerly; calling
// backward() on a scalar walks the graph in reverse topological order. Nodes that
// do not depend on any parameter carry no backward closure and no parents, so
// constant sub-expressions cost nothing at backward time.

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"

namespace tino::ad {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(const Tensor& t) { return make(t.shape(), t.vec(), false); }
  static Var parameter(const Tensor& t) { return make(t.shape(), t.vec(), true); }
  static Var scalar(double v, bool requires_grad = false) {
    return make(kScalarShape, std::vector<double>{v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const noexcept { return static_cast<bool>(node_); }

  std::span<const double> value() const { return node_->value; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar of shape " + shape().str());
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  Tensor tensor() const { return Tensor(node_->shape, node_->value); }

  /// Gradient accumulated by the last backward(); zeros if the node was unreached.
  Tensor grad() const {
    if (node_->grad.size() != node_->value.size()) return Tensor(node_->shape);
    return Tensor(node_->shape, node_->grad);
  }
  double grad_item() const { return grad()[0]; }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  void backward() const;

 private:
  static Var make(Shape shape, std::vector<double> value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

/// Builds a result node. The backward closure is dropped when no parent needs a gradient.
inline Var make_result(Shape shape, std::vector<double> value, std::vector<Var> inputs,
                       std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline void Var::backward() const {
  if (size() != 1) throw ShapeError("backward() requires a scalar output");
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

/// Counts value+grad bytes reachable from a root; used as a peak-memory proxy.
inline std::size_t graph_bytes(const Var& root) {
  std::size_t bytes = 0;
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack{&root.node()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    bytes += (n->value.size() + n->grad.size()) * sizeof(double);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return bytes;
}

namespace detail {

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

// Broadcast rule: equal shapes, or one side has a single element.
inline Shape broadcast_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": cannot broadcast " + a.shape().str() + " with " + b.shape().str());
}

template <typename Fwd, typename DA, typename DB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, DA da, DB db) {
  const Shape shape = broadcast_shape(a, b, name);
  const std::size_t n = shape.size();
  const bool sa = a.size() == 1 && n != 1;
  const bool sb = b.size() == 1 && n != 1;
  std::vector<double> out(n);
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[sa ? 0 : i], bv[sb ? 0 : i]);
  return make_result(shape, std::move(out), {a, b}, [sa, sb, da, db](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pa.value[sa ? 0 : i];
      const double y = pb.value[sb ? 0 : i];
      const double g = self.grad[i];
      if (pa.requires_grad) pa.grad[sa ? 0 : i] += g * da(x, y, self.value[i]);
      if (pb.requires_grad) pb.grad[sb ? 0 : i] += g * db(x, y, self.value[i]);
    }
  });
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    Node& pa = parent(self, 0);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      pa.grad[i] += self.grad[i] * deriv(pa.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}
inline Var operator/(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}
inline Var operator-(const Var& a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var operator*(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Var operator*(double s, const Var& a) { return a * s; }
inline Var operator+(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Var operator+(double s, const Var& a) { return a + s; }
inline Var operator-(const Var& a, double s) { return a + (-s); }
inline Var operator-(double s, const Var& a) {
  return detail::unary(a, [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}
inline Var operator/(const Var& a, double s) { return a * (1.0 / s); }

inline Var sqrt(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
/// |x| with subgradient 0 at the origin.
inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// Scalar function with caller-supplied value and derivative at the input point.
inline Var custom_scalar(const Var& t, double value, double derivative) {
  if (t.size() != 1) throw ShapeError("custom_scalar expects a scalar input");
  return make_result(kScalarShape, {value}, {t}, [derivative](Node& self) {
    detail::parent(self, 0).grad[0] += self.grad[0] * derivative;
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  return make_result(kScalarShape, {s}, {a}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    for (double& g : pa.grad) g += self.grad[0];
  });
}
inline Var mean(const Var& a) { return sum(a) / static_cast<double>(a.size()); }

inline Var dot(const Var& a, const Var& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return make_result(kScalarShape, {s}, {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    const double g = self.grad[0];
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += g * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += g * pa.value[i];
    }
  });
}

inline Var norm(const Var& a) { return sqrt(dot(a, a)); }
inline Var normalize(const Var& a) { return a / norm(a); }
inline Var cosine(const Var& a, const Var& b) { return dot(a, b) / (norm(a) * norm(b)); }

inline Var reshape(const Var& a, Shape shape) {
  if (shape.size() != a.size()) throw ShapeError("reshape: " + a.shape().str() + " -> " + shape.str());
  std::vector<double> v(a.value().begin(), a.value().end());
  return make_result(shape, std::move(v), {a}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

inline Var element(const Var& a, std::size_t i) {
  return make_result(kScalarShape, {a[i]}, {a}, [i](Node& self) {
    detail::parent(self, 0).grad[i] += self.grad[0];
  });
}

/// Flat concatenation into an (n, 1, 1) vector.
inline Var concat(const std::vector<Var>& parts) {
  std::vector<double> v;
  for (const auto& p : parts) v.insert(v.end(), p.value().begin(), p.value().end());
  const Shape shape{v.size(), 1, 1};
  return make_result(shape, std::move(v), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

/// edit * mask + orig * (1 - mask); a single-channel mask broadcasts over channels.
inline Var blend(const Var& edit, const Var& orig, const Tensor& mask) {
  require_same_shape(edit.shape(), orig.shape(), "blend");
  const Shape s = edit.shape();
  if (mask.shape().h != s.h || mask.shape().w != s.w || (mask.shape().c != 1 && mask.shape().c != s.c)) {
    throw ShapeError("blend: mask " + mask.shape().str() + " vs latent " + s.str());
  }
  const bool per_channel = mask.shape().c == s.c && s.c != 1;
  std::vector<double> m(s.size());
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t i = 0; i < s.plane(); ++i) m[c * s.plane() + i] = mask[(per_channel ? c * s.plane() : 0) + i];
  }
  std::vector<double> out(s.size());
  auto ev = edit.value();
  auto ov = orig.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Exact pass-through at the mask extremes keeps unedited cells bit-identical.
    out[i] = m[i] == 0.0 ? ov[i] : (m[i] == 1.0 ? ev[i] : ev[i] * m[i] + ov[i] * (1.0 - m[i]));
  }
  return make_result(s, std::move(out), {edit, orig}, [m = std::move(m)](Node& self) {
    Node& pe = detail::parent(self, 0);
    Node& po = detail::parent(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pe.requires_grad) pe.grad[i] += self.grad[i] * m[i];
      if (po.requires_grad) po.grad[i] += self.grad[i] * (1.0 - m[i]);
    }
  });
}

/// factor x factor average pooling per channel.
inline Var avg_pool(const Var& x, std::size_t factor) {
  const Shape s = x.shape();
  if (factor == 0 || s.h % factor || s.w % factor) {
    throw ShapeError("avg_pool: " + s.str() + " not divisible by " + std::to_string(factor));
  }
  const Shape o{s.c, s.h / factor, s.w / factor};
  const double inv = 1.0 / static_cast<double>(factor * factor);
  std::vector<double> out(o.size(), 0.0);
  auto xv = x.value();
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t xx = 0; xx < s.w; ++xx)
        out[(c * o.h + y / factor) * o.w + xx / factor] += xv[(c * s.h + y) * s.w + xx] * inv;
  return make_result(o, std::move(out), {x}, [s, o, factor, inv](Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t xx = 0; xx < s.w; ++xx)
          px.grad[(c * s.h + y) * s.w + xx] += self.grad[(c * o.h + y / factor) * o.w + xx / factor] * inv;
  });
}

/// Nearest-neighbour upsampling by an integer factor.
inline Var upsample_nearest(const Var& x, std::size_t factor) {
  const Shape s = x.shape();
  const Shape o{s.c, s.h * factor, s.w * factor};
  std::vector<double> out(o.size());
  auto xv = x.value();
  for (std::size_t c = 0; c < o.c; ++c)
    for (std::size_t y = 0; y < o.h; ++y)
      for (std::size_t xx = 0; xx < o.w; ++xx)
        out[(c * o.h + y) * o.w + xx] = xv[(c * s.h + y / factor) * s.w + xx / factor];
  return make_result(o, std::move(out), {x}, [s, o, factor](Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t c = 0; c < o.c; ++c)
      for (std::size_t y = 0; y < o.h; ++y)
        for (std::size_t xx = 0; xx < o.w; ++xx)
          px.grad[(c * s.h + y / factor) * s.w + xx / factor] += self.grad[(c * o.h + y) * o.w + xx];
  });
}

/// Per-pixel channel mixing with a constant (out_c, in_c, 1) matrix.
inline Var channel_mix(const Var& x, const Tensor& matrix) {
  const Shape s = x.shape();
  const std::size_t out_c = matrix.shape().c;
  if (matrix.shape().h != s.c) throw ShapeError("channel_mix: matrix " + matrix.shape().str() + " vs " + s.str());
  const Shape o{out_c, s.h, s.w};
  std::vector<double> out(o.size(), 0.0);
  auto xv = x.value();
  const std::size_t plane = s.plane();
  for (std::size_t oc = 0; oc < out_c; ++oc)
    for (std::size_t ic = 0; ic < s.c; ++ic) {
      const double m = matrix[oc * s.c + ic];
      for (std::size_t i = 0; i < plane; ++i) out[oc * plane + i] += m * xv[ic * plane + i];
    }
  return make_result(o, std::move(out), {x}, [matrix, s, out_c, plane](Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t oc = 0; oc < out_c; ++oc)
      for (std::size_t ic = 0; ic < s.c; ++ic) {
        const double m = matrix[oc * s.c + ic];
        for (std::size_t i = 0; i < plane; ++i) px.grad[ic * plane + i] += m * self.grad[oc * plane + i];
      }
  });
}

/// Non-overlapping patch convolution (kernel = stride = patch).
/// x: (C, H, W); weight: (out, C*patch*patch, 1); bias: (out, 1, 1) -> (out, H/patch, W/patch).
inline Var patch_linear(const Var& x, const Var& weight, const Var& bias, std::size_t patch) {
  const Shape s = x.shape();
  if (patch == 0 || s.h % patch || s.w % patch) {
    throw ShapeError("patch_linear: input " + s.str() + " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t fan_in = s.c * patch * patch;
  const std::size_t out_c = weight.shape().c;
  if (weight.shape().h != fan_in || bias.size() != out_c) {
    throw ShapeError("patch_linear: weight " + weight.shape().str() + " expects fan-in " + std::to_string(fan_in));
  }
  const Shape o{out_c, s.h / patch, s.w / patch};
  const std::size_t cells = o.plane();

  // Gather patches into a (cells, fan_in) matrix.
  std::vector<double> cols(cells * fan_in);
  auto xv = x.value();
  for (std::size_t gy = 0; gy < o.h; ++gy)
    for (std::size_t gx = 0; gx < o.w; ++gx) {
      double* row = &cols[(gy * o.w + gx) * fan_in];
      std::size_t k = 0;
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            row[k++] = xv[(c * s.h + gy * patch + py) * s.w + gx * patch + px];
    }

  std::vector<double> out(o.size());
  auto wv = weight.value();
  auto bv = bias.value();
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    const double* wrow = &wv[oc * fan_in];
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const double* col = &cols[cell * fan_in];
      double acc = bv[oc];
      for (std::size_t k = 0; k < fan_in; ++k) acc += wrow[k] * col[k];
      out[oc * cells + cell] = acc;
    }
  }
  return make_result(o, std::move(out), {x, weight, bias},
                     [cols = std::move(cols), s, o, fan_in, out_c, cells, patch](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pw = detail::parent(self, 1);
    Node& pb = detail::parent(self, 2);
    std::vector<double> dcols(px.requires_grad ? cells * fan_in : 0, 0.0);
    for (std::size_t oc = 0; oc < out_c; ++oc) {
      const double* wrow = &pw.value[oc * fan_in];
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const double g = self.grad[oc * cells + cell];
        if (g == 0.0) continue;
        if (pb.requires_grad) pb.grad[oc] += g;
        const double* col = &cols[cell * fan_in];
        if (pw.requires_grad) {
          double* gw = &pw.grad[oc * fan_in];
          for (std::size_t k = 0; k < fan_in; ++k) gw[k] += g * col[k];
        }
        if (px.requires_grad) {
          double* dc = &dcols[cell * fan_in];
          for (std::size_t k = 0; k < fan_in; ++k) dc[k] += g * wrow[k];
        }
      }
    }
    if (!px.requires_grad) return;
    for (std::size_t gy = 0; gy < o.h; ++gy)
      for (std::size_t gx = 0; gx < o.w; ++gx) {
        const double* row = &dcols[(gy * o.w + gx) * fan_in];
        std::size_t k = 0;
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t pxx = 0; pxx < patch; ++pxx)
              px.grad[(c * s.h + gy * patch + py) * s.w + gx * patch + pxx] += row[k++];
      }
  });
}

/// Dense layer on a flattened input. weight: (out, in, 1); bias: (out, 1, 1).
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const std::size_t in = x.size();
  const std::size_t out_n = weight.shape().c;
  if (weight.shape().h != in || bias.size() != out_n) {
    throw ShapeError("linear: weight " + weight.shape().str() + " vs input size " + std::to_string(in));
  }
  std::vector<double> out(out_n);
  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  for (std::size_t o = 0; o < out_n; ++o) {
    double acc = bv[o];
    for (std::size_t i = 0; i < in; ++i) acc += wv[o * in + i] * xv[i];
    out[o] = acc;
  }
  return make_result(Shape{out_n, 1, 1}, std::move(out), {x, weight, bias}, [in, out_n](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pw = detail::parent(self, 1);
    Node& pb = detail::parent(self, 2);
    for (std::size_t o = 0; o < out_n; ++o) {
      const double g = self.grad[o];
      if (pb.requires_grad) pb.grad[o] += g;
      for (std::size_t i = 0; i < in; ++i) {
        if (pw.requires_grad) pw.grad[o * in + i] += g * px.value[i];
        if (px.requires_grad) px.grad[i] += g * pw.value[o * in + i];
      }
    }
  });
}

/// 1x1 convolution: the same dense layer applied at every spatial cell.
inline Var pointwise_linear(const Var& x, const Var& weight, const Var& bias) {
  const Shape s = x.shape();
  const std::size_t out_c = weight.shape().c;
  if (weight.shape().h != s.c || bias.size() != out_c) {
    throw ShapeError("pointwise_linear: weight " + weight.shape().str() + " vs input " + s.str());
  }
  const std::size_t plane = s.plane();
  const Shape o{out_c, s.h, s.w};
  std::vector<double> out(o.size());
  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    double* dst = &out[oc * plane];
    std::fill(dst, dst + plane, bv[oc]);
    for (std::size_t ic = 0; ic < s.c; ++ic) {
      const double w = wv[oc * s.c + ic];
      const double* src = &xv[ic * plane];
      for (std::size_t i = 0; i < plane; ++i) dst[i] += w * src[i];
    }
  }
  return make_result(o, std::move(out), {x, weight, bias}, [s, out_c, plane](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pw = detail::parent(self, 1);
    Node& pb = detail::parent(self, 2);
    for (std::size_t oc = 0; oc < out_c; ++oc) {
      const double* g = &self.grad[oc * plane];
      if (pb.requires_grad) {
        for (std::size_t i = 0; i < plane; ++i) pb.grad[oc] += g[i];
      }
      for (std::size_t ic = 0; ic < s.c; ++ic) {
        if (pw.requires_grad) {
          double acc = 0.0;
          const double* src = &px.value[ic * plane];
          for (std::size_t i = 0; i < plane; ++i) acc += g[i] * src[i];
          pw.grad[oc * s.c + ic] += acc;
        }
        if (px.requires_grad) {
          const double w = pw.value[oc * s.c + ic];
          double* dst = &px.grad[ic * plane];
          for (std::size_t i = 0; i < plane; ++i) dst[i] += w * g[i];
        }
      }
    }
  });
}

/// Global average pool: (C, H, W) -> (C, 1, 1).
inline Var channel_mean(const Var& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  std::vector<double> out(s.c, 0.0);
  auto xv = x.value();
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c] += xv[c * plane + i];
    out[c] /= static_cast<double>(plane);
  }
  return make_result(Shape{s.c, 1, 1}, std::move(out), {x}, [s, plane](Node& self) {
    Node& px = detail::parent(self, 0);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < plane; ++i) px.grad[c * plane + i] += self.grad[c] * inv;
  });
}

}  // namespace tino::ad

namespace tino {
using ad::Var;
}  // namespace tino
