#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bupm {

namespace detail {

inline std::int64_t shape_count(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace detail

// Dense row-major double tensor. Copies are aliases of the same storage;
// values are immutable after an op produces them, the grad buffer is the
// only mutable part. Rank 0 is a scalar (one element).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false) {
    validate_shape(shape);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value.assign(static_cast<std::size_t>(detail::shape_count(node->shape)), value);
    Tensor t;
    t.node_ = std::move(node);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    validate_shape(shape);
    if (detail::shape_count(shape) != static_cast<std::int64_t>(data.size())) {
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + detail::shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    Tensor t;
    t.node_ = std::move(node);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int extent(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  // Tensors are aliasing handles; constness of the handle does not protect
  // the shared storage.
  double* data() const { return node_->value.data(); }

  double value() const {
    if (numel() != 1) {
      throw std::invalid_argument("tensor: value() needs a single-element tensor, got shape " +
                                  detail::shape_str(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
      node_->grad.assign(node_->value.size(), 0.0);
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  double* grad() const { return node_->requires_grad ? node_->grad.data() : nullptr; }

  void zero_grad() const {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Fresh storage, no grad tracking. For snapshots and test oracles.
  Tensor detached_copy() const {
    return from_data(node_->shape, node_->value, false);
  }

 private:
  struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  static void validate_shape(const std::vector<int>& shape) {
    for (int e : shape) {
      if (e <= 0) {
        throw std::invalid_argument("tensor: extents must be positive, got " +
                                    detail::shape_str(shape));
      }
    }
  }

  std::shared_ptr<Node> node_;
};

// Records one forward pass. Each node holds the closure that pushes the
// output's grad back to its inputs; replay visits nodes exactly once in
// reverse recording order. A tape lives for one forward+backward session.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  // Marks the output as grad-carrying and appends the node.
  Tensor record(const char* op, std::vector<Tensor> inputs, Tensor output,
                std::function<void()> backward) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
    return output;
  }

  static bool any_requires_grad(std::initializer_list<const Tensor*> tensors) {
    for (const Tensor* t : tensors) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  // Accumulates seed * d(loss)/d(t) into every grad-carrying tensor reachable
  // from the loss. Leaf grads are left untouched beforehand, so repeated
  // calls accumulate; grads of op outputs recorded here are reset first.
  void backward(const Tensor& loss, double seed = 1.0) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  detail::shape_str(loss.shape()));
    }
    for (Node& node : nodes_) node.output.zero_grad();
    if (!loss.requires_grad()) return;  // loss does not depend on anything tracked
    Tensor seeded = loss;
    seeded.grad()[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

enum class Padding { kSameZero, kSameCircularHorizontal };
enum class Activation { kRelu, kSigmoid };
enum class Reduce { kMax, kMean };

namespace detail {

struct SamePad {
  int out, before;
};

// TF-style SAME padding: out = ceil(in/stride), surplus padding goes after.
inline SamePad same_pad(int in, int kernel, int stride) {
  const int out = (in + stride - 1) / stride;
  const int total = std::max((out - 1) * stride + kernel - in, 0);
  return {out, total / 2};
}

inline int wrap_index(int i, int n) {
  i %= n;
  return i < 0 ? i + n : i;
}

}  // namespace detail

// 2-D convolution over an HxWxCin input with a KhxKwxCinxCout kernel under
// SAME padding (zero fill, or circular in x for panorama inputs).
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     Padding padding = Padding::kSameZero, int stride = 1) {
  if (input.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1) {
    throw std::invalid_argument("conv2d: expected input HxWxC, kernel KhxKwxCinxCout, bias Cout");
  }
  const int in_h = input.extent(0), in_w = input.extent(1), cin = input.extent(2);
  const int kh = kernel.extent(0), kw = kernel.extent(1);
  const int cout = kernel.extent(3);
  if (kernel.extent(2) != cin) {
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel.extent(2)) +
                                " input channels, input has " + std::to_string(cin));
  }
  if (bias.extent(0) != cout) {
    throw std::invalid_argument("conv2d: bias length " + std::to_string(bias.extent(0)) +
                                " does not match " + std::to_string(cout) + " filters");
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel extents must be odd");
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");

  const auto [out_h, pad_top] = detail::same_pad(in_h, kh, stride);
  const auto [out_w, pad_left] = detail::same_pad(in_w, kw, stride);
  const bool circular = padding == Padding::kSameCircularHorizontal;

  Tensor out = Tensor::zeros({out_h, out_w, cout});
  {
    const double* __restrict in = input.data();
    const double* __restrict k = kernel.data();
    const double* __restrict b = bias.data();
    double* __restrict o = out.data();
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        double* acc = o + (static_cast<std::int64_t>(oy) * out_w + ox) * cout;
        for (int co = 0; co < cout; ++co) acc[co] = b[co];
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - pad_top;
          if (iy < 0 || iy >= in_h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad_left;
            if (circular) {
              ix = detail::wrap_index(ix, in_w);
            } else if (ix < 0 || ix >= in_w) {
              continue;
            }
            const double* fiber = in + (static_cast<std::int64_t>(iy) * in_w + ix) * cin;
            const double* ks = k + (static_cast<std::int64_t>(ky) * kw + kx) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              const double a = fiber[ci];
              const double* krow = ks + static_cast<std::int64_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) acc[co] += a * krow[co];
            }
          }
        }
      }
    }
  }

  if (!Tape::any_requires_grad({&input, &kernel, &bias})) return out;
  return tape.record(
      "conv2d", {input, kernel, bias}, out,
      [input, kernel, bias, out, stride, pad_top, pad_left, circular]() mutable {
        const int in_h = input.extent(0), in_w = input.extent(1), cin = input.extent(2);
        const int kh = kernel.extent(0), kw = kernel.extent(1), cout = kernel.extent(3);
        const int out_h = out.extent(0), out_w = out.extent(1);
        const double* gout = out.grad();
        const double* in = input.data();
        const double* k = kernel.data();
        double* gin = input.grad();
        double* gk = kernel.grad();
        double* gb = bias.grad();
        for (int oy = 0; oy < out_h; ++oy) {
          for (int ox = 0; ox < out_w; ++ox) {
            const double* go = gout + (static_cast<std::int64_t>(oy) * out_w + ox) * cout;
            if (gb) {
              for (int co = 0; co < cout; ++co) gb[co] += go[co];
            }
            if (!gin && !gk) continue;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride + ky - pad_top;
              if (iy < 0 || iy >= in_h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int ix = ox * stride + kx - pad_left;
                if (circular) {
                  ix = detail::wrap_index(ix, in_w);
                } else if (ix < 0 || ix >= in_w) {
                  continue;
                }
                const std::int64_t fo = (static_cast<std::int64_t>(iy) * in_w + ix) * cin;
                const std::int64_t ko = (static_cast<std::int64_t>(ky) * kw + kx) * cin * cout;
                for (int ci = 0; ci < cin; ++ci) {
                  const double* krow = k + ko + static_cast<std::int64_t>(ci) * cout;
                  if (gk) {
                    const double a = in[fo + ci];
                    double* gkrow = gk + ko + static_cast<std::int64_t>(ci) * cout;
                    for (int co = 0; co < cout; ++co) gkrow[co] += a * go[co];
                  }
                  if (gin) {
                    double s = 0.0;
                    for (int co = 0; co < cout; ++co) s += krow[co] * go[co];
                    gin[fo + ci] += s;
                  }
                }
              }
            }
          }
        }
      });
}

// Fully connected layer: out[j] = sum_i in[i] * w[i,j] + b[j].
inline Tensor dense(Tape& tape, const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 1 || weights.rank() != 2 || bias.rank() != 1) {
    throw std::invalid_argument("dense: expected input N, weights NxM, bias M");
  }
  const int n = input.extent(0), m = weights.extent(1);
  if (weights.extent(0) != n) {
    throw std::invalid_argument("dense: weights expect " + std::to_string(weights.extent(0)) +
                                " inputs, input has " + std::to_string(n));
  }
  if (bias.extent(0) != m) {
    throw std::invalid_argument("dense: bias length " + std::to_string(bias.extent(0)) +
                                " does not match " + std::to_string(m) + " units");
  }
  Tensor out = Tensor::zeros({m});
  {
    const double* in = input.data();
    const double* w = weights.data();
    const double* b = bias.data();
    double* o = out.data();
    for (int j = 0; j < m; ++j) o[j] = b[j];
    for (int i = 0; i < n; ++i) {
      const double a = in[i];
      const double* wrow = w + static_cast<std::int64_t>(i) * m;
      for (int j = 0; j < m; ++j) o[j] += a * wrow[j];
    }
  }
  if (!Tape::any_requires_grad({&input, &weights, &bias})) return out;
  return tape.record("dense", {input, weights, bias}, out, [input, weights, bias, out]() mutable {
    const int n = input.extent(0), m = weights.extent(1);
    const double* gout = out.grad();
    if (double* gb = bias.grad()) {
      for (int j = 0; j < m; ++j) gb[j] += gout[j];
    }
    if (double* gw = weights.grad()) {
      const double* in = input.data();
      for (int i = 0; i < n; ++i) {
        double* grow = gw + static_cast<std::int64_t>(i) * m;
        const double a = in[i];
        for (int j = 0; j < m; ++j) grow[j] += a * gout[j];
      }
    }
    if (double* gin = input.grad()) {
      const double* w = weights.data();
      for (int i = 0; i < n; ++i) {
        const double* wrow = w + static_cast<std::int64_t>(i) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += wrow[j] * gout[j];
        gin[i] += s;
      }
    }
  });
}

namespace detail {

// Numerically stable logistic; saturated tails are clamped one ulp inside
// (0,1) so downstream log/invariant code never sees an exact 0 or 1.
inline double sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  constexpr double kEdge = std::numeric_limits<double>::epsilon();
  return std::min(std::max(s, kEdge), 1.0 - kEdge);
}

}  // namespace detail

inline Tensor activation(Tape& tape, const Tensor& input, Activation kind) {
  Tensor out = Tensor::zeros(input.shape());
  const std::int64_t n = input.numel();
  const double* in = input.data();
  double* o = out.data();
  if (kind == Activation::kRelu) {
    for (std::int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  } else {
    for (std::int64_t i = 0; i < n; ++i) o[i] = detail::sigmoid(in[i]);
  }
  if (!input.requires_grad()) return out;
  return tape.record("activation", {input}, out, [input, out, kind]() mutable {
    const std::int64_t n = input.numel();
    const double* gout = out.grad();
    const double* in = input.data();
    const double* ov = out.data();
    double* gin = input.grad();
    if (!gin) return;
    if (kind == Activation::kRelu) {
      for (std::int64_t i = 0; i < n; ++i) gin[i] += in[i] > 0.0 ? gout[i] : 0.0;
    } else {
      for (std::int64_t i = 0; i < n; ++i) gin[i] += gout[i] * ov[i] * (1.0 - ov[i]);
    }
  });
}

inline Tensor relu(Tape& tape, const Tensor& input) {
  return activation(tape, input, Activation::kRelu);
}
inline Tensor sigmoid(Tape& tape, const Tensor& input) {
  return activation(tape, input, Activation::kSigmoid);
}

// Reduction over a set of axes; reduced axes are removed from the shape.
// Max routes gradient to the first maximal element of each group in row-major
// order; mean spreads it uniformly.
inline Tensor reduce(Tape& tape, const Tensor& input, std::vector<int> axes, Reduce kind) {
  const int rank = input.rank();
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (int a : axes) {
    if (a < 0 || a >= rank) {
      throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                  " out of range for rank " + std::to_string(rank));
    }
    if (reduced[static_cast<std::size_t>(a)]) {
      throw std::invalid_argument("reduce: duplicate axis " + std::to_string(a));
    }
    reduced[static_cast<std::size_t>(a)] = true;
  }

  std::vector<int> out_shape;
  std::int64_t group_size = 1;
  for (int a = 0; a < rank; ++a) {
    if (reduced[static_cast<std::size_t>(a)]) {
      group_size *= input.extent(a);
    } else {
      out_shape.push_back(input.extent(a));
    }
  }

  // Row-major strides of the input decomposed into the output index.
  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(rank), 1);
  for (int a = rank - 2; a >= 0; --a) {
    in_stride[static_cast<std::size_t>(a)] =
        in_stride[static_cast<std::size_t>(a + 1)] * input.extent(a + 1);
  }
  std::vector<std::int64_t> out_stride_of_axis(static_cast<std::size_t>(rank), 0);
  {
    std::int64_t s = 1;
    for (int a = rank - 1; a >= 0; --a) {
      if (!reduced[static_cast<std::size_t>(a)]) {
        out_stride_of_axis[static_cast<std::size_t>(a)] = s;
        s *= input.extent(a);
      }
    }
  }

  const std::int64_t n = input.numel();
  const std::int64_t out_n = n / group_size;
  Tensor out = Tensor::zeros(out_shape);
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  {
    const double* in = input.data();
    double* o = out.data();
    if (kind == Reduce::kMax) {
      argmax->assign(static_cast<std::size_t>(out_n), -1);
      std::vector<std::int64_t>& am = *argmax;
      for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t rest = i, oi = 0;
        for (int a = 0; a < rank; ++a) {
          const std::int64_t idx = rest / in_stride[static_cast<std::size_t>(a)];
          rest %= in_stride[static_cast<std::size_t>(a)];
          oi += idx * out_stride_of_axis[static_cast<std::size_t>(a)];
        }
        // strict > keeps the first row-major maximum on ties
        if (am[static_cast<std::size_t>(oi)] < 0 || in[i] > o[oi]) {
          o[oi] = in[i];
          am[static_cast<std::size_t>(oi)] = i;
        }
      }
    } else {
      for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t rest = i, oi = 0;
        for (int a = 0; a < rank; ++a) {
          const std::int64_t idx = rest / in_stride[static_cast<std::size_t>(a)];
          rest %= in_stride[static_cast<std::size_t>(a)];
          oi += idx * out_stride_of_axis[static_cast<std::size_t>(a)];
        }
        o[oi] += in[i];
      }
      const double inv = 1.0 / static_cast<double>(group_size);
      for (std::int64_t i = 0; i < out_n; ++i) o[i] *= inv;
    }
  }
  if (!input.requires_grad()) return out;
  return tape.record(
      "reduce", {input}, out,
      [input, out, kind, argmax, group_size, in_stride, out_stride_of_axis]() mutable {
        double* gin = input.grad();
        if (!gin) return;
        const double* gout = out.grad();
        if (kind == Reduce::kMax) {
          const std::vector<std::int64_t>& am = *argmax;
          for (std::size_t g = 0; g < am.size(); ++g) gin[am[g]] += gout[g];
        } else {
          const int rank = input.rank();
          const std::int64_t n = input.numel();
          const double inv = 1.0 / static_cast<double>(group_size);
          for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t rest = i, oi = 0;
            for (int a = 0; a < rank; ++a) {
              const std::int64_t idx = rest / in_stride[static_cast<std::size_t>(a)];
              rest %= in_stride[static_cast<std::size_t>(a)];
              oi += idx * out_stride_of_axis[static_cast<std::size_t>(a)];
            }
            gin[i] += gout[oi] * inv;
          }
        }
      });
}

// Normalizes each fiber along the last axis to unit L2 norm; fibers shorter
// than epsilon are divided by epsilon instead so zero fibers stay zero.
inline Tensor l2_normalize(Tape& tape, const Tensor& input, double epsilon = 1e-12) {
  if (epsilon <= 0.0) throw std::invalid_argument("l2_normalize: epsilon must be positive");
  if (input.rank() < 1) throw std::invalid_argument("l2_normalize: needs rank >= 1");
  const int c = input.extent(input.rank() - 1);
  const std::int64_t fibers = input.numel() / c;
  Tensor out = Tensor::zeros(input.shape());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(fibers));
  {
    const double* in = input.data();
    double* o = out.data();
    for (std::int64_t f = 0; f < fibers; ++f) {
      const double* v = in + f * c;
      double sq = 0.0;
      for (int i = 0; i < c; ++i) sq += v[i] * v[i];
      const double norm = std::sqrt(sq);
      const double denom = std::max(norm, epsilon);
      (*norms)[static_cast<std::size_t>(f)] = denom;
      double* ov = o + f * c;
      for (int i = 0; i < c; ++i) ov[i] = v[i] / denom;
    }
  }
  if (!input.requires_grad()) return out;
  return tape.record("l2_normalize", {input}, out, [input, out, norms, c, fibers]() mutable {
    double* gin = input.grad();
    if (!gin) return;
    const double* gout = out.grad();
    const double* in = input.data();
    for (std::int64_t f = 0; f < fibers; ++f) {
      const double denom = (*norms)[static_cast<std::size_t>(f)];
      const double* g = gout + f * c;
      const double* v = in + f * c;
      double* gi = gin + f * c;
      double vg = 0.0;
      for (int i = 0; i < c; ++i) vg += v[i] * g[i];
      const double d3 = denom * denom * denom;
      // d(v/denom)/dv collapses to 1/denom when the epsilon clamp is active
      double sq = 0.0;
      for (int i = 0; i < c; ++i) sq += v[i] * v[i];
      if (std::sqrt(sq) >= denom) {
        for (int i = 0; i < c; ++i) gi[i] += g[i] / denom - v[i] * vg / d3;
      } else {
        for (int i = 0; i < c; ++i) gi[i] += g[i] / denom;
      }
    }
  });
}

// Same data, new shape. Copies so the output is an independent value.
inline Tensor reshape(Tape& tape, const Tensor& input, std::vector<int> shape) {
  if (detail::shape_count(shape) != input.numel()) {
    throw std::invalid_argument("reshape: cannot view " + detail::shape_str(input.shape()) +
                                " as " + detail::shape_str(shape));
  }
  Tensor out =
      Tensor::from_data(std::move(shape), std::vector<double>(input.data(), input.data() + input.numel()));
  if (!input.requires_grad()) return out;
  return tape.record("reshape", {input}, out, [input, out]() mutable {
    double* gin = input.grad();
    if (!gin) return;
    const double* gout = out.grad();
    const std::int64_t n = input.numel();
    for (std::int64_t i = 0; i < n; ++i) gin[i] += gout[i];
  });
}

// Plain SGD: p <- p - lr * g.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {
    if (lr <= 0.0) throw std::invalid_argument("sgd: learning rate must be positive");
  }

  void step() {
    for (Tensor& p : params_) {
      const double* g = p.grad();
      if (!g) continue;
      double* v = p.data();
      const std::int64_t n = p.numel();
      for (std::int64_t i = 0; i < n; ++i) v[i] -= lr_ * g[i];
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  double learning_rate() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
};

// Adam with bias correction. Moment buffers are exposed so checkpoints can
// freeze and restore the optimizer mid-phase.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i].numel()), 0.0);
      v_[i].assign(static_cast<std::size_t>(params_[i].numel()), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const double* g = p.grad();
      if (!g) continue;
      double* val = p.data();
      double* m = m_[i].data();
      double* v = v_[i].data();
      const std::int64_t n = p.numel();
      for (std::int64_t j = 0; j < n; ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  double learning_rate() const { return lr_; }
  std::int64_t step_count() const { return t_; }
  std::size_t slot_count() const { return params_.size(); }
  std::vector<double>& first_moment(std::size_t i) { return m_[i]; }
  std::vector<double>& second_moment(std::size_t i) { return v_[i]; }
  void restore_step_count(std::int64_t t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  double lr_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace bupm
