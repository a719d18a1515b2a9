#include "motadapt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace motadapt {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + ")";
}

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& values, const char* what) {
  for (const T& v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in ") + what);
    }
  }
}

template <typename T>
static std::shared_ptr<Node<T>> new_node(Shape s, std::vector<T> value,
                                         bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->shape = s;
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), T(0));
  return node;
}

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  const std::vector<Tensor<T>>& parents,
                  std::function<void(Node<T>&)> backward_fn) {
  check_finite(value, "op output");
  bool needs_grad = false;
  for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  auto node = new_node<T>(shape, std::move(value), needs_grad);
  for (const auto& p : parents) node->parents.push_back(p.handle());
  if (needs_grad) node->backward_fn = std::move(backward_fn);
  return Tensor<T>::wrap(std::move(node));
}

}  // namespace detail

// --- Tensor basics ---------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape s, bool requires_grad) {
  return wrap(detail::new_node<T>(s, std::vector<T>(s.numel(), T(0)), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape s, T fill, bool requires_grad) {
  if (!std::isfinite(fill)) throw NumericError("non-finite fill value");
  return wrap(detail::new_node<T>(s, std::vector<T>(s.numel(), fill), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape s, std::vector<T> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != s.numel()) {
    throw ConfigError("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + s.str());
  }
  detail::check_finite(data, "tensor data");
  return wrap(detail::new_node<T>(s, std::move(data), requires_grad));
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  if (!node_->requires_grad) {
    throw UsageError("grad() on a tensor that does not require gradients");
  }
  return node_->grad;
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
  const Shape& s = node_->shape;
  return node_->value[((static_cast<int64_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T& Tensor<T>::at(int n, int c, int h, int w) {
  const Shape& s = node_->shape;
  return node_->value[((static_cast<int64_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw UsageError("item() on non-scalar tensor of shape " + shape().str());
  }
  return node_->value[0];
}

// --- conv2d ----------------------------------------------------------------

int conv2d_out_size(int in, int kernel, int stride, int dilation, int padding) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride, int dilation, int padding) {
  const Shape in = input.shape();
  const Shape k = kernel.shape();
  if (stride < 1 || dilation < 1 || padding < 0) {
    throw ConfigError("conv2d: stride/dilation must be >= 1 and padding >= 0");
  }
  if (k.c != in.c) {
    throw ConfigError("conv2d: kernel input channels " + std::to_string(k.c) +
                      " do not match input channels " + std::to_string(in.c));
  }
  if (bias.shape() != Shape{1, k.n, 1, 1}) {
    throw ConfigError("conv2d: bias shape " + bias.shape().str() +
                      " must be (1," + std::to_string(k.n) + ",1,1)");
  }
  const int oh = conv2d_out_size(in.h, k.h, stride, dilation, padding);
  const int ow = conv2d_out_size(in.w, k.w, stride, dilation, padding);
  if (oh <= 0 || ow <= 0) {
    throw ConfigError("conv2d: empty output for input " + in.str() +
                      " kernel " + k.str());
  }
  const Shape out_shape{in.n, k.n, oh, ow};
  std::vector<T> out(out_shape.numel());

  const T* x = input.data().data();
  const T* wgt = kernel.data().data();
  const T* b = bias.data().data();
  const int64_t in_plane = static_cast<int64_t>(in.h) * in.w;
  const int64_t out_plane = static_cast<int64_t>(oh) * ow;

  for (int n = 0; n < in.n; ++n) {
    for (int oc = 0; oc < k.n; ++oc) {
      T* dst = out.data() + (static_cast<int64_t>(n) * k.n + oc) * out_plane;
      std::fill(dst, dst + out_plane, b[oc]);
      for (int ic = 0; ic < in.c; ++ic) {
        const T* src = x + (static_cast<int64_t>(n) * in.c + ic) * in_plane;
        const T* kw_base = wgt + ((static_cast<int64_t>(oc) * k.c + ic) * k.h) * k.w;
        for (int kh = 0; kh < k.h; ++kh) {
          for (int kw = 0; kw < k.w; ++kw) {
            const T wv = kw_base[kh * k.w + kw];
            if (wv == T(0)) continue;
            // valid output column range for this kernel tap
            const int off_w = kw * dilation - padding;
            const int off_h = kh * dilation - padding;
            int ow_lo = 0, ow_hi = ow;
            while (ow_lo < ow && ow_lo * stride + off_w < 0) ++ow_lo;
            while (ow_hi > ow_lo && (ow_hi - 1) * stride + off_w >= in.w) --ow_hi;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride + off_h;
              if (iy < 0 || iy >= in.h) continue;
              const T* srow = src + static_cast<int64_t>(iy) * in.w + off_w;
              T* drow = dst + static_cast<int64_t>(oy) * ow;
              if (stride == 1) {
                for (int ox = ow_lo; ox < ow_hi; ++ox) drow[ox] += wv * srow[ox];
              } else {
                for (int ox = ow_lo; ox < ow_hi; ++ox) drow[ox] += wv * srow[ox * stride];
              }
            }
          }
        }
      }
    }
  }

  auto bwd = [stride, dilation, padding, in, k, oh, ow](detail::Node<T>& self) {
    detail::Node<T>& x_n = *self.parents[0];
    detail::Node<T>& k_n = *self.parents[1];
    detail::Node<T>& b_n = *self.parents[2];
    const T* g = self.grad.data();
    const T* xv = x_n.value.data();
    const T* kv = k_n.value.data();
    const int64_t in_plane = static_cast<int64_t>(in.h) * in.w;
    const int64_t out_plane = static_cast<int64_t>(oh) * ow;

    for (int n = 0; n < in.n; ++n) {
      for (int oc = 0; oc < k.n; ++oc) {
        const T* grow_base = g + (static_cast<int64_t>(n) * k.n + oc) * out_plane;
        if (b_n.requires_grad) {
          T acc = T(0);
          for (int64_t i = 0; i < out_plane; ++i) acc += grow_base[i];
          b_n.grad[oc] += acc;
        }
        for (int ic = 0; ic < in.c; ++ic) {
          const T* src = xv + (static_cast<int64_t>(n) * in.c + ic) * in_plane;
          T* dsrc = x_n.requires_grad
                        ? x_n.grad.data() + (static_cast<int64_t>(n) * in.c + ic) * in_plane
                        : nullptr;
          const int64_t kbase = (static_cast<int64_t>(oc) * k.c + ic) * k.h * k.w;
          for (int kh = 0; kh < k.h; ++kh) {
            for (int kw = 0; kw < k.w; ++kw) {
              const int off_w = kw * dilation - padding;
              const int off_h = kh * dilation - padding;
              int ow_lo = 0, ow_hi = ow;
              while (ow_lo < ow && ow_lo * stride + off_w < 0) ++ow_lo;
              while (ow_hi > ow_lo && (ow_hi - 1) * stride + off_w >= in.w) --ow_hi;
              const T wv = kv[kbase + kh * k.w + kw];
              T wacc = T(0);
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * stride + off_h;
                if (iy < 0 || iy >= in.h) continue;
                const T* grow = grow_base + static_cast<int64_t>(oy) * ow;
                const T* srow = src + static_cast<int64_t>(iy) * in.w + off_w;
                if (k_n.requires_grad) {
                  if (stride == 1) {
                    for (int ox = ow_lo; ox < ow_hi; ++ox) wacc += grow[ox] * srow[ox];
                  } else {
                    for (int ox = ow_lo; ox < ow_hi; ++ox) wacc += grow[ox] * srow[ox * stride];
                  }
                }
                if (dsrc) {
                  T* drow = dsrc + static_cast<int64_t>(iy) * in.w + off_w;
                  if (stride == 1) {
                    for (int ox = ow_lo; ox < ow_hi; ++ox) drow[ox] += wv * grow[ox];
                  } else {
                    for (int ox = ow_lo; ox < ow_hi; ++ox) drow[ox * stride] += wv * grow[ox];
                  }
                }
              }
              if (k_n.requires_grad) k_n.grad[kbase + kh * k.w + kw] += wacc;
            }
          }
        }
      }
    }
  };

  return detail::make_op<T>(out_shape, std::move(out), {input, kernel, bias},
                            std::move(bwd));
}

// --- bilinear_upsample -------------------------------------------------------

namespace {

struct LerpTap {
  int i0;
  int i1;
  double w1;  // weight of i1; i0 gets 1-w1
};

static std::vector<LerpTap> upsample_taps(int in_size, int factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(in_size) * factor);
  for (int o = 0; o < in_size * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    double f = std::floor(src);
    int i0 = static_cast<int>(f);
    double w1 = src - f;
    int i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0.0; }
    if (i1 >= in_size) { i1 = in_size - 1; if (i0 >= in_size) i0 = in_size - 1; }
    taps[o] = {i0, i1, w1};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, int factor) {
  if (factor < 1) throw ConfigError("bilinear_upsample: factor must be >= 1");
  const Shape in = input.shape();
  const Shape out_shape{in.n, in.c, in.h * factor, in.w * factor};
  const auto ytaps = upsample_taps(in.h, factor);
  const auto xtaps = upsample_taps(in.w, factor);

  std::vector<T> out(out_shape.numel());
  const T* src = input.data().data();
  const int64_t in_plane = static_cast<int64_t>(in.h) * in.w;
  const int64_t out_plane = static_cast<int64_t>(out_shape.h) * out_shape.w;
  const int64_t planes = static_cast<int64_t>(in.n) * in.c;

  for (int64_t p = 0; p < planes; ++p) {
    const T* s = src + p * in_plane;
    T* d = out.data() + p * out_plane;
    for (int oy = 0; oy < out_shape.h; ++oy) {
      const LerpTap& ty = ytaps[oy];
      const T* r0 = s + static_cast<int64_t>(ty.i0) * in.w;
      const T* r1 = s + static_cast<int64_t>(ty.i1) * in.w;
      T* drow = d + static_cast<int64_t>(oy) * out_shape.w;
      for (int ox = 0; ox < out_shape.w; ++ox) {
        const LerpTap& tx = xtaps[ox];
        const double v0 = (1.0 - tx.w1) * static_cast<double>(r0[tx.i0]) +
                          tx.w1 * static_cast<double>(r0[tx.i1]);
        const double v1 = (1.0 - tx.w1) * static_cast<double>(r1[tx.i0]) +
                          tx.w1 * static_cast<double>(r1[tx.i1]);
        drow[ox] = static_cast<T>((1.0 - ty.w1) * v0 + ty.w1 * v1);
      }
    }
  }

  auto bwd = [in, out_shape, ytaps, xtaps](detail::Node<T>& self) {
    detail::Node<T>& x_n = *self.parents[0];
    if (!x_n.requires_grad) return;
    const T* g = self.grad.data();
    const int64_t in_plane = static_cast<int64_t>(in.h) * in.w;
    const int64_t out_plane = static_cast<int64_t>(out_shape.h) * out_shape.w;
    const int64_t planes = static_cast<int64_t>(in.n) * in.c;
    for (int64_t p = 0; p < planes; ++p) {
      const T* grow_base = g + p * out_plane;
      T* dg = x_n.grad.data() + p * in_plane;
      for (int oy = 0; oy < out_shape.h; ++oy) {
        const LerpTap& ty = ytaps[oy];
        const T* grow = grow_base + static_cast<int64_t>(oy) * out_shape.w;
        for (int ox = 0; ox < out_shape.w; ++ox) {
          const LerpTap& tx = xtaps[ox];
          const double gv = static_cast<double>(grow[ox]);
          dg[ty.i0 * in.w + tx.i0] += static_cast<T>((1.0 - ty.w1) * (1.0 - tx.w1) * gv);
          dg[ty.i0 * in.w + tx.i1] += static_cast<T>((1.0 - ty.w1) * tx.w1 * gv);
          dg[ty.i1 * in.w + tx.i0] += static_cast<T>(ty.w1 * (1.0 - tx.w1) * gv);
          dg[ty.i1 * in.w + tx.i1] += static_cast<T>(ty.w1 * tx.w1 * gv);
        }
      }
    }
  };

  return detail::make_op<T>(out_shape, std::move(out), {input}, std::move(bwd));
}

// --- elementwise -------------------------------------------------------------

template <typename T>
static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape().str() +
                      " vs " + b.shape().str());
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data());
  const std::vector<T>& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto bwd = [](detail::Node<T>& self) {
    for (int p = 0; p < 2; ++p) {
      detail::Node<T>& par = *self.parents[p];
      if (!par.requires_grad) continue;
      for (size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
    }
  };
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, std::move(bwd));
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "multiply");
  std::vector<T> out(a.data());
  const std::vector<T>& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto bwd = [](detail::Node<T>& self) {
    detail::Node<T>& a_n = *self.parents[0];
    detail::Node<T>& b_n = *self.parents[1];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const T g = self.grad[i];
      if (a_n.requires_grad) a_n.grad[i] += g * b_n.value[i];
      if (b_n.requires_grad) b_n.grad[i] += g * a_n.value[i];
    }
  };
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, std::move(bwd));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data());
  for (T& v : out) v = v > T(0) ? v : T(0);
  auto bwd = [](detail::Node<T>& self) {
    detail::Node<T>& x_n = *self.parents[0];
    if (!x_n.requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (self.value[i] > T(0)) x_n.grad[i] += self.grad[i];
    }
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x}, std::move(bwd));
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape s = x.shape();
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  const int64_t plane = static_cast<int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    const int64_t base = static_cast<int64_t>(n) * s.c * plane;
    for (int64_t p = 0; p < plane; ++p) {
      T m = xv[base + p];
      for (int c = 1; c < s.c; ++c) m = std::max(m, xv[base + c * plane + p]);
      T denom = T(0);
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(xv[base + c * plane + p] - m);
        out[base + c * plane + p] = e;
        denom += e;
      }
      for (int c = 0; c < s.c; ++c) out[base + c * plane + p] /= denom;
    }
  }
  auto bwd = [s, plane](detail::Node<T>& self) {
    detail::Node<T>& x_n = *self.parents[0];
    if (!x_n.requires_grad) return;
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (int n = 0; n < s.n; ++n) {
      const int64_t base = static_cast<int64_t>(n) * s.c * plane;
      for (int64_t p = 0; p < plane; ++p) {
        T dot = T(0);
        for (int c = 0; c < s.c; ++c) {
          const int64_t i = base + c * plane + p;
          dot += g[i] * y[i];
        }
        for (int c = 0; c < s.c; ++c) {
          const int64_t i = base + c * plane + p;
          x_n.grad[i] += y[i] * (g[i] - dot);
        }
      }
    }
  };
  return detail::make_op<T>(s, std::move(out), {x}, std::move(bwd));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (const T& v : x.data()) acc += v;
  auto bwd = [](detail::Node<T>& self) {
    detail::Node<T>& x_n = *self.parents[0];
    if (!x_n.requires_grad) return;
    const T g = self.grad[0];
    for (T& d : x_n.grad) d += g;
  };
  return detail::make_op<T>(Shape{1, 1, 1, 1}, {acc}, {x}, std::move(bwd));
}

// --- backward ----------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw UsageError("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + loss.shape().str());
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward: loss does not depend on any parameter");
  }

  // Post-order over parents; order is fixed by the graph structure, the
  // visited set only answers membership.
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Fresh gradients per call.
  for (NodeT* n : order) std::fill(n->grad.begin(), n->grad.end(), T(0));
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  for (NodeT* n : order) detail::check_finite(n->grad, "gradient");
}

// --- Adam --------------------------------------------------------------------

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state,
               T learning_rate) {
  if (!(learning_rate > T(0))) throw ConfigError("adam_step: learning_rate must be > 0");
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i].data().size(), T(0));
      state.second_moment[i].assign(params[i].data().size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ConfigError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                      " params, got " + std::to_string(params.size()));
  }

  state.step_count += 1;
  const T b1 = state.beta1;
  const T b2 = state.beta2;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1),
                                               static_cast<double>(state.step_count)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2),
                                               static_cast<double>(state.step_count)));

  for (size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].data();
    const auto& g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != w.size()) {
      throw ConfigError("adam_step: moment shape mismatch at param " + std::to_string(i));
    }
    for (size_t j = 0; j < w.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("adam_step: NaN/Inf gradient at param " + std::to_string(i) +
                           " element " + std::to_string(j));
      }
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      w[j] -= learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// --- explicit instantiations ---------------------------------------------------

#define MOTADAPT_INSTANTIATE(T)                                                     \
  template class Tensor<T>;                                                         \
  template Tensor<T> detail::make_op<T>(Shape, std::vector<T>,                      \
                                        const std::vector<Tensor<T>>&,              \
                                        std::function<void(detail::Node<T>&)>);     \
  template void detail::check_finite<T>(const std::vector<T>&, const char*);        \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,\
                               int, int, int);                                      \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, int);                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> multiply<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                     \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                         \
  template Tensor<T> sum<T>(const Tensor<T>&);                                      \
  template void backward<T>(const Tensor<T>&);                                      \
  template void adam_step<T>(std::vector<Tensor<T>>&, AdamState<T>&, T);

MOTADAPT_INSTANTIATE(float)
MOTADAPT_INSTANTIATE(double)

#undef MOTADAPT_INSTANTIATE

}  // namespace motadapt
