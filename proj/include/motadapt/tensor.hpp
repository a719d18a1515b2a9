#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "motadapt/errors.hpp"

namespace motadapt {

// Dense (N, C, H, W) shape. Every tensor in this library is rank 4; scalars
// are (1,1,1,1).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  int64_t numel() const {
    return static_cast<int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grads
};

}  // namespace detail

// Reverse-mode autodiff tensor. A Tensor is a cheap handle onto a graph
// node; ops build fresh nodes, so forward graphs are immutable once
// created. Parameter values may only be mutated through the optimizer.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, T fill, bool requires_grad = false);
  static Tensor from_data(Shape s, std::vector<T> data, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->shape.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  const std::vector<T>& grad() const;

  T at(int n, int c, int h, int w) const;
  T& at(int n, int c, int h, int w);
  // Value of a scalar tensor.
  T item() const;

  detail::Node<T>* node() const { return node_.get(); }
  std::shared_ptr<detail::Node<T>> handle() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

// Factory for op nodes; validates the forward values are finite and wires
// requires_grad from the parents. Custom ops (e.g. the losses) go through
// this as well.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  const std::vector<Tensor<T>>& parents,
                  std::function<void(Node<T>&)> backward_fn);

template <typename T>
void check_finite(const std::vector<T>& values, const char* what);

}  // namespace detail

// --- Operations ------------------------------------------------------------

int conv2d_out_size(int in, int kernel, int stride, int dilation, int padding);

// 2-D convolution (cross-correlation). input (N,Cin,H,W), kernel
// (Cout,Cin,kh,kw), bias (1,Cout,1,1). Differentiable w.r.t. all three.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride = 1, int dilation = 1,
                 int padding = 0);

// Bilinear upsampling by an integer factor with half-pixel sample centers:
// src = (dst + 0.5)/factor - 0.5, edges clamped.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, int factor);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Softmax over the channel dimension, per (n,h,w) location.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x);

// Sum of all elements, as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// Populates grad for every requires_grad tensor reachable from `loss`.
// Gradients are freshly computed per call; nothing accumulates across calls.
template <typename T>
void backward(const Tensor<T>& loss);

// --- Adam ------------------------------------------------------------------

template <typename T>
struct AdamState {
  int64_t step_count = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  std::vector<std::vector<T>> first_moment;   // parallel to the param list
  std::vector<std::vector<T>> second_moment;
};

// Standard Adam update with bias correction, applied in place to the
// parameter values using the gradients left by backward().
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state,
               T learning_rate);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace motadapt
