// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding data and (optionally) a
// gradient buffer. Operations record themselves on the thread's active Tape
// when at least one input requires a gradient; with no active tape every
// operation is a plain forward computation.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace xllm {

using Shape = std::vector<std::size_t>;

enum class DType { kFloat64 };

// Only "float64" (alias "f64") is supported; anything else is a ConfigError.
DType parse_dtype(std::string_view name);

std::size_t shape_size(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  // Zero-filled gradient buffer, allocated on first use.
  std::span<double> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy of the values, detached from any tape.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of differentiable operations. Constructing a Tape makes it
// the active tape of the calling thread until it is destroyed.
class Tape {
 public:
  using BackwardFn =
      std::function<void(detail::Node& out, std::span<detail::Node* const> in)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Seeds d(loss) = seed and replays adjoints newest-first. Each record is
  // visited exactly once; the tape is empty afterwards.
  void backward(const Tensor& loss, double seed = 1.0);

  std::size_t size() const { return records_.size(); }

  void push(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

 private:
  struct Record {
    std::shared_ptr<detail::Node> out;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  Tape* previous_ = nullptr;
};

// Suspends recording on the current thread for its lifetime.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* saved_;
};

namespace detail {
// Records `out` on the active tape if any input requires a gradient.
void record(const Tensor& out, std::vector<Tensor> inputs, Tape::BackwardFn fn);
// Gradient buffer of an input, or an empty span when it is not tracked.
std::span<double> grad_of(Node* node);
}  // namespace detail

// Elementwise arithmetic. `b` may match `a`, hold a single value, or be a
// rank-1 vector matching the last axis of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor reciprocal(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// x: [T x Cin], weight: [K x Cin x Cout], bias: [Cout] or undefined.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad_left, std::size_t pad_right);
// x: [T x C], weight: [K x C], bias: [C]; stride 1.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight,
                        const Tensor& bias, std::size_t pad_left,
                        std::size_t pad_right);

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;
};
// x: [H x W x Cin], weight: [KH x KW x Cin x Cout], bias: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv2dGeometry& geometry);

// Non-overlapping max pooling along axis 0 of a [T x C] tensor; output
// length floor(T / window). Ties route the gradient to the first maximum.
Tensor max_pool_time(const Tensor& x, std::size_t window);

// Rows of `table` ([V x d]) selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Mean cross-entropy of rows of [n x V] logits against integer targets.
// Targets < 0 are ignored; at least one target must be active.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor reshape(const Tensor& a, Shape shape);

}  // namespace xllm
