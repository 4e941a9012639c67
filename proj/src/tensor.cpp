// SPDX-License-Identifier: Apache-2.0
#include "xllm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>

#include <Eigen/Core>

#include "xllm/error.hpp"

namespace xllm {
namespace {

thread_local Tape* g_active_tape = nullptr;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + " tensor, got " +
                         (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

enum class Broadcast { kSame, kScalar, kRow };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back()) {
    return Broadcast::kRow;
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " +
                       shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

// Visits (element, broadcast element) pairs without a per-element modulo.
template <class F>
inline void each_broadcast(Broadcast kind, std::size_t n, std::size_t width, F&& f) {
  switch (kind) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i);
      return;
    case Broadcast::kScalar:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0});
      return;
    case Broadcast::kRow:
      for (std::size_t r = 0; r < n; r += width)
        for (std::size_t j = 0; j < width; ++j) f(r + j, j);
      return;
  }
}

template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& a, Fwd fwd, Dfdx dfdx) {
  Tensor out(a.shape());
  auto x = a.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  detail::record(out, {a}, [dfdx](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    const auto& xs = in[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * dfdx(xs[i], o.data[i]);
  });
  return out;
}

}  // namespace

DType parse_dtype(std::string_view name) {
  if (name == "float64" || name == "f64") return DType::kFloat64;
  throw ConfigError("unsupported dtype '" + std::string(name) +
                    "' (only float64 is available)");
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::span<double> detail::Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  node_->data.assign(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (data.size() != shape_size(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  node_->data = std::move(data);
  node_->shape = std::move(shape);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

const Shape& Tensor::shape() const {
  if (!node_) throw DimensionError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

// ---------------------------------------------------------------- Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::push(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  Record rec;
  rec.out = out.shared();
  rec.inputs.reserve(inputs.size());
  for (auto& t : inputs) rec.inputs.push_back(t.shared());
  rec.fn = std::move(fn);
  records_.push_back(std::move(rec));
}

void Tape::backward(const Tensor& loss, double seed) {
  if (loss.size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    records_.clear();
    return;
  }
  loss.node()->grad_buffer()[0] += seed;
  std::vector<detail::Node*> raw;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    auto& out = *it->out;
    raw.clear();
    for (auto& p : it->inputs) raw.push_back(p.get());
    if (out.grad.size() == out.data.size()) {
      it->fn(out, raw);
    } else {
      // Unreached output: inputs still receive (zero) gradient buffers.
      for (auto* n : raw) detail::grad_of(n);
    }
  }
  records_.clear();
}

NoGrad::NoGrad() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGrad::~NoGrad() { g_active_tape = saved_; }

void detail::record(const Tensor& out, std::vector<Tensor> inputs, Tape::BackwardFn fn) {
  Tape* tape = g_active_tape;
  if (!tape) return;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return;
  out.node()->requires_grad = true;
  tape->push(out, std::move(inputs), std::move(fn));
}

std::span<double> detail::grad_of(Node* node) {
  if (!node || !node->requires_grad) return {};
  return node->grad_buffer();
}

// ---------------------------------------------------------------- arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "add");
  const std::size_t w = b.size();
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  each_broadcast(kind, z.size(), w, [&](std::size_t i, std::size_t j) { z[i] = x[i] + y[j]; });
  detail::record(out, {a, b}, [kind, w](detail::Node& o, std::span<detail::Node* const> in) {
    if (auto ga = detail::grad_of(in[0]); !ga.empty()) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
    if (auto gb = detail::grad_of(in[1]); !gb.empty()) {
      each_broadcast(kind, o.grad.size(), w, [&](std::size_t i, std::size_t j) { gb[j] += o.grad[i]; });
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "sub");
  const std::size_t w = b.size();
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  each_broadcast(kind, z.size(), w, [&](std::size_t i, std::size_t j) { z[i] = x[i] - y[j]; });
  detail::record(out, {a, b}, [kind, w](detail::Node& o, std::span<detail::Node* const> in) {
    if (auto ga = detail::grad_of(in[0]); !ga.empty()) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
    if (auto gb = detail::grad_of(in[1]); !gb.empty()) {
      each_broadcast(kind, o.grad.size(), w, [&](std::size_t i, std::size_t j) { gb[j] -= o.grad[i]; });
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "mul");
  const std::size_t w = b.size();
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  each_broadcast(kind, z.size(), w, [&](std::size_t i, std::size_t j) { z[i] = x[i] * y[j]; });
  detail::record(out, {a, b}, [kind, w](detail::Node& o, std::span<detail::Node* const> in) {
    const auto& xa = in[0]->data;
    const auto& xb = in[1]->data;
    if (auto ga = detail::grad_of(in[0]); !ga.empty()) {
      each_broadcast(kind, ga.size(), w, [&](std::size_t i, std::size_t j) { ga[i] += o.grad[i] * xb[j]; });
    }
    if (auto gb = detail::grad_of(in[1]); !gb.empty()) {
      each_broadcast(kind, o.grad.size(), w, [&](std::size_t i, std::size_t j) { gb[j] += o.grad[i] * xa[i]; });
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor reciprocal(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 / x; },
               [](double, double y) { return -y * y; });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a,
               [](double x) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
               [](double x, double) {
                 return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                        x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
               });
}

// ---------------------------------------------------------------- linear algebra

namespace {
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using CRowMap = Eigen::Map<const RowMatrix>;
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  RowMap(out.mutable_data().data(), m, n).noalias() = CRowMap(a.data().data(), m, k) * CRowMap(b.data().data(), k, n);
  detail::record(out, {a, b}, [m, k, n](detail::Node& o, std::span<detail::Node* const> in) {
    const CRowMap G(o.grad.data(), m, n);
    if (auto ga = detail::grad_of(in[0]); !ga.empty()) {
      RowMap(ga.data(), m, k).noalias() += G * CRowMap(in[1]->data.data(), k, n).transpose();
    }
    if (auto gb = detail::grad_of(in[1]); !gb.empty()) {
      RowMap(gb.data(), k, n).noalias() += CRowMap(in[0]->data.data(), m, k).transpose() * G;
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({c, r});
  auto x = a.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  detail::record(out, {a}, [r, c](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
  return out;
}

Tensor softmax(const Tensor& a) {
  if (!a.defined() || a.rank() == 0) throw DimensionError("softmax: undefined input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Tensor out(a.shape());
  auto x = a.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = y.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  detail::record(out, {a}, [rows, n](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = o.data.data() + r * n;
      const double* gy = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (gy[j] - dot);
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.shape().back();
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: affine parameters must match last axis " +
                         std::to_string(n));
  }
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  std::vector<double> xhat(x.size()), rstd(rows);
  auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  auto ys = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      xhat[r * n + j] = h;
      ys[r * n + j] = h * gs[j] + bs[j];
    }
  }
  detail::record(out, {x, gamma, beta},
                 [rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](
                     detail::Node& o, std::span<detail::Node* const> in) {
                   const auto& gam = in[1]->data;
                   auto gx = detail::grad_of(in[0]);
                   auto gg = detail::grad_of(in[1]);
                   auto gbeta = detail::grad_of(in[2]);
                   const double inv_n = 1.0 / static_cast<double>(n);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* dy = o.grad.data() + r * n;
                     const double* h = xhat.data() + r * n;
                     if (!gg.empty())
                       for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * h[j];
                     if (!gbeta.empty())
                       for (std::size_t j = 0; j < n; ++j) gbeta[j] += dy[j];
                     if (gx.empty()) continue;
                     double s1 = 0.0, s2 = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       const double dh = dy[j] * gam[j];
                       s1 += dh;
                       s2 += dh * h[j];
                     }
                     for (std::size_t j = 0; j < n; ++j) {
                       const double dh = dy[j] * gam[j];
                       gx[r * n + j] += rstd[r] * (dh - inv_n * s1 - h[j] * inv_n * s2);
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------- convolution

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad_left, std::size_t pad_right) {
  require_rank(x, 2, "conv1d");
  require_rank(weight, 3, "conv1d weight");
  const std::size_t T = x.rows(), cin = x.cols();
  const std::size_t K = weight.dim(0), cout = weight.dim(2);
  if (weight.dim(1) != cin) throw DimensionError("conv1d: channel mismatch");
  if (bias.defined() && bias.size() != cout) throw DimensionError("conv1d: bias width");
  if (stride == 0) throw DimensionError("conv1d: stride must be positive");
  if (T + pad_left + pad_right < K) throw LengthError("conv1d: input shorter than kernel");
  const std::size_t tout = (T + pad_left + pad_right - K) / stride + 1;
  Tensor out({tout, cout});
  auto xs = x.data(), ws = weight.data();
  auto ys = out.mutable_data();
  for (std::size_t t = 0; t < tout; ++t) {
    double* y = ys.data() + t * cout;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), y);
    for (std::size_t k = 0; k < K; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                 static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      const double* xr = xs.data() + static_cast<std::size_t>(src) * cin;
      const double* wk = ws.data() + k * cin * cout;
      for (std::size_t c = 0; c < cin; ++c) {
        const double xv = xr[c];
        const double* wr = wk + c * cout;
        for (std::size_t o = 0; o < cout; ++o) y[o] += xv * wr[o];
      }
    }
  }
  detail::record(out, {x, weight, bias},
                 [T, cin, K, cout, tout, stride, pad_left](detail::Node& o,
                                                          std::span<detail::Node* const> in) {
                   const auto& xs = in[0]->data;
                   const auto& ws = in[1]->data;
                   auto gx = detail::grad_of(in[0]);
                   auto gw = detail::grad_of(in[1]);
                   auto gb = detail::grad_of(in[2]);
                   for (std::size_t t = 0; t < tout; ++t) {
                     const double* dy = o.grad.data() + t * cout;
                     if (!gb.empty())
                       for (std::size_t c = 0; c < cout; ++c) gb[c] += dy[c];
                     for (std::size_t k = 0; k < K; ++k) {
                       const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                                  static_cast<std::ptrdiff_t>(pad_left);
                       if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                       const std::size_t s = static_cast<std::size_t>(src);
                       for (std::size_t c = 0; c < cin; ++c) {
                         const double* wr = ws.data() + (k * cin + c) * cout;
                         if (!gx.empty()) {
                           double acc = 0.0;
                           for (std::size_t q = 0; q < cout; ++q) acc += dy[q] * wr[q];
                           gx[s * cin + c] += acc;
                         }
                         if (!gw.empty()) {
                           const double xv = xs[s * cin + c];
                           double* gwr = gw.data() + (k * cin + c) * cout;
                           for (std::size_t q = 0; q < cout; ++q) gwr[q] += xv * dy[q];
                         }
                       }
                     }
                   }
                 });
  return out;
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t pad_left, std::size_t pad_right) {
  require_rank(x, 2, "depthwise_conv1d");
  require_rank(weight, 2, "depthwise_conv1d weight");
  const std::size_t T = x.rows(), C = x.cols(), K = weight.dim(0);
  if (weight.dim(1) != C) throw DimensionError("depthwise_conv1d: channel mismatch");
  if (bias.defined() && bias.size() != C) throw DimensionError("depthwise_conv1d: bias width");
  if (T + pad_left + pad_right < K) throw LengthError("depthwise_conv1d: input shorter than kernel");
  const std::size_t tout = T + pad_left + pad_right - K + 1;
  Tensor out({tout, C});
  auto xs = x.data(), ws = weight.data();
  auto ys = out.mutable_data();
  for (std::size_t t = 0; t < tout; ++t) {
    double* y = ys.data() + t * C;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), y);
    for (std::size_t k = 0; k < K; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      const double* xr = xs.data() + static_cast<std::size_t>(src) * C;
      const double* wk = ws.data() + k * C;
      for (std::size_t c = 0; c < C; ++c) y[c] += xr[c] * wk[c];
    }
  }
  detail::record(out, {x, weight, bias},
                 [T, C, K, tout, pad_left](detail::Node& o, std::span<detail::Node* const> in) {
                   const auto& xs = in[0]->data;
                   const auto& ws = in[1]->data;
                   auto gx = detail::grad_of(in[0]);
                   auto gw = detail::grad_of(in[1]);
                   auto gb = detail::grad_of(in[2]);
                   for (std::size_t t = 0; t < tout; ++t) {
                     const double* dy = o.grad.data() + t * C;
                     if (!gb.empty())
                       for (std::size_t c = 0; c < C; ++c) gb[c] += dy[c];
                     for (std::size_t k = 0; k < K; ++k) {
                       const std::ptrdiff_t src =
                           static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad_left);
                       if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                       const std::size_t s = static_cast<std::size_t>(src);
                       for (std::size_t c = 0; c < C; ++c) {
                         if (!gx.empty()) gx[s * C + c] += dy[c] * ws[k * C + c];
                         if (!gw.empty()) gw[k * C + c] += dy[c] * xs[s * C + c];
                       }
                     }
                   }
                 });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dGeometry& g) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t H = x.dim(0), W = x.dim(1), cin = x.dim(2);
  const std::size_t KH = weight.dim(0), KW = weight.dim(1), cout = weight.dim(3);
  if (weight.dim(2) != cin) throw DimensionError("conv2d: channel mismatch");
  if (bias.defined() && bias.size() != cout) throw DimensionError("conv2d: bias width");
  if (g.stride_h == 0 || g.stride_w == 0) throw DimensionError("conv2d: stride must be positive");
  if (H + g.pad_top + g.pad_bottom < KH || W + g.pad_left + g.pad_right < KW) {
    throw LengthError("conv2d: input smaller than kernel");
  }
  const std::size_t HO = (H + g.pad_top + g.pad_bottom - KH) / g.stride_h + 1;
  const std::size_t WO = (W + g.pad_left + g.pad_right - KW) / g.stride_w + 1;
  Tensor out({HO, WO, cout});
  auto xs = x.data(), ws = weight.data();
  auto ys = out.mutable_data();
  auto src_of = [](std::size_t o, std::size_t k, std::size_t stride, std::size_t pad,
                   std::size_t extent) -> std::ptrdiff_t {
    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
    return (s < 0 || s >= static_cast<std::ptrdiff_t>(extent)) ? -1 : s;
  };
  for (std::size_t oh = 0; oh < HO; ++oh) {
    for (std::size_t ow = 0; ow < WO; ++ow) {
      double* y = ys.data() + (oh * WO + ow) * cout;
      if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), y);
      for (std::size_t kh = 0; kh < KH; ++kh) {
        const auto ih = src_of(oh, kh, g.stride_h, g.pad_top, H);
        if (ih < 0) continue;
        for (std::size_t kw = 0; kw < KW; ++kw) {
          const auto iw = src_of(ow, kw, g.stride_w, g.pad_left, W);
          if (iw < 0) continue;
          const double* xr = xs.data() + (static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * cin;
          const double* wk = ws.data() + (kh * KW + kw) * cin * cout;
          for (std::size_t c = 0; c < cin; ++c) {
            const double xv = xr[c];
            const double* wr = wk + c * cout;
            for (std::size_t q = 0; q < cout; ++q) y[q] += xv * wr[q];
          }
        }
      }
    }
  }
  detail::record(
      out, {x, weight, bias},
      [H, W, cin, KH, KW, cout, HO, WO, g, src_of](detail::Node& o, std::span<detail::Node* const> in) {
        const auto& xs = in[0]->data;
        const auto& ws = in[1]->data;
        auto gx = detail::grad_of(in[0]);
        auto gw = detail::grad_of(in[1]);
        auto gb = detail::grad_of(in[2]);
        for (std::size_t oh = 0; oh < HO; ++oh) {
          for (std::size_t ow = 0; ow < WO; ++ow) {
            const double* dy = o.grad.data() + (oh * WO + ow) * cout;
            if (!gb.empty())
              for (std::size_t q = 0; q < cout; ++q) gb[q] += dy[q];
            for (std::size_t kh = 0; kh < KH; ++kh) {
              const auto ih = src_of(oh, kh, g.stride_h, g.pad_top, H);
              if (ih < 0) continue;
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const auto iw = src_of(ow, kw, g.stride_w, g.pad_left, W);
                if (iw < 0) continue;
                const std::size_t xoff = (static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * cin;
                for (std::size_t c = 0; c < cin; ++c) {
                  const std::size_t woff = ((kh * KW + kw) * cin + c) * cout;
                  if (!gx.empty()) {
                    double acc = 0.0;
                    for (std::size_t q = 0; q < cout; ++q) acc += dy[q] * ws[woff + q];
                    gx[xoff + c] += acc;
                  }
                  if (!gw.empty()) {
                    const double xv = xs[xoff + c];
                    for (std::size_t q = 0; q < cout; ++q) gw[woff + q] += xv * dy[q];
                  }
                }
              }
            }
          }
        }
      });
  return out;
}

Tensor max_pool_time(const Tensor& x, std::size_t window) {
  require_rank(x, 2, "max_pool_time");
  if (window == 0) throw DimensionError("max_pool_time: window must be positive");
  const std::size_t T = x.rows(), C = x.cols();
  const std::size_t tout = T / window;
  if (tout == 0) throw LengthError("max_pool_time: input shorter than window");
  Tensor out({tout, C});
  std::vector<std::size_t> argmax(tout * C);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t t = 0; t < tout; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t best = t * window;
      for (std::size_t k = 1; k < window; ++k) {
        const std::size_t cand = t * window + k;
        if (xs[cand * C + c] > xs[best * C + c]) best = cand;
      }
      argmax[t * C + c] = best * C + c;
      ys[t * C + c] = xs[best * C + c];
    }
  }
  detail::record(out, {x}, [argmax = std::move(argmax)](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
  });
  return out;
}

// ---------------------------------------------------------------- lookup & losses

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t V = table.rows(), d = table.cols();
  if (ids.empty()) throw LengthError("embedding: no ids");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw VocabularyError("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(V));
    }
  }
  Tensor out({ids.size(), d});
  auto ts = table.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(ts.data() + static_cast<std::size_t>(ids[i]) * d, d, ys.data() + i * d);
  }
  std::vector<int> keep(ids.begin(), ids.end());
  detail::record(out, {table}, [d, keep = std::move(keep)](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      double* dst = g.data() + static_cast<std::size_t>(keep[i]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += o.grad[i * d + j];
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.rows(), V = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  std::size_t active = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(V)) throw VocabularyError("cross_entropy: target outside vocabulary");
    if (t >= 0) ++active;
  }
  if (active == 0) throw LengthError("cross_entropy: no active targets");
  auto xs = logits.data();
  std::vector<double> probs(n * V, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    const double* x = xs.data() + r * V;
    const double mx = *std::max_element(x, x + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += (probs[r * V + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= z;
    total += std::log(z) + mx - x[targets[r]];
  }
  const double inv = 1.0 / static_cast<double>(active);
  Tensor out = Tensor::scalar(total * inv);
  std::vector<int> tgt(targets.begin(), targets.end());
  detail::record(out, {logits},
                 [n, V, inv, probs = std::move(probs), tgt = std::move(tgt)](
                     detail::Node& o, std::span<detail::Node* const> in) {
                   auto g = detail::grad_of(in[0]);
                   if (g.empty()) return;
                   const double s = o.grad[0] * inv;
                   for (std::size_t r = 0; r < n; ++r) {
                     if (tgt[r] < 0) continue;
                     for (std::size_t j = 0; j < V; ++j) g[r * V + j] += s * probs[r * V + j];
                     g[r * V + static_cast<std::size_t>(tgt[r])] -= s;
                   }
                 });
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::record(out, {a}, [](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    for (auto& v : g) v += o.grad[0];
  });
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------- structure

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw LengthError("concat_rows: nothing to concatenate");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    r += p.rows();
  }
  Tensor out({r, c});
  auto ys = out.mutable_data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), ys.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  detail::record(out, std::vector<Tensor>(parts.begin(), parts.end()),
                 [](detail::Node& o, std::span<detail::Node* const> in) {
                   std::size_t off = 0;
                   for (auto* n : in) {
                     auto g = detail::grad_of(n);
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
                     off += n->data.size();
                   }
                 });
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw LengthError("concat_cols: nothing to concatenate");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    c += p.cols();
  }
  Tensor out({r, c});
  auto ys = out.mutable_data();
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto xs = p.data();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(xs.data() + i * pc, pc, ys.data() + i * c + col);
    col += pc;
  }
  detail::record(out, std::vector<Tensor>(parts.begin(), parts.end()),
                 [r, c](detail::Node& o, std::span<detail::Node* const> in) {
                   std::size_t col = 0;
                   for (auto* n : in) {
                     const std::size_t pc = n->shape[1];
                     auto g = detail::grad_of(n);
                     if (!g.empty()) {
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += o.grad[i * c + col + j];
                     }
                     col += pc;
                   }
                 });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank(a, 2, "slice_rows");
  if (count == 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(a.shape()));
  }
  const std::size_t c = a.cols();
  Tensor out({count, c});
  std::copy_n(a.data().data() + start * c, count * c, out.mutable_data().data());
  detail::record(out, {a}, [start, c](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[start * c + i] += o.grad[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  if (count == 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: range outside " + shape_str(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({r, count});
  auto xs = a.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xs.data() + i * c + start, count, ys.data() + i * count);
  detail::record(out, {a}, [r, c, start, count](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + start + j] += o.grad[i * count + j];
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  detail::record(out, {a}, [](detail::Node& o, std::span<detail::Node* const> in) {
    auto g = detail::grad_of(in[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
  return out;
}

}  // namespace xllm
