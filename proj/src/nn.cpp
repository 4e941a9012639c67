// SPDX-License-Identifier: Apache-2.0
#include "xllm/nn.hpp"

#include <cmath>

#include "xllm/error.hpp"

namespace xllm {
namespace {

constexpr double kMaskedScore = -1e30;

Tensor attention_bias(std::size_t n, std::size_t s, const AttentionMask& mask) {
  if (mask.key_valid.empty() && !mask.causal) return {};
  if (!mask.key_valid.empty() && mask.key_valid.size() != s) {
    throw DimensionError("attention mask covers " + std::to_string(mask.key_valid.size()) +
                         " keys, memory has " + std::to_string(s));
  }
  Tensor bias({n, s});
  auto b = bias.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      const bool valid = (mask.key_valid.empty() || mask.key_valid[j]) && (!mask.causal || j <= i);
      if (!valid) b[i * s + j] = kMaskedScore;
    }
  }
  return bias;
}

}  // namespace

Tensor randn(std::mt19937_64& rng, Shape shape, double sd) {
  std::normal_distribution<double> nd(0.0, sd);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = nd(rng);
  return t;
}

void copy_params(const ParamList& src, const ParamList& dst) {
  if (src.size() != dst.size()) {
    throw ConfigError("parameter count mismatch: " + std::to_string(src.size()) + " vs " +
                      std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape()) {
      throw ConfigError("parameter '" + src[i].first + "' does not match '" + dst[i].first + "'");
    }
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].second.data();
    Tensor to = dst[i].second;
    std::copy(from.begin(), from.end(), to.mutable_data().begin());
  }
}

void set_requires_grad(const ParamList& params, bool on) {
  for (const auto& [name, t] : params) {
    Tensor handle = t;
    handle.set_requires_grad(on);
  }
}

Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
  Tensor pe({n, d});
  auto p = pe.mutable_data();
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      p[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) p[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias)
    : weight(randn(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)))) {
  if (with_bias) bias = Tensor({out});
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

void Linear::set_identity() {
  const std::size_t in = weight.rows(), out = weight.cols();
  if (in != out) throw ConfigError("identity initialisation needs a square layer");
  auto w = weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < in; ++i) w[i * out + i] = 1.0;
  if (bias.defined()) {
    auto b = bias.mutable_data();
    std::fill(b.begin(), b.end(), 0.0);
  }
}

LayerNorm::LayerNorm(std::size_t d) : gamma({d}, 1.0), beta({d}, 0.0) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

FeedForward::FeedForward(std::size_t d_model, std::size_t d_ffn, std::mt19937_64& rng)
    : up(d_model, d_ffn, rng), down(d_ffn, d_model, rng) {}

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

// ---------------------------------------------------------------- attention

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t kv_dim, std::size_t heads,
                                       std::mt19937_64& rng, bool value_out_bias)
    : n_heads(heads),
      q(d_model, d_model, rng),
      k(kv_dim, d_model, rng, /*with_bias=*/false),
      v(kv_dim, d_model, rng, value_out_bias),
      o(d_model, d_model, rng, value_out_bias) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& memory,
                                      const AttentionMask& mask) const {
  const std::size_t d = q.weight.cols();
  const std::size_t dh = d / n_heads;
  Tensor Q = q(query), K = k(memory), V = v(memory);
  Tensor bias = attention_bias(query.rows(), memory.rows(), mask);
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = n_heads == 1 ? Q : slice_cols(Q, h * dh, dh);
    Tensor kh = n_heads == 1 ? K : slice_cols(K, h * dh, dh);
    Tensor vh = n_heads == 1 ? V : slice_cols(V, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), s);
    if (bias.defined()) scores = add(scores, bias);
    heads.push_back(matmul(softmax(scores), vh));
  }
  Tensor joined = n_heads == 1 ? heads[0] : concat_cols(heads);
  return o(joined);
}

void MultiHeadAttention::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

// ---------------------------------------------------------------- blocks

TransformerBlock::TransformerBlock(const TransformerBlockConfig& cfg, std::mt19937_64& rng)
    : has_cross(cfg.cross_attention),
      ln_self(cfg.d_model),
      ln_ffn(cfg.d_model),
      self_attn(cfg.d_model, cfg.d_model, cfg.n_heads, rng),
      ffn(cfg.d_model, cfg.d_ffn, rng) {
  if (has_cross) {
    ln_cross = LayerNorm(cfg.d_model);
    cross_attn = MultiHeadAttention(cfg.d_model, cfg.memory_dim ? cfg.memory_dim : cfg.d_model,
                                    cfg.n_heads, rng, cfg.cross_value_bias);
  }
}

Tensor TransformerBlock::operator()(const Tensor& x, const AttentionMask& self_mask,
                                    const Tensor& memory, const AttentionMask& memory_mask) const {
  Tensor h = ln_self(x);
  Tensor y = add(x, self_attn(h, h, self_mask));
  if (has_cross) {
    if (!memory.defined()) throw DimensionError("cross-attention block needs a memory tensor");
    y = add(y, cross_attn(ln_cross(y), memory, memory_mask));
  }
  return add(y, ffn(ln_ffn(y)));
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  ln_self.collect(out, prefix + ".ln_self");
  self_attn.collect(out, prefix + ".self_attn");
  if (has_cross) {
    ln_cross.collect(out, prefix + ".ln_cross");
    cross_attn.collect(out, prefix + ".cross_attn");
  }
  ln_ffn.collect(out, prefix + ".ln_ffn");
  ffn.collect(out, prefix + ".ffn");
}

ConformerBlock::ConformerBlock(std::size_t d_model, std::size_t n_heads, std::size_t d_ffn,
                               std::size_t conv_kernel, std::mt19937_64& rng)
    : kernel(conv_kernel),
      ln_attn(d_model),
      ln_conv(d_model),
      ln_ffn(d_model),
      ln_out(d_model),
      attn(d_model, d_model, n_heads, rng),
      dw_weight(randn(rng, {conv_kernel, d_model}, 1.0 / std::sqrt(static_cast<double>(conv_kernel)))),
      dw_bias({d_model}),
      pointwise(d_model, d_model, rng),
      ffn(d_model, d_ffn, rng) {
  if (conv_kernel % 2 == 0) throw ConfigError("depthwise kernel must be odd");
}

Tensor ConformerBlock::operator()(const Tensor& x, const AttentionMask& mask) const {
  Tensor h = ln_attn(x);
  Tensor y = add(x, attn(h, h, mask));
  const std::size_t pad = kernel / 2;
  Tensor c = pointwise(gelu(depthwise_conv1d(ln_conv(y), dw_weight, dw_bias, pad, pad)));
  y = add(y, c);
  y = add(y, ffn(ln_ffn(y)));
  return ln_out(y);
}

void ConformerBlock::collect(ParamList& out, const std::string& prefix) const {
  ln_attn.collect(out, prefix + ".ln_attn");
  attn.collect(out, prefix + ".attn");
  ln_conv.collect(out, prefix + ".ln_conv");
  out.emplace_back(prefix + ".dw_weight", dw_weight);
  out.emplace_back(prefix + ".dw_bias", dw_bias);
  pointwise.collect(out, prefix + ".pointwise");
  ln_ffn.collect(out, prefix + ".ln_ffn");
  ffn.collect(out, prefix + ".ffn");
  ln_out.collect(out, prefix + ".ln_out");
}

}  // namespace xllm
