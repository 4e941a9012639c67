// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xllm/tensor.hpp"

namespace xllm {

// Named parameters in a stable order; names are dotted paths.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

Tensor randn(std::mt19937_64& rng, Shape shape, double sd);

// Copies values from `src` into `dst`; names and shapes must agree.
void copy_params(const ParamList& src, const ParamList& dst);

void set_requires_grad(const ParamList& params, bool on);

// Fixed sinusoidal position table [n x d].
Tensor sinusoidal_positions(std::size_t n, std::size_t d);

struct Linear {
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true);

  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
  void set_identity();

  Tensor weight;  // [in x out]
  Tensor bias;    // [out], undefined when bias-free
};

struct LayerNorm {
  LayerNorm() = default;
  explicit LayerNorm(std::size_t d);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor gamma, beta;
};

struct FeedForward {
  FeedForward() = default;
  FeedForward(std::size_t d_model, std::size_t d_ffn, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
  void collect(ParamList& out, const std::string& prefix) const;

  Linear up, down;
};

// Per-key validity plus an optional causal constraint.
struct AttentionMask {
  std::vector<std::uint8_t> key_valid;  // empty = all keys valid
  bool causal = false;
};

// Multi-head scaled dot-product attention. Keys are projected without bias,
// so a constant shift of the keys never changes the attention weights.
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t kv_dim, std::size_t n_heads,
                     std::mt19937_64& rng, bool value_out_bias = true);

  Tensor operator()(const Tensor& query, const Tensor& memory, const AttentionMask& mask) const;
  void collect(ParamList& out, const std::string& prefix) const;

  std::size_t n_heads = 1;
  Linear q, k, v, o;
};

struct TransformerBlockConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  bool cross_attention = false;
  std::size_t memory_dim = 0;     // 0 = d_model
  bool cross_value_bias = true;   // false: zero memory yields an exact zero update
};

// Pre-norm block: self-attention, optional cross-attention, feed-forward.
struct TransformerBlock {
  TransformerBlock() = default;
  TransformerBlock(const TransformerBlockConfig& cfg, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x, const AttentionMask& self_mask, const Tensor& memory = {},
                    const AttentionMask& memory_mask = {}) const;
  void collect(ParamList& out, const std::string& prefix) const;

  bool has_cross = false;
  LayerNorm ln_self, ln_cross, ln_ffn;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
};

// Attention, depthwise convolution module, and feed-forward, each residual.
struct ConformerBlock {
  ConformerBlock() = default;
  ConformerBlock(std::size_t d_model, std::size_t n_heads, std::size_t d_ffn,
                 std::size_t conv_kernel, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x, const AttentionMask& mask) const;
  void collect(ParamList& out, const std::string& prefix) const;

  std::size_t kernel = 5;
  LayerNorm ln_attn, ln_conv, ln_ffn, ln_out;
  MultiHeadAttention attn;
  Tensor dw_weight, dw_bias;
  Linear pointwise;
  FeedForward ffn;
};

}  // namespace xllm
