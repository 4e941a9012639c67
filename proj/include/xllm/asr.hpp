// SPDX-License-Identifier: Apache-2.0
//
// Non-autoregressive decoder of the CIF-based ASR model trained in stage 1.
// It reads CIF embeddings and, through one cross-attention block, optional
// visual features; absent visual input is a zero vector.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "xllm/nn.hpp"
#include "xllm/tensor.hpp"

namespace xllm {

struct AsrDecoderConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t vocab_size = 256;
  std::size_t visual_dim = 64;
  bool visual_branch = true;  // false builds the decoder without the visual block

  bool operator==(const AsrDecoderConfig&) const = default;
};

class AsrDecoder {
 public:
  AsrDecoder(const AsrDecoderConfig& cfg, std::mt19937_64& rng);

  // tokens: [L x d_model]; visual: [N x visual_dim] or undefined (zeros).
  Tensor logits(const Tensor& tokens, const Tensor& visual = {}) const;

  // Zero visual memory used whenever no visual input is supplied.
  Tensor absent_visual() const;

  void collect(ParamList& out, const std::string& prefix) const;
  const AsrDecoderConfig& config() const { return cfg_; }

 private:
  AsrDecoderConfig cfg_;
  Linear fc_;
  TransformerBlock context_block_;
  TransformerBlock visual_block_;
  LayerNorm ln_out_;
  Linear head_;
};

}  // namespace xllm
