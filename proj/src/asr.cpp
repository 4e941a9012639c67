// SPDX-License-Identifier: Apache-2.0
#include "xllm/asr.hpp"

#include "xllm/error.hpp"

namespace xllm {

AsrDecoder::AsrDecoder(const AsrDecoderConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      fc_(cfg.d_model, cfg.d_model, rng),
      context_block_({cfg.d_model, cfg.n_heads, cfg.d_ffn}, rng),
      visual_block_({cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.visual_branch, cfg.visual_dim,
                     /*cross_value_bias=*/false},
                    rng),
      ln_out_(cfg.d_model),
      head_(cfg.d_model, cfg.vocab_size, rng) {}

Tensor AsrDecoder::absent_visual() const { return Tensor({1, cfg_.visual_dim}); }

Tensor AsrDecoder::logits(const Tensor& tokens, const Tensor& visual) const {
  if (tokens.rank() != 2 || tokens.cols() != cfg_.d_model) {
    throw ShapeError("ASR decoder expects [L x " + std::to_string(cfg_.d_model) + "] input");
  }
  Tensor x = add(gelu(fc_(tokens)), sinusoidal_positions(tokens.rows(), cfg_.d_model));
  const AttentionMask none;
  x = context_block_(x, none);
  if (cfg_.visual_branch) {
    const Tensor memory = visual.defined() ? visual : absent_visual();
    if (memory.cols() != cfg_.visual_dim) throw ShapeError("visual features have the wrong width");
    x = visual_block_(x, none, memory, none);
  } else {
    x = visual_block_(x, none);
  }
  return head_(ln_out_(x));
}

void AsrDecoder::collect(ParamList& out, const std::string& prefix) const {
  fc_.collect(out, prefix + ".fc");
  context_block_.collect(out, prefix + ".block0");
  visual_block_.collect(out, prefix + ".block1");
  ln_out_.collect(out, prefix + ".ln_out");
  head_.collect(out, prefix + ".head");
}

}  // namespace xllm
