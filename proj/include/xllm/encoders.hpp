// SPDX-License-Identifier: Apache-2.0
//
// Toy stand-ins for the frozen modality encoders: a patch transformer for
// images and video frames, and a convolution front-end plus conformer-lite
// stack for speech features.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "xllm/nn.hpp"
#include "xllm/tensor.hpp"

namespace xllm {

enum class FeatureSource { kImage, kVideoFrame, kSpeech };

struct EncoderConfig {
  std::size_t input_dim = 3;        // image channels, or speech feature width
  std::size_t d_model = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t conv_channels = 8;    // speech front-end output channels
  std::size_t conv_kernel = 5;      // depthwise kernel inside conformer blocks
  std::size_t patch_size = 8;       // image patch edge
  std::vector<std::size_t> pool_positions;  // block indices followed by a 2x time pool

  // Throws ConfigError when an invariant does not hold.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Time-major encoder output with a per-frame validity mask.
struct FeatureSequence {
  Tensor frames;  // [U x d_model]
  std::vector<std::uint8_t> mask;
  FeatureSource source = FeatureSource::kImage;

  std::size_t length() const { return frames.defined() ? frames.rows() : 0; }
  std::size_t valid_count() const;
  AttentionMask attention_mask() const;

  static FeatureSequence all_valid(Tensor frames, FeatureSource source);
};

class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& cfg, std::mt19937_64& rng);

  // pixels: [H x W x C]; one feature per patch, row-major patch order.
  FeatureSequence encode(const Tensor& pixels) const;

  void collect(ParamList& out, const std::string& prefix) const;
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Tensor patch_weight_, patch_bias_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_out_;
};

class SpeechEncoder {
 public:
  SpeechEncoder(const EncoderConfig& cfg, std::mt19937_64& rng);

  // frames: [Uin x input_dim]. Output length follows output_length().
  FeatureSequence encode(const Tensor& frames) const;

  // floor(Uin / 2) for the stride-2 front-end, then floor(. / 2) per pool.
  static std::size_t output_length(std::size_t input_frames, const EncoderConfig& cfg);
  // Shortest input that survives every reduction with at least one frame.
  static std::size_t min_input_length(const EncoderConfig& cfg);
  // Product of all length reductions (front-end stride times pools).
  static std::size_t total_reduction(const EncoderConfig& cfg);

  void collect(ParamList& out, const std::string& prefix) const;
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Tensor frontend_weight_, frontend_bias_;
  Linear frontend_proj_;
  std::vector<ConformerBlock> blocks_;
};

// round(i * (F - 1) / (T - 1)) for i in [0, T); a single requested frame is
// frame 0.
std::vector<std::size_t> uniform_frame_indices(std::size_t num_frames, std::size_t count);

// video: [F x H x W x C] -> T images of [H x W x C], in index order.
std::vector<Tensor> sample_video_frames(const Tensor& video, std::size_t count);

}  // namespace xllm
