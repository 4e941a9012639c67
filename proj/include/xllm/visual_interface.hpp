// SPDX-License-Identifier: Apache-2.0
//
// Query-transformer interfaces for images and videos. A fixed set of learned
// queries attends to encoder features and yields L_i embeddings; a linear
// adapter maps them into the decoder width. Videos are handled frame by
// frame and the per-frame sequences are concatenated in frame order.
#pragma once

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xllm/adapter.hpp"
#include "xllm/encoders.hpp"
#include "xllm/nn.hpp"
#include "xllm/quasi_linguistic.hpp"

namespace xllm {

struct QueryTransformerConfig {
  std::size_t n_queries = 8;   // L_i
  std::size_t n_blocks = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t feature_dim = 64;

  void validate() const;
  bool operator==(const QueryTransformerConfig&) const = default;
};

class QueryTransformer {
 public:
  QueryTransformer(const QueryTransformerConfig& cfg, std::mt19937_64& rng);

  // [n_queries x d_model] regardless of the number of input features.
  Tensor transform(const FeatureSequence& features) const;

  void collect(ParamList& out, const std::string& prefix) const;
  const QueryTransformerConfig& config() const { return cfg_; }
  // Cross-attention value projections, one per block.
  std::vector<Linear*> cross_value_projections();

 private:
  QueryTransformerConfig cfg_;
  Tensor queries_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_out_;
};

// Query transformer plus adapter: the image interface, or one video interface.
class VisualInterface {
 public:
  VisualInterface(const QueryTransformerConfig& cfg, std::size_t d_llm, std::mt19937_64& rng);

  QuasiLinguisticSequence from_features(const FeatureSequence& features, Modality origin) const;

  QueryTransformer& qformer() { return qformer_; }
  const QueryTransformer& qformer() const { return qformer_; }
  Adapter& adapter() { return adapter_; }
  const Adapter& adapter() const { return adapter_; }

  void collect_qformer(ParamList& out, const std::string& prefix) const { qformer_.collect(out, prefix); }
  void collect_adapter(ParamList& out, const std::string& prefix) const { adapter_.collect(out, prefix); }

 private:
  QueryTransformer qformer_;
  Adapter adapter_;
};

// encode_image -> query transform -> I-Adapter; length L_i.
QuasiLinguisticSequence image_interface(const ImageEncoder& encoder, const VisualInterface& image,
                                        const Tensor& pixels);

// Per-frame encoding and query transform, concatenation in frame order, then
// the V-Adapter; length frames.size() * L_i.
// Same path from cached per-frame encoder features.
QuasiLinguisticSequence video_interface_features(const VisualInterface& video,
                                                 std::span<const FeatureSequence> frame_features);

QuasiLinguisticSequence video_interface_frames(const ImageEncoder& encoder, const VisualInterface& video,
                                               std::span<const Tensor> frames);

// Uniformly samples `frame_count` frames of video ([F x H x W x C]) first.
QuasiLinguisticSequence video_interface(const ImageEncoder& encoder, const VisualInterface& video,
                                        const Tensor& clip, std::size_t frame_count);

// Copies the image query transformer and adapter into the video interface.
void init_video_from_image(const VisualInterface& image, VisualInterface& video);

// Saves / loads only the query transformer; adapters are untouched.
void save_qformer_checkpoint(const std::filesystem::path& path, const VisualInterface& iface);
void init_image_from_checkpoint(const std::filesystem::path& path, VisualInterface& image);

}  // namespace xllm
