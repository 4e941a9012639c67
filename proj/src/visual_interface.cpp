// SPDX-License-Identifier: Apache-2.0
#include "xllm/visual_interface.hpp"

#include <cmath>

#include "xllm/checkpoint.hpp"
#include "xllm/config.hpp"
#include "xllm/error.hpp"

namespace xllm {

void QueryTransformerConfig::validate() const {
  require<ConfigError>(n_queries >= 1, "query transformer needs at least one query");
  require<ConfigError>(d_model % n_heads == 0, "query transformer width must divide into heads");
  require<ConfigError>(feature_dim > 0, "feature width must be positive");
}

QueryTransformer::QueryTransformer(const QueryTransformerConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg), ln_out_(cfg.d_model) {
  cfg_.validate();
  queries_ = randn(rng, {cfg.n_queries, cfg.d_model}, 1.0);
  TransformerBlockConfig bc{cfg.d_model, cfg.n_heads, cfg.d_ffn, /*cross_attention=*/true, cfg.feature_dim};
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(bc, rng);
}

Tensor QueryTransformer::transform(const FeatureSequence& features) const {
  if (features.length() == 0 || features.valid_count() == 0) {
    throw LengthError("query transformer needs at least one valid feature");
  }
  if (features.frames.cols() != cfg_.feature_dim) {
    throw ShapeError("query transformer expects features of width " + std::to_string(cfg_.feature_dim));
  }
  const AttentionMask none;
  const AttentionMask feature_mask = features.attention_mask();
  Tensor x = queries_;
  for (const auto& b : blocks_) x = b(x, none, features.frames, feature_mask);
  return ln_out_(x);
}

void QueryTransformer::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".queries", queries_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  ln_out_.collect(out, prefix + ".ln_out");
}

std::vector<Linear*> QueryTransformer::cross_value_projections() {
  std::vector<Linear*> out;
  for (auto& b : blocks_) out.push_back(&b.cross_attn.v);
  return out;
}

VisualInterface::VisualInterface(const QueryTransformerConfig& cfg, std::size_t d_llm, std::mt19937_64& rng)
    : qformer_(cfg, rng), adapter_(cfg.d_model, d_llm, rng) {}

QuasiLinguisticSequence VisualInterface::from_features(const FeatureSequence& features, Modality origin) const {
  return adapter_.adapt({qformer_.transform(features), origin});
}

QuasiLinguisticSequence image_interface(const ImageEncoder& encoder, const VisualInterface& image,
                                        const Tensor& pixels) {
  return image.from_features(encoder.encode(pixels), Modality::kImage);
}

QuasiLinguisticSequence video_interface_features(const VisualInterface& video,
                                                 std::span<const FeatureSequence> frame_features) {
  if (frame_features.empty()) throw LengthError("video interface needs at least one frame");
  std::vector<Tensor> per_frame;
  per_frame.reserve(frame_features.size());
  for (const auto& fs : frame_features) per_frame.push_back(video.qformer().transform(fs));
  return video.adapter().adapt({per_frame.size() == 1 ? per_frame[0] : concat_rows(per_frame), Modality::kVideo});
}

QuasiLinguisticSequence video_interface_frames(const ImageEncoder& encoder, const VisualInterface& video,
                                               std::span<const Tensor> frames) {
  if (frames.empty()) throw LengthError("video interface needs at least one frame");
  std::vector<FeatureSequence> features;
  features.reserve(frames.size());
  for (const auto& f : frames) {
    features.push_back(encoder.encode(f));
    features.back().source = FeatureSource::kVideoFrame;
  }
  return video_interface_features(video, features);
}

QuasiLinguisticSequence video_interface(const ImageEncoder& encoder, const VisualInterface& video,
                                        const Tensor& clip, std::size_t frame_count) {
  auto frames = sample_video_frames(clip, frame_count);
  return video_interface_frames(encoder, video, frames);
}

void init_video_from_image(const VisualInterface& image, VisualInterface& video) {
  if (!(image.qformer().config() == video.qformer().config())) {
    throw ConfigError("video query transformer config differs from the image one");
  }
  ParamList src, dst;
  image.collect_qformer(src, "qformer");
  image.collect_adapter(src, "adapter");
  video.collect_qformer(dst, "qformer");
  video.collect_adapter(dst, "adapter");
  copy_params(src, dst);
}

void save_qformer_checkpoint(const std::filesystem::path& path, const VisualInterface& iface) {
  ParamList params;
  iface.collect_qformer(params, "qformer");
  save_checkpoint(path, nlohmann::json(iface.qformer().config()), params);
}

void init_image_from_checkpoint(const std::filesystem::path& path, VisualInterface& image) {
  ParamList params;
  image.collect_qformer(params, "qformer");
  load_checkpoint_into(path, nlohmann::json(image.qformer().config()), params);
}

}  // namespace xllm
