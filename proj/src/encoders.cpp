// SPDX-License-Identifier: Apache-2.0
#include "xllm/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "xllm/error.hpp"

namespace xllm {

void EncoderConfig::validate() const {
  require<ConfigError>(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
                       "encoder d_model must be divisible by n_heads");
  require<ConfigError>(n_blocks > 0, "encoder needs at least one block");
  for (std::size_t i = 0; i < pool_positions.size(); ++i) {
    require<ConfigError>(pool_positions[i] < n_blocks, "pool position beyond the last block");
    require<ConfigError>(i == 0 || pool_positions[i] > pool_positions[i - 1],
                         "pool positions must be strictly increasing");
  }
  require<ConfigError>(conv_kernel % 2 == 1, "depthwise kernel must be odd");
  require<ConfigError>(patch_size > 0 && input_dim > 0, "patch size and input width must be positive");
}

std::size_t FeatureSequence::valid_count() const {
  if (mask.empty()) return length();
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

AttentionMask FeatureSequence::attention_mask() const {
  AttentionMask m;
  if (std::find(mask.begin(), mask.end(), std::uint8_t{0}) != mask.end()) m.key_valid = mask;
  return m;
}

FeatureSequence FeatureSequence::all_valid(Tensor frames, FeatureSource source) {
  FeatureSequence fs;
  fs.mask.assign(frames.rows(), 1);
  fs.frames = std::move(frames);
  fs.source = source;
  return fs;
}

// ---------------------------------------------------------------- image

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t fan_in = cfg.patch_size * cfg.patch_size * cfg.input_dim;
  patch_weight_ = randn(rng, {cfg.patch_size, cfg.patch_size, cfg.input_dim, cfg.d_model},
                        1.0 / std::sqrt(static_cast<double>(fan_in)));
  patch_bias_ = Tensor({cfg.d_model});
  TransformerBlockConfig bc{cfg.d_model, cfg.n_heads, cfg.d_ffn};
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(bc, rng);
  ln_out_ = LayerNorm(cfg.d_model);
}

FeatureSequence ImageEncoder::encode(const Tensor& pixels) const {
  if (pixels.rank() != 3 || pixels.dim(2) != cfg_.input_dim) {
    throw ShapeError("image must be [H x W x " + std::to_string(cfg_.input_dim) + "]");
  }
  const std::size_t p = cfg_.patch_size;
  if (pixels.dim(0) % p != 0 || pixels.dim(1) % p != 0) {
    throw ShapeError("image " + std::to_string(pixels.dim(0)) + "x" + std::to_string(pixels.dim(1)) +
                     " is not divisible into " + std::to_string(p) + "-pixel patches");
  }
  Conv2dGeometry geo;
  geo.stride_h = geo.stride_w = p;
  Tensor grid = conv2d(pixels, patch_weight_, patch_bias_, geo);
  const std::size_t n = grid.dim(0) * grid.dim(1);
  Tensor x = add(reshape(grid, {n, cfg_.d_model}), sinusoidal_positions(n, cfg_.d_model));
  const AttentionMask none;
  for (const auto& b : blocks_) x = b(x, none);
  return FeatureSequence::all_valid(ln_out_(x), FeatureSource::kImage);
}

void ImageEncoder::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".patch.weight", patch_weight_);
  out.emplace_back(prefix + ".patch.bias", patch_bias_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  ln_out_.collect(out, prefix + ".ln_out");
}

// ---------------------------------------------------------------- speech

namespace {
// Front-end: 3x3 kernel, stride 2, one leading pad row/column so that each
// axis maps n -> floor(n / 2).
Conv2dGeometry frontend_geometry() {
  Conv2dGeometry g;
  g.stride_h = g.stride_w = 2;
  g.pad_top = g.pad_left = 1;
  return g;
}
constexpr std::size_t kFrontendKernel = 3;
}  // namespace

SpeechEncoder::SpeechEncoder(const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  require<ConfigError>(cfg.input_dim >= 2, "speech features need width >= 2");
  frontend_weight_ = randn(rng, {kFrontendKernel, kFrontendKernel, 1, cfg.conv_channels}, 1.0 / 3.0);
  frontend_bias_ = Tensor({cfg.conv_channels});
  frontend_proj_ = Linear((cfg.input_dim / 2) * cfg.conv_channels, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    blocks_.emplace_back(cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.conv_kernel, rng);
  }
}

std::size_t SpeechEncoder::output_length(std::size_t input_frames, const EncoderConfig& cfg) {
  std::size_t u = input_frames / 2;
  for (std::size_t i = 0; i < cfg.pool_positions.size(); ++i) u /= 2;
  return u;
}

std::size_t SpeechEncoder::total_reduction(const EncoderConfig& cfg) {
  return std::size_t{2} << cfg.pool_positions.size();
}

std::size_t SpeechEncoder::min_input_length(const EncoderConfig& cfg) { return total_reduction(cfg); }

FeatureSequence SpeechEncoder::encode(const Tensor& frames) const {
  if (frames.rank() != 2 || frames.cols() != cfg_.input_dim) {
    throw ShapeError("speech features must be [U x " + std::to_string(cfg_.input_dim) + "]");
  }
  if (frames.rows() < min_input_length(cfg_)) {
    throw LengthError("speech input of " + std::to_string(frames.rows()) + " frames is shorter than the minimum " +
                      std::to_string(min_input_length(cfg_)));
  }
  Tensor img = reshape(frames, {frames.rows(), frames.cols(), 1});
  Tensor fe = relu(conv2d(img, frontend_weight_, frontend_bias_, frontend_geometry()));
  const std::size_t t = fe.dim(0);
  Tensor x = frontend_proj_(reshape(fe, {t, fe.dim(1) * fe.dim(2)}));
  x = add(x, sinusoidal_positions(t, cfg_.d_model));
  const AttentionMask none;
  std::size_t next_pool = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i](x, none);
    if (next_pool < cfg_.pool_positions.size() && cfg_.pool_positions[next_pool] == i) {
      x = max_pool_time(x, 2);
      ++next_pool;
    }
  }
  return FeatureSequence::all_valid(x, FeatureSource::kSpeech);
}

void SpeechEncoder::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".frontend.weight", frontend_weight_);
  out.emplace_back(prefix + ".frontend.bias", frontend_bias_);
  frontend_proj_.collect(out, prefix + ".frontend.proj");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
}

// ---------------------------------------------------------------- video

std::vector<std::size_t> uniform_frame_indices(std::size_t num_frames, std::size_t count) {
  require<LengthError>(num_frames >= 1 && count >= 1, "video sampling needs F >= 1 and T >= 1");
  std::vector<std::size_t> idx(count, 0);
  if (count == 1) return idx;
  for (std::size_t i = 0; i < count; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(num_frames - 1) /
                       static_cast<double>(count - 1);
    idx[i] = static_cast<std::size_t>(std::lround(pos));
  }
  return idx;
}

std::vector<Tensor> sample_video_frames(const Tensor& video, std::size_t count) {
  if (video.rank() != 4) throw ShapeError("video must be [F x H x W x C]");
  const std::size_t F = video.dim(0);
  const Shape frame_shape{video.dim(1), video.dim(2), video.dim(3)};
  const std::size_t frame_size = shape_size(frame_shape);
  // Row slices of a [F x HWC] view keep the frames on the tape.
  const Tensor flat = reshape(video, {F, frame_size});
  std::vector<Tensor> out;
  for (std::size_t f : uniform_frame_indices(F, count)) out.push_back(reshape(slice_rows(flat, f, 1), frame_shape));
  return out;
}

}  // namespace xllm
