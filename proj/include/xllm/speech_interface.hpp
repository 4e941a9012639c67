// SPDX-License-Identifier: Apache-2.0
//
// Speech-to-language interface: a continuous integrate-and-fire (CIF) module
// that compresses U encoder frames into token-level embeddings, a contextual
// transformer over those embeddings, and a linear S-Adapter into the decoder
// embedding space.
#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xllm/adapter.hpp"
#include "xllm/encoders.hpp"
#include "xllm/nn.hpp"
#include "xllm/quasi_linguistic.hpp"

namespace xllm {

struct CifConfig {
  double beta = 1.0;             // firing threshold
  bool scale_at_train = true;    // rescale weights to the target length when one is given
  double tail_threshold = 0.5;   // residual weight that still fires at inference
  std::size_t predictor_channels = 64;
  std::size_t predictor_kernel = 5;

  void validate() const;
  bool operator==(const CifConfig&) const = default;
};

struct CifTrace {
  std::vector<double> alphas;         // raw per-frame weights
  std::vector<double> scaled_alphas;  // weights actually integrated
  std::vector<std::size_t> fire_positions;
  std::vector<double> integrated;     // total weight per emitted embedding

  // One JSON line: {"id":..., "alphas":[...], "fire_positions":[...], ...}.
  std::string to_record(const std::string& id) const;
};

// 1-D convolution, ReLU, projection to one logit per frame, sigmoid.
class CifPredictor {
 public:
  CifPredictor(std::size_t d_model, const CifConfig& cfg, std::mt19937_64& rng);

  // One weight per frame in (0, 1); masked frames get exactly 0.
  Tensor predict(const FeatureSequence& features) const;

  void collect(ParamList& out, const std::string& prefix) const;
  Linear& projection() { return proj_; }

 private:
  std::size_t kernel_;
  Tensor conv_weight_, conv_bias_;
  Linear proj_;
};

struct CifOutput {
  QuasiLinguisticSequence tokens;
  CifTrace trace;
  Tensor quantity_loss;  // |sum(raw alphas) - target|, or 0 without a target
};

// Integrates `weights` ([U]) over `frames` ([U x d]) left to right and fires an
// embedding (weighted frame sum / beta) each time the accumulator reaches
// beta; a frame that crosses the threshold is split between the closing and
// the opening cell. With `exact_count` the final cell never fires early and
// absorbs all remaining weight, so exactly that many embeddings come out.
// Without it a trailing residual above `tail_threshold` fires one more
// embedding. Firing decisions are constants of the backward pass.
Tensor cif_integrate(const Tensor& frames, const Tensor& weights, double beta,
                     std::optional<std::size_t> exact_count, double tail_threshold,
                     CifTrace& trace);

// Full CIF step: optional scaling of `alphas` to `target_len`, integration,
// and the quantity loss.
CifOutput cif_compress(const FeatureSequence& features, const Tensor& alphas,
                       std::optional<std::size_t> target_len, const CifConfig& cfg);

struct ContextualTransformerConfig {
  std::size_t d_model = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;

  bool operator==(const ContextualTransformerConfig&) const = default;
};

// Bidirectional transformer over CIF outputs, with sinusoidal positions.
class ContextualTransformer {
 public:
  ContextualTransformer(const ContextualTransformerConfig& cfg, std::mt19937_64& rng);

  QuasiLinguisticSequence contextualize(const QuasiLinguisticSequence& tokens) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  ContextualTransformerConfig cfg_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_out_;
};

}  // namespace xllm
