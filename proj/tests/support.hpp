// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the unit tests and the acceptance runner: tiny model
// configurations, composed-path gradient cases and a brute-force edit
// distance.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "xllm/asr.hpp"
#include "xllm/encoders.hpp"
#include "xllm/grad_check.hpp"
#include "xllm/nn.hpp"
#include "xllm/speech_interface.hpp"
#include "xllm/visual_interface.hpp"

namespace xllm::testing {

inline Tensor normal(std::mt19937_64& rng, Shape shape, double sd = 1.0) { return randn(rng, std::move(shape), sd); }

inline FeatureSequence speech_features(Tensor frames) {
  return FeatureSequence::all_valid(std::move(frames), FeatureSource::kSpeech);
}

inline std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

// Weighted sum against a fixed random tensor of the same shape.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, normal(rng, y.shape())));
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

// ---------------------------------------------------------------- tiny models

inline EncoderConfig tiny_image_encoder() { return {3, 8, 1, 2, 16, 4, 3, 4, {}}; }
inline QueryTransformerConfig tiny_qformer() { return {2, 1, 8, 2, 16, 8}; }

struct TinyVisual {
  std::mt19937_64 rng;
  ImageEncoder encoder;
  VisualInterface iface;
  explicit TinyVisual(std::uint64_t seed, std::size_t d_llm = 6)
      : rng(seed), encoder(tiny_image_encoder(), rng), iface(tiny_qformer(), d_llm, rng) {}
};

struct TinySpeech {
  std::mt19937_64 rng;
  CifConfig cif{1.0, true, 0.5, 6, 3};
  CifPredictor predictor;
  ContextualTransformer cformer;
  Adapter adapter;
  explicit TinySpeech(std::uint64_t seed, std::size_t d = 8)
      : rng(seed), predictor(d, cif, rng), cformer({d, 1, 2, 16}, rng), adapter(d, 6, rng) {}
};

// Cumulative scaled weights stay at least `margin` away from every firing
// boundary except the exact final total.
inline bool cif_smooth(const CifTrace& trace, double beta, double margin) {
  double acc = 0.0;
  const std::size_t n = trace.scaled_alphas.size();
  for (std::size_t u = 0; u + 1 < n; ++u) {
    acc += trace.scaled_alphas[u];
    const double r = std::fmod(acc, beta);
    if (std::min(r, beta - r) < margin) return false;
  }
  return true;
}

struct ComposedCase {
  std::string name;
  std::function<Tensor()> loss;
  std::vector<Tensor> inputs;
};

// Image path: pixels through encoder, query transformer and I-Adapter.
inline ComposedCase image_path_case(std::uint64_t seed) {
  auto m = std::make_shared<TinyVisual>(seed);
  Tensor pixels = normal(m->rng, {8, 8, 3}, 0.5);
  ParamList params;
  m->iface.collect_qformer(params, "qformer");
  m->iface.collect_adapter(params, "adapter");
  std::vector<Tensor> inputs = tensors_of(params);
  inputs.push_back(pixels);
  return {"image_interface",
          [m, pixels, seed] { return project(image_interface(m->encoder, m->iface, pixels).embeddings, seed); },
          inputs};
}

// Video path: two frames, per-frame query transform, concatenation, V-Adapter.
inline ComposedCase video_path_case(std::uint64_t seed) {
  auto m = std::make_shared<TinyVisual>(seed);
  Tensor clip = normal(m->rng, {3, 8, 8, 3}, 0.5);
  ParamList params;
  m->iface.collect_qformer(params, "qformer");
  m->iface.collect_adapter(params, "adapter");
  std::vector<Tensor> inputs = tensors_of(params);
  inputs.push_back(clip);
  return {"video_interface",
          [m, clip, seed] { return project(video_interface(m->encoder, m->iface, clip, 2).embeddings, seed); },
          inputs};
}

// Speech path: weight predictor, scaled CIF, contextual transformer and
// S-Adapter. Redraws the frames until the firing pattern is smooth.
inline ComposedCase speech_path_case(std::uint64_t seed) {
  auto m = std::make_shared<TinySpeech>(seed);
  const std::size_t target = 3;
  Tensor frames;
  for (int attempt = 0; attempt < 100; ++attempt) {
    frames = normal(m->rng, {9, 8});
    NoGrad guard;
    auto feats = speech_features(frames);
    auto out = cif_compress(feats, m->predictor.predict(feats), target, m->cif);
    if (cif_smooth(out.trace, m->cif.beta, 1e-3)) break;
  }
  ParamList params;
  m->predictor.collect(params, "cif");
  m->cformer.collect(params, "cformer");
  m->adapter.collect(params, "adapter");
  std::vector<Tensor> inputs = tensors_of(params);
  inputs.push_back(frames);
  return {"speech_path",
          [m, frames, seed, target] {
            auto feats = speech_features(frames);
            auto out = cif_compress(feats, m->predictor.predict(feats), target, m->cif);
            auto ctx = m->cformer.contextualize(out.tokens);
            return add(project(m->adapter.adapt(ctx).embeddings, seed), out.quantity_loss);
          },
          inputs};
}

// ---------------------------------------------------------------- edit distance

// Memoized recursive edit distance, independent of the table-based scorer.
inline std::size_t brute_edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size()) return b.size() - j;
    if (j == b.size()) return a.size() - i;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::size_t best = go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
    best = std::min(best, go(i + 1, j) + 1);
    best = std::min(best, go(i, j + 1) + 1);
    return memo[key] = best;
  };
  return go(0, 0);
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t max_len, int alphabet) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> sym(0, alphabet - 1);
  std::vector<int> out(len(rng));
  for (auto& v : out) v = sym(rng);
  return out;
}

}  // namespace xllm::testing
