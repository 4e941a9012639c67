// SPDX-License-Identifier: Apache-2.0
#include "xllm/speech_interface.hpp"

#include <cmath>
#include <json.hpp>

#include "xllm/error.hpp"

namespace xllm {

void CifConfig::validate() const {
  require<ConfigError>(beta > 0.0, "CIF threshold must be positive");
  require<ConfigError>(tail_threshold >= 0.0 && tail_threshold < beta,
                       "CIF tail threshold must lie in [0, beta)");
  require<ConfigError>(predictor_kernel % 2 == 1, "CIF predictor kernel must be odd");
  require<ConfigError>(predictor_channels > 0, "CIF predictor needs channels");
}

std::string CifTrace::to_record(const std::string& id) const {
  nlohmann::json j;
  j["id"] = id;
  j["alphas"] = alphas;
  j["scaled_alphas"] = scaled_alphas;
  j["fire_positions"] = fire_positions;
  j["integrated"] = integrated;
  return j.dump();
}

// ---------------------------------------------------------------- predictor

CifPredictor::CifPredictor(std::size_t d_model, const CifConfig& cfg, std::mt19937_64& rng)
    : kernel_(cfg.predictor_kernel),
      conv_weight_(randn(rng, {cfg.predictor_kernel, d_model, cfg.predictor_channels},
                         1.0 / std::sqrt(static_cast<double>(cfg.predictor_kernel * d_model)))),
      conv_bias_({cfg.predictor_channels}),
      proj_(cfg.predictor_channels, 1, rng) {
  cfg.validate();
}

Tensor CifPredictor::predict(const FeatureSequence& features) const {
  if (features.length() == 0) throw LengthError("CIF predictor needs at least one frame");
  const std::size_t pad = kernel_ / 2;
  Tensor h = relu(conv1d(features.frames, conv_weight_, conv_bias_, 1, pad, pad));
  Tensor alphas = sigmoid(reshape(proj_(h), {features.length()}));
  if (features.valid_count() == features.length()) return alphas;
  Tensor keep({features.length()});
  auto k = keep.mutable_data();
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = features.mask[i] ? 1.0 : 0.0;
  return mul(alphas, keep);
}

void CifPredictor::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".conv.weight", conv_weight_);
  out.emplace_back(prefix + ".conv.bias", conv_bias_);
  proj_.collect(out, prefix + ".proj");
}

// ---------------------------------------------------------------- integrate & fire

namespace {

// A contiguous piece of one frame's weight assigned to one output cell. With
// prefix sums S, a piece equals min(S_u, hi) - max(S_{u-1}, lo) for fixed cell
// bounds; `ends_in_cell` marks d/dS_u = 1 and `starts_frame` d/dS_{u-1} = -1.
struct Piece {
  std::size_t cell;
  std::size_t frame;
  double portion;
  bool ends_in_cell;
  bool starts_frame;
};

}  // namespace

Tensor cif_integrate(const Tensor& frames, const Tensor& weights, double beta,
                     std::optional<std::size_t> exact_count, double tail_threshold, CifTrace& trace) {
  if (frames.rank() != 2) throw DimensionError("cif_integrate: frames must be [U x d]");
  const std::size_t U = frames.rows(), d = frames.cols();
  if (weights.size() != U) throw DimensionError("cif_integrate: one weight per frame required");
  if (exact_count && *exact_count == 0) throw LengthError("cif_integrate: target length must be positive");
  const bool capped = exact_count.has_value();
  const std::size_t cap = capped ? *exact_count : 0;
  auto a = weights.data();

  trace.scaled_alphas.assign(a.begin(), a.end());
  trace.fire_positions.clear();
  trace.integrated.clear();

  std::vector<Piece> pieces;
  std::size_t cell = 0;
  double acc = 0.0;
  for (std::size_t u = 0; u < U; ++u) {
    double rem = a[u];
    bool first = true;
    while (true) {
      const double room = beta - acc;
      const bool may_fire = !capped || cell + 1 < cap;
      if (may_fire && rem >= room) {
        pieces.push_back({cell, u, room, false, first});
        trace.fire_positions.push_back(u);
        ++cell;
        acc = 0.0;
        rem -= room;
        first = false;
        if (rem <= 0.0) break;
      } else {
        pieces.push_back({cell, u, rem, true, first});
        acc += rem;
        break;
      }
    }
  }

  std::size_t n_out = cell;
  if (capped) {
    n_out = cap;
    while (trace.fire_positions.size() < cap) trace.fire_positions.push_back(U - 1);
  } else if (acc > tail_threshold) {
    n_out = cell + 1;
    trace.fire_positions.push_back(U - 1);
  }
  std::erase_if(pieces, [n_out](const Piece& p) { return p.cell >= n_out; });

  trace.integrated.assign(n_out, 0.0);
  for (const auto& p : pieces) trace.integrated[p.cell] += p.portion;
  if (n_out == 0) return {};

  Tensor out({n_out, d});
  auto h = frames.data();
  auto y = out.mutable_data();
  const double inv_beta = 1.0 / beta;
  for (const auto& p : pieces) {
    const double w = p.portion * inv_beta;
    const double* src = h.data() + p.frame * d;
    double* dst = y.data() + p.cell * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
  }

  detail::record(out, {frames, weights},
                 [pieces = std::move(pieces), U, d, inv_beta](detail::Node& o,
                                                              std::span<detail::Node* const> in) {
                   const auto& h = in[0]->data;
                   auto gh = detail::grad_of(in[0]);
                   auto ga = detail::grad_of(in[1]);
                   std::vector<double> g_prefix(ga.empty() ? 0 : U, 0.0);
                   for (const auto& p : pieces) {
                     const double* dy = o.grad.data() + p.cell * d;
                     if (!gh.empty()) {
                       const double w = p.portion * inv_beta;
                       double* dst = gh.data() + p.frame * d;
                       for (std::size_t j = 0; j < d; ++j) dst[j] += w * dy[j];
                     }
                     if (!ga.empty()) {
                       const double* src = h.data() + p.frame * d;
                       double gp = 0.0;
                       for (std::size_t j = 0; j < d; ++j) gp += dy[j] * src[j];
                       gp *= inv_beta;
                       if (p.ends_in_cell) g_prefix[p.frame] += gp;
                       if (p.starts_frame && p.frame > 0) g_prefix[p.frame - 1] -= gp;
                     }
                   }
                   if (ga.empty()) return;
                   // S_u = sum_{v <= u} a_v, so dL/da_v = sum_{u >= v} dL/dS_u.
                   double run = 0.0;
                   for (std::size_t v = U; v-- > 0;) {
                     run += g_prefix[v];
                     ga[v] += run;
                   }
                 });
  return out;
}

CifOutput cif_compress(const FeatureSequence& features, const Tensor& alphas,
                       std::optional<std::size_t> target_len, const CifConfig& cfg) {
  cfg.validate();
  if (features.length() == 0) throw LengthError("cif_compress: empty feature sequence");
  if (alphas.size() != features.length()) throw DimensionError("cif_compress: one alpha per frame required");
  CifOutput result;
  result.trace.alphas.assign(alphas.data().begin(), alphas.data().end());
  Tensor total = sum(alphas);

  const bool scaled = cfg.scale_at_train && target_len.has_value();
  Tensor weights = alphas;
  if (scaled) {
    if (!(total.item() > 0.0)) {
      throw DegenerateWeightError("cif_compress: alphas sum to zero, cannot scale to target length");
    }
    weights = mul(alphas, scale(reciprocal(total), static_cast<double>(*target_len)));
  }
  result.tokens.origin = Modality::kSpeech;
  result.tokens.embeddings =
      cif_integrate(features.frames, weights, cfg.beta, scaled ? target_len : std::nullopt,
                    cfg.tail_threshold, result.trace);
  if (result.tokens.length() > 0 && scaled && result.tokens.length() != *target_len) {
    throw InvariantViolation("scaled CIF emitted " + std::to_string(result.tokens.length()) +
                             " embeddings for target " + std::to_string(*target_len));
  }
  result.quantity_loss = target_len ? abs(add_scalar(total, -static_cast<double>(*target_len)))
                                    : Tensor::scalar(0.0);
  return result;
}

// ---------------------------------------------------------------- context & adapter

ContextualTransformer::ContextualTransformer(const ContextualTransformerConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg), ln_out_(cfg.d_model) {
  TransformerBlockConfig bc{cfg.d_model, cfg.n_heads, cfg.d_ffn};
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(bc, rng);
}

QuasiLinguisticSequence ContextualTransformer::contextualize(const QuasiLinguisticSequence& tokens) const {
  if (tokens.length() == 0) throw LengthError("contextualize: empty token sequence");
  if (tokens.width() != cfg_.d_model) {
    throw ShapeError("contextualize: width " + std::to_string(tokens.width()) + " != " +
                     std::to_string(cfg_.d_model));
  }
  Tensor x = add(tokens.embeddings, sinusoidal_positions(tokens.length(), cfg_.d_model));
  const AttentionMask none;
  for (const auto& b : blocks_) x = b(x, none);
  return {ln_out_(x), tokens.origin};
}

void ContextualTransformer::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  ln_out_.collect(out, prefix + ".ln_out");
}

QuasiLinguisticSequence Adapter::adapt(const QuasiLinguisticSequence& seq) const {
  if (seq.length() == 0) return {Tensor{}, seq.origin};
  if (seq.width() != in_width()) {
    throw ShapeError("adapter expects width " + std::to_string(in_width()) + ", got " +
                     std::to_string(seq.width()));
  }
  return {proj_(seq.embeddings), seq.origin};
}

}  // namespace xllm
