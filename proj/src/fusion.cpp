// SPDX-License-Identifier: Apache-2.0
#include "xllm/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "xllm/error.hpp"

namespace xllm {
namespace {
constexpr double kPositionScale = 0.5;
}  // namespace

ToyDecoder::ToyDecoder(const ToyDecoderConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg), ln_out_(cfg.d_llm), head_(cfg.d_llm, cfg.vocab_size, rng) {
  require<ConfigError>(cfg.vocab_size == static_cast<std::size_t>(tok::kVocabSize),
                       "decoder vocabulary must match the tokenizer (256)");
  require<ConfigError>(cfg.max_positions > 0, "decoder needs positions");
  tok_embed_ = randn(rng, {cfg.vocab_size, cfg.d_llm}, 0.5);
  // Learned positions start from a sinusoidal table: offsets are then a
  // linear map away, which lets a small decoder find copy circuits quickly.
  pos_embed_ = randn(rng, {cfg.max_positions, cfg.d_llm}, 0.01);
  {
    auto w = pos_embed_.mutable_data();
    const std::size_t d = cfg.d_llm;
    for (std::size_t p = 0; p < cfg.max_positions; ++p) {
      for (std::size_t i = 0; i + 1 < d; i += 2) {
        const double freq = std::pow(100.0, -static_cast<double>(i) / static_cast<double>(d));
        w[p * d + i] += kPositionScale * std::sin(static_cast<double>(p) * freq);
        w[p * d + i + 1] += kPositionScale * std::cos(static_cast<double>(p) * freq);
      }
    }
  }
  TransformerBlockConfig bc{cfg.d_llm, cfg.n_heads, cfg.d_ffn};
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(bc, rng);
}

Tensor ToyDecoder::embed(std::span<const int> ids) const { return embedding(tok_embed_, ids); }

Tensor ToyDecoder::hidden(const Tensor& embedded) const {
  const std::size_t n = embedded.rows();
  if (n == 0) throw LengthError("decoder input is empty");
  if (n > cfg_.max_positions) {
    throw LengthError("sequence of " + std::to_string(n) + " exceeds max_positions " +
                      std::to_string(cfg_.max_positions));
  }
  if (embedded.cols() != cfg_.d_llm) {
    throw ShapeError("decoder expects width " + std::to_string(cfg_.d_llm) + ", got " +
                     std::to_string(embedded.cols()));
  }
  Tensor x = add(embedded, slice_rows(pos_embed_, 0, n));
  AttentionMask causal;
  causal.causal = true;
  for (const auto& b : blocks_) x = b(x, causal);
  return ln_out_(x);
}

Tensor ToyDecoder::logits(const Tensor& embedded) const { return head_(hidden(embedded)); }

Tensor ToyDecoder::logits_at(const Tensor& embedded, std::size_t start, std::size_t count) const {
  Tensor h = hidden(embedded);
  if (start + count > h.rows()) throw LengthError("logit rows beyond the sequence");
  return head_(slice_rows(h, start, count));
}

void ToyDecoder::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".tok_embed", tok_embed_);
  out.emplace_back(prefix + ".pos_embed", pos_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  ln_out_.collect(out, prefix + ".ln_out");
  head_.collect(out, prefix + ".head");
}

// ---------------------------------------------------------------- template

namespace {

struct Block {
  Modality modality;
  int open, close;
  std::string_view text;  // marker, placeholder, closing marker
};

constexpr Block kBlocks[] = {
    {Modality::kImage, tok::kImageOpen, tok::kImageClose, "<Image><ImageFeats></Image>"},
    {Modality::kVideo, tok::kVideoOpen, tok::kVideoClose, "<Video><VideoFeats></Video>"},
    {Modality::kSpeech, tok::kSpeechOpen, tok::kSpeechClose, "<Speech><SpeechFeats></Speech>"},
};

const std::optional<QuasiLinguisticSequence>& segment_for(const PromptSegments& s, Modality m) {
  switch (m) {
    case Modality::kImage: return s.image;
    case Modality::kVideo: return s.video;
    default: return s.speech;
  }
}

}  // namespace

std::string render_prompt(bool image, bool video, bool speech, std::string_view instruction) {
  const bool present[] = {image, video, speech};
  std::string out;
  for (std::size_t i = 0; i < 3; ++i) {
    if (present[i]) out += kBlocks[i].text;
  }
  out += kQuestionCue;
  out += instruction;
  out += kAnswerCue;
  return out;
}

PromptLayout parse_prompt(std::string_view rendered) {
  PromptLayout layout;
  bool* flags[] = {&layout.has_image, &layout.has_video, &layout.has_speech};
  for (std::size_t i = 0; i < 3; ++i) {
    if (rendered.starts_with(kBlocks[i].text)) {
      *flags[i] = true;
      rendered.remove_prefix(kBlocks[i].text.size());
    }
  }
  if (!rendered.starts_with(kQuestionCue)) throw DataError("prompt lacks the question cue");
  rendered.remove_prefix(kQuestionCue.size());
  if (!rendered.ends_with(kAnswerCue)) throw DataError("prompt lacks the answer cue");
  rendered.remove_suffix(kAnswerCue.size());
  layout.instruction = std::string(rendered);
  return layout;
}

EmbeddedPrompt assemble_prompt(const ToyDecoder& decoder, const PromptSegments& segments,
                               std::span<const int> instruction) {
  if (instruction.empty()) throw LengthError("instruction must not be empty");
  for (int id : instruction) {
    if (id < 0 || id >= tok::kVocabSize) throw VocabularyError("instruction id " + std::to_string(id) + " out of range");
    if (tok::is_reserved(id)) {
      throw VocabularyError("reserved id " + std::to_string(id) + " cannot appear inside an instruction");
    }
  }
  const std::size_t d = decoder.config().d_llm;
  EmbeddedPrompt out;
  std::vector<Tensor> parts;
  std::vector<int> run;
  auto flush = [&] {
    if (run.empty()) return;
    parts.push_back(decoder.embed(run));
    run.clear();
  };

  bool present[3] = {};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& seg = segment_for(segments, kBlocks[i].modality);
    if (!seg) continue;
    present[i] = true;
    run.push_back(kBlocks[i].open);
    out.token_ids.push_back(kBlocks[i].open);
    if (seg->length() > 0) {
      if (seg->width() != d) {
        throw ShapeError(std::string(modality_name(kBlocks[i].modality)) + " payload width " +
                         std::to_string(seg->width()) + " != decoder width " + std::to_string(d));
      }
      flush();
      parts.push_back(seg->embeddings);
      out.token_ids.insert(out.token_ids.end(), seg->length(), -1);
    }
    run.push_back(kBlocks[i].close);
    out.token_ids.push_back(kBlocks[i].close);
  }
  std::vector<int> text = tok::encode(kQuestionCue);
  text.insert(text.end(), instruction.begin(), instruction.end());
  const auto cue = tok::encode(kAnswerCue);
  text.insert(text.end(), cue.begin(), cue.end());
  run.insert(run.end(), text.begin(), text.end());
  out.token_ids.insert(out.token_ids.end(), text.begin(), text.end());
  flush();

  out.embeddings = parts.size() == 1 ? parts[0] : concat_rows(parts);
  out.rendered = render_prompt(present[0], present[1], present[2], tok::decode(instruction));
  return out;
}

// ---------------------------------------------------------------- loss & generation

Tensor answer_only_loss(const Tensor& logits, std::size_t prompt_length, std::span<const int> answer) {
  if (answer.empty()) throw LengthError("answer must not be empty");
  if (prompt_length == 0) throw LengthError("prompt must not be empty");
  if (logits.rows() < prompt_length + answer.size() - 1) throw LengthError("logits do not cover the answer");
  std::vector<int> targets(logits.rows(), -1);
  for (std::size_t i = 0; i < answer.size(); ++i) targets[prompt_length - 1 + i] = answer[i];
  return cross_entropy(logits, targets);
}

Tensor decode_loss(const ToyDecoder& decoder, const EmbeddedPrompt& prompt, std::span<const int> answer) {
  if (answer.empty()) throw LengthError("answer must not be empty");
  const std::size_t P = prompt.length();
  const std::size_t total = P + answer.size() - 1;
  if (total > decoder.config().max_positions) {
    throw LengthError("prompt of " + std::to_string(P) + " plus answer of " + std::to_string(answer.size()) +
                      " overruns max_positions " + std::to_string(decoder.config().max_positions));
  }
  Tensor seq = prompt.embeddings;
  if (answer.size() > 1) {
    const Tensor pieces[] = {prompt.embeddings, decoder.embed(answer.first(answer.size() - 1))};
    seq = concat_rows(pieces);
  }
  return cross_entropy(decoder.logits_at(seq, P - 1, answer.size()), answer);
}

std::vector<int> generate(const ToyDecoder& decoder, const EmbeddedPrompt& prompt, std::size_t max_new,
                          const GenerateOptions& options) {
  const std::size_t P = prompt.length();
  if (P + max_new > decoder.config().max_positions) {
    throw LengthError("prompt of " + std::to_string(P) + " plus " + std::to_string(max_new) +
                      " new tokens exceeds max_positions " + std::to_string(decoder.config().max_positions));
  }
  if (options.mode == GenerateOptions::Mode::kTemperature && !(options.temperature > 0.0)) {
    throw ConfigError("temperature must be positive");
  }
  NoGrad no_grad;
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<int> out;
  Tensor seq = prompt.embeddings;
  for (std::size_t step = 0; step < max_new; ++step) {
    Tensor row = decoder.logits_at(seq, seq.rows() - 1, 1);
    auto z = row.data();
    int next = 0;
    if (options.mode == GenerateOptions::Mode::kGreedy) {
      next = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    } else {
      const double mx = *std::max_element(z.begin(), z.end());
      std::vector<double> p(z.size());
      double total = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) total += p[i] = std::exp((z[i] - mx) / options.temperature);
      double u = unif(rng) * total;
      next = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0 && u < p[i]) {
          next = static_cast<int>(i);
          break;
        }
        u -= p[i];
      }
    }
    if (next == tok::kEos) break;
    out.push_back(next);
    const int ids[] = {next};
    const Tensor pieces[] = {seq, decoder.embed(ids)};
    seq = concat_rows(pieces);
  }
  return out;
}

}  // namespace xllm
