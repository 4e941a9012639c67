// SPDX-License-Identifier: Apache-2.0
//
// Prompt assembly and the frozen toy decoder.
//
// Prompts follow one fixed template, with absent modalities dropped along
// with their markers:
//
//   <Image><ImageFeats></Image><Video><VideoFeats></Video><Speech><SpeechFeats></Speech>Question: <Instruction>\n Answer:
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xllm/nn.hpp"
#include "xllm/quasi_linguistic.hpp"
#include "xllm/tokenizer.hpp"

namespace xllm {

struct ToyDecoderConfig {
  std::size_t vocab_size = tok::kVocabSize;
  std::size_t d_llm = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::size_t max_positions = 256;

  bool operator==(const ToyDecoderConfig&) const = default;
};

// Causal pre-norm transformer with learned positions.
class ToyDecoder {
 public:
  ToyDecoder(const ToyDecoderConfig& cfg, std::mt19937_64& rng);

  Tensor embed(std::span<const int> ids) const;
  Tensor hidden(const Tensor& embedded) const;
  Tensor logits(const Tensor& embedded) const;
  // Logits of rows [start, start + count) only.
  Tensor logits_at(const Tensor& embedded, std::size_t start, std::size_t count) const;

  void collect(ParamList& out, const std::string& prefix) const;
  const ToyDecoderConfig& config() const { return cfg_; }
  Linear& head() { return head_; }

 private:
  ToyDecoderConfig cfg_;
  Tensor tok_embed_, pos_embed_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_out_;
  Linear head_;
};

// At most one payload per modality; rendering order is fixed by the template.
struct PromptSegments {
  std::optional<QuasiLinguisticSequence> image, video, speech;
};

struct EmbeddedPrompt {
  Tensor embeddings;          // [n x d_llm]
  std::string rendered;       // template text with payload placeholders
  std::vector<int> token_ids; // -1 marks payload rows

  std::size_t length() const { return token_ids.size(); }
};

inline constexpr std::string_view kQuestionCue = "Question: ";
inline constexpr std::string_view kAnswerCue = "\n Answer:";

std::string render_prompt(bool image, bool video, bool speech, std::string_view instruction);

struct PromptLayout {
  bool has_image = false, has_video = false, has_speech = false;
  std::string instruction;
  bool operator==(const PromptLayout&) const = default;
};

// Inverse of render_prompt; DataError on text that does not fit the template.
PromptLayout parse_prompt(std::string_view rendered);

EmbeddedPrompt assemble_prompt(const ToyDecoder& decoder, const PromptSegments& segments,
                               std::span<const int> instruction);

// Teacher-forced mean cross-entropy over the answer tokens only.
Tensor decode_loss(const ToyDecoder& decoder, const EmbeddedPrompt& prompt, std::span<const int> answer);

// Same loss from logits over the full teacher-forced sequence: rows before
// the last prompt row carry no target.
Tensor answer_only_loss(const Tensor& logits, std::size_t prompt_length, std::span<const int> answer);

struct GenerateOptions {
  enum class Mode { kGreedy, kTemperature };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Stops at <eos> (not returned) or after max_new tokens.
std::vector<int> generate(const ToyDecoder& decoder, const EmbeddedPrompt& prompt, std::size_t max_new,
                          const GenerateOptions& options = {});

}  // namespace xllm
