// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora: token-prototype speech features, procedural shape
// images, moving-shape clips, and the instruction mix built from them.
// Every generator is a pure function of (spec, seed, item index).
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "xllm/tensor.hpp"

namespace xllm {

// Independent per-item streams from one corpus seed.
std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t index);

// ---------------------------------------------------------------- speech

struct SpeechCorpusSpec {
  std::uint64_t seed = 1;
  std::size_t n_items = 600;
  std::size_t alphabet_size = 20;  // letters 'a', 'b', ...
  std::size_t feature_dim = 16;
  std::size_t k_min = 12;          // frames per token, inclusive range
  std::size_t k_max = 20;
  double noise_sigma = 0.3;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  std::uint64_t prototype_seed = 1234;  // shared by every speech corpus of one run

  bool operator==(const SpeechCorpusSpec&) const = default;
};

struct SpeechItem {
  std::string transcript;            // one letter per token, no immediate repeats
  Tensor features;                   // [U x feature_dim]
  std::vector<std::size_t> expansions;
};

class SpeechCorpusGenerator {
 public:
  // ConfigError unless k_min >= total_reduction, so the encoder keeps at
  // least one frame per token.
  SpeechCorpusGenerator(const SpeechCorpusSpec& spec, std::size_t total_reduction);

  SpeechItem item(std::size_t index) const;
  // Features for a fixed transcript, drawn from the stream of `index`.
  SpeechItem render(std::string_view transcript, std::size_t index) const;
  std::vector<SpeechItem> generate() const;
  std::string sample_transcript(std::mt19937_64& rng) const;

  const Tensor& prototypes() const { return prototypes_; }  // [alphabet x feature_dim]
  const SpeechCorpusSpec& spec() const { return spec_; }

 private:
  SpeechItem render_with(std::mt19937_64& rng, std::string_view transcript) const;

  SpeechCorpusSpec spec_;
  Tensor prototypes_;
};

// ---------------------------------------------------------------- image

inline constexpr std::string_view kColors[] = {"red", "green", "blue", "yellow"};
inline constexpr std::string_view kShapes[] = {"square", "circle", "cross", "diamond"};
inline constexpr std::string_view kPositions[] = {"top left",    "top",    "top right",
                                                  "left",        "center", "right",
                                                  "bottom left", "bottom", "bottom right"};

struct ImageCorpusSpec {
  std::uint64_t seed = 2;
  std::size_t n_items = 600;
  std::size_t image_size = 24;  // square, divided into a 3 x 3 grid of cells

  bool operator==(const ImageCorpusSpec&) const = default;
};

struct ImageParams {
  int color = 0, shape = 0, pos = 0;
  bool operator==(const ImageParams&) const = default;
};

struct ImageItem {
  ImageParams params;
  std::string caption;
  Tensor pixels;  // [S x S x 3]
};

std::string image_caption(const ImageParams& p);
std::string image_payload_text(const ImageParams& p);  // short textual stand-in for the image
Tensor render_image(const ImageParams& p, std::size_t image_size);
ImageParams random_image_params(std::mt19937_64& rng);
ImageItem make_image_item(const ImageParams& p, std::size_t image_size);
ImageItem image_item(const ImageCorpusSpec& spec, std::size_t index);
std::vector<ImageItem> gen_image_corpus(const ImageCorpusSpec& spec);

// ---------------------------------------------------------------- video

enum class Motion { kLeft, kRight, kUp, kDown, kStatic };
std::string_view motion_name(Motion m);
Motion mirror(Motion m);

struct VideoCorpusSpec {
  std::uint64_t seed = 3;
  std::size_t n_items = 240;
  std::size_t frames = 8;
  std::size_t image_size = 24;
  std::size_t shape_size = 6;
  std::size_t step = 2;  // pixels per frame

  bool operator==(const VideoCorpusSpec&) const = default;
};

struct VideoParams {
  int color = 0, shape = 0;
  Motion motion = Motion::kStatic;
  int x0 = 0, y0 = 0;  // top-left corner of the shape in frame 0
};

struct VideoItem {
  VideoParams params;
  std::string caption;
  Tensor clip;  // [F x S x S x 3]
};

std::string video_caption(const VideoParams& p);
std::string video_payload_text(const VideoParams& p);
Tensor render_clip(const VideoParams& p, const VideoCorpusSpec& spec);
VideoParams random_video_params(const VideoCorpusSpec& spec, std::mt19937_64& rng);
VideoItem make_video_item(const VideoParams& p, const VideoCorpusSpec& spec);
VideoItem video_item(const VideoCorpusSpec& spec, std::size_t index);
std::vector<VideoItem> gen_video_corpus(const VideoCorpusSpec& spec);

// Motion read back from pixel centroids of the first and last frame.
Motion infer_motion(std::span<const Tensor> frames);
Motion infer_motion(const Tensor& clip);

// ---------------------------------------------------------------- instructions

enum class Family { kImage, kVideo, kSpeech, kDialogue };
std::string_view family_name(Family f);
const std::vector<std::string>& family_instructions(Family f);

// Fixed single-task instructions used for the alignment stage.
inline constexpr std::string_view kImageInstruction = "describe this image in detail";
inline constexpr std::string_view kVideoInstruction = "can you describe what you notice in the video";
inline constexpr std::string_view kSpeechInstruction = "Please faithfully recognize the speech";
inline constexpr std::string_view kDialogueInstruction = "answer the question in the speech based on the image";

// Spoken questions of the image+speech family and the attribute they ask for.
inline constexpr std::string_view kSpokenQuestions[] = {"color", "shape", "place"};

struct InstructionCorpusSpec {
  std::uint64_t seed = 4;
  std::size_t n_items = 300;
  // Sampling weights of image, video, speech, dialogue items.
  std::vector<double> family_weights{3.5, 1.0, 2.0, 1.0};

  bool operator==(const InstructionCorpusSpec&) const = default;
};

struct InstructionItem {
  Family family = Family::kImage;
  std::string instruction;
  std::string answer;
  std::optional<ImageItem> image;
  std::optional<VideoItem> video;
  std::optional<SpeechItem> speech;
};

InstructionItem instruction_item(const InstructionCorpusSpec& spec, const ImageCorpusSpec& image_spec,
                                 const VideoCorpusSpec& video_spec, const SpeechCorpusGenerator& speech,
                                 std::size_t index);
std::vector<InstructionItem> gen_instruction_corpus(const InstructionCorpusSpec& spec,
                                                    const ImageCorpusSpec& image_spec,
                                                    const VideoCorpusSpec& video_spec,
                                                    const SpeechCorpusGenerator& speech);

// ---------------------------------------------------------------- container

// One record per item: JSON metadata plus one float64 array.
struct CorpusRecord {
  nlohmann::json meta;
  Tensor values;
};

struct CorpusFile {
  std::string kind;
  nlohmann::json spec;
  std::string checksum;  // SHA-256 of the record payload
  std::vector<CorpusRecord> records;
};

// Layout: "XLLMCORP", u32 version, u64 + JSON header (kind, spec, count,
// checksum), u64 offset per record, then the records. Each record is u64 +
// JSON meta followed by the raw little-endian float64 values.
void save_corpus(const std::filesystem::path& path, const CorpusFile& corpus);
// DataError on bad magic, truncation or checksum mismatch.
CorpusFile load_corpus(const std::filesystem::path& path);
std::string corpus_checksum(const std::vector<CorpusRecord>& records);

CorpusRecord to_record(const SpeechItem& item);
CorpusRecord to_record(const ImageItem& item);
CorpusRecord to_record(const VideoItem& item);
CorpusRecord to_record(const InstructionItem& item);
SpeechItem speech_from_record(const CorpusRecord& r);
ImageItem image_from_record(const CorpusRecord& r);
VideoItem video_from_record(const CorpusRecord& r);
InstructionItem instruction_from_record(const CorpusRecord& r);

}  // namespace xllm
