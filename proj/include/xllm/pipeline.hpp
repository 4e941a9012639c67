// SPDX-License-Identifier: Apache-2.0
//
// The assembled model, run-directory layout and the stage drivers.
//
// Run directory:
//   config.json                      snapshot of the active profile
//   corpora/<name>.xc                checksummed corpus containers
//   checkpoints/<stage>/model.ckpt   every parameter group after that stage
//   checkpoints/backbone/qformer_source.ckpt
//   metrics/<stage>.ndjson           one {step, stage, loss, lr, task} per step
//   reports/<name>.json
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xllm/config.hpp"
#include "xllm/datagen.hpp"
#include "xllm/eval.hpp"
#include "xllm/fusion.hpp"
#include "xllm/training.hpp"

namespace xllm {

class XllmModel {
 public:
  XllmModel(const ModelConfig& cfg, std::uint64_t seed);

  ModelConfig cfg;
  ImageEncoder image_encoder;
  SpeechEncoder speech_encoder;
  CifPredictor cif;
  AsrDecoder asr;
  VisualInterface image_iface;
  VisualInterface video_iface;
  ContextualTransformer cformer;
  Adapter s_adapter;
  ToyDecoder decoder;

  static const std::vector<std::string>& group_names();
  ParamList group(const std::string& name) const;
  ParamList groups(const std::vector<std::string>& names) const;
  ParamList all_params() const;
  GroupHashes hashes() const;

  // Speech encoder, CIF predictor and CIF. A target length selects the
  // scaled training mode.
  CifOutput speech_cif(const Tensor& features, std::optional<std::size_t> target) const;
  // Contextual transformer then S-Adapter.
  QuasiLinguisticSequence speech_interface(const QuasiLinguisticSequence& cif_tokens) const;
  // Stage-1 loss: CE over CIF outputs plus weighted quantity loss.
  Tensor asr_loss(const Tensor& features, std::string_view transcript, const Tensor& visual = {}) const;
  // Greedy ASR transcript in inference mode.
  std::string recognize(const Tensor& features, const Tensor& visual = {}) const;

 private:
  XllmModel(const ModelConfig& cfg, std::uint64_t seed, std::mt19937_64&& rng);

  std::uint64_t seed_;
};

nlohmann::json model_config_json(const ModelConfig& cfg);

// Paths inside one run directory.
struct RunPaths {
  explicit RunPaths(std::filesystem::path root) : root(std::move(root)) {}
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path corpus(const std::string& name) const { return root / "corpora" / (name + ".xc"); }
  std::filesystem::path checkpoint(const std::string& stage) const {
    return root / "checkpoints" / stage / "model.ckpt";
  }
  std::filesystem::path qformer_source() const { return root / "checkpoints" / "backbone" / "qformer_source.ckpt"; }
  std::filesystem::path metrics(const std::string& stage) const { return root / "metrics" / (stage + ".ndjson"); }
  std::filesystem::path report(const std::string& name) const { return root / "reports" / (name + ".json"); }
};

using Logger = std::function<void(const std::string&)>;

struct Corpora {
  std::vector<SpeechItem> speech_train, speech_test;
  std::vector<ImageItem> image_train, image_source;
  std::vector<VideoItem> video_train;
  std::vector<InstructionItem> instruct;
};

inline const std::vector<std::string> kCorpusNames{"speech_train", "speech_test", "image_train",
                                                   "image_source", "video_train", "instruct"};

// Corpus specs with seeds mixed with the run seed.
DataConfig effective_data(const XllmConfig& cfg);

// Writes every corpus; returns name -> checksum.
std::map<std::string, std::string> gen_corpora(const XllmConfig& cfg, const RunPaths& paths);
Corpora load_corpora(const RunPaths& paths);

// Text rendering of a task item, used to pretrain the decoder.
struct TextExample {
  std::optional<std::string> image, video, speech;
  std::string instruction;
  std::string answer;
};
TextExample text_example(const XllmConfig& cfg, std::size_t index);
EmbeddedPrompt embed_text_prompt(const ToyDecoder& decoder, const TextExample& ex);
std::vector<int> answer_ids(std::string_view answer);  // bytes then <eos>

// Stage drivers. Each loads its prerequisite checkpoint, trains, audits the
// freeze mask and writes a checkpoint, metrics and a report (returned).
nlohmann::json run_backbone(const XllmConfig& cfg, const RunPaths& paths, const Logger& log);
nlohmann::json run_stage1(const XllmConfig& cfg, const RunPaths& paths, const Logger& log);
nlohmann::json run_stage2(const XllmConfig& cfg, const RunPaths& paths, const Logger& log);
nlohmann::json run_stage3(const XllmConfig& cfg, const RunPaths& paths, const Logger& log);
// Dispatch with prerequisite checks (OrderingError when missing). Stage 1
// generates corpora and runs the backbone phase when they are absent.
nlohmann::json run_stage(int stage, const XllmConfig& cfg, const RunPaths& paths, const Logger& log);

// Latest completed checkpoint name ("stage3" ... "backbone"), if any.
std::optional<std::string> latest_checkpoint(const RunPaths& paths);
std::unique_ptr<XllmModel> load_model(const XllmConfig& cfg, const RunPaths& paths, const std::string& stage);

// Image-interface training for a fixed budget from a warm (source
// checkpoint) or cold query transformer. Returns the final probe loss.
struct WarmStartResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};
WarmStartResult warm_start_trial(const XllmConfig& cfg, const RunPaths& paths, std::uint64_t seed, bool warm);

// Held-out ASR evaluation with the stage-1 model.
struct AsrEval {
  std::vector<CerPair> pairs;
  std::vector<CerReport> reports;
  CerReport pooled;
};
AsrEval evaluate_asr(const XllmModel& model, const std::vector<SpeechItem>& items);

// Prompt for one instruction item with every present modality.
EmbeddedPrompt instruction_prompt(const XllmModel& model, const InstructionItem& item);

}  // namespace xllm
