// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: model shapes, corpus specs and stage budgets, plus the
// JSON mapping used by configs/xllm.json. Two profiles ship: "desk" (runs on
// one CPU core in minutes) and "paper" (published sizes, not runnable here).
#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "xllm/asr.hpp"
#include "xllm/datagen.hpp"
#include "xllm/encoders.hpp"
#include "xllm/fusion.hpp"
#include "xllm/speech_interface.hpp"
#include "xllm/training.hpp"
#include "xllm/visual_interface.hpp"

namespace xllm {

struct ModelConfig {
  EncoderConfig image_encoder;
  EncoderConfig speech_encoder;
  CifConfig cif;
  AsrDecoderConfig asr;
  QueryTransformerConfig qformer;
  ContextualTransformerConfig cformer;
  ToyDecoderConfig decoder;
  std::size_t video_frames = 4;  // T frames sampled per clip
  double quantity_weight = 1.0;

  // Cross-module width agreements.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct DataConfig {
  SpeechCorpusSpec speech_train;
  SpeechCorpusSpec speech_test;
  SpeechCorpusSpec instruct_speech;
  ImageCorpusSpec image_train;
  ImageCorpusSpec image_source;  // data for the warm-start query transformer
  VideoCorpusSpec video_train;
  InstructionCorpusSpec instruct;
  std::size_t text_items = 2000;  // decoder pretraining sequences
  std::size_t probe_items = 32;   // fixed items for before/after loss probes

  bool operator==(const DataConfig&) const = default;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  StageBudget decoder_pretrain;
  StageBudget source_qformer;
  StageBudget stage1;
  StageBudget stage2_image;
  StageBudget stage2_video;
  StageBudget stage2_speech;
  StageBudget stage3;
  StageBudget warm_start_trial;

  bool operator==(const TrainConfig&) const = default;
};

struct XllmConfig {
  std::string profile = "desk";
  bool runnable = true;
  std::uint64_t seed = 7;
  ModelConfig model;
  DataConfig data;
  TrainConfig train;

  // ConfigError for documentation-only profiles.
  void require_runnable() const;
  bool operator==(const XllmConfig&) const = default;
};

XllmConfig desk_profile();
XllmConfig paper_profile();

// {"profiles": {"desk": {...}, "paper": {...}}}
nlohmann::json default_config_file();
void save_config_file(const std::filesystem::path& path, const nlohmann::json& file);
// ConfigError on unreadable files, unknown profiles, missing or mistyped keys.
XllmConfig load_config(const std::filesystem::path& path, const std::string& profile);
XllmConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const XllmConfig& cfg);

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const CifConfig& c);
void from_json(const nlohmann::json& j, CifConfig& c);
void to_json(nlohmann::json& j, const AsrDecoderConfig& c);
void from_json(const nlohmann::json& j, AsrDecoderConfig& c);
void to_json(nlohmann::json& j, const QueryTransformerConfig& c);
void from_json(const nlohmann::json& j, QueryTransformerConfig& c);
void to_json(nlohmann::json& j, const ContextualTransformerConfig& c);
void from_json(const nlohmann::json& j, ContextualTransformerConfig& c);
void to_json(nlohmann::json& j, const ToyDecoderConfig& c);
void from_json(const nlohmann::json& j, ToyDecoderConfig& c);
void to_json(nlohmann::json& j, const SpeechCorpusSpec& c);
void from_json(const nlohmann::json& j, SpeechCorpusSpec& c);
void to_json(nlohmann::json& j, const ImageCorpusSpec& c);
void from_json(const nlohmann::json& j, ImageCorpusSpec& c);
void to_json(nlohmann::json& j, const VideoCorpusSpec& c);
void from_json(const nlohmann::json& j, VideoCorpusSpec& c);
void to_json(nlohmann::json& j, const InstructionCorpusSpec& c);
void from_json(const nlohmann::json& j, InstructionCorpusSpec& c);
void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);
void to_json(nlohmann::json& j, const StageBudget& c);
void from_json(const nlohmann::json& j, StageBudget& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace xllm
