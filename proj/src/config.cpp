// SPDX-License-Identifier: Apache-2.0
#include "xllm/config.hpp"

#include <fstream>

#include "xllm/error.hpp"

namespace xllm {

#define XLLM_JSON_FIELDS(Type, ...)                                                       \
  void to_json(nlohmann::json& nlohmann_json_j, const Type& nlohmann_json_t) {            \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(NLOHMANN_JSON_TO, __VA_ARGS__))              \
  }                                                                                       \
  void from_json(const nlohmann::json& nlohmann_json_j, Type& nlohmann_json_t) {          \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(NLOHMANN_JSON_FROM, __VA_ARGS__))            \
  }

XLLM_JSON_FIELDS(EncoderConfig, input_dim, d_model, n_blocks, n_heads, d_ffn, conv_channels, conv_kernel,
                 patch_size, pool_positions)
XLLM_JSON_FIELDS(CifConfig, beta, scale_at_train, tail_threshold, predictor_channels, predictor_kernel)
XLLM_JSON_FIELDS(AsrDecoderConfig, d_model, n_heads, d_ffn, vocab_size, visual_dim, visual_branch)
XLLM_JSON_FIELDS(QueryTransformerConfig, n_queries, n_blocks, d_model, n_heads, d_ffn, feature_dim)
XLLM_JSON_FIELDS(ContextualTransformerConfig, d_model, n_blocks, n_heads, d_ffn)
XLLM_JSON_FIELDS(ToyDecoderConfig, vocab_size, d_llm, n_blocks, n_heads, d_ffn, max_positions)
XLLM_JSON_FIELDS(SpeechCorpusSpec, seed, n_items, alphabet_size, feature_dim, k_min, k_max, noise_sigma, min_tokens,
                 max_tokens, prototype_seed)
XLLM_JSON_FIELDS(ImageCorpusSpec, seed, n_items, image_size)
XLLM_JSON_FIELDS(VideoCorpusSpec, seed, n_items, frames, image_size, shape_size, step)
XLLM_JSON_FIELDS(InstructionCorpusSpec, seed, n_items, family_weights)
XLLM_JSON_FIELDS(OptimizerConfig, beta1, beta2, weight_decay, eps, clip_norm)
XLLM_JSON_FIELDS(StageBudget, epochs, batch, accumulation, init_lr, min_lr, warmup_lr, warmup_steps, max_steps)
XLLM_JSON_FIELDS(ModelConfig, image_encoder, speech_encoder, cif, asr, qformer, cformer, decoder, video_frames,
                 quantity_weight)
XLLM_JSON_FIELDS(DataConfig, speech_train, speech_test, instruct_speech, image_train, image_source, video_train,
                 instruct, text_items, probe_items)
XLLM_JSON_FIELDS(TrainConfig, optimizer, decoder_pretrain, source_qformer, stage1, stage2_image, stage2_video,
                 stage2_speech, stage3, warm_start_trial)

#undef XLLM_JSON_FIELDS

void ModelConfig::validate() const {
  image_encoder.validate();
  speech_encoder.validate();
  cif.validate();
  qformer.validate();
  require<ConfigError>(qformer.feature_dim == image_encoder.d_model,
                       "query transformer feature_dim must equal the image encoder width");
  require<ConfigError>(asr.d_model == speech_encoder.d_model, "ASR decoder width must equal the speech encoder width");
  require<ConfigError>(asr.visual_dim == image_encoder.d_model,
                       "ASR visual memory width must equal the image encoder width");
  require<ConfigError>(cformer.d_model == speech_encoder.d_model,
                       "contextual transformer width must equal the speech encoder width");
  require<ConfigError>(video_frames >= 1, "video_frames must be at least 1");
  require<ConfigError>(quantity_weight >= 0.0, "quantity weight must be non-negative");
}

void XllmConfig::require_runnable() const {
  if (!runnable) {
    throw ConfigError("profile '" + profile + "' documents published sizes and is not runnable at desk scale");
  }
}

namespace {

StageBudget budget(std::size_t epochs, std::size_t batch, std::size_t accumulation, double init_lr, double min_lr,
                   double warmup_lr, std::size_t warmup_steps, std::size_t max_steps = 0) {
  return {epochs, batch, accumulation, init_lr, min_lr, warmup_lr, warmup_steps, max_steps};
}

}  // namespace

XllmConfig desk_profile() {
  XllmConfig c;
  c.profile = "desk";
  c.runnable = true;
  c.seed = 7;

  auto& m = c.model;
  m.image_encoder = {3, 64, 2, 4, 128, 8, 5, 8, {}};
  m.speech_encoder = {16, 64, 4, 4, 128, 8, 5, 8, {1, 2}};
  m.cif = {1.0, true, 0.5, 64, 5};
  m.asr = {64, 4, 128, 256, 64, true};
  m.qformer = {8, 2, 64, 4, 128, 64};
  m.cformer = {64, 2, 4, 128};
  m.decoder = {256, 64, 2, 4, 256, 160};
  m.video_frames = 4;
  m.quantity_weight = 1.0;

  auto& d = c.data;
  d.speech_train = {11, 1000, 20, 16, 12, 20, 0.3, 3, 8, 1234};
  d.speech_test = {12, 100, 20, 16, 12, 20, 0.3, 3, 8, 1234};
  d.instruct_speech = {13, 0, 20, 16, 12, 20, 0.3, 3, 8, 1234};
  d.image_train = {21, 600, 24};
  d.image_source = {22, 400, 24};
  d.video_train = {31, 240, 8, 24, 6, 2};
  d.instruct = {41, 300, {3.5, 1.0, 2.0, 1.0}};
  d.text_items = 3000;
  d.probe_items = 32;

  auto& t = c.train;
  t.optimizer = {0.9, 0.98, 0.05, 1e-8, 1.0};
  t.decoder_pretrain = budget(3, 8, 1, 3e-3, 1e-4, 1e-4, 20);
  t.source_qformer = budget(10, 8, 1, 2e-3, 1e-5, 1e-4, 10);
  t.stage1 = budget(20, 8, 1, 2e-3, 1e-5, 1e-4, 20);
  t.stage2_image = budget(5, 8, 1, 2e-3, 1e-5, 1e-4, 10);
  t.stage2_video = budget(5, 8, 1, 2e-3, 1e-5, 1e-4, 10);
  t.stage2_speech = budget(4, 8, 1, 2e-3, 1e-5, 1e-4, 10);
  t.stage3 = budget(2, 8, 1, 1e-3, 1e-5, 1e-4, 5);
  t.warm_start_trial = budget(1, 8, 1, 2e-3, 1e-5, 1e-4, 5, 25);
  return c;
}

XllmConfig paper_profile() {
  XllmConfig c = desk_profile();
  c.profile = "paper";
  c.runnable = false;

  auto& m = c.model;
  m.image_encoder = {3, 1408, 39, 16, 6144, 0, 31, 14, {}};
  m.speech_encoder = {80, 512, 18, 8, 2048, 256, 31, 8, {5, 11}};
  m.cif = {1.0, true, 0.5, 512, 5};
  m.asr = {512, 8, 2048, 256, 1408, true};
  m.qformer = {32, 12, 768, 12, 3072, 1408};
  m.cformer = {512, 12, 8, 2048};
  m.decoder = {130528, 4096, 28, 32, 16384, 2048};

  auto& t = c.train;
  t.optimizer = {0.9, 0.98, 0.05, 1e-8, 1.0};
  t.decoder_pretrain = budget(0, 1, 1, 0.0, 0.0, 0.0, 0);
  t.source_qformer = budget(0, 1, 1, 0.0, 0.0, 0.0, 0);
  t.stage1 = budget(84, 128, 1, 3e-4, 0.0, 0.0, 24000, 180000);
  t.stage2_image = budget(5, 4, 16, 3e-5, 1e-8, 1e-6, 6000);
  t.stage2_video = budget(5, 2, 16, 1e-5, 1e-8, 1e-6, 200);
  t.stage2_speech = budget(30, 4, 16, 1e-4, 1e-8, 1e-6, 6000);
  t.stage3 = budget(2, 2, 16, 1e-6, 1e-6, 1e-6, 0);
  t.warm_start_trial = budget(0, 1, 1, 0.0, 0.0, 0.0, 0);
  return c;
}

nlohmann::json config_to_json(const XllmConfig& cfg) {
  return {{"profile", cfg.profile}, {"runnable", cfg.runnable}, {"seed", cfg.seed},
          {"model", cfg.model},     {"data", cfg.data},         {"train", cfg.train}};
}

XllmConfig config_from_json(const nlohmann::json& j) {
  try {
    XllmConfig c;
    c.profile = j.at("profile").get<std::string>();
    c.runnable = j.at("runnable").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.model = j.at("model").get<ModelConfig>();
    c.data = j.at("data").get<DataConfig>();
    c.train = j.at("train").get<TrainConfig>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
}

nlohmann::json default_config_file() {
  return {{"profiles", {{"desk", config_to_json(desk_profile())}, {"paper", config_to_json(paper_profile())}}}};
}

void save_config_file(const std::filesystem::path& path, const nlohmann::json& file) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << file.dump(2) << '\n';
}

XllmConfig load_config(const std::filesystem::path& path, const std::string& profile) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json file;
  try {
    file = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  // A bare profile object is accepted too (run directories snapshot one).
  if (!file.contains("profiles")) return config_from_json(file);
  const auto& profiles = file.at("profiles");
  if (!profiles.contains(profile)) throw ConfigError("config has no profile '" + profile + "'");
  return config_from_json(profiles.at(profile));
}

}  // namespace xllm
