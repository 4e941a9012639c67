// SPDX-License-Identifier: Apache-2.0
//
// Stage plans, AdamW with accumulation and clipping, the warmup + cosine
// schedule, and a generic per-item training loop with freeze auditing.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "xllm/nn.hpp"

namespace xllm {

struct LrSchedule {
  double init_lr = 1e-3;
  double min_lr = 1e-5;
  double warmup_lr = 1e-5;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

// Linear warmup from warmup_lr to init_lr over warmup_steps, then cosine
// decay reaching min_lr at total_steps (held there afterwards).
double lr_at(std::size_t step, const LrSchedule& s);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.05;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// Per-stage budget. The schedule's total step count is derived from the data.
struct StageBudget {
  std::size_t epochs = 1;
  std::size_t batch = 4;
  std::size_t accumulation = 1;
  double init_lr = 1e-3;
  double min_lr = 1e-5;
  double warmup_lr = 1e-5;
  std::size_t warmup_steps = 0;
  std::size_t max_steps = 0;  // 0: no cap

  bool operator==(const StageBudget&) const = default;
};

// Decoupled weight decay, applied to matrices only (biases, norms and
// embeddings' 1-D companions are left alone).
class AdamW {
 public:
  AdamW(ParamList params, const OptimizerConfig& cfg);

  // Consumes the gradients held by the parameters. Returns the global norm
  // before clipping.
  double step(double lr);
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  ParamList params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Parameter groups addressable from stage plans.
namespace group {
inline constexpr const char* kSpeechEncoder = "speech_encoder";
inline constexpr const char* kCifPredictor = "cif_predictor";
inline constexpr const char* kAsrDecoder = "asr_decoder";
inline constexpr const char* kImageEncoder = "image_encoder";
inline constexpr const char* kImageQformer = "image_qformer";
inline constexpr const char* kIAdapter = "i_adapter";
inline constexpr const char* kVideoQformer = "video_qformer";
inline constexpr const char* kVAdapter = "v_adapter";
inline constexpr const char* kCformer = "cformer";
inline constexpr const char* kSAdapter = "s_adapter";
inline constexpr const char* kDecoder = "decoder";
}  // namespace group

struct StagePlan {
  int stage_id = 1;  // 0 is the backbone preparation phase
  std::string task;
  std::vector<std::string> trainable;
  std::vector<std::pair<std::string, double>> losses;
  std::vector<std::pair<std::string, double>> data_mix;
  StageBudget budget;

  // ConfigError when trainables fall outside what the stage may touch.
  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  int stage = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::string task;
};

// Appends one JSON object per line.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path);
  void write(const StepRecord& r);

 private:
  std::ofstream out_;
};

// Loss of one item, built on the active tape.
using ItemLoss = std::function<Tensor(std::size_t item)>;

struct LoopResult {
  std::vector<StepRecord> steps;
  std::size_t optimizer_steps = 0;
};

std::size_t planned_steps(const StageBudget& b, std::size_t n_items);

// Runs plan.budget over items [0, n_items): shuffled each epoch, micro-batch
// losses averaged and divided by the accumulation count. DivergenceError on
// a non-finite loss, before any update from that step is applied.
LoopResult run_loop(const StagePlan& plan, const ParamList& trainable, const OptimizerConfig& opt,
                    std::size_t n_items, const ItemLoss& loss_fn, std::mt19937_64& rng,
                    MetricsLog* log = nullptr);

// Mean loss over the given items without recording a tape.
double mean_loss(const std::vector<std::size_t>& items, const ItemLoss& loss_fn);

// SHA-256 per named group.
using GroupHashes = std::map<std::string, std::string>;

// Names of groups whose hash changed.
std::vector<std::string> changed_groups(const GroupHashes& before, const GroupHashes& after);

}  // namespace xllm
