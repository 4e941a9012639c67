// SPDX-License-Identifier: Apache-2.0
#include "xllm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include <json.hpp>

#include "xllm/error.hpp"

namespace xllm {

double lr_at(std::size_t step, const LrSchedule& s) {
  if (step < s.warmup_steps) {
    return s.warmup_lr + (s.init_lr - s.warmup_lr) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (s.total_steps <= s.warmup_steps) return s.init_lr;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - s.warmup_steps) / span);
  return s.min_lr + 0.5 * (s.init_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void OptimizerConfig::validate() const {
  require<ConfigError>(beta1 > 0.0 && beta1 < 1.0, "beta1 must lie in (0, 1)");
  require<ConfigError>(beta2 > 0.0 && beta2 < 1.0, "beta2 must lie in (0, 1)");
  require<ConfigError>(weight_decay >= 0.0, "weight decay must be non-negative");
  require<ConfigError>(eps > 0.0, "eps must be positive");
}

AdamW::AdamW(ParamList params, const OptimizerConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm is not finite");
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool decay = p.rank() >= 2;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      if (decay) w[j] -= lr * cfg_.weight_decay * w[j];
      w[j] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
  zero_grad();
  return norm;
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) {
    Tensor h = p;
    h.zero_grad();
  }
}

void StagePlan::validate() const {
  static const std::map<int, std::set<std::string>> allowed{
      {0, {group::kDecoder, group::kImageQformer, group::kIAdapter}},
      {1, {group::kSpeechEncoder, group::kCifPredictor, group::kAsrDecoder}},
      {2, {group::kImageQformer, group::kIAdapter, group::kVideoQformer, group::kVAdapter, group::kCformer,
           group::kSAdapter}},
      {3, {group::kIAdapter, group::kVAdapter, group::kSAdapter}},
  };
  auto it = allowed.find(stage_id);
  if (it == allowed.end()) throw ConfigError("unknown stage " + std::to_string(stage_id));
  for (const auto& g : trainable) {
    if (!it->second.contains(g)) {
      throw ConfigError("group '" + g + "' may not be trained in stage " + std::to_string(stage_id));
    }
  }
  require<ConfigError>(budget.batch > 0 && budget.accumulation > 0, "batch and accumulation must be positive");
}

MetricsLog::MetricsLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw DataError("cannot write metrics to " + path.string());
}

void MetricsLog::write(const StepRecord& r) {
  if (!out_.is_open()) return;
  nlohmann::json j{{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}, {"lr", r.lr}, {"task", r.task}};
  out_ << j.dump() << '\n';
  out_.flush();
}

std::size_t planned_steps(const StageBudget& b, std::size_t n_items) {
  const std::size_t per_step = b.batch * b.accumulation;
  const std::size_t per_epoch = (n_items + per_step - 1) / per_step;
  const std::size_t total = per_epoch * b.epochs;
  return b.max_steps ? std::min(total, b.max_steps) : total;
}

LoopResult run_loop(const StagePlan& plan, const ParamList& trainable, const OptimizerConfig& opt,
                    std::size_t n_items, const ItemLoss& loss_fn, std::mt19937_64& rng, MetricsLog* log) {
  plan.validate();
  LoopResult result;
  if (trainable.empty() || n_items == 0) return result;
  const StageBudget& b = plan.budget;
  const LrSchedule sched{b.init_lr, b.min_lr, b.warmup_lr, b.warmup_steps, planned_steps(b, n_items)};
  AdamW optim(trainable, opt);
  optim.zero_grad();

  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n_items;  // forces a shuffle on the first draw
  const std::size_t per_step = b.batch * b.accumulation;

  while (result.optimizer_steps < sched.total_steps) {
    std::vector<std::size_t> items;
    while (items.size() < per_step) {
      if (cursor == n_items) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      items.push_back(order[cursor++]);
      // Epoch boundary closes a partial step so every epoch sees each item once.
      if (cursor == n_items) break;
    }
    const std::size_t micro = (items.size() + b.accumulation - 1) / b.accumulation;
    const std::size_t n_micro = (items.size() + micro - 1) / micro;
    double total = 0.0;
    for (std::size_t mb = 0; mb < n_micro; ++mb) {
      const std::size_t lo = mb * micro, hi = std::min(items.size(), lo + micro);
      for (std::size_t k = lo; k < hi; ++k) {
        Tape tape;
        Tensor loss = loss_fn(items[k]);
        const double v = loss.item();
        if (!std::isfinite(v)) {
          optim.zero_grad();
          throw DivergenceError("non-finite loss in stage " + std::to_string(plan.stage_id) + " (" + plan.task +
                                ") at step " + std::to_string(result.optimizer_steps));
        }
        total += v;
        tape.backward(loss, 1.0 / (static_cast<double>(hi - lo) * static_cast<double>(n_micro)));
      }
    }
    const double lr = lr_at(result.optimizer_steps, sched);
    optim.step(lr);
    StepRecord rec{result.optimizer_steps, plan.stage_id, total / static_cast<double>(items.size()), lr, plan.task};
    if (log) log->write(rec);
    result.steps.push_back(rec);
    ++result.optimizer_steps;
  }
  return result;
}

double mean_loss(const std::vector<std::size_t>& items, const ItemLoss& loss_fn) {
  if (items.empty()) throw LengthError("mean_loss needs at least one item");
  NoGrad guard;
  double total = 0.0;
  for (auto i : items) total += loss_fn(i).item();
  return total / static_cast<double>(items.size());
}

std::vector<std::string> changed_groups(const GroupHashes& before, const GroupHashes& after) {
  std::vector<std::string> out;
  for (const auto& [name, h] : before) {
    auto it = after.find(name);
    if (it == after.end() || it->second != h) out.push_back(name);
  }
  return out;
}

}  // namespace xllm
