// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "support.hpp"
#include "xllm/checkpoint.hpp"
#include "xllm/error.hpp"
#include "xllm/pipeline.hpp"
#include "xllm/training.hpp"

using namespace xllm;
using xllm::testing::max_abs_diff;
using xllm::testing::normal;

namespace {

// A small regression problem: item i asks W x_i + b to match y_i.
struct Toy {
  Tensor w, b;
  std::vector<Tensor> xs, ys;
  explicit Toy(std::uint64_t seed, std::size_t n = 8) {
    std::mt19937_64 rng(seed);
    w = normal(rng, {3, 2});
    b = normal(rng, {2});
    for (std::size_t i = 0; i < n; ++i) {
      xs.push_back(normal(rng, {1, 3}));
      ys.push_back(normal(rng, {1, 2}));
    }
  }
  ParamList params() const { return {{"w", w}, {"b", b}}; }
  ItemLoss loss() const {
    return [this](std::size_t i) {
      Tensor r = sub(add(matmul(xs[i], w), b), ys[i]);
      return mean(mul(r, r));
    };
  }
};

StagePlan plan_with(std::size_t batch, std::size_t acc, std::size_t epochs = 1) {
  StagePlan p;
  p.stage_id = 3;
  p.task = "toy";
  p.trainable = {group::kIAdapter};
  p.budget = {epochs, batch, acc, 1e-2, 1e-4, 1e-3, 0, 0};
  return p;
}

}  // namespace

TEST_CASE("lr_at: warmup and cosine boundaries") {
  LrSchedule s{1e-3, 1e-5, 1e-6, 10, 110};
  CHECK(lr_at(0, s) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(lr_at(10, s) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(5, s) == doctest::Approx(1e-6 + 0.5 * (1e-3 - 1e-6)).epsilon(1e-12));
  CHECK(lr_at(60, s) == doctest::Approx(1e-5 + 0.5 * (1e-3 - 1e-5)).epsilon(1e-12));
  CHECK(lr_at(110, s) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(500, s) == doctest::Approx(1e-5).epsilon(1e-12));
}

TEST_CASE("lr_at: continuous at the warmup junction") {
  LrSchedule s{3e-5, 1e-8, 1e-6, 6000, 60000};
  const double below = lr_at(5999, s), at = lr_at(6000, s), above = lr_at(6001, s);
  CHECK(std::fabs(at - below) < 1e-8);
  CHECK(std::fabs(above - at) < 1e-8);
  CHECK(at == doctest::Approx(3e-5).epsilon(1e-12));
  for (std::size_t k = 1; k < 60000; k += 997) CHECK(lr_at(k, s) <= 3e-5 + 1e-15);
}

TEST_CASE("stage plans only train what the stage allows") {
  StagePlan p;
  p.stage_id = 1;
  p.trainable = {group::kSpeechEncoder, group::kCifPredictor, group::kAsrDecoder};
  CHECK_NOTHROW(p.validate());
  p.trainable.push_back(group::kDecoder);
  CHECK_THROWS_AS(p.validate(), ConfigError);

  p.stage_id = 2;
  p.trainable = {group::kImageQformer, group::kIAdapter, group::kVideoQformer, group::kVAdapter, group::kCformer,
                 group::kSAdapter};
  CHECK_NOTHROW(p.validate());
  p.trainable.push_back(group::kSpeechEncoder);
  CHECK_THROWS_AS(p.validate(), ConfigError);

  p.stage_id = 3;
  p.trainable = {group::kIAdapter, group::kVAdapter, group::kSAdapter};
  CHECK_NOTHROW(p.validate());
  p.trainable = {group::kImageQformer};
  CHECK_THROWS_AS(p.validate(), ConfigError);

  p.stage_id = 4;
  p.trainable.clear();
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("an empty trainable set is a no-op") {
  Toy toy(1);
  const std::string before = params_hash(toy.params());
  std::mt19937_64 rng(1);
  auto r = run_loop(plan_with(4, 1), {}, OptimizerConfig{}, toy.xs.size(), toy.loss(), rng);
  CHECK(r.optimizer_steps == 0);
  CHECK(params_hash(toy.params()) == before);
}

TEST_CASE("accumulation over micro-batches equals one full batch") {
  Toy full(2, 4), split(2, 4);
  std::mt19937_64 ra(5), rb(5);
  auto a = run_loop(plan_with(4, 1), full.params(), OptimizerConfig{}, 4, full.loss(), ra);
  auto b = run_loop(plan_with(2, 2), split.params(), OptimizerConfig{}, 4, split.loss(), rb);
  REQUIRE(a.optimizer_steps == 1);
  REQUIRE(b.optimizer_steps == 1);
  CHECK(std::fabs(a.steps[0].loss - b.steps[0].loss) < 1e-9);
  CHECK(max_abs_diff(full.w, split.w) < 1e-9);
  CHECK(max_abs_diff(full.b, split.b) < 1e-9);
}

TEST_CASE("fixed seed gives an identical loss trajectory") {
  auto run = [] {
    Toy toy(3);
    std::mt19937_64 rng(11);
    auto r = run_loop(plan_with(2, 1, 3), toy.params(), OptimizerConfig{}, toy.xs.size(), toy.loss(), rng);
    std::vector<double> losses;
    for (const auto& s : r.steps) losses.push_back(s.loss);
    return losses;
  };
  const auto a = run();
  CHECK(a.size() == 12);
  CHECK(a == run());
}

TEST_CASE("a non-finite loss aborts before any update") {
  Toy toy(4);
  const std::string before = params_hash(toy.params());
  ItemLoss bad = [&](std::size_t i) {
    Tensor l = toy.loss()(i);
    return i == 2 ? scale(l, std::numeric_limits<double>::quiet_NaN()) : l;
  };
  StagePlan p = plan_with(toy.xs.size(), 1);
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(run_loop(p, toy.params(), OptimizerConfig{}, toy.xs.size(), bad, rng), DivergenceError);
  CHECK(params_hash(toy.params()) == before);
}

TEST_CASE("weight decay touches matrices only") {
  Toy toy(5);
  const Tensor w0 = toy.w.detach(), b0 = toy.b.detach();
  OptimizerConfig cfg;
  cfg.weight_decay = 0.5;
  AdamW opt(toy.params(), cfg);
  set_requires_grad(toy.params(), true);
  {
    Tape tape;
    tape.backward(add(scale(sum(toy.w), 0.0), scale(sum(toy.b), 0.0)));  // zero gradients
  }
  opt.step(0.1);
  CHECK(max_abs_diff(toy.w, scale(w0, 1.0 - 0.1 * 0.5)) < 1e-15);
  CHECK(xllm::testing::bit_identical(toy.b, b0));
}

TEST_CASE("changed_groups names exactly the groups whose hash moved") {
  GroupHashes before{{"a", "1"}, {"b", "2"}, {"c", "3"}};
  GroupHashes after{{"a", "1"}, {"b", "9"}, {"c", "3"}};
  CHECK(changed_groups(before, after) == std::vector<std::string>{"b"});
  CHECK(changed_groups(before, before).empty());
}

TEST_CASE("planned steps follow epochs, batch and the step cap") {
  StageBudget b{2, 4, 2, 1e-3, 1e-5, 1e-5, 0, 0};
  CHECK(planned_steps(b, 16) == 4);
  CHECK(planned_steps(b, 17) == 6);
  b.max_steps = 3;
  CHECK(planned_steps(b, 17) == 3);
}

TEST_CASE("stage-1 loss: visual features change the value when the branch is live") {
  XllmConfig cfg = desk_profile();
  XllmModel m(cfg.model, 3);
  std::mt19937_64 rng(3);
  Tensor feats = normal(rng, {64, cfg.model.speech_encoder.input_dim});
  Tensor visual = normal(rng, {5, cfg.model.asr.visual_dim});
  NoGrad guard;
  const double s = m.asr_loss(feats, "hello").item();
  const double sv = m.asr_loss(feats, "hello", visual).item();
  CHECK(std::isfinite(s));
  CHECK(std::fabs(s - sv) > 1e-9);
  CHECK(m.asr_loss(feats, "hello", m.asr.absent_visual()).item() == s);
  CHECK_THROWS_AS(m.asr_loss(feats, ""), LengthError);
}

TEST_CASE("alignment answers must not be empty") {
  CHECK_THROWS_AS(answer_ids(""), LengthError);
  const auto ids = answer_ids("a red circle");
  CHECK(ids.back() == tok::kEos);
  CHECK(ids.size() == 13);
}

TEST_CASE("metrics log writes one JSON object per line") {
  const auto path = std::filesystem::temp_directory_path() / "xllm_train_tests" / "m.ndjson";
  {
    MetricsLog log(path);
    log.write({0, 2, 1.5, 1e-3, "image"});
    log.write({1, 2, 1.25, 9e-4, "image"});
  }
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("stage"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("lr"));
    ++n;
  }
  CHECK(n == 2);
}
