// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "support.hpp"
#include "xllm/checkpoint.hpp"
#include "xllm/encoders.hpp"
#include "xllm/error.hpp"

using namespace xllm;
using xllm::testing::normal;

namespace {

EncoderConfig image_cfg() { return {3, 16, 1, 2, 32, 4, 3, 8, {}}; }
EncoderConfig speech_cfg() { return {5, 16, 3, 2, 32, 4, 3, 8, {0, 2}}; }

}  // namespace

TEST_CASE("image encoder: one feature per patch") {
  std::mt19937_64 rng(1);
  ImageEncoder enc(image_cfg(), rng);
  CHECK(enc.encode(Tensor({16, 16, 3}, 0.5)).length() == 4);
  CHECK(enc.encode(Tensor({24, 24, 3}, 0.5)).length() == 9);
  CHECK(enc.encode(Tensor({8, 24, 3}, 0.5)).length() == 3);
  auto f = enc.encode(Tensor({16, 16, 3}, 0.5));
  CHECK(f.frames.cols() == 16);
  CHECK(f.source == FeatureSource::kImage);
}

TEST_CASE("image encoder: indivisible sizes are shape errors") {
  std::mt19937_64 rng(1);
  ImageEncoder enc(image_cfg(), rng);
  CHECK_THROWS_AS(enc.encode(Tensor({20, 16, 3})), ShapeError);
  CHECK_THROWS_AS(enc.encode(Tensor({16, 16, 4})), ShapeError);
}

TEST_CASE("image encoder: all-zero and all-one images give distinct features") {
  std::mt19937_64 rng(2);
  ImageEncoder enc(image_cfg(), rng);
  auto zero = enc.encode(Tensor({16, 16, 3}, 0.0));
  auto one = enc.encode(Tensor({16, 16, 3}, 1.0));
  CHECK(xllm::testing::max_abs_diff(zero.frames, one.frames) > 1e-3);
}

TEST_CASE("speech encoder: reduction chain") {
  EncoderConfig cfg = speech_cfg();
  CHECK(SpeechEncoder::output_length(64, cfg) == 8);
  CHECK(SpeechEncoder::output_length(63, cfg) == 7);  // 31, 15, 7
  CHECK(SpeechEncoder::total_reduction(cfg) == 8);
  CHECK(SpeechEncoder::min_input_length(cfg) == 8);
  std::mt19937_64 rng(3);
  SpeechEncoder enc(cfg, rng);
  CHECK(enc.encode(normal(rng, {64, 5})).length() == 8);
  CHECK(enc.encode(normal(rng, {63, 5})).length() == 7);
}

TEST_CASE("speech encoder: length law over a range of inputs") {
  EncoderConfig cfg = speech_cfg();
  std::mt19937_64 rng(4);
  SpeechEncoder enc(cfg, rng);
  for (std::size_t u = SpeechEncoder::min_input_length(cfg); u <= 512; u += 37) {
    const std::size_t expect = ((u / 2) / 2) / 2;
    CHECK(SpeechEncoder::output_length(u, cfg) == expect);
    CHECK(enc.encode(normal(rng, {u, 5})).length() == expect);
  }
}

TEST_CASE("speech encoder: too-short input is a length error") {
  std::mt19937_64 rng(5);
  SpeechEncoder enc(speech_cfg(), rng);
  CHECK_THROWS_AS(enc.encode(normal(rng, {7, 5})), LengthError);
  CHECK_THROWS_AS(enc.encode(normal(rng, {16, 4})), ShapeError);
}

TEST_CASE("encoder config invariants") {
  EncoderConfig c = speech_cfg();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = speech_cfg();
  c.pool_positions = {2, 1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.pool_positions = {0, 3};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encoders are deterministic for fixed weights") {
  std::mt19937_64 rng(6);
  SpeechEncoder enc(speech_cfg(), rng);
  Tensor x = normal(rng, {40, 5});
  CHECK(xllm::testing::bit_identical(enc.encode(x).frames, enc.encode(x).frames));
  std::mt19937_64 a(9), b(9);
  ImageEncoder ea(image_cfg(), a), eb(image_cfg(), b);
  ParamList pa, pb;
  ea.collect(pa, "e");
  eb.collect(pb, "e");
  CHECK(params_hash(pa) == params_hash(pb));
}

TEST_CASE("uniform frame sampling") {
  CHECK(uniform_frame_indices(10, 2) == std::vector<std::size_t>{0, 9});
  CHECK(uniform_frame_indices(10, 5) == std::vector<std::size_t>{0, 2, 5, 7, 9});
  CHECK(uniform_frame_indices(1, 4) == std::vector<std::size_t>{0, 0, 0, 0});
  CHECK(uniform_frame_indices(3, 1) == std::vector<std::size_t>{0});
  for (std::size_t f = 1; f <= 12; ++f) {
    for (std::size_t t = 1; t <= 9; ++t) {
      auto idx = uniform_frame_indices(f, t);
      CHECK(idx.size() == t);
      for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] >= idx[i - 1]);
      CHECK(idx.back() < f);
    }
  }
}

TEST_CASE("sample_video_frames keeps order and frame content") {
  Tensor video({4, 2, 2, 1});
  auto d = video.mutable_data();
  for (std::size_t f = 0; f < 4; ++f)
    for (std::size_t i = 0; i < 4; ++i) d[f * 4 + i] = static_cast<double>(f);
  auto frames = sample_video_frames(video, 3);  // indices 0, 2, 3
  REQUIRE(frames.size() == 3);
  CHECK(frames[0].at(0) == 0.0);
  CHECK(frames[1].at(0) == 2.0);
  CHECK(frames[2].at(0) == 3.0);
  CHECK(frames[1].shape() == Shape{2, 2, 1});
}
