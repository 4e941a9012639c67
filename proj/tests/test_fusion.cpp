// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "xllm/error.hpp"
#include "xllm/fusion.hpp"

using namespace xllm;
using xllm::testing::bit_identical;
using xllm::testing::max_abs_diff;
using xllm::testing::normal;

namespace {

ToyDecoderConfig tiny_decoder() { return {tok::kVocabSize, 8, 1, 2, 16, 64}; }

struct Fixture {
  std::mt19937_64 rng;
  ToyDecoder decoder;
  explicit Fixture(std::uint64_t seed) : rng(seed), decoder(tiny_decoder(), rng) {}

  QuasiLinguisticSequence payload(std::size_t n, Modality m) { return {normal(rng, {n, 8}), m}; }
};

const std::vector<int> kInstr = tok::encode("what?");

}  // namespace

TEST_CASE("render_prompt covers all eight modality subsets") {
  const std::string tail = "Question: hi\n Answer:";
  CHECK(render_prompt(false, false, false, "hi") == tail);
  CHECK(render_prompt(true, false, false, "hi") == "<Image><ImageFeats></Image>" + tail);
  CHECK(render_prompt(false, true, false, "hi") == "<Video><VideoFeats></Video>" + tail);
  CHECK(render_prompt(false, false, true, "hi") == "<Speech><SpeechFeats></Speech>" + tail);
  CHECK(render_prompt(true, true, false, "hi") == "<Image><ImageFeats></Image><Video><VideoFeats></Video>" + tail);
  CHECK(render_prompt(true, false, true, "hi") == "<Image><ImageFeats></Image><Speech><SpeechFeats></Speech>" + tail);
  CHECK(render_prompt(false, true, true, "hi") == "<Video><VideoFeats></Video><Speech><SpeechFeats></Speech>" + tail);
  CHECK(render_prompt(true, true, true, "hi") ==
        "<Image><ImageFeats></Image><Video><VideoFeats></Video><Speech><SpeechFeats></Speech>" + tail);
}

TEST_CASE("parse_prompt inverts render_prompt") {
  for (int mask = 0; mask < 8; ++mask) {
    PromptLayout want{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0, "describe it"};
    CHECK(parse_prompt(render_prompt(want.has_image, want.has_video, want.has_speech, want.instruction)) == want);
  }
  CHECK_THROWS_AS(parse_prompt("Answer: no"), DataError);
  CHECK_THROWS_AS(parse_prompt("<Video><VideoFeats></Video><Image><ImageFeats></Image>Question: x\n Answer:"),
                  DataError);
}

TEST_CASE("assembled length counts markers, payload and text") {
  Fixture f(1);
  PromptSegments seg;
  seg.image = f.payload(8, Modality::kImage);
  auto p = assemble_prompt(f.decoder, seg, kInstr);
  const std::size_t text = std::string(kQuestionCue).size() + kInstr.size() + std::string(kAnswerCue).size();
  CHECK(p.length() == 2 + 8 + text);
  CHECK(p.embeddings.rows() == p.length());
  CHECK(p.embeddings.cols() == 8);
  CHECK(p.rendered == "<Image><ImageFeats></Image>Question: what?\n Answer:");

  PromptSegments none;
  auto q = assemble_prompt(f.decoder, none, kInstr);
  CHECK(q.length() == text);
  CHECK(q.rendered == "Question: what?\n Answer:");
}

TEST_CASE("payload rows are inserted verbatim between ordered markers") {
  Fixture f(2);
  PromptSegments seg;
  seg.speech = f.payload(3, Modality::kSpeech);
  seg.image = f.payload(2, Modality::kImage);
  seg.video = f.payload(4, Modality::kVideo);
  auto p = assemble_prompt(f.decoder, seg, kInstr);
  const auto& ids = p.token_ids;
  REQUIRE(ids.size() >= 15);
  CHECK(ids[0] == tok::kImageOpen);
  CHECK(ids[3] == tok::kImageClose);
  CHECK(ids[4] == tok::kVideoOpen);
  CHECK(ids[9] == tok::kVideoClose);
  CHECK(ids[10] == tok::kSpeechOpen);
  CHECK(ids[14] == tok::kSpeechClose);
  CHECK(ids[1] == -1);
  CHECK(ids[12] == -1);
  CHECK(bit_identical(slice_rows(p.embeddings, 5, 4), seg.video->embeddings));
  CHECK(bit_identical(slice_rows(p.embeddings, 11, 3), seg.speech->embeddings));
  const int open[] = {tok::kImageOpen};
  CHECK(bit_identical(slice_rows(p.embeddings, 0, 1), f.decoder.embed(open)));
}

TEST_CASE("assemble_prompt rejects bad inputs") {
  Fixture f(3);
  PromptSegments none;
  CHECK_THROWS_AS(assemble_prompt(f.decoder, none, std::vector<int>{}), LengthError);
  const std::vector<int> reserved{'a', tok::kEos};
  CHECK_THROWS_AS(assemble_prompt(f.decoder, none, reserved), VocabularyError);
  PromptSegments wide;
  wide.image = QuasiLinguisticSequence{normal(f.rng, {2, 5}), Modality::kImage};
  CHECK_THROWS_AS(assemble_prompt(f.decoder, wide, kInstr), ShapeError);
}

TEST_CASE("uniform logits give ln V for a single-token answer") {
  Fixture f(4);
  for (auto& v : f.decoder.head().weight.mutable_data()) v = 0.0;
  if (f.decoder.head().bias.defined())
    for (auto& v : f.decoder.head().bias.mutable_data()) v = 0.0;
  auto p = assemble_prompt(f.decoder, {}, kInstr);
  const std::vector<int> answer{'x'};
  CHECK(decode_loss(f.decoder, p, answer).item() == doctest::Approx(std::log(256.0)).epsilon(1e-12));
}

TEST_CASE("answer-only loss ignores prompt rows") {
  std::mt19937_64 rng(5);
  Tensor logits = normal(rng, {10, 256});
  const std::vector<int> answer{3, 7, 11};
  const double base = answer_only_loss(logits, 6, answer).item();
  Tensor perturbed = logits.detach();
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 256; ++c) perturbed.mutable_data()[r * 256 + c] += 10.0 * (c % 3);
  CHECK(answer_only_loss(perturbed, 6, answer).item() == base);
  perturbed.mutable_data()[5 * 256 + 3] += 1.0;  // the row predicting the first answer token
  CHECK(answer_only_loss(perturbed, 6, answer).item() < base);
}

TEST_CASE("decoder is causal") {
  Fixture f(6);
  Tensor x = normal(f.rng, {7, 8});
  Tensor y = x.detach();
  // Not a constant shift, which the first layer norm would erase.
  for (std::size_t j = 0; j < 8; ++j) y.mutable_data()[5 * 8 + j] += 0.5 * static_cast<double>(j);
  Tensor lx = f.decoder.logits(x), ly = f.decoder.logits(y);
  CHECK(bit_identical(slice_rows(lx, 0, 5), slice_rows(ly, 0, 5)));
  CHECK(max_abs_diff(slice_rows(lx, 5, 2), slice_rows(ly, 5, 2)) > 1e-9);
}

TEST_CASE("generation: greedy determinism, cold temperature and zero budget") {
  Fixture f(7);
  PromptSegments seg;
  seg.image = f.payload(3, Modality::kImage);
  auto p = assemble_prompt(f.decoder, seg, kInstr);
  auto g1 = generate(f.decoder, p, 6);
  auto g2 = generate(f.decoder, p, 6);
  CHECK(g1 == g2);
  GenerateOptions cold{GenerateOptions::Mode::kTemperature, 1e-6, 42};
  CHECK(generate(f.decoder, p, 6, cold) == g1);
  GenerateOptions warm{GenerateOptions::Mode::kTemperature, 1.5, 9};
  CHECK(generate(f.decoder, p, 6, warm) == generate(f.decoder, p, 6, warm));
  CHECK(generate(f.decoder, p, 0).empty());
  CHECK_THROWS_AS(generate(f.decoder, p, 64), LengthError);
}

TEST_CASE("decode_loss overrun is a length error") {
  Fixture f(8);
  auto p = assemble_prompt(f.decoder, {}, kInstr);
  std::vector<int> long_answer(64, 'a');
  CHECK_THROWS_AS(decode_loss(f.decoder, p, long_answer), LengthError);
}

TEST_CASE("the decoder's own argmax continuation scores best") {
  Fixture f(9);
  auto p = assemble_prompt(f.decoder, {}, kInstr);
  // Teacher-forced greedy: each token is the argmax given the previous ones.
  std::vector<int> best;
  {
    NoGrad guard;
    Tensor seq = p.embeddings;
    for (int step = 0; step < 3; ++step) {
      const Tensor row = f.decoder.logits_at(seq, seq.rows() - 1, 1);
      auto z = row.data();
      best.push_back(static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()));
      const int ids[] = {best.back()};
      const Tensor pieces[] = {seq, f.decoder.embed(ids)};
      seq = concat_rows(pieces);
    }
  }
  const double top = decode_loss(f.decoder, p, best).item();
  for (int alt = 0; alt < tok::kVocabSize; alt += 7) {
    if (alt == best.back()) continue;
    auto corrupted = best;
    corrupted.back() = alt;
    CHECK(top <= decode_loss(f.decoder, p, corrupted).item());
  }
}
