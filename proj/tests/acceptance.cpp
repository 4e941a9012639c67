// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner: one PASS/FAIL line per criterion. Criteria 4, 6, 7 and
// 9 share one fresh desk-profile run directory.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "support.hpp"
#include "xllm/checkpoint.hpp"
#include "xllm/config.hpp"
#include "xllm/error.hpp"
#include "xllm/eval.hpp"
#include "xllm/fusion.hpp"
#include "xllm/pipeline.hpp"

using namespace xllm;
using xllm::testing::normal;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing report " + p.string());
  return nlohmann::json::parse(in);
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double worst_prim = 0.0;
  std::string worst_name;
  std::size_t n_prims = 0;
  for (const auto& prim : primitive_suite()) {
    ++n_prims;
    for (int k = 0; k < 5; ++k) {
      PrimitiveCase c = prim.make_case(rng);
      const double e = grad_check_params(c.loss, c.inputs, 1e-5);
      if (e > worst_prim) worst_prim = e, worst_name = prim.name;
    }
  }
  double worst_path = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (auto c : {xllm::testing::image_path_case(seed), xllm::testing::video_path_case(seed),
                   xllm::testing::speech_path_case(seed)}) {
      worst_path = std::max(worst_path, grad_check_params(c.loss, c.inputs, 1e-5));
    }
  }
  const double secs = seconds_since(t0);
  return {worst_prim < 1e-5 && worst_path < 1e-4 && secs < 60.0,
          std::to_string(n_prims) + " primitives, worst " + fmt(worst_prim) + " (" + worst_name +
              "); composed paths worst " + fmt(worst_path) + "; " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- 2

bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

Outcome cif_law() {
  const CifConfig cfg{1.0, true, 0.5, 4, 3};
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  std::uniform_real_distribution<double> alpha(1e-4, 0.9999);
  std::size_t exact = 0;
  double worst_conservation = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t U = len(rng);
    const std::size_t target = std::uniform_int_distribution<std::size_t>(1, 2 * U)(rng);
    std::vector<double> a(U);
    for (auto& v : a) v = alpha(rng);
    auto out = cif_compress(xllm::testing::speech_features(normal(rng, {U, 4})), Tensor::vector(a), target, cfg);
    if (out.tokens.length() == target && out.trace.fire_positions.size() == target) ++exact;
    const double in = std::accumulate(out.trace.scaled_alphas.begin(), out.trace.scaled_alphas.end(), 0.0);
    const double got = std::accumulate(out.trace.integrated.begin(), out.trace.integrated.end(), 0.0);
    worst_conservation = std::max(worst_conservation, std::fabs(in - got));
  }

  // Hand-executed fixtures on one-hot frames, so row i holds output i's weights.
  auto eye = [](std::size_t n) {
    Tensor h({n, n});
    for (std::size_t i = 0; i < n; ++i) h.mutable_data()[i * n + i] = 1.0;
    return h;
  };
  bool fixtures = true;
  {
    auto o = cif_compress(xllm::testing::speech_features(eye(5)), Tensor::vector({0.6, 0.6, 0.6, 0.6, 0.6}), 3, cfg);
    const double want[3][5] = {{0.6, 0.4, 0, 0, 0}, {0, 0.2, 0.6, 0.2, 0}, {0, 0, 0, 0.4, 0.6}};
    fixtures &= o.tokens.length() == 3 && o.trace.fire_positions == std::vector<std::size_t>{1, 3, 4};
    for (std::size_t i = 0; fixtures && i < 3; ++i) {
      for (std::size_t u = 0; u < 5; ++u) fixtures &= close(o.tokens.embeddings.at(i, u), want[i][u], 1e-12);
      fixtures &= close(o.trace.integrated[i], 1.0, 1e-12);
    }
  }
  {
    auto o = cif_compress(xllm::testing::speech_features(eye(4)), Tensor::vector({0.5, 0.5, 0.5, 0.5}), 1, cfg);
    fixtures &= o.tokens.length() == 1;
    for (std::size_t u = 0; fixtures && u < 4; ++u) fixtures &= close(o.tokens.embeddings.at(0, u), 0.25, 1e-12);
  }
  return {exact == 1000 && worst_conservation < 1e-9 && fixtures,
          std::to_string(exact) + "/1000 exact, conservation error " + fmt(worst_conservation) + ", fixtures " +
              (fixtures ? "match" : "differ")};
}

// ---------------------------------------------------------------- 3

Outcome shape_laws() {
  const XllmConfig cfg = desk_profile();
  XllmModel m(cfg.model, 11);
  std::mt19937_64 rng(12);
  const std::size_t L = cfg.model.qformer.n_queries, P = cfg.model.image_encoder.patch_size;
  std::size_t image_ok = 0;
  for (std::size_t k = 1; k <= 10; ++k) {
    const std::size_t h = P * (1 + k % 4), w = P * (1 + (k * 3) % 5);
    if (image_interface(m.image_encoder, m.image_iface, normal(rng, {h, w, 3}, 0.5)).length() == L) ++image_ok;
  }
  std::size_t video_ok = 0;
  Tensor clip = normal(rng, {12, 2 * P, 2 * P, 3}, 0.5);
  for (std::size_t t : {1, 2, 4, 8})
    if (video_interface(m.image_encoder, m.video_iface, clip, t).length() == t * L) ++video_ok;

  // Speech: scaled mode gives L_s, unscaled gives floor(sum) plus at most one tail.
  std::size_t speech_ok = 0, speech_n = 0;
  for (std::size_t ls : {2, 3, 5, 8}) {
    Tensor feats = normal(rng, {64 + 16 * ls, cfg.model.speech_encoder.input_dim});
    NoGrad guard;
    ++speech_n;
    if (m.speech_cif(feats, ls).tokens.length() == ls) ++speech_ok;
    auto raw = m.speech_cif(feats, std::nullopt);
    const double total = std::accumulate(raw.trace.alphas.begin(), raw.trace.alphas.end(), 0.0);
    const auto base = static_cast<std::size_t>(std::floor(total / cfg.model.cif.beta));
    ++speech_n;
    if (raw.tokens.length() == base || raw.tokens.length() == base + 1) ++speech_ok;
  }
  return {image_ok == 10 && video_ok == 4 && speech_ok == speech_n,
          "image " + std::to_string(image_ok) + "/10, video " + std::to_string(video_ok) + "/4, speech " +
              std::to_string(speech_ok) + "/" + std::to_string(speech_n)};
}

// ---------------------------------------------------------------- 5

Outcome prompt_exactness() {
  const std::string instr = "tell me about it";
  const std::string blocks[3] = {"<Image><ImageFeats></Image>", "<Video><VideoFeats></Video>",
                                 "<Speech><SpeechFeats></Speech>"};
  std::mt19937_64 rng(5);
  ToyDecoder dec({tok::kVocabSize, 8, 1, 2, 16, 128}, rng);
  std::size_t ok = 0;
  for (int mask = 0; mask < 8; ++mask) {
    std::string want;
    for (int b = 0; b < 3; ++b)
      if (mask & (1 << b)) want += blocks[b];
    want += "Question: " + instr + "\n Answer:";
    PromptSegments seg;
    if (mask & 1) seg.image = QuasiLinguisticSequence{normal(rng, {2, 8}), Modality::kImage};
    if (mask & 2) seg.video = QuasiLinguisticSequence{normal(rng, {4, 8}), Modality::kVideo};
    if (mask & 4) seg.speech = QuasiLinguisticSequence{normal(rng, {3, 8}), Modality::kSpeech};
    const auto p = assemble_prompt(dec, seg, tok::encode(instr));
    // Text rows decode back to the template with payload rows elided.
    std::vector<int> text;
    for (int id : p.token_ids)
      if (id >= 0) text.push_back(id);
    std::string expect_text = want;
    for (const char* feats : {"<ImageFeats>", "<VideoFeats>", "<SpeechFeats>"}) {
      const auto at = expect_text.find(feats);
      if (at != std::string::npos) expect_text.erase(at, std::string(feats).size());
    }
    const bool good = render_prompt(mask & 1, mask & 2, mask & 4, instr) == want && p.rendered == want &&
                      tok::decode(text) == expect_text;
    if (good) ++ok;
  }
  return {ok == 8, std::to_string(ok) + "/8 subsets bit-exact"};
}

// ---------------------------------------------------------------- 8

Outcome eval_oracles() {
  std::mt19937_64 rng(8);
  std::size_t agree = 0;
  for (int k = 0; k < 500; ++k) {
    auto a = xllm::testing::random_tokens(rng, 12, 5);
    if (a.empty()) a.push_back(1);
    auto b = xllm::testing::random_tokens(rng, 12, 5);
    if (cer(a, b).edits() == xllm::testing::brute_edit_distance(a, b)) ++agree;
  }
  auto rec = [](QuestionType t, double c, double r) {
    EvalRecord e;
    e.type = t;
    e.candidate_score = c;
    e.reference_score = r;
    return e;
  };
  const std::vector<EvalRecord> six{
      rec(QuestionType::kConversation, 8, 9), rec(QuestionType::kConversation, 6, 8),
      rec(QuestionType::kDetail, 7, 10),      rec(QuestionType::kDetail, 5, 5),
      rec(QuestionType::kComplex, 9, 9),      rec(QuestionType::kComplex, 4, 6),
  };
  const auto s = relative_score(six);
  const bool fixture = close(s.overall, 100.0 * 39 / 47, 1e-9) &&
                       close(s.per_type.at(QuestionType::kConversation), 100.0 * 14 / 17, 1e-9) &&
                       close(s.per_type.at(QuestionType::kDetail), 100.0 * 12 / 15, 1e-9) &&
                       close(s.per_type.at(QuestionType::kComplex), 100.0 * 13 / 15, 1e-9);
  std::vector<EvalRecord> twenty;
  for (int i = 0; i < 20; ++i) twenty.push_back(rec(QuestionType::kDetail, i < 9 ? 9 : 8, 10));
  const double r = relative_score(twenty).overall;
  return {agree == 500 && fixture && close(r, 84.5, 1e-9),
          std::to_string(agree) + "/500 pairs agree, fixture " + (fixture ? "matches" : "differs") + ", 169/200 -> " +
              fmt(r, 6)};
}

// ---------------------------------------------------------------- 6

struct EndToEnd {
  bool ran = false;
  double seconds = 0.0;
  nlohmann::json s1, s2, s3;
  std::string error;
};

EndToEnd run_pipeline(const XllmConfig& cfg, const RunPaths& paths) {
  EndToEnd e;
  std::filesystem::remove_all(paths.root);
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [](const std::string& s) { std::cerr << "[acceptance] " << s << '\n'; };
  try {
    e.s1 = run_stage(1, cfg, paths, log);
    e.s2 = run_stage(2, cfg, paths, log);
    e.s3 = run_stage(3, cfg, paths, log);
    e.ran = true;
  } catch (const std::exception& ex) {
    e.error = ex.what();
  }
  e.seconds = seconds_since(t0);
  return e;
}

Outcome end_to_end(const EndToEnd& e, const RunPaths& paths) {
  if (!e.ran) return {false, "pipeline failed: " + e.error};
  const Corpora c = load_corpora(paths);
  const bool sizes = c.speech_train.size() >= 500 && c.image_train.size() >= 500 && c.video_train.size() >= 200;
  const double cer_v = e.s1["heldout"]["cer"].get<double>();
  bool reductions = true;
  std::string red;
  for (const char* task : {"image", "video", "speech"}) {
    const double r = e.s2["tasks"][task]["reduction"].get<double>();
    reductions &= r >= 0.5;
    red += std::string(red.empty() ? "" : " ") + task + " " + fmt(100.0 * r, 3) + "%";
  }
  const bool finite = e.s3["finite"].get<bool>();
  return {sizes && cer_v < 0.05 && reductions && finite && e.seconds < 900.0,
          "corpora " + std::to_string(c.speech_train.size()) + "/" + std::to_string(c.image_train.size()) + "/" +
              std::to_string(c.video_train.size()) + ", held-out CER " + fmt(100.0 * cer_v, 3) +
              "%, stage-2 reduction " + red + ", stage-3 loss " + fmt(e.s3["final_loss"].get<double>()) + ", " +
              fmt(e.seconds, 4) + " s"};
}

// ---------------------------------------------------------------- 4

Outcome freeze_audit(const EndToEnd& e, const RunPaths& paths) {
  if (!e.ran) return {false, "pipeline did not complete"};
  const auto s2 = read_json(paths.report("stage2"));
  const auto s3 = read_json(paths.report("stage3"));
  const std::set<std::string> frozen2{group::kSpeechEncoder, group::kCifPredictor, group::kAsrDecoder,
                                      group::kImageEncoder, group::kDecoder};
  const std::set<std::string> train3{group::kIAdapter, group::kVAdapter, group::kSAdapter};
  bool ok = true;
  std::string detail;
  for (const auto& g : frozen2) {
    if (s2["hashes_before"][g] != s2["hashes_after"][g]) ok = false, detail += " stage2 moved " + g;
  }
  std::size_t moved3 = 0;
  for (const auto& g : XllmModel::group_names()) {
    const bool same = s3["hashes_before"][g] == s3["hashes_after"][g];
    if (train3.contains(g)) {
      moved3 += same ? 0 : 1;
    } else if (!same) {
      ok = false, detail += " stage3 moved " + g;
    }
  }
  // The checkpoints on disk must agree with the reports.
  auto m2 = load_model(desk_profile(), paths, "stage2");
  auto m3 = load_model(desk_profile(), paths, "stage3");
  for (const auto& g : XllmModel::group_names()) {
    const bool same = params_hash(m2->group(g)) == params_hash(m3->group(g));
    if (!train3.contains(g) && !same) ok = false, detail += " checkpoint " + g;
  }
  ok &= moved3 == 3;
  return {ok, "stage 2 kept " + std::to_string(frozen2.size()) + " encoder/decoder groups; stage 3 changed " +
                  std::to_string(moved3) + "/3 adapters and nothing else" + detail};
}

// ---------------------------------------------------------------- 7

Outcome warm_start(const XllmConfig& cfg, const RunPaths& paths, bool ran) {
  if (!ran) return {false, "pipeline did not complete"};
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto w = warm_start_trial(cfg, paths, seed, true);
    const auto c = warm_start_trial(cfg, paths, seed, false);
    ok &= w.final_loss < c.final_loss;
    detail += "seed " + std::to_string(seed) + " warm " + fmt(w.final_loss) + " cold " + fmt(c.final_loss) + "; ";
  }
  detail.resize(detail.size() - 2);
  return {ok, detail};
}

// ---------------------------------------------------------------- 9

Outcome visual_toggle(const XllmConfig& cfg, const RunPaths& paths, bool ran) {
  if (!ran) return {false, "pipeline did not complete"};
  auto full = load_model(cfg, paths, "stage1");
  ModelConfig ablated_cfg = cfg.model;
  ablated_cfg.asr.visual_branch = false;
  XllmModel ablated(ablated_cfg, cfg.seed + 99);
  // Same weights by name; the ablated build simply has no visual parameters.
  ParamList src = full->all_params(), dst = ablated.all_params(), matched;
  std::map<std::string, Tensor> by_name(src.begin(), src.end());
  for (const auto& [name, t] : dst) {
    if (!by_name.contains(name)) throw InvariantViolation("ablated build has unknown parameter " + name);
    matched.emplace_back(name, by_name.at(name));
  }
  copy_params(matched, dst);
  const std::size_t dropped = src.size() - dst.size();

  const Corpora c = load_corpora(paths);
  std::mt19937_64 rng(9);
  std::size_t identical = 0, responsive = 0, n = 0;
  NoGrad guard;
  for (std::size_t i = 0; i < std::min<std::size_t>(20, c.speech_test.size()); ++i) {
    const auto out = full->speech_cif(c.speech_test[i].features, std::nullopt);
    if (out.tokens.length() == 0) continue;
    ++n;
    const Tensor& tokens = out.tokens.embeddings;
    const Tensor zero_vis = full->asr.logits(tokens);
    const Tensor explicit_zero = full->asr.logits(tokens, Tensor({3, cfg.model.asr.visual_dim}));
    const Tensor abl = ablated.asr.logits(tokens);
    if (xllm::testing::bit_identical(zero_vis, abl) && xllm::testing::bit_identical(explicit_zero, abl)) ++identical;
    const Tensor with_vis = full->asr.logits(tokens, normal(rng, {4, cfg.model.asr.visual_dim}));
    if (xllm::testing::max_abs_diff(with_vis, zero_vis) > 1e-9) ++responsive;
  }
  return {n > 0 && identical == n && responsive == n && dropped > 0,
          std::to_string(identical) + "/" + std::to_string(n) + " utterances bit-identical to the ablated build, " +
              std::to_string(responsive) + "/" + std::to_string(n) + " respond to visual input, " +
              std::to_string(dropped) + " visual tensors ablated"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string run_dir = "acceptance_run";
  app.add_option("--run-dir", run_dir, "scratch run directory (wiped first)");
  CLI11_PARSE(app, argc, argv);

  const XllmConfig cfg = desk_profile();
  const RunPaths paths(run_dir);
  std::map<int, Outcome> results;
  const std::map<int, std::string> names{{1, "gradient suite"},     {2, "CIF exact-length law"},
                                         {3, "shape laws"},         {4, "freeze audit"},
                                         {5, "prompt bit-exactness"}, {6, "end-to-end desk run"},
                                         {7, "warm-start transfer"}, {8, "CER and relative-score oracles"},
                                         {9, "S vs S+V toggle"}};
  auto guarded = [&](int id, const std::function<Outcome()>& f) {
    try {
      results[id] = f();
    } catch (const std::exception& ex) {
      results[id] = {false, std::string("exception: ") + ex.what()};
    }
    const auto& r = results[id];
    std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << names.at(id) << "): " << r.detail
              << std::endl;
  };

  guarded(1, gradient_suite);
  guarded(2, cif_law);
  guarded(3, shape_laws);
  guarded(5, prompt_exactness);
  guarded(8, eval_oracles);
  const EndToEnd e2e = run_pipeline(cfg, paths);
  guarded(6, [&] { return end_to_end(e2e, paths); });
  guarded(4, [&] { return freeze_audit(e2e, paths); });
  guarded(7, [&] { return warm_start(cfg, paths, e2e.ran); });
  guarded(9, [&] { return visual_toggle(cfg, paths, e2e.ran); });

  std::size_t passed = 0;
  for (const auto& [id, r] : results) passed += r.pass ? 1 : 0;
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
