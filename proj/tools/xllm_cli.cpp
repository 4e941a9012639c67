// SPDX-License-Identifier: Apache-2.0
//
// xllm: corpus generation, staged training, evaluation, generation and
// inspection over one run directory.
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "xllm/checkpoint.hpp"
#include "xllm/config.hpp"
#include "xllm/error.hpp"
#include "xllm/eval.hpp"
#include "xllm/pipeline.hpp"

namespace {

using namespace xllm;

struct Globals {
  std::string config_path;
  std::string profile = "desk";
  std::optional<std::uint64_t> seed;
  std::string run_dir = "runs/desk";
};

XllmConfig resolve_config(const Globals& g) {
  XllmConfig cfg;
  if (!g.config_path.empty()) {
    cfg = load_config(g.config_path, g.profile);
  } else if (g.profile == "desk") {
    cfg = desk_profile();
  } else {
    cfg = paper_profile();
  }
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

void log_line(const std::string& s) { std::cerr << "[xllm] " << s << '\n'; }

std::optional<Family> parse_family(const std::string& s) {
  for (Family f : {Family::kImage, Family::kVideo, Family::kSpeech, Family::kDialogue}) {
    if (family_name(f) == s) return f;
  }
  return std::nullopt;
}

// n-th instruction item of one family.
const InstructionItem& pick_item(const Corpora& c, Family f, std::size_t n) {
  std::size_t seen = 0;
  for (const auto& it : c.instruct) {
    if (it.family != f) continue;
    if (seen++ == n) return it;
  }
  throw DataError("instruction corpus has only " + std::to_string(seen) + " " + std::string(family_name(f)) +
                  " items");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal interfaces onto a frozen toy language model"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "configuration file with profiles")->check(CLI::ExistingFile);
  app.add_option("--profile", g.profile, "profile name")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "run seed");
  app.add_option("--run-dir", g.run_dir, "run directory");

  auto* gen = app.add_subcommand("gen", "generate every synthetic corpus");

  auto* train = app.add_subcommand("train", "run one training stage");
  int stage = 0;
  train->add_option("--stage", stage, "stage to run")->required()->check(CLI::IsMember({1, 2, 3}));

  auto* eval = app.add_subcommand("eval", "score hypotheses or judged answers");
  std::string metric, input, out_prefix;
  std::uint64_t judge_seed = 0;
  bool use_judge = false;
  eval->add_option("--metric", metric, "cer or relscore")->required()->check(CLI::IsMember({"cer", "relscore"}));
  eval->add_option("--input", input, "newline-delimited JSON records")->check(CLI::ExistingFile);
  eval->add_option("--out", out_prefix, "report path prefix (.json and .csv are appended)");
  eval->add_option("--judge-seed", judge_seed, "score records with the deterministic judge stub")
      ->each([&](const std::string&) { use_judge = true; });

  auto* generate = app.add_subcommand("generate", "run the fused model on one instruction item");
  std::string task = "image";
  std::size_t item = 0, max_new = 48;
  double temperature = 0.0;
  std::uint64_t sample_seed = 0;
  generate->add_option("--task", task, "image, video, speech or dialogue")
      ->check(CLI::IsMember({"image", "video", "speech", "dialogue"}));
  generate->add_option("--item", item, "index within that task family");
  generate->add_option("--max-new", max_new, "maximum generated tokens");
  generate->add_option("--temperature", temperature, "sampling temperature; 0 selects greedy decoding");
  generate->add_option("--sample-seed", sample_seed, "seed for temperature sampling");

  auto* inspect = app.add_subcommand("inspect", "dump a CIF trace or a rendered prompt");
  bool show_cif = false, show_prompt = false;
  std::string inspect_task = "image";
  std::size_t inspect_item = 0;
  auto* cif_flag = inspect->add_flag("--cif", show_cif, "CIF trace of one held-out speech item");
  auto* prompt_flag = inspect->add_flag("--prompt", show_prompt, "rendered prompt of one item");
  cif_flag->excludes(prompt_flag);
  inspect->add_option("--task", inspect_task, "family for --prompt")
      ->check(CLI::IsMember({"image", "video", "speech", "dialogue"}));
  inspect->add_option("--item", inspect_item, "item index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    const XllmConfig cfg = resolve_config(g);
    const RunPaths paths(g.run_dir);

    if (*gen) {
      cfg.require_runnable();
      save_config_file(paths.config(), config_to_json(cfg));
      for (const auto& [name, sum] : gen_corpora(cfg, paths)) std::cout << name << ' ' << sum << '\n';
    } else if (*train) {
      const auto report = run_stage(stage, cfg, paths, log_line);
      std::cout << report.dump() << '\n';
    } else if (*eval) {
      if (metric == "cer") {
        std::vector<CerPair> pairs;
        if (!input.empty()) {
          pairs = read_cer_pairs(input);
        } else {
          const auto latest = latest_checkpoint(paths);
          if (!latest || *latest == "backbone") throw OrderingError("CER evaluation needs a stage-1 checkpoint");
          auto model = load_model(cfg, paths, *latest);
          pairs = evaluate_asr(*model, load_corpora(paths).speech_test).pairs;
        }
        std::vector<CerReport> reports;
        for (const auto& p : pairs) reports.push_back(cer(p.reference, p.hypothesis));
        if (reports.empty()) throw UndefinedRateError("no records to score");
        const auto prefix = out_prefix.empty() ? (paths.root / "reports" / "cer").string() : out_prefix;
        write_cer_report(prefix, pairs, reports);
        std::cout << cer_json(pool(reports)).dump() << '\n';
      } else {
        if (input.empty()) {
          std::cerr << "xllm: usage error: --metric relscore needs --input\n";
          return static_cast<int>(ExitCode::kUsage);
        }
        auto records = read_eval_records(input);
        if (use_judge) {
          for (auto& r : records) r = judge_stub(r, judge_seed);
        }
        const auto scores = relative_score(records);
        const auto prefix = out_prefix.empty() ? (paths.root / "reports" / "relscore").string() : out_prefix;
        write_relscore_report(prefix, scores);
        std::cout << relative_scores_json(scores).dump() << '\n';
      }
    } else if (*generate) {
      const auto latest = latest_checkpoint(paths);
      if (!latest || *latest == "backbone" || *latest == "stage1") {
        throw OrderingError("generation needs trained interfaces; run train --stage 2 first");
      }
      auto model = load_model(cfg, paths, *latest);
      const auto& it = pick_item(load_corpora(paths), *parse_family(task), item);
      const EmbeddedPrompt prompt = instruction_prompt(*model, it);
      GenerateOptions opts;
      if (temperature > 0.0) {
        opts.mode = GenerateOptions::Mode::kTemperature;
        opts.temperature = temperature;
        opts.seed = sample_seed;
      }
      const auto ids = xllm::generate(model->decoder, prompt, max_new, opts);
      std::cout << "checkpoint: " << *latest << '\n'
                << "prompt: " << prompt.rendered << '\n'
                << "output: " << tok::decode(ids) << '\n'
                << "reference: " << it.answer << '\n';
    } else if (*inspect) {
      if (show_cif) {
        const auto latest = latest_checkpoint(paths);
        std::unique_ptr<XllmModel> model =
            latest ? load_model(cfg, paths, *latest) : std::make_unique<XllmModel>(cfg.model, cfg.seed);
        const auto items = load_corpora(paths).speech_test;
        if (inspect_item >= items.size()) throw DataError("speech item index out of range");
        NoGrad guard;
        const CifOutput out = model->speech_cif(items[inspect_item].features, std::nullopt);
        std::cout << out.trace.to_record("speech_test/" + std::to_string(inspect_item)) << '\n';
      } else if (show_prompt) {
        const Family f = *parse_family(inspect_task);
        const bool image = f == Family::kImage || f == Family::kDialogue;
        const bool video = f == Family::kVideo;
        const bool speech = f == Family::kSpeech || f == Family::kDialogue;
        std::cout << render_prompt(image, video, speech, family_instructions(f).front()) << '\n';
      } else {
        std::cerr << "xllm: usage error: inspect needs --cif or --prompt\n";
        return static_cast<int>(ExitCode::kUsage);
      }
    }
  } catch (const Error& e) {
    std::cerr << "xllm: " << e.kind() << ": " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "xllm: error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kFailure);
  }
  return 0;
}
