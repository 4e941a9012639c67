// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "xllm/datagen.hpp"
#include "xllm/fusion.hpp"

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr discarded and returns exit status and stdout.
Run cli(const std::string& args) {
  const std::string cmd = std::string(XLLM_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "xllm_cli_tests" / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("cli: unknown flags are usage errors") {
  CHECK(cli("--bogus gen").code == 2);
  CHECK(cli("").code == 2);
  CHECK(cli("train --stage 4").code == 2);
}

TEST_CASE("cli: stage 2 before stage 1 is an ordering error") {
  const auto dir = fresh_dir("ordering");
  CHECK(cli("--run-dir " + dir.string() + " train --stage 2").code == 3);
  CHECK(cli("--run-dir " + dir.string() + " train --stage 3").code == 3);
}

TEST_CASE("cli: gen with a fixed seed is reproducible") {
  const auto a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  Run ra = cli("--seed 7 --run-dir " + a.string() + " gen");
  Run rb = cli("--seed 7 --run-dir " + b.string() + " gen");
  CHECK(ra.code == 0);
  CHECK(rb.code == 0);
  CHECK_FALSE(ra.out.empty());
  CHECK(ra.out == rb.out);
  Run rc = cli("--seed 8 --run-dir " + fresh_dir("gen_c").string() + " gen");
  CHECK(rc.out != ra.out);
}

TEST_CASE("cli: inspect --prompt prints the template exactly") {
  Run r = cli("inspect --prompt --task image");
  CHECK(r.code == 0);
  const std::string want =
      xllm::render_prompt(true, false, false, xllm::family_instructions(xllm::Family::kImage).front()) + "\n";
  CHECK(r.out == want);
  CHECK(r.out.find("<Image><ImageFeats></Image>Question: ") == 0);
  CHECK(r.out.ends_with("\n Answer:\n"));
}

TEST_CASE("cli: eval scores records from files") {
  const auto dir = fresh_dir("eval");
  {
    std::ofstream f(dir / "pairs.ndjson");
    f << R"({"id":"u1","reference":"abc","hypothesis":"abd"})" << "\n";
  }
  Run c = cli("eval --metric cer --input " + (dir / "pairs.ndjson").string() + " --out " + (dir / "cer").string());
  CHECK(c.code == 0);
  CHECK(c.out.find("\"cer\"") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "cer.json"));

  {
    std::ofstream f(dir / "records.ndjson");
    f << R"({"id":"a","type":"detail","candidate":"x","reference":"y","candidate_score":8,"reference_score":10})"
      << "\n"
      << R"({"id":"b","type":"detail","candidate":"x","reference":"y","candidate_score":9,"reference_score":10})"
      << "\n";
  }
  Run s = cli("eval --metric relscore --input " + (dir / "records.ndjson").string() + " --out " +
              (dir / "rel").string());
  CHECK(s.code == 0);
  CHECK(s.out.find("85") != std::string::npos);
  CHECK(cli("eval --metric relscore").code == 2);
  CHECK(cli("eval --metric bleu").code == 2);
}

TEST_CASE("cli: data errors exit with code 4") {
  const auto dir = fresh_dir("bad");
  {
    std::ofstream f(dir / "pairs.ndjson");
    f << R"({"id":"u1","reference":"","hypothesis":"abd"})" << "\n";
  }
  CHECK(cli("eval --metric cer --input " + (dir / "pairs.ndjson").string() + " --out " + (dir / "x").string())
            .code == 4);
}
