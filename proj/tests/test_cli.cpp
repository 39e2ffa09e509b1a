#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "duovid/evalharness.hpp"
#include "duovid/media.hpp"
#include "duovid/synthetic.hpp"

using namespace duovid;
namespace fs = std::filesystem;

namespace {

struct Output {
  int code = -1;
  std::string out;
};

Output run(const std::string& args) {
  const std::string cmd = std::string(DUOVID_CLI) + " " + args + " 2>/dev/null";
  Output o;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), pipe)) > 0;) o.out.append(buf.data(), n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("duovid_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("budget reports pooled visual tokens") {
  const auto dir = scratch("budget");
  auto o = run("budget --frames 16 --segments 4 --pool 2 --output-dir " + q(dir));
  REQUIRE(o.code == 0);
  auto j = nlohmann::json::parse(o.out);
  CHECK(j["visual"] == 3328);
  CHECK(j["fits"] == true);
  o = run("budget --frames 16 --segments 4 --pool 1 --output-dir " + q(dir));
  j = nlohmann::json::parse(o.out);
  CHECK(j["visual"] == 16 * 576 + 16 * 256);
  CHECK(j["fits"] == false);
  CHECK(fs::exists(dir / "run_budget.json"));
}

TEST_CASE("sample emits the segment-wise indices") {
  const auto dir = scratch("sample");
  auto o = run("sample --total 32 --frames 16 --segments 4 --output-dir " + q(dir));
  REQUIRE(o.code == 0);
  const auto indices = nlohmann::json::parse(o.out)["indices"].get<std::vector<std::size_t>>();
  CHECK(indices.size() == 16);
  CHECK(std::is_sorted(indices.begin(), indices.end()));
  CHECK(indices == sample_frames({"x", 32, 25.0, ""}, 16, 4));
}

TEST_CASE("config precedence is flags over file over defaults") {
  const auto dir = scratch("config");
  io::atomic_write(dir / "c.json", R"({"budget": {"pool": 1}})");
  auto file_only = nlohmann::json::parse(run("budget --config " + q(dir / "c.json") + " --output-dir " + q(dir)).out);
  CHECK(file_only["visual"] == 13312);
  auto flag_wins =
      nlohmann::json::parse(run("budget --config " + q(dir / "c.json") + " --pool 2 --output-dir " + q(dir)).out);
  CHECK(flag_wins["visual"] == 3328);
  const auto manifest = nlohmann::json::parse(io::read_file(dir / "run_budget.json"));
  CHECK(manifest["config"]["budget"]["pool"] == 2);

  io::atomic_write(dir / "bad.json", R"({"budget": {"poool": 1}})");
  CHECK(run("budget --config " + q(dir / "bad.json") + " --output-dir " + q(dir)).code == 2);
  io::atomic_write(dir / "bad2.json", R"({"budget": {"pool": "two"}})");
  CHECK(run("budget --config " + q(dir / "bad2.json") + " --output-dir " + q(dir)).code == 2);
}

TEST_CASE("usage errors exit 2") {
  CHECK(run("budget --bogus").code == 2);
  CHECK(run("").code == 2);
  CHECK(run("eval --bench imagenet").code == 2);
  CHECK(run("train --stage finetune").code == 2);
}

TEST_CASE("mvbench eval on the table 3 Random fixture") {
  const auto dir = scratch("mvbench");
  auto o = run("fixtures --kind mvbench --table " + q(fs::path(DUOVID_FIXTURE_DIR) / "table3_mvbench.json") +
               " --row Random --dir " + q(dir / "fx"));
  REQUIRE(o.code == 0);
  o = run("eval --bench mvbench --predictions " + q(dir / "fx" / "predictions.jsonl") + " --references " +
          q(dir / "fx" / "answers.jsonl") + " --output-dir " + q(dir / "out"));
  REQUIRE(o.code == 0);
  const auto score = nlohmann::json::parse(o.out);
  // The printed Random average (27.3) is not the mean of its own columns
  // (27.95); the CLI reproduces the column mean.
  auto lib = score_mvbench(load_predictions(dir / "fx" / "predictions.jsonl"),
                           load_references(dir / "fx" / "answers.jsonl"));
  CHECK(score["average"].get<double>() == Catch::Approx(*lib.score.average));
  CHECK(score["average"].get<double>() == Catch::Approx(27.95).margin(0.05));
  CHECK(fs::exists(dir / "out" / "results.json"));
  CHECK(fs::exists(dir / "out" / "verdicts.jsonl"));
  CHECK(fs::exists(dir / "out" / "run_eval.json"));
}

TEST_CASE("coverage gaps exit 3 unless allowed") {
  const auto dir = scratch("coverage");
  const auto refs = fs::path(DUOVID_FIXTURE_DIR) / "vcg_small_references.jsonl";
  auto lines = io::read_lines(fs::path(DUOVID_FIXTURE_DIR) / "vcg_small_predictions.jsonl");
  lines.pop_back();
  std::string partial;
  for (const auto& l : lines) partial += l + "\n";
  io::atomic_write(dir / "p.jsonl", partial);
  const std::string base = "eval --bench vcg --predictions " + q(dir / "p.jsonl") + " --references " + q(refs);
  CHECK(run(base + " --output-dir " + q(dir / "a")).code == 3);
  auto o = run(base + " --allow-missing --output-dir " + q(dir / "b"));
  CHECK(o.code == 0);
  CHECK(nlohmann::json::parse(o.out)["missing"] == nlohmann::json::array({"v6"}));
}

TEST_CASE("eval rerun hits the judge cache") {
  const auto dir = scratch("cache");
  const std::string args = "eval --bench vcg --predictions " +
                           q(fs::path(DUOVID_FIXTURE_DIR) / "vcg_small_predictions.jsonl") + " --references " +
                           q(fs::path(DUOVID_FIXTURE_DIR) / "vcg_small_references.jsonl") + " --output-dir " + q(dir);
  auto first = run(args);
  REQUIRE(first.code == 0);
  const auto audit_lines = io::read_lines(dir / "audit.jsonl").size();
  CHECK(audit_lines == 30);
  auto second = run(args);
  CHECK(second.out == first.out);
  CHECK(io::read_lines(dir / "audit.jsonl").size() == audit_lines);
}

TEST_CASE("annotate is reproducible from its manifest") {
  const auto dir = scratch("annotate");
  REQUIRE(run("fixtures --kind annotate --dir " + q(dir / "fx")).code == 0);
  auto o = run("annotate --captions " + q(dir / "fx" / "captions.jsonl") + " --videos " + q(dir / "fx" / "videos") +
               " --seed 3 --output-dir " + q(dir / "a"));
  REQUIRE(o.code == 0);
  CHECK(nlohmann::json::parse(o.out)["pairs"] == 30);
  o = run("annotate --config " + q(dir / "a" / "run_annotate.json") + " --output-dir " + q(dir / "b"));
  REQUIRE(o.code == 0);
  CHECK(io::read_file(dir / "a" / "instructions.jsonl") == io::read_file(dir / "b" / "instructions.jsonl"));
  CHECK(run("validate --dataset " + q(dir / "a" / "instructions.jsonl")).code == 0);
}

TEST_CASE("train enforces the stage order and writes artifacts") {
  const auto dir = scratch("train");
  REQUIRE(run("fixtures --kind overfit --dir " + q(dir / "fx")).code == 0);
  const std::string data = " --dataset " + q(dir / "fx" / "train.jsonl") + " --videos " + q(dir / "fx" / "videos") +
                           " --max-steps 2";
  CHECK(run("train --stage instruct" + data + " --output-dir " + q(dir / "bad")).code == 2);
  REQUIRE(run("train --stage pretrain-image" + data + " --output-dir " + q(dir / "s1")).code == 0);
  REQUIRE(run("train --stage pretrain-video --init " + q(dir / "s1" / "checkpoint.dvar") + data + " --output-dir " +
              q(dir / "s2"))
              .code == 0);
  auto o = run("train --stage instruct --init " + q(dir / "s2" / "checkpoint.dvar") + data + " --output-dir " +
               q(dir / "s3"));
  REQUIRE(o.code == 0);
  const auto manifest = nlohmann::json::parse(io::read_file(dir / "s3" / "manifest.json"));
  CHECK(manifest["stage_config"]["lr"] == 2e-4);
  CHECK(io::read_lines(dir / "s3" / "loss.jsonl").size() == 2);
  CHECK(fs::exists(dir / "s3" / "run_train.json"));
  CHECK(run("train --stage pretrain-image --dataset /nonexistent.jsonl --videos " + q(dir) + " --output-dir " +
            q(dir / "x"))
            .code == 1);
}

TEST_CASE("help lists every subcommand and flag") {
  std::string help = run("--help").out;
  for (const char* sub : {"sample", "encode", "budget", "train", "annotate", "eval", "report", "validate", "fixtures"})
    help += "\n" + run(std::string(sub) + " --help").out;
  const fs::path golden = fs::path(DUOVID_GOLDEN_DIR) / "cli_help.txt";
  if (const char* update = std::getenv("DUOVID_UPDATE_GOLDEN"); update && std::string(update) == "1")
    io::atomic_write(golden, help);
  REQUIRE(fs::exists(golden));
  CHECK(io::read_file(golden) == help);
  for (const char* flag : {"--frames", "--segments", "--pool", "--stage", "--bench", "--allow-missing", "--captions",
                           "--results", "--config", "--output-dir", "--seed"})
    CHECK(help.find(flag) != std::string::npos);
}
