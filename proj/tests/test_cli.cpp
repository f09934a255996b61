#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ptk/cli.hpp"

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = ptk::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::filesystem::path scratch() {
  const auto dir = std::filesystem::temp_directory_path() / "ptk_cli_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("production schedule as csv") {
  const auto r = invoke({"schedule", "--preset", "stablelm2", "--emit", "csv"});
  REQUIRE(r.code == ptk::cli::kExitOk);
  const auto rows = parse_csv(r.out);
  REQUIRE(rows.front() == std::vector<std::string>{"step", "lr"});
  CHECK(rows.size() == 1 + 9720 + 149871 + 80000 + 1);
  CHECK(rows[1] == std::vector<std::string>{"0", "0"});
  CHECK(rows[1 + 9720][1] == "0.001");
  CHECK(rows.back()[1] == "0");
  for (std::size_t i = 1; i < rows.size(); i += 997) {
    const double v = std::stod(rows[i][1]);
    CHECK(std::stod(rows[i][1]) == v);
  }
}

TEST_CASE("csv numbers round trip exactly") {
  const auto r = invoke({"schedule", "--preset", "hyb", "--stride", "1234", "--emit", "csv"});
  const auto j = invoke({"schedule", "--preset", "hyb", "--stride", "1234", "--emit", "json"});
  REQUIRE(r.code == 0);
  REQUIRE(j.code == 0);
  const auto rows = parse_csv(r.out);
  const auto doc = nlohmann::json::parse(j.out);
  REQUIRE(doc.size() + 1 == rows.size());
  for (std::size_t i = 0; i < doc.size(); ++i) CHECK(std::strtod(rows[i + 1][1].c_str(), nullptr) == doc[i]["lr"].get<double>());
}

TEST_CASE("mixture validate exit codes") {
  CHECK(invoke({"mixture", "validate", "--preset", "table1"}).code == ptk::cli::kExitOk);
  const auto strict = invoke({"mixture", "validate", "--preset", "table1", "--exact-weights"});
  CHECK(strict.code == ptk::cli::kExitValidation);
  CHECK(strict.err.find("AMPS") != std::string::npos);

  const auto dir = scratch();
  const auto file = (dir / "bad_mix.json").string();
  std::ofstream(file) << R"({"name":"x","total_tokens":100,"entries":[
    {"name":"a","weight":0.5,"effective_tokens":50,"epochs":1,"category":"Web"},
    {"name":"b","weight":0.2,"effective_tokens":50,"epochs":1,"category":"Code"}]})";
  CHECK(invoke({"mixture", "validate", "--file", file}).code == ptk::cli::kExitValidation);
  std::ofstream(file) << "{ not json";
  CHECK(invoke({"mixture", "validate", "--file", file}).code == ptk::cli::kExitUsage);
}

TEST_CASE("usage errors") {
  const auto r = invoke({"frobnicate"});
  CHECK(r.code == ptk::cli::kExitUsage);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(invoke({}).code == ptk::cli::kExitUsage);
  CHECK(invoke({"schedule", "--bogus"}).code == ptk::cli::kExitUsage);
  CHECK(invoke({"mixture"}).code == ptk::cli::kExitUsage);
  CHECK(invoke({"--emit", "xml", "perf", "flops"}).code == ptk::cli::kExitUsage);
  CHECK(invoke({"schedule", "--preset", "nope"}).code == ptk::cli::kExitUsage);
  CHECK(invoke({"--help"}).code == ptk::cli::kExitOk);
}

TEST_CASE("identical invocations give identical data") {
  const std::vector<std::vector<std::string>> cases{
      {"--seed", "3", "mixture", "sample", "-n", "2000", "--emit", "csv"},
      {"--seed", "3", "batch", "noise", "--trials", "50", "--emit", "json"},
      {"--emit", "json", "needle", "run", "--mock-model", "oracle", "--mock-judge", "--runs", "2"},
      {"--emit", "csv", "perf", "search"},
  };
  for (const auto& args : cases) {
    const auto a = invoke(args);
    const auto b = invoke(args);
    CHECK(a.code == 0);
    CHECK(a.out == b.out);
    CHECK_FALSE(a.out.empty());
  }
}

TEST_CASE("perf subcommands") {
  const auto params = nlohmann::json::parse(invoke({"--emit", "json", "perf", "params"}).out);
  CHECK(params["params"]["total"] == 1644414976LL);
  const auto mfu = nlohmann::json::parse(invoke({"--emit", "json", "perf", "mfu", "--achieved", "170"}).out);
  CHECK(mfu[0]["mfu"].get<double>() == doctest::Approx(170.0 / 312.0));
  const auto layout = nlohmann::json::parse(invoke({"--emit", "json", "perf", "layout", "--dp", "256", "--accum", "4"}).out);
  CHECK(layout["batch_tokens"] == 8388608);
  const auto carbon = nlohmann::json::parse(invoke({"--emit", "json", "perf", "carbon"}).out);
  CHECK(carbon["energy_mwh"].get<double>() == doctest::Approx(29.99568));
  CHECK(invoke({"perf", "flops", "--context", "-1"}).code == ptk::cli::kExitUsage);
}

TEST_CASE("batch and mixture subcommands") {
  const auto t = nlohmann::json::parse(invoke({"--emit", "json", "batch", "tradeoff"}).out);
  CHECK(t["candidates"][0]["token_overhead"].get<double>() == doctest::Approx(1.92));
  const auto b = nlohmann::json::parse(invoke({"--emit", "json", "mixture", "breakdown"}).out);
  CHECK(b["Web"].get<double>() == doctest::Approx(0.7495));
  const auto plan = nlohmann::json::parse(invoke({"--emit", "json", "mixture", "plan", "--preset", "table7"}).out);
  CHECK(plan["total_tokens"] == 100000000000ULL);
}

TEST_CASE("refmodel subcommands") {
  CHECK(invoke({"refmodel", "gradcheck"}).code == ptk::cli::kExitOk);
  const auto neg = invoke({"refmodel", "gradcheck", "--negate"});
  CHECK(neg.code == ptk::cli::kExitValidation);
  const auto prefix = (scratch() / "demo").string();
  CHECK(invoke({"refmodel", "demo", "--save", prefix}).code == 0);
  CHECK(std::filesystem::exists(prefix + ".bin"));
  CHECK(std::filesystem::exists(prefix + ".json"));
}

TEST_CASE("needle subcommands") {
  const auto csv = invoke({"--emit", "csv", "needle", "run", "--mock-model", "empty", "--mock-judge", "--runs", "1"});
  REQUIRE(csv.code == 0);
  const auto rows = parse_csv(csv.out);
  CHECK(rows.size() == 1 + 2 * 35);
  CHECK(rows[1][2] == "1");
  CHECK(invoke({"needle", "run", "--mock-judge"}).code == ptk::cli::kExitUsage);
  const auto hay = invoke({"--emit", "json", "needle", "haystack", "--tokens", "800", "--depth", "0"});
  CHECK(nlohmann::json::parse(hay.out)["needle_offset"] == 0);

  const auto down = invoke({"needle", "run", "--model-url", "http://127.0.0.1:1/generate", "--mock-judge", "--runs",
                            "1", "--timeout-ms", "200"});
  CHECK(down.code == ptk::cli::kExitValidation);
  CHECK(down.err.find("every run failed") != std::string::npos);
  CHECK(invoke({"needle", "run", "--model-url", "ftp://host/x", "--mock-judge"}).code == ptk::cli::kExitUsage);
}

TEST_CASE("output file and self test") {
  const auto file = (scratch() / "flops.csv").string();
  const auto r = invoke({"--emit", "csv", "-o", file, "perf", "flops"});
  CHECK(r.code == 0);
  CHECK(r.out.empty());
  std::ifstream in(file);
  std::string header;
  std::getline(in, header);
  CHECK(header == "term,flops_per_token");
  const auto st = invoke({"--self-test"});
  CHECK(st.code == 0);
  CHECK(st.out.find("FAIL") == std::string::npos);
}

TEST_CASE("the installed binary reports exit codes") {
  const std::string bin = PTK_CLI_PATH;
  auto status = [&](const std::string& args) {
    const int raw = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(raw);
  };
  CHECK(status("frobnicate") == 2);
  CHECK(status("mixture validate --preset table1") == 0);
  CHECK(status("mixture validate --preset table1 --exact-weights") == 1);
  CHECK(status("--self-test") == 0);
}
