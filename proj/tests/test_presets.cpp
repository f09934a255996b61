#include <doctest.h>

#include "ptk/error.hpp"
#include "ptk/presets.hpp"

using namespace ptk;

TEST_CASE("every fixture loads and self-tests") {
  const auto names = presets::file_names();
  CHECK(names.size() == 9);
  for (const auto& line : presets::self_test()) {
    INFO(line.fixture << ": " << line.detail);
    CHECK(line.ok);
  }
  CHECK_THROWS_AS(presets::document("nope"), InvalidArgument);
}

TEST_CASE("fixtures carry a format version") {
  for (const auto& name : presets::file_names()) {
    const auto doc = presets::document(name);
    INFO(name);
    CHECK(doc.at("format_version") == 1);
  }
}

TEST_CASE("production schedule preset") {
  const auto s = presets::schedule("stablelm2");
  CHECK(s.max_lr == 1e-3);
  CHECK(s.min_lr == 0.0);
  CHECK(s.warmup_steps == 9720);
  CHECK(s.cooldown_steps == 80000);
  // the run spans roughly 2T tokens at 8,388,608 tokens per step
  const double tokens = static_cast<double>(s.total_steps()) * 8388608.0;
  CHECK(tokens == doctest::Approx(2.0098e12).epsilon(1e-4));
  CHECK_THROWS_AS(presets::schedule("linear"), InvalidArgument);
}

TEST_CASE("throughput and carbon presets") {
  const auto t = presets::throughput();
  CHECK(t.peak_tflops == 312.0);
  REQUIRE(t.points.size() == 2);
  CHECK(t.points[0].achieved_tflops == 170.0);
  CHECK(t.points[1].achieved_tflops == 200.0);
  const auto c = presets::carbon();
  CHECK(c.input.gpu_hours == 92000.0);
  CHECK(c.input.pue == 1.1);
  CHECK(c.reported_energy_mwh == 30.0);
  CHECK(c.reported_emissions_t == 11.0);
}

TEST_CASE("needle preset expands even depths") {
  const auto t = presets::needle_task();
  CHECK(t.depths.size() == 35);
  CHECK(t.context_sizes.size() == 8);
  CHECK(t.runs == 10);
}
