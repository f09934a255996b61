#pragma once

// Built-in fixtures compiled from data/presets/*.json.

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ptk/batchscale.hpp"
#include "ptk/mixture.hpp"
#include "ptk/needle.hpp"
#include "ptk/perfmodel.hpp"
#include "ptk/sched.hpp"

namespace ptk::presets {

namespace detail {
struct EmbeddedFile {
  std::string_view name;
  std::string_view content;
};
const std::vector<EmbeddedFile>& embedded_files();
}  // namespace detail

std::vector<std::string> file_names();
nlohmann::json document(std::string_view file);

mixture::MixtureSpec table1();
mixture::AblationSet table7();

struct ArchitecturePreset {
  perf::ArchConfig config;
  std::int64_t reported_params = 0;
};
ArchitecturePreset table2();

struct LayoutPreset {
  perf::TrainLayout layout;
  std::int64_t reported_batch_tokens = 0;
};
LayoutPreset table3();

struct ThroughputPoint {
  std::string label;
  double achieved_tflops = 0.0;
  double reported_mfu = 0.0;
};
struct ThroughputPreset {
  double peak_tflops = perf::kDefaultPeakTflops;
  std::vector<ThroughputPoint> points;
};
ThroughputPreset throughput();

struct CarbonPreset {
  perf::CarbonInput input;
  double reported_energy_mwh = 0.0;
  double reported_emissions_t = 0.0;
};
CarbonPreset carbon();

std::vector<std::string> schedule_names();
sched::SchedulerSpec schedule(std::string_view name);

struct BatchRunsPreset {
  batchscale::BatchRun baseline;
  std::vector<batchscale::BatchRun> candidates;
  double reported_speedup = 0.0;
  double reported_overhead = 0.0;
};
BatchRunsPreset batch_runs();

needle::NeedleTask needle_task();

struct SelfTestLine {
  std::string fixture;
  bool ok = false;
  std::string detail;
};

/// Loads every fixture and runs its module's validation.
std::vector<SelfTestLine> self_test();

}  // namespace ptk::presets
