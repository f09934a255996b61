#include "ptk/presets.hpp"

#include <cmath>
#include <functional>

#include "ptk/error.hpp"

namespace ptk::presets {

std::vector<std::string> file_names() {
  std::vector<std::string> names;
  for (const auto& f : detail::embedded_files()) names.emplace_back(f.name);
  return names;
}

nlohmann::json document(std::string_view file) {
  for (const auto& f : detail::embedded_files()) {
    if (f.name == file) return nlohmann::json::parse(f.content);
  }
  throw InvalidArgument("no preset file '" + std::string(file) + "'");
}

mixture::MixtureSpec table1() { return document("table1_mixture").get<mixture::MixtureSpec>(); }

mixture::AblationSet table7() { return document("table7_ablations").get<mixture::AblationSet>(); }

ArchitecturePreset table2() {
  const auto doc = document("architecture_table2");
  return {doc.at("config").get<perf::ArchConfig>(), doc.at("reported_params").get<std::int64_t>()};
}

LayoutPreset table3() {
  const auto doc = document("layout_table3");
  return {doc.at("layout").get<perf::TrainLayout>(), doc.at("reported_batch_tokens").get<std::int64_t>()};
}

ThroughputPreset throughput() {
  const auto doc = document("throughput");
  ThroughputPreset out;
  out.peak_tflops = doc.at("peak_tflops_per_device").get<double>();
  for (const auto& p : doc.at("points")) {
    out.points.push_back({p.at("label").get<std::string>(), p.at("achieved_tflops_per_device").get<double>(),
                          p.at("reported_mfu").get<double>()});
  }
  return out;
}

CarbonPreset carbon() {
  const auto doc = document("carbon");
  return {doc.at("input").get<perf::CarbonInput>(), doc.at("reported").at("energy_mwh").get<double>(),
          doc.at("reported").at("emissions_t").get<double>()};
}

std::vector<std::string> schedule_names() {
  const auto doc = document("schedules");
  std::vector<std::string> names;
  for (const auto& [name, _] : doc.at("schedules").items()) names.push_back(name);
  return names;
}

sched::SchedulerSpec schedule(std::string_view name) {
  const auto doc = document("schedules");
  const auto& all = doc.at("schedules");
  const auto it = all.find(std::string(name));
  if (it == all.end()) throw InvalidArgument("no schedule preset '" + std::string(name) + "'");
  return it->get<sched::SchedulerSpec>();
}

BatchRunsPreset batch_runs() {
  const auto doc = document("batch_runs");
  BatchRunsPreset out;
  out.baseline = doc.at("baseline").get<batchscale::BatchRun>();
  out.candidates = doc.at("candidates").get<std::vector<batchscale::BatchRun>>();
  out.reported_speedup = doc.at("reported").at("iteration_speedup").get<double>();
  out.reported_overhead = doc.at("reported").at("token_overhead").get<double>();
  return out;
}

needle::NeedleTask needle_task() { return document("needle_task").get<needle::NeedleTask>(); }

std::vector<SelfTestLine> self_test() {
  std::vector<SelfTestLine> lines;
  auto check = [&](std::string fixture, const std::function<std::string()>& body) {
    SelfTestLine line{std::move(fixture), false, {}};
    try {
      line.detail = body();
      line.ok = true;
    } catch (const std::exception& e) {
      line.detail = e.what();
    }
    lines.push_back(std::move(line));
  };

  check("table1_mixture", [] {
    const auto spec = table1();
    mixture::ValidationOptions opts;
    opts.use_weight_quantum = true;
    const auto report = mixture::validate(spec, opts);
    if (!report.passed()) throw ValidationFailure(report.violations.front());
    return std::to_string(spec.entries.size()) + " sources, weight sum " + std::to_string(report.weight_sum);
  });
  check("table7_ablations", [] {
    const auto set = table7();
    const auto full = table1();
    const auto sizes = mixture::ablation_raw_sizes(set, full);
    mixture::BudgetOptions opts;
    opts.weight_tol = set.weight_tol;
    for (const auto& m : set.mixes) mixture::plan_budget(m.weights, set.total_tokens, sizes, opts);
    return std::to_string(set.mixes.size()) + " mixes planned";
  });
  check("architecture_table2", [] {
    const auto p = table2();
    const auto count = perf::param_count(p.config);
    return "params " + std::to_string(count) + " (reported " + std::to_string(p.reported_params) + ")";
  });
  check("layout_table3", [] {
    const auto p = table3();
    const auto tokens = perf::layout_tokens(p.layout);
    if (tokens != p.reported_batch_tokens) throw ValidationFailure("layout does not reproduce the batch size");
    return "batch tokens " + std::to_string(tokens);
  });
  check("throughput", [] {
    const auto p = throughput();
    for (const auto& pt : p.points) perf::mfu(pt.achieved_tflops, p.peak_tflops);
    return std::to_string(p.points.size()) + " points";
  });
  check("carbon", [] {
    const auto p = carbon();
    const auto est = perf::carbon(p.input);
    return "energy " + std::to_string(est.energy_mwh) + " MWh";
  });
  check("schedules", [] {
    const auto names = schedule_names();
    for (const auto& n : names) sched::Schedule{schedule(n)};
    return std::to_string(names.size()) + " schedules";
  });
  check("batch_runs", [] {
    const auto p = batch_runs();
    batchscale::tradeoff(p.baseline, p.candidates);
    return std::to_string(p.candidates.size()) + " candidates";
  });
  check("needle_task", [] {
    const auto t = needle_task();
    t.validate();
    return std::to_string(t.depths.size()) + " depths x " + std::to_string(t.context_sizes.size()) + " sizes";
  });
  return lines;
}

}  // namespace ptk::presets
