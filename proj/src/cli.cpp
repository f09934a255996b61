#include "ptk/cli.hpp"

#include <algorithm>
#include <concepts>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ptk/batchscale.hpp"
#include "ptk/error.hpp"
#include "ptk/mixture.hpp"
#include "ptk/needle.hpp"
#include "ptk/perfmodel.hpp"
#include "ptk/presets.hpp"
#include "ptk/refmodel.hpp"
#include "ptk/sched.hpp"

namespace ptk::cli {

namespace {

using nlohmann::json;

enum class Format { json, csv, table };

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string brief(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Cell {
  std::string exact;
  std::string display;

  Cell(std::string s) : exact(s), display(std::move(s)) {}
  Cell(const char* s) : Cell(std::string(s)) {}
  Cell(double v) : exact(cli::exact(v)), display(brief(v)) {}
  template <std::integral I>
  Cell(I v) : exact(std::to_string(v)), display(exact) {}
};

/// Rows of cells rendered either as CSV (exact numbers) or an aligned table.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> csv_rows;
  std::vector<std::vector<std::string>> display_rows;

  void add(std::initializer_list<Cell> cells) {
    std::vector<std::string> csv;
    std::vector<std::string> display;
    for (const auto& c : cells) {
      csv.push_back(c.exact);
      display.push_back(c.display);
    }
    csv_rows.push_back(std::move(csv));
    display_rows.push_back(std::move(display));
  }

  std::string csv() const {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) os << ',';
        const bool quote = cells[i].find_first_of(",\"") != std::string::npos;
        if (quote) {
          os << '"';
          for (char ch : cells[i]) os << (ch == '"' ? "\"\"" : std::string(1, ch));
          os << '"';
        } else {
          os << cells[i];
        }
      }
      os << '\n';
    };
    line(header);
    for (const auto& r : csv_rows) line(r);
    return os.str();
  }

  std::string text() const {
    std::vector<std::size_t> width(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& r : display_rows) {
      for (std::size_t i = 0; i < r.size() && i < width.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        os << (i ? "  " : "") << std::left << std::setw(static_cast<int>(width[i])) << cells[i];
      }
      os << '\n';
    };
    line(header);
    for (const auto& r : display_rows) line(r);
    return os.str();
  }
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string format = "table";
  std::string output;
  std::uint64_t seed = 0;

  Format fmt() const {
    if (format == "json") return Format::json;
    if (format == "csv") return Format::csv;
    return Format::table;
  }

  void emit(const std::string& data) const {
    if (output.empty()) {
      out << data;
      return;
    }
    std::ofstream file(output, std::ios::binary);
    if (!file) throw InvalidArgument("cannot open output file " + output);
    file << data;
  }

  void emit(const json& doc, const Table& table) const {
    switch (fmt()) {
      case Format::json:
        emit(doc.dump(2) + "\n");
        break;
      case Format::csv:
        emit(table.csv());
        break;
      case Format::table:
        emit(table.text());
        break;
    }
  }
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr && *v != '\0' ? std::string(v) : fallback;
}

// ---------------------------------------------------------------------------
// schedule

struct ScheduleArgs {
  std::string preset = "stablelm2";
  std::string spec_file;
  std::int64_t stride = 1;
  bool average = false;
  std::int64_t rsqrt_warmup = 0;
  double peak = 1e-3;
  std::int64_t total_steps = 0;
  double cooldown_fraction = 0.1;
};

int cmd_schedule(const Context& ctx, const ScheduleArgs& a) {
  Table table;
  table.header = {"step", "lr"};
  json rows = json::array();

  if (a.rsqrt_warmup > 0) {
    if (a.total_steps <= 0) throw InvalidArgument("--total-steps is required with --rsqrt-warmup");
    for (std::int64_t s = 0; s <= a.total_steps; s += a.stride) {
      const double lr = sched::rsqrt_lr_with_cooldown(s, a.rsqrt_warmup, a.peak, a.total_steps, a.cooldown_fraction);
      table.add({s, lr});
      rows.push_back({{"step", s}, {"lr", lr}});
    }
    ctx.emit(rows, table);
    return kExitOk;
  }

  const sched::SchedulerSpec spec =
      a.spec_file.empty() ? presets::schedule(a.preset) : read_json_file(a.spec_file).get<sched::SchedulerSpec>();
  if (a.average) {
    const double mean = sched::average_lr(spec);
    Table avg;
    avg.header = {"quantity", "value"};
    avg.add({std::string("average_lr"), mean});
    ctx.emit(json{{"spec", spec}, {"average_lr", mean}}, avg);
    return kExitOk;
  }
  for (const auto& p : sched::sample(spec, a.stride)) {
    table.add({p.step, p.lr});
    rows.push_back({{"step", p.step}, {"lr", p.lr}});
  }
  if (spec.main_phase == sched::MainPhase::hybrid) {
    const auto c = sched::solve_continuity(spec);
    ctx.err << "continuity: alpha=" << exact(c.alpha) << " beta=" << exact(c.beta) << " turn=" << exact(c.turn_step)
            << '\n';
  }
  ctx.emit(rows, table);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// mixture

struct MixtureArgs {
  std::string preset = "table1";
  std::string file;
  double weight_tol = 1e-3;
  double token_tol = 0.01;
  bool exact_weights = false;
  std::string mix = "control";
  std::string weights_file;
  std::string raw_sizes_file;
  std::uint64_t total = 0;
  double ceiling = 4.0;
  std::uint64_t draws = 1000;
  bool stream = false;
};

mixture::MixtureSpec load_mixture(const MixtureArgs& a) {
  if (!a.file.empty()) return read_json_file(a.file).get<mixture::MixtureSpec>();
  if (a.preset == "table1") return presets::table1();
  throw InvalidArgument("unknown mixture preset '" + a.preset + "'");
}

int cmd_mixture_validate(const Context& ctx, const MixtureArgs& a) {
  const auto spec = load_mixture(a);
  mixture::ValidationOptions opts;
  opts.weight_tol = a.weight_tol;
  opts.token_tol = a.token_tol;
  opts.use_weight_quantum = !a.exact_weights;
  const auto report = mixture::validate(spec, opts);

  Table table;
  table.header = {"name", "expected_tokens", "token_residual", "quantized_residual", "per_epoch_tokens", "ok"};
  for (const auto& e : report.entries) {
    table.add({e.name, e.expected_tokens, e.token_residual, e.quantized_residual, e.per_epoch_tokens,
               std::string(e.tokens_ok && e.epochs_ok ? "pass" : "FAIL")});
  }
  table.add({std::string("(weight sum)"), report.weight_sum, report.weight_residual, 0.0, 0.0,
             std::string(report.weight_ok ? "pass" : "FAIL")});
  ctx.emit(json(report), table);
  for (const auto& v : report.violations) ctx.err << "violation: " << v << '\n';
  ctx.err << (report.passed() ? "mixture valid" : "mixture INVALID") << '\n';
  return report.passed() ? kExitOk : kExitValidation;
}

int cmd_mixture_breakdown(const Context& ctx, const MixtureArgs& a) {
  const auto spec = load_mixture(a);
  const auto breakdown = mixture::category_breakdown(spec);
  Table table;
  table.header = {"category", "weight"};
  json doc = json::object();
  for (const auto& [cat, w] : breakdown) {
    table.add({std::string(mixture::to_string(cat)), w});
    doc[std::string(mixture::to_string(cat))] = w;
  }
  ctx.emit(doc, table);
  return kExitOk;
}

int cmd_mixture_plan(const Context& ctx, const MixtureArgs& a) {
  std::map<std::string, double> weights;
  std::map<std::string, double> sizes;
  std::uint64_t total = a.total;
  mixture::BudgetOptions opts;
  opts.weight_tol = a.weight_tol;
  opts.repetition_ceiling = a.ceiling;
  if (!a.weights_file.empty()) {
    weights = read_json_file(a.weights_file).get<std::map<std::string, double>>();
    if (a.raw_sizes_file.empty()) throw InvalidArgument("--raw-sizes is required with --weights");
    sizes = read_json_file(a.raw_sizes_file).get<std::map<std::string, double>>();
  } else if (a.preset == "table1") {
    const auto full = presets::table1();
    for (const auto& e : full.entries) {
      weights[e.name] = e.weight;
      sizes[e.name] = mixture::per_epoch_size(e);
    }
    if (total == 0) total = full.total_tokens;
  } else if (a.preset == "table7") {
    const auto set = presets::table7();
    weights = set.mix(a.mix).weights;
    sizes = mixture::ablation_raw_sizes(set, presets::table1());
    opts.weight_tol = std::max(opts.weight_tol, set.weight_tol);
    if (total == 0) total = set.total_tokens;
  } else {
    throw InvalidArgument("unknown plan preset '" + a.preset + "'");
  }
  const auto plan = mixture::plan_budget(weights, total, sizes, opts);
  Table table;
  table.header = {"name", "weight", "tokens", "epochs", "over_ceiling"};
  for (const auto& l : plan) table.add({l.name, l.weight, l.tokens, l.epochs, std::string(l.over_ceiling ? "yes" : "no")});
  ctx.emit(json{{"total_tokens", total}, {"plan", plan}}, table);
  return kExitOk;
}

int cmd_mixture_sample(const Context& ctx, const MixtureArgs& a) {
  const auto spec = load_mixture(a);
  mixture::Sampler sampler(spec, ctx.seed);
  Table table;
  if (a.stream) {
    table.header = {"index", "source", "epoch", "document"};
    json rows = json::array();
    for (std::uint64_t i = 0; i < a.draws; ++i) {
      const auto d = sampler.next();
      const auto& name = sampler.source_name(d.source);
      table.add({static_cast<std::int64_t>(i), name, static_cast<std::int64_t>(d.epoch),
                 static_cast<std::int64_t>(d.document)});
      rows.push_back({{"source", name}, {"epoch", d.epoch}, {"document", d.document}});
    }
    ctx.emit(rows, table);
    return kExitOk;
  }
  sampler.skip(a.draws);
  const double total_weight = spec.weight_sum();
  table.header = {"source", "weight", "draws", "frequency", "z_score", "epoch_progress"};
  json rows = json::array();
  for (std::size_t s = 0; s < sampler.source_count(); ++s) {
    const double p = spec.entries[s].weight / total_weight;
    const auto n = static_cast<double>(a.draws);
    const double freq = static_cast<double>(sampler.counts()[s]) / n;
    const double se = std::sqrt(p * (1.0 - p) / n);
    const double z = se > 0.0 ? (freq - p) / se : 0.0;
    table.add({sampler.source_name(s), p, static_cast<std::int64_t>(sampler.counts()[s]), freq, z,
               sampler.epoch_progress(s)});
    rows.push_back({{"source", sampler.source_name(s)},
                    {"weight", p},
                    {"draws", sampler.counts()[s]},
                    {"frequency", freq},
                    {"z_score", z},
                    {"epoch_progress", sampler.epoch_progress(s)}});
  }
  ctx.emit(json{{"seed", ctx.seed}, {"draws", a.draws}, {"sources", rows}}, table);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// batch

struct BatchArgs {
  std::int64_t examples = 20000;
  std::int64_t dim = 8;
  double noise = 0.5;
  std::int64_t trials = 1000;
  std::vector<std::int64_t> sizes = {1, 2, 4, 8, 16, 32, 64, 128, 256};
  std::string file;
};

int cmd_batch_noise(const Context& ctx, const BatchArgs& a) {
  batchscale::ToyOptions opts;
  opts.examples = a.examples;
  opts.dim = a.dim;
  opts.noise_std = a.noise;
  const auto problem = batchscale::make_least_squares(opts, ctx.seed);
  std::vector<batchscale::NoisePoint> points;
  Table table;
  table.header = {"batch_size", "variance"};
  json rows = json::array();
  for (const auto b : a.sizes) {
    const double v = batchscale::gradient_variance(problem, b, a.trials, ctx.seed);
    points.push_back({static_cast<double>(b), v});
    table.add({b, v});
    rows.push_back({{"batch_size", b}, {"variance", v}});
  }
  json doc{{"points", rows}, {"per_example_variance", batchscale::per_example_variance(problem)}};
  std::vector<batchscale::NoisePoint> positive;
  std::copy_if(points.begin(), points.end(), std::back_inserter(positive),
               [](const auto& p) { return p.variance > 0.0; });
  if (positive.size() >= 3) {
    const auto fit = batchscale::fit_inverse_scaling(positive);
    doc["fit"] = fit;
    ctx.err << "fit: variance ~ " << exact(fit.coefficient) << " * B^" << exact(fit.exponent) << " (r^2 "
            << brief(fit.r_squared) << ")\n";
  }
  ctx.emit(doc, table);
  return kExitOk;
}

int cmd_batch_tradeoff(const Context& ctx, const BatchArgs& a) {
  batchscale::BatchRun baseline;
  std::vector<batchscale::BatchRun> candidates;
  if (a.file.empty()) {
    const auto p = presets::batch_runs();
    baseline = p.baseline;
    candidates = p.candidates;
    ctx.err << "reported: speedup ~" << brief(p.reported_speedup) << ", token overhead " << brief(p.reported_overhead)
            << '\n';
  } else {
    const json doc = read_json_file(a.file);
    baseline = doc.at("baseline").get<batchscale::BatchRun>();
    candidates = doc.at("candidates").get<std::vector<batchscale::BatchRun>>();
  }
  const auto rows = batchscale::tradeoff(baseline, candidates);
  Table table;
  table.header = {"batch_tokens", "tokens_to_match", "iterations", "iteration_speedup", "token_overhead"};
  for (const auto& r : rows) {
    table.add({static_cast<std::int64_t>(r.run.batch_tokens), static_cast<std::int64_t>(r.run.tokens_to_match),
               r.iterations, r.iteration_speedup, r.token_overhead});
  }
  ctx.emit(json{{"baseline", baseline}, {"candidates", rows}}, table);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// perf

struct PerfArgs {
  std::string config_file;
  std::int64_t context = 4096;
  double achieved = 0.0;
  double peak = perf::kDefaultPeakTflops;
  std::string file;
  std::int64_t dp = 0, micro = 0, accum = 0, seq = 0;
  double gpu_hours = -1.0, watts = -1.0, pue = 1.1, intensity = 0.385;
  std::int64_t target = 0;
  std::int64_t top = 5;
};

perf::ArchConfig load_arch(const PerfArgs& a) {
  if (!a.config_file.empty()) {
    const json doc = read_json_file(a.config_file);
    return (doc.contains("config") ? doc.at("config") : doc).get<perf::ArchConfig>();
  }
  return presets::table2().config;
}

int cmd_perf_params(const Context& ctx, const PerfArgs& a) {
  const auto cfg = load_arch(a);
  const auto p = perf::param_breakdown(cfg);
  Table table;
  table.header = {"component", "params"};
  table.add({std::string("embedding"), p.embedding});
  table.add({std::string("attention_per_layer"), p.attention_per_layer});
  table.add({std::string("ffn_per_layer"), p.ffn_per_layer});
  table.add({std::string("norms_per_layer"), p.norms_per_layer});
  table.add({std::string("per_layer"), p.per_layer});
  table.add({std::string("final_norm"), p.final_norm});
  table.add({std::string("head"), p.head});
  table.add({std::string("total"), p.total});
  ctx.emit(json{{"config", cfg}, {"params", p}}, table);
  return kExitOk;
}

int cmd_perf_flops(const Context& ctx, const PerfArgs& a) {
  const auto cfg = load_arch(a);
  const auto f = perf::flops_per_token(cfg, a.context);
  Table table;
  table.header = {"term", "flops_per_token"};
  table.add({std::string("dense"), f.dense});
  table.add({std::string("attention"), f.attention});
  table.add({std::string("total"), f.total});
  ctx.emit(json{{"context_length", a.context}, {"dense", f.dense}, {"attention", f.attention}, {"total", f.total}},
           table);
  return kExitOk;
}

int cmd_perf_mfu(const Context& ctx, const PerfArgs& a) {
  Table table;
  table.header = {"label", "achieved_tflops", "peak_tflops", "mfu", "reported_mfu"};
  json rows = json::array();
  if (a.achieved > 0.0) {
    const double m = perf::mfu(a.achieved, a.peak);
    table.add({std::string("input"), a.achieved, a.peak, m, std::string("")});
    rows.push_back({{"achieved_tflops", a.achieved}, {"peak_tflops", a.peak}, {"mfu", m}});
  } else {
    const auto p = presets::throughput();
    for (const auto& pt : p.points) {
      const double m = perf::mfu(pt.achieved_tflops, p.peak_tflops);
      table.add({pt.label, pt.achieved_tflops, p.peak_tflops, m, pt.reported_mfu});
      rows.push_back({{"label", pt.label},
                      {"achieved_tflops", pt.achieved_tflops},
                      {"peak_tflops", p.peak_tflops},
                      {"mfu", m},
                      {"reported_mfu", pt.reported_mfu}});
    }
  }
  ctx.emit(rows, table);
  return kExitOk;
}

int cmd_perf_layout(const Context& ctx, const PerfArgs& a) {
  perf::TrainLayout layout = presets::table3().layout;
  if (!a.file.empty()) {
    const json doc = read_json_file(a.file);
    layout = (doc.contains("layout") ? doc.at("layout") : doc).get<perf::TrainLayout>();
  }
  if (a.dp > 0) layout.data_parallel_degree = a.dp;
  if (a.micro > 0) layout.micro_batch_size = a.micro;
  if (a.accum > 0) layout.grad_accum_steps = a.accum;
  if (a.seq > 0) layout.sequence_length = a.seq;
  const auto tokens = perf::layout_tokens(layout);
  Table table;
  table.header = {"data_parallel_degree", "micro_batch_size", "grad_accum_steps", "sequence_length", "batch_tokens"};
  table.add({layout.data_parallel_degree, layout.micro_batch_size, layout.grad_accum_steps, layout.sequence_length,
             tokens});
  ctx.emit(json{{"layout", layout}, {"batch_tokens", tokens}}, table);
  return kExitOk;
}

int cmd_perf_carbon(const Context& ctx, const PerfArgs& a) {
  const auto preset = presets::carbon();
  perf::CarbonInput in = preset.input;
  if (!a.file.empty()) {
    const json doc = read_json_file(a.file);
    in = (doc.contains("input") ? doc.at("input") : doc).get<perf::CarbonInput>();
  }
  if (a.gpu_hours >= 0.0) in.gpu_hours = a.gpu_hours;
  if (a.watts >= 0.0) in.avg_power_watts = a.watts;
  in.pue = a.pue;
  in.carbon_intensity = a.intensity;
  const auto est = perf::carbon(in);
  Table table;
  table.header = {"quantity", "value", "display"};
  table.add({std::string("energy_wh"), est.energy_wh, exact(perf::display_round(est.energy_wh, 0))});
  table.add({std::string("energy_mwh"), est.energy_mwh, exact(perf::display_round(est.energy_mwh, 1))});
  table.add({std::string("emissions_t"), est.emissions_t, exact(perf::display_round(est.emissions_t, 1))});
  ctx.emit(json{{"input", in},
                {"energy_wh", est.energy_wh},
                {"energy_mwh", est.energy_mwh},
                {"emissions_t", est.emissions_t},
                {"display", {{"energy_mwh", perf::display_round(est.energy_mwh, 1)},
                             {"emissions_t", perf::display_round(est.emissions_t, 1)}}}},
           table);
  if (a.file.empty() && a.gpu_hours < 0.0) {
    ctx.err << "reported: " << brief(preset.reported_energy_mwh) << " MWh, " << brief(preset.reported_emissions_t)
            << " tCO2eq\n";
  }
  return kExitOk;
}

int cmd_perf_search(const Context& ctx, const PerfArgs& a) {
  const auto preset = presets::table2();
  const perf::ArchConfig base = a.config_file.empty() ? preset.config : load_arch(a);
  const std::int64_t target = a.target > 0 ? a.target : preset.reported_params;
  const auto result = perf::search_param_grid(base, target);
  Table table;
  table.header = {"rank", "ffn_inner_size", "norm_bias", "final_norm", "tied", "params", "deviation", "relative"};
  json rows = json::array();
  const auto shown = std::min<std::size_t>(static_cast<std::size_t>(std::max<std::int64_t>(a.top, 1)), result.ranked.size());
  for (std::size_t i = 0; i < shown; ++i) {
    const auto& c = result.ranked[i];
    table.add({static_cast<std::int64_t>(i + 1), c.config.ffn_inner_size, std::string(c.config.norm_bias ? "yes" : "no"),
               std::string(c.config.final_norm ? "yes" : "no"), std::string(c.config.tied_embeddings ? "yes" : "no"),
               c.params, c.deviation, c.relative_deviation});
    rows.push_back({{"config", c.config}, {"params", c.params}, {"deviation", c.deviation},
                    {"relative_deviation", c.relative_deviation}});
  }
  ctx.emit(json{{"target", target}, {"grid_size", result.grid_size}, {"exact", result.exact}, {"ranked", rows}}, table);
  ctx.err << (result.exact ? "exact match found" : "no exact match; nearest deviates by " +
                                                       std::to_string(result.ranked.front().deviation))
          << " (" << result.grid_size << " configurations)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// refmodel

struct RefArgs {
  std::int64_t sequence = 8;
  double z_coefficient = 1.0;
  bool negate = false;
  double threshold = 1e-4;
  ref::GradCheckOptions check;
  std::string save;
};

int cmd_ref_gradcheck(const Context& ctx, const RefArgs& a) {
  const auto cfg = ref::toy_config();
  ref::LossOptions loss;
  loss.z_coefficient = a.z_coefficient;
  const auto r = ref::check_model_gradient(cfg, ctx.seed, a.sequence, loss, a.check, a.negate);
  Table table;
  table.header = {"quantity", "value"};
  table.add({std::string("max_relative_error"), r.max_relative_error});
  table.add({std::string("worst_index"), static_cast<std::int64_t>(r.worst_index)});
  table.add({std::string("worst_analytic"), r.worst_analytic});
  table.add({std::string("worst_numeric"), r.worst_numeric});
  table.add({std::string("evaluations"), r.evaluations});
  const bool pass = r.max_relative_error < a.threshold;
  ctx.emit(json{{"config", cfg},
                {"max_relative_error", r.max_relative_error},
                {"worst_index", r.worst_index},
                {"worst_analytic", r.worst_analytic},
                {"worst_numeric", r.worst_numeric},
                {"evaluations", r.evaluations},
                {"threshold", a.threshold},
                {"passed", pass}},
           table);
  ctx.err << "gradient check " << (pass ? "passed" : "FAILED") << " (max relative error " << exact(r.max_relative_error)
          << ", threshold " << brief(a.threshold) << ")\n";
  return pass ? kExitOk : kExitValidation;
}

int cmd_ref_demo(const Context& ctx, const RefArgs& a) {
  const auto cfg = ref::toy_config();
  const auto params = ref::init_params<double>(cfg, ctx.seed);
  std::vector<std::int64_t> tokens(static_cast<std::size_t>(a.sequence));
  random::SplitMix64 rng(ctx.seed);
  for (auto& t : tokens) t = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));
  ref::LossOptions loss;
  loss.z_coefficient = a.z_coefficient;
  ref::ForwardTrace<double> trace;
  const double value = ref::model_loss(params, cfg, tokens, loss, &trace);

  Table table;
  table.header = {"position", "token", "log_z", "z_loss"};
  json rows = json::array();
  for (Eigen::Index i = 0; i < trace.logits.rows(); ++i) {
    const double z = ref::z_loss(trace.logits.row(i), 1.0);
    table.add({static_cast<std::int64_t>(i), tokens[static_cast<std::size_t>(i)], std::sqrt(z), z});
    rows.push_back({{"position", i}, {"token", tokens[static_cast<std::size_t>(i)]}, {"z_loss", z}});
  }
  ctx.emit(json{{"config", cfg},
                {"parameters", ref::element_count(params)},
                {"loss", value},
                {"positions", rows}},
           table);
  ctx.err << "parameters: " << ref::element_count(params) << " (param_count " << perf::param_count(cfg)
          << "), loss " << exact(value) << '\n';
  if (!a.save.empty()) {
    ref::save_params(params, cfg, a.save);
    ctx.err << "saved " << a.save << ".bin and " << a.save << ".json\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// needle

struct NeedleArgs {
  std::string task_file;
  std::string mock_model;
  bool mock_judge = false;
  std::string model_url;
  std::string judge_url;
  std::int64_t timeout_ms = 0;
  std::string corpus_dir;
  std::int64_t runs = 0;
  unsigned max_in_flight = 4;
  std::int64_t tokens = 1000;
  double depth = 0.5;
};

needle::NeedleTask load_task(const NeedleArgs& a) {
  needle::NeedleTask task =
      a.task_file.empty() ? presets::needle_task() : read_json_file(a.task_file).get<needle::NeedleTask>();
  if (a.runs > 0) task.runs = a.runs;
  return task;
}

std::vector<std::string> load_corpus(const NeedleArgs& a, std::uint64_t seed) {
  if (a.corpus_dir.empty()) return needle::synthetic_corpus(64, seed);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(a.corpus_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InvalidArgument("no .txt documents in " + a.corpus_dir);
  std::vector<std::string> docs;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    docs.push_back(ss.str());
  }
  return docs;
}

int cmd_needle_run(const Context& ctx, const NeedleArgs& a) {
  const auto task = load_task(a);
  const auto corpus = load_corpus(a, ctx.seed);
  const std::chrono::milliseconds timeout{a.timeout_ms > 0 ? a.timeout_ms
                                                           : std::stoll(env_or("PTK_NEEDLE_TIMEOUT_MS", "30000"))};

  std::unique_ptr<needle::ModelClient> model;
  if (a.mock_model == "oracle") {
    model = std::make_unique<needle::OracleModel>(task.needle);
  } else if (a.mock_model == "empty") {
    model = std::make_unique<needle::EmptyModel>();
  } else if (!a.mock_model.empty()) {
    throw InvalidArgument("unknown mock model '" + a.mock_model + "' (oracle|empty)");
  } else {
    const std::string url = a.model_url.empty() ? env_or("PTK_MODEL_URL", "") : a.model_url;
    if (url.empty()) throw InvalidArgument("no model: pass --mock-model, --model-url or set PTK_MODEL_URL");
    model = std::make_unique<needle::HttpModelClient>(needle::Endpoint{url, timeout}, task.prompt_template);
  }

  std::unique_ptr<needle::JudgeClient> judge;
  if (a.mock_judge) {
    judge = std::make_unique<needle::MockJudge>(task.answer_key());
  } else {
    const std::string url = a.judge_url.empty() ? env_or("PTK_JUDGE_URL", "") : a.judge_url;
    if (url.empty()) throw InvalidArgument("no judge: pass --mock-judge, --judge-url or set PTK_JUDGE_URL");
    judge = std::make_unique<needle::HttpJudgeClient>(needle::Endpoint{url, timeout});
  }

  const auto grid = needle::run_grid(task, corpus, *model, *judge, {a.max_in_flight});
  const auto summary = needle::aggregate(grid);
  switch (ctx.fmt()) {
    case Format::json:
      ctx.emit(needle::grid_to_json(grid, summary).dump(2) + "\n");
      break;
    case Format::csv:
      ctx.emit(needle::summary_to_csv(grid, summary));
      break;
    case Format::table: {
      Table table;
      table.header = {"depth"};
      for (const auto c : grid.context_sizes) table.header.push_back(std::to_string(c));
      for (Eigen::Index d = 0; d < summary.mean.rows(); ++d) {
        std::vector<std::string> cells{brief(grid.depths[static_cast<std::size_t>(d)])};
        for (Eigen::Index c = 0; c < summary.mean.cols(); ++c) {
          cells.push_back(brief(summary.mean(d, c)) + "+-" + brief(summary.stddev(d, c)));
        }
        table.csv_rows.push_back(cells);
        table.display_rows.push_back(cells);
      }
      ctx.emit(table.text());
      break;
    }
  }
  ctx.err << "overall average " << exact(summary.overall) << ", missing cells " << summary.missing << '\n';
  return kExitOk;
}

int cmd_needle_haystack(const Context& ctx, const NeedleArgs& a) {
  const auto task = load_task(a);
  const auto corpus = load_corpus(a, ctx.seed);
  const auto hay = needle::build_haystack(corpus, a.tokens, task.needle, a.depth, ctx.seed,
                                          needle::TokenCounter{task.chars_per_token});
  if (ctx.fmt() == Format::json) {
    ctx.emit(json{{"prompt", hay.prompt},
                  {"needle_offset", hay.needle_offset},
                  {"needle_length", hay.needle_length},
                  {"tokens", hay.tokens}}
                 .dump(2) +
             "\n");
  } else {
    ctx.emit(hay.prompt + "\n");
  }
  ctx.err << "needle at [" << hay.needle_offset << ", " << hay.needle_offset + hay.needle_length << "), "
          << hay.tokens << " tokens\n";
  return kExitOk;
}

int self_test(const Context& ctx) {
  bool ok = true;
  for (const auto& line : presets::self_test()) {
    ctx.out << (line.ok ? "ok    " : "FAIL  ") << line.fixture << ": " << line.detail << '\n';
    ok = ok && line.ok;
  }
  return ok ? kExitOk : kExitValidation;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pre-training toolkit: schedules, data mixtures, batch-size noise, performance model, "
               "reference numerics and needle-in-a-haystack evaluation",
               "ptk"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  Context ctx{out, err, "table", "", 0};
  bool run_self_test = false;
  app.add_flag("--self-test", run_self_test, "Load every preset fixture and validate it");
  app.add_option("--emit,--format", ctx.format, "Output format")
      ->check(CLI::IsMember({"json", "csv", "table"}))
      ->capture_default_str();
  app.add_option("-o,--output", ctx.output, "Write data to this file instead of stdout");
  app.add_option("--seed", ctx.seed, "Seed for every stochastic operation")->capture_default_str();

  std::function<int()> action;

  // schedule
  ScheduleArgs sa;
  auto* schedule = app.add_subcommand("schedule", "Emit a learning-rate schedule");
  schedule->add_option("--preset", sa.preset, "Named schedule (stablelm2, hyb, hyb2, cosine)")->capture_default_str();
  schedule->add_option("--spec", sa.spec_file, "Scheduler spec JSON file");
  schedule->add_option("--stride", sa.stride, "Emit every n-th step")->check(CLI::PositiveNumber);
  schedule->add_flag("--average", sa.average, "Print the trapezoidal mean learning rate instead");
  schedule->add_option("--rsqrt-warmup", sa.rsqrt_warmup, "Emit the plain rsqrt schedule with this plateau");
  schedule->add_option("--peak", sa.peak, "Peak learning rate for --rsqrt-warmup");
  schedule->add_option("--total-steps", sa.total_steps, "Length of the rsqrt schedule");
  schedule->add_option("--cooldown-fraction", sa.cooldown_fraction, "Final linear cooldown share for rsqrt");
  schedule->callback([&] { action = [&] { return cmd_schedule(ctx, sa); }; });

  // mixture
  MixtureArgs ma;
  auto* mix = app.add_subcommand("mixture", "Data mixture accounting");
  mix->require_subcommand(1);
  auto add_source = [&](CLI::App* c) {
    c->add_option("--preset", ma.preset, "Built-in mixture")->capture_default_str();
    c->add_option("--file", ma.file, "Mixture JSON file");
  };
  auto* mv = mix->add_subcommand("validate", "Check weights, tokens and epochs");
  add_source(mv);
  mv->add_option("--weight-tol", ma.weight_tol, "Allowed |sum of weights - 1|")->capture_default_str();
  mv->add_option("--token-tol", ma.token_tol, "Allowed relative token residual per source")->capture_default_str();
  mv->add_flag("--exact-weights", ma.exact_weights,
               "Treat weights as exact instead of accepting anything that rounds to the published value");
  mv->callback([&] { action = [&] { return cmd_mixture_validate(ctx, ma); }; });
  auto* mb = mix->add_subcommand("breakdown", "Weight per category");
  add_source(mb);
  mb->callback([&] { action = [&] { return cmd_mixture_breakdown(ctx, ma); }; });
  auto* mp = mix->add_subcommand("plan", "Token budget per source");
  mp->add_option("--preset", ma.preset, "table1 or table7")->capture_default_str();
  mp->add_option("--mix", ma.mix, "Ablation mix for table7 (control, mix1..mix5)")->capture_default_str();
  mp->add_option("--weights", ma.weights_file, "JSON object name -> weight");
  mp->add_option("--raw-sizes", ma.raw_sizes_file, "JSON object name -> tokens per epoch");
  mp->add_option("--total", ma.total, "Total training tokens");
  mp->add_option("--weight-tol", ma.weight_tol, "Allowed |sum of weights - 1|");
  mp->add_option("--ceiling", ma.ceiling, "Flag sources repeated more than this many epochs")->capture_default_str();
  mp->callback([&] { action = [&] { return cmd_mixture_plan(ctx, ma); }; });
  auto* ms = mix->add_subcommand("sample", "Deterministic weighted interleaving");
  add_source(ms);
  ms->add_option("-n,--draws", ma.draws, "Number of documents to draw")->capture_default_str();
  ms->add_flag("--stream", ma.stream, "Emit every draw instead of per-source counts");
  ms->callback([&] { action = [&] { return cmd_mixture_sample(ctx, ma); }; });

  // batch
  BatchArgs ba;
  auto* batch = app.add_subcommand("batch", "Batch-size noise and tradeoff");
  batch->require_subcommand(1);
  auto* bn = batch->add_subcommand("noise", "Minibatch gradient variance on the least-squares toy problem");
  bn->add_option("--examples", ba.examples, "Dataset size")->capture_default_str();
  bn->add_option("--dim", ba.dim, "Parameter dimension")->capture_default_str();
  bn->add_option("--noise", ba.noise, "Label noise standard deviation")->capture_default_str();
  bn->add_option("--trials", ba.trials, "Minibatches per batch size")->capture_default_str();
  bn->add_option("--sizes", ba.sizes, "Batch sizes")->delimiter(',');
  bn->callback([&] { action = [&] { return cmd_batch_noise(ctx, ba); }; });
  auto* bt = batch->add_subcommand("tradeoff", "Iterations and tokens relative to a baseline");
  bt->add_option("--file", ba.file, "JSON with baseline and candidates");
  bt->callback([&] { action = [&] { return cmd_batch_tradeoff(ctx, ba); }; });

  // perf
  PerfArgs pa;
  auto* perf_cmd = app.add_subcommand("perf", "Parameter, FLOP, utilization, layout and carbon arithmetic");
  perf_cmd->require_subcommand(1);
  auto* pp = perf_cmd->add_subcommand("params", "Parameter count by component");
  pp->add_option("--config", pa.config_file, "Architecture JSON");
  pp->callback([&] { action = [&] { return cmd_perf_params(ctx, pa); }; });
  auto* pf = perf_cmd->add_subcommand("flops", "Training FLOPs per token");
  pf->add_option("--config", pa.config_file, "Architecture JSON");
  pf->add_option("--context", pa.context, "Context length")->capture_default_str();
  pf->callback([&] { action = [&] { return cmd_perf_flops(ctx, pa); }; });
  auto* pm = perf_cmd->add_subcommand("mfu", "Model FLOPs utilization");
  pm->add_option("--achieved", pa.achieved, "Achieved TFLOPs/s per device (default: preset points)");
  pm->add_option("--peak", pa.peak, "Peak TFLOPs/s per device")->capture_default_str();
  pm->callback([&] { action = [&] { return cmd_perf_mfu(ctx, pa); }; });
  auto* pl = perf_cmd->add_subcommand("layout", "Global batch tokens of a training layout");
  pl->add_option("--file", pa.file, "Layout JSON");
  pl->add_option("--dp", pa.dp, "Data-parallel degree");
  pl->add_option("--micro", pa.micro, "Micro batch size (sequences)");
  pl->add_option("--accum", pa.accum, "Gradient accumulation steps");
  pl->add_option("--seq", pa.seq, "Sequence length");
  pl->callback([&] { action = [&] { return cmd_perf_layout(ctx, pa); }; });
  auto* pc = perf_cmd->add_subcommand("carbon", "Energy and emissions");
  pc->add_option("--file", pa.file, "Carbon input JSON");
  pc->add_option("--gpu-hours", pa.gpu_hours, "GPU hours");
  pc->add_option("--watts", pa.watts, "Average power per GPU (W)");
  pc->add_option("--pue", pa.pue, "Power usage effectiveness")->capture_default_str();
  pc->add_option("--intensity", pa.intensity, "kg CO2eq per kWh")->capture_default_str();
  pc->callback([&] { action = [&] { return cmd_perf_carbon(ctx, pa); }; });
  auto* psearch = perf_cmd->add_subcommand("search", "Resolve unpublished architecture fields against a parameter total");
  psearch->add_option("--config", pa.config_file, "Base architecture JSON");
  psearch->add_option("--target", pa.target, "Parameter total to match (default: the preset's reported value)");
  psearch->add_option("--top", pa.top, "Rows to print")->capture_default_str();
  psearch->callback([&] { action = [&] { return cmd_perf_search(ctx, pa); }; });

  // refmodel
  RefArgs ra;
  auto* refm = app.add_subcommand("refmodel", "Reference decoder numerics");
  refm->require_subcommand(1);
  auto* rg = refm->add_subcommand("gradcheck", "Central-difference check of the toy model's backward pass");
  rg->add_option("--sequence", ra.sequence, "Tokens in the probe sequence")->capture_default_str();
  rg->add_option("--z-coef", ra.z_coefficient, "z-loss coefficient")->capture_default_str();
  rg->add_option("--threshold", ra.threshold, "Maximum accepted relative error")->capture_default_str();
  rg->add_option("--step", ra.check.relative_step, "Relative central-difference step")->capture_default_str();
  rg->add_option("--epsilon", ra.check.epsilon, "Denominator floor of the relative error")->capture_default_str();
  rg->add_flag("--negate", ra.negate, "Negate the analytic gradient (negative control)");
  rg->callback([&] { action = [&] { return cmd_ref_gradcheck(ctx, ra); }; });
  auto* rd = refm->add_subcommand("demo", "Forward pass of the toy model");
  rd->add_option("--sequence", ra.sequence, "Tokens")->capture_default_str();
  rd->add_option("--z-coef", ra.z_coefficient, "z-loss coefficient")->capture_default_str();
  rd->add_option("--save", ra.save, "Write parameters to PREFIX.bin and PREFIX.json");
  rd->callback([&] { action = [&] { return cmd_ref_demo(ctx, ra); }; });

  // needle
  NeedleArgs na;
  auto* ndl = app.add_subcommand("needle", "Needle-in-a-haystack harness");
  ndl->require_subcommand(1);
  auto add_task = [&](CLI::App* c) {
    c->add_option("--task", na.task_file, "Task JSON (default: built-in task)");
    c->add_option("--corpus", na.corpus_dir, "Directory of .txt filler documents (default: synthetic)");
  };
  auto* nr = ndl->add_subcommand("run", "Evaluate the depth x context grid");
  add_task(nr);
  nr->add_option("--mock-model", na.mock_model, "oracle or empty");
  nr->add_flag("--mock-judge", na.mock_judge, "Score by substring match offline");
  nr->add_option("--model-url", na.model_url, "Model endpoint (or PTK_MODEL_URL)");
  nr->add_option("--judge-url", na.judge_url, "Judge endpoint (or PTK_JUDGE_URL)");
  nr->add_option("--timeout-ms", na.timeout_ms, "Per-request timeout (or PTK_NEEDLE_TIMEOUT_MS)");
  nr->add_option("--runs", na.runs, "Override the task's run count");
  nr->add_option("--max-in-flight", na.max_in_flight, "Concurrent requests")->capture_default_str();
  nr->callback([&] { action = [&] { return cmd_needle_run(ctx, na); }; });
  auto* nh = ndl->add_subcommand("haystack", "Print one haystack prompt");
  add_task(nh);
  nh->add_option("--tokens", na.tokens, "Target context tokens")->capture_default_str();
  nh->add_option("--depth", na.depth, "Needle depth in [0, 1]")->capture_default_str();
  nh->callback([&] { action = [&] { return cmd_needle_haystack(ctx, na); }; });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (run_self_test) return self_test(ctx);
    if (!action) {
      err << app.help();
      return kExitUsage;
    }
    return action();
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed input: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}

}  // namespace ptk::cli
