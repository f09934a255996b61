#include "ptk/sched.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ptk/error.hpp"

namespace ptk::sched {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double cosine_period(const SchedulerSpec& spec) {
  return spec.period_multiplier * static_cast<double>(spec.main_steps);
}

}  // namespace

void SchedulerSpec::validate() const {
  require(std::isfinite(min_lr) && min_lr >= 0.0, "min_lr must be finite and nonnegative");
  require(std::isfinite(max_lr) && max_lr > 0.0, "max_lr must be finite and positive");
  require(min_lr < max_lr, "min_lr must be below max_lr");
  require(main_steps > 0, "main_steps must be positive");
  require(warmup_steps >= 0, "warmup_steps must be nonnegative");
  require(cooldown_steps >= 0, "cooldown_steps must be nonnegative");
  if (main_phase == MainPhase::hybrid) {
    require(turn_fraction > 0.0 && turn_fraction < 1.0, "turn_fraction must lie in (0, 1)");
    require(std::isfinite(period_multiplier) && period_multiplier > 0.0,
            "period_multiplier must be positive");
  }
}

SchedulerSpec hyb(double min_lr, double max_lr, std::int64_t main_steps) {
  SchedulerSpec s;
  s.min_lr = min_lr;
  s.max_lr = max_lr;
  s.main_steps = main_steps;
  return s;
}

SchedulerSpec hyb2(double min_lr, double max_lr, std::int64_t main_steps) {
  SchedulerSpec s = hyb(min_lr, max_lr, main_steps);
  s.turn_fraction = 0.5;
  s.period_multiplier = 2.0;
  return s;
}

SchedulerSpec cosine(double min_lr, double max_lr, std::int64_t main_steps) {
  SchedulerSpec s = hyb(min_lr, max_lr, main_steps);
  s.main_phase = MainPhase::cosine;
  return s;
}

double cosine_branch(const SchedulerSpec& spec, double i) {
  if (i == 0.0) return spec.max_lr;
  const double half_range = 0.5 * (spec.max_lr - spec.min_lr);
  return spec.min_lr + half_range * (std::cos(kTwoPi * i / cosine_period(spec)) + 1.0);
}

double cosine_branch_slope(const SchedulerSpec& spec, double i) {
  const double period = cosine_period(spec);
  const double half_range = 0.5 * (spec.max_lr - spec.min_lr);
  return -half_range * std::sin(kTwoPi * i / period) * kTwoPi / period;
}

double rsqrt_branch(const ContinuityParams& c, double i) { return c.alpha / std::sqrt(i + c.beta); }

double rsqrt_branch_slope(const ContinuityParams& c, double i) {
  return -0.5 * c.alpha / std::pow(i + c.beta, 1.5);
}

ContinuityParams solve_continuity(const SchedulerSpec& spec) {
  spec.validate();
  require(spec.main_phase == MainPhase::hybrid, "continuity is defined for the hybrid main phase");
  ContinuityParams c;
  c.turn_step = spec.turn_fraction * static_cast<double>(spec.main_steps);
  const double value = cosine_branch(spec, c.turn_step);
  const double slope = cosine_branch_slope(spec, c.turn_step);
  // alpha / sqrt(x) has slope -value / (2x) at x = turn + beta. A slope that is
  // zero up to rounding (sin of a multiple of pi) counts as zero.
  const double steepest = 0.5 * (spec.max_lr - spec.min_lr) * kTwoPi / cosine_period(spec);
  require(slope < -1e-12 * steepest, "cosine slope at the turn must be negative for an rsqrt continuation");
  const double shifted = -value / (2.0 * slope);
  c.beta = shifted - c.turn_step;
  c.alpha = value * std::sqrt(shifted);
  return c;
}

Schedule::Schedule(SchedulerSpec spec) : spec_(spec) {
  spec_.validate();
  if (spec_.main_phase == MainPhase::hybrid) continuity_ = solve_continuity(spec_);
  main_end_value_ = main_phase(spec_.main_steps);
}

double Schedule::main_phase(std::int64_t i) const {
  if (i == 0) return spec_.max_lr;
  const double x = static_cast<double>(i);
  if (spec_.main_phase == MainPhase::cosine) {
    const double half_range = 0.5 * (spec_.max_lr - spec_.min_lr);
    return spec_.min_lr +
           half_range * (std::cos(std::numbers::pi * x / static_cast<double>(spec_.main_steps)) + 1.0);
  }
  if (x <= continuity_.turn_step) return cosine_branch(spec_, x);
  return rsqrt_branch(continuity_, x);
}

double Schedule::operator()(std::int64_t step) const {
  const std::int64_t end = spec_.total_steps();
  if (step < 0 || step > end) {
    throw InvalidArgument("step " + std::to_string(step) + " outside schedule [0, " +
                          std::to_string(end) + "]");
  }
  if (step < spec_.warmup_steps) {
    return spec_.max_lr * static_cast<double>(step) / static_cast<double>(spec_.warmup_steps);
  }
  const std::int64_t i = step - spec_.warmup_steps;
  if (i <= spec_.main_steps) return main_phase(i);
  const std::int64_t remaining = end - step;
  return main_end_value_ * static_cast<double>(remaining) / static_cast<double>(spec_.cooldown_steps);
}

double lr_at(const SchedulerSpec& spec, std::int64_t step) { return Schedule(spec)(step); }

double rsqrt_lr(std::int64_t step, std::int64_t warmup, double peak) {
  require(warmup >= 1, "rsqrt warmup must be at least 1");
  require(step >= 0, "step must be nonnegative");
  if (step <= warmup) return peak;
  return peak * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

double rsqrt_lr_with_cooldown(std::int64_t step, std::int64_t warmup, double peak,
                              std::int64_t total_steps, double cooldown_fraction) {
  require(total_steps > 0, "total_steps must be positive");
  require(step >= 0 && step <= total_steps, "step outside [0, total_steps]");
  require(cooldown_fraction >= 0.0 && cooldown_fraction <= 1.0, "cooldown_fraction must lie in [0, 1]");
  const auto cooldown =
      static_cast<std::int64_t>(std::llround(cooldown_fraction * static_cast<double>(total_steps)));
  const std::int64_t start = total_steps - cooldown;
  if (cooldown == 0 || step <= start) return rsqrt_lr(step, warmup, peak);
  return rsqrt_lr(start, warmup, peak) * static_cast<double>(total_steps - step) /
         static_cast<double>(cooldown);
}

double average_lr(const SchedulerSpec& spec) {
  const Schedule schedule(spec);
  return trapezoid_mean([&](std::int64_t s) { return schedule(s); }, spec.total_steps());
}

std::vector<Point> sample(const SchedulerSpec& spec, std::int64_t stride) {
  require(stride >= 1, "stride must be at least 1");
  const Schedule schedule(spec);
  const std::int64_t end = spec.total_steps();
  std::vector<Point> points;
  points.reserve(static_cast<std::size_t>(end / stride + 2));
  for (std::int64_t s = 0; s <= end; s += stride) points.push_back({s, schedule(s)});
  if (points.back().step != end) points.push_back({end, schedule(end)});
  return points;
}

std::string_view to_string(MainPhase phase) noexcept {
  switch (phase) {
    case MainPhase::hybrid:
      return "hybrid";
    case MainPhase::cosine:
      return "cosine";
  }
  return "hybrid";
}

MainPhase parse_main_phase(std::string_view text) {
  if (text == "hybrid") return MainPhase::hybrid;
  if (text == "cosine") return MainPhase::cosine;
  throw InvalidArgument("unknown main_phase '" + std::string(text) + "'");
}

void to_json(nlohmann::json& j, const SchedulerSpec& spec) {
  j = nlohmann::json{{"min_lr", spec.min_lr},
                     {"max_lr", spec.max_lr},
                     {"main_steps", spec.main_steps},
                     {"warmup_steps", spec.warmup_steps},
                     {"cooldown_steps", spec.cooldown_steps},
                     {"turn_fraction", spec.turn_fraction},
                     {"period_multiplier", spec.period_multiplier},
                     {"main_phase", to_string(spec.main_phase)}};
}

void from_json(const nlohmann::json& j, SchedulerSpec& spec) {
  spec = SchedulerSpec{};
  spec.min_lr = j.value("min_lr", spec.min_lr);
  j.at("max_lr").get_to(spec.max_lr);
  j.at("main_steps").get_to(spec.main_steps);
  spec.warmup_steps = j.value("warmup_steps", spec.warmup_steps);
  spec.cooldown_steps = j.value("cooldown_steps", spec.cooldown_steps);
  spec.turn_fraction = j.value("turn_fraction", spec.turn_fraction);
  spec.period_multiplier = j.value("period_multiplier", spec.period_multiplier);
  if (j.contains("main_phase")) spec.main_phase = parse_main_phase(j.at("main_phase").get<std::string>());
  spec.validate();
}

}  // namespace ptk::sched
