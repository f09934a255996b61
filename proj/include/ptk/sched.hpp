#pragma once

// Learning-rate schedules: linear warmup, a cosine main phase that hands
// over to inverse-square-root decay with matched value and slope, and a
// linear cooldown to zero.

#include <cstdint>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ptk::sched {

enum class MainPhase {
  hybrid,  ///< cosine up to the turn, rsqrt after
  cosine,  ///< half-period cosine from max_lr to min_lr over main_steps
};

struct SchedulerSpec {
  double min_lr = 0.0;
  double max_lr = 1e-3;
  std::int64_t main_steps = 1;
  std::int64_t warmup_steps = 0;
  std::int64_t cooldown_steps = 0;
  double turn_fraction = 0.25;
  double period_multiplier = 1.0;
  MainPhase main_phase = MainPhase::hybrid;

  std::int64_t total_steps() const noexcept { return warmup_steps + main_steps + cooldown_steps; }
  void validate() const;
};

/// The two hybrid presets: turn at N/4 with period N, and turn at N/2 with period 2N.
SchedulerSpec hyb(double min_lr, double max_lr, std::int64_t main_steps);
SchedulerSpec hyb2(double min_lr, double max_lr, std::int64_t main_steps);
SchedulerSpec cosine(double min_lr, double max_lr, std::int64_t main_steps);

struct ContinuityParams {
  double alpha = 0.0;
  double beta = 0.0;
  double turn_step = 0.0;  ///< t * N; need not be integral
};

ContinuityParams solve_continuity(const SchedulerSpec& spec);

/// Main-phase branches as functions of the step `i` counted from warmup end.
double cosine_branch(const SchedulerSpec& spec, double i);
double cosine_branch_slope(const SchedulerSpec& spec, double i);
double rsqrt_branch(const ContinuityParams& c, double i);
double rsqrt_branch_slope(const ContinuityParams& c, double i);

double lr_at(const SchedulerSpec& spec, std::int64_t step);

/// Precomputes the continuity constants once; use for dense evaluation.
class Schedule {
 public:
  explicit Schedule(SchedulerSpec spec);

  double operator()(std::int64_t step) const;
  const SchedulerSpec& spec() const noexcept { return spec_; }
  const ContinuityParams& continuity() const noexcept { return continuity_; }

 private:
  double main_phase(std::int64_t i) const;

  SchedulerSpec spec_;
  ContinuityParams continuity_;
  double main_end_value_ = 0.0;
};

/// Inverse square root with a plateau of `peak` over the first `warmup` steps.
double rsqrt_lr(std::int64_t step, std::int64_t warmup, double peak);

/// rsqrt_lr with a linear ramp to zero over the last `cooldown_fraction` of `total_steps`.
double rsqrt_lr_with_cooldown(std::int64_t step, std::int64_t warmup, double peak,
                              std::int64_t total_steps, double cooldown_fraction = 0.1);

/// Trapezoidal mean of `f` sampled at every integer step of [0, total_steps].
template <typename F>
double trapezoid_mean(F&& f, std::int64_t total_steps) {
  if (total_steps <= 0) return f(std::int64_t{0});
  double sum = 0.5 * (f(std::int64_t{0}) + f(total_steps));
  for (std::int64_t s = 1; s < total_steps; ++s) sum += f(s);
  return sum / static_cast<double>(total_steps);
}

double average_lr(const SchedulerSpec& spec);

struct Point {
  std::int64_t step;
  double lr;
};

std::vector<Point> sample(const SchedulerSpec& spec, std::int64_t stride = 1);

std::string_view to_string(MainPhase phase) noexcept;
MainPhase parse_main_phase(std::string_view text);

void to_json(nlohmann::json& j, const SchedulerSpec& spec);
void from_json(const nlohmann::json& j, SchedulerSpec& spec);

}  // namespace ptk::sched
