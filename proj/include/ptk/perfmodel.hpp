#pragma once

// Parameter and FLOP accounting for a pre-norm decoder with a gated
// feed-forward block, plus utilization, batch-layout and energy arithmetic.

#include <cstdint>
#include <vector>

#include <json.hpp>

namespace ptk::perf {

struct ArchConfig {
  std::int64_t hidden_size = 2048;
  std::int64_t num_layers = 24;
  std::int64_t num_heads = 32;
  std::int64_t sequence_length = 4096;
  std::int64_t vocab_size = 100352;
  std::int64_t ffn_inner_size = 5632;
  double rotary_fraction = 0.25;
  bool qkv_bias = true;
  bool ffn_bias = false;
  bool attn_out_bias = false;
  bool norm_bias = true;
  bool final_norm = true;
  bool tied_embeddings = false;

  std::int64_t head_dim() const noexcept { return hidden_size / num_heads; }
  std::int64_t rotary_dims() const;
  void validate() const;
};

/// Parameter totals split by component. `total` is their exact sum.
struct ParamBreakdown {
  std::int64_t embedding = 0;
  std::int64_t attention_per_layer = 0;
  std::int64_t ffn_per_layer = 0;
  std::int64_t norms_per_layer = 0;
  std::int64_t per_layer = 0;
  std::int64_t final_norm = 0;
  std::int64_t head = 0;
  std::int64_t total = 0;
};

ParamBreakdown param_breakdown(const ArchConfig& cfg);
std::int64_t param_count(const ArchConfig& cfg);

struct FlopsPerToken {
  double dense = 0.0;      ///< 6 * parameters
  double attention = 0.0;  ///< 12 * layers * hidden * context
  double total = 0.0;
};

FlopsPerToken flops_per_token(const ArchConfig& cfg, std::int64_t context_length);

inline constexpr double kDefaultPeakTflops = 312.0;

double mfu(double achieved_tflops_per_device, double peak_tflops_per_device = kDefaultPeakTflops);

struct TrainLayout {
  std::int64_t data_parallel_degree = 512;
  std::int64_t micro_batch_size = 2;
  std::int64_t grad_accum_steps = 2;
  std::int64_t sequence_length = 4096;

  void validate() const;
};

std::int64_t layout_tokens(const TrainLayout& layout);

struct CarbonInput {
  double gpu_hours = 0.0;
  double avg_power_watts = 0.0;
  double pue = 1.1;
  double carbon_intensity = 0.385;  ///< kg CO2eq per kWh

  void validate() const;
};

struct CarbonEstimate {
  double energy_wh = 0.0;
  double energy_mwh = 0.0;
  double emissions_t = 0.0;
};

CarbonEstimate carbon(const CarbonInput& input);

/// Rounds for display only; the estimate itself keeps full precision.
double display_round(double value, int decimals);

// ---------------------------------------------------------------------------
// Unknown-resolution search for a published parameter total

struct SearchCandidate {
  ArchConfig config;
  std::int64_t params = 0;
  std::int64_t deviation = 0;  ///< params - target
  double relative_deviation = 0.0;
};

struct SearchResult {
  std::int64_t target = 0;
  std::vector<SearchCandidate> ranked;  ///< by |deviation|, then grid order
  bool exact = false;
  std::size_t grid_size = 0;
};

/// Feed-forward widths tried for a given hidden size: k * 4h/3 rounded up to
/// a multiple of 256 for k = 1..6, floor(8h/3), 4h, and the fixed 5632, 6144, 8192.
std::vector<std::int64_t> ffn_candidates(std::int64_t hidden_size);

/// Exhaustive search over ffn width x norm bias x final norm x tying with all
/// other fields taken from `base`.
SearchResult search_param_grid(const ArchConfig& base, std::int64_t target);

void to_json(nlohmann::json& j, const ArchConfig& c);
void from_json(const nlohmann::json& j, ArchConfig& c);
void to_json(nlohmann::json& j, const ParamBreakdown& p);
void to_json(nlohmann::json& j, const TrainLayout& l);
void from_json(const nlohmann::json& j, TrainLayout& l);
void to_json(nlohmann::json& j, const CarbonInput& c);
void from_json(const nlohmann::json& j, CarbonInput& c);

}  // namespace ptk::perf
