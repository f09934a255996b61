#include "ptk/perfmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include "ptk/error.hpp"

namespace ptk::perf {

std::int64_t ArchConfig::rotary_dims() const {
  const double dims = rotary_fraction * static_cast<double>(head_dim());
  const auto rounded = static_cast<std::int64_t>(std::llround(dims));
  require(std::abs(dims - static_cast<double>(rounded)) < 1e-9,
          "rotary_fraction * head_dim must be an integer");
  return rounded;
}

void ArchConfig::validate() const {
  require(hidden_size > 0 && num_layers >= 0 && num_heads > 0, "shape fields must be positive");
  require(sequence_length > 0 && vocab_size > 0 && ffn_inner_size > 0, "shape fields must be positive");
  require(hidden_size % num_heads == 0, "hidden_size must be divisible by num_heads");
  require(rotary_fraction > 0.0 && rotary_fraction <= 1.0, "rotary_fraction must lie in (0, 1]");
  const std::int64_t rot = rotary_dims();
  require(rot > 0 && rot % 2 == 0, "rotated dimension count must be a positive even integer");
}

ParamBreakdown param_breakdown(const ArchConfig& cfg) {
  cfg.validate();
  const std::int64_t h = cfg.hidden_size;
  const std::int64_t f = cfg.ffn_inner_size;
  const std::int64_t norm = cfg.norm_bias ? 2 * h : h;

  ParamBreakdown p;
  p.embedding = cfg.vocab_size * h;
  p.attention_per_layer = 4 * h * h + (cfg.qkv_bias ? 3 * h : 0) + (cfg.attn_out_bias ? h : 0);
  p.ffn_per_layer = 3 * h * f + (cfg.ffn_bias ? 2 * f + h : 0);
  p.norms_per_layer = 2 * norm;
  p.per_layer = p.attention_per_layer + p.ffn_per_layer + p.norms_per_layer;
  p.final_norm = cfg.final_norm ? norm : 0;
  p.head = cfg.tied_embeddings ? 0 : cfg.vocab_size * h;
  p.total = p.embedding + cfg.num_layers * p.per_layer + p.final_norm + p.head;
  return p;
}

std::int64_t param_count(const ArchConfig& cfg) { return param_breakdown(cfg).total; }

FlopsPerToken flops_per_token(const ArchConfig& cfg, std::int64_t context_length) {
  require(context_length >= 0, "context_length must be nonnegative");
  FlopsPerToken out;
  out.dense = 6.0 * static_cast<double>(param_count(cfg));
  out.attention = 12.0 * static_cast<double>(cfg.num_layers) * static_cast<double>(cfg.hidden_size) *
                  static_cast<double>(context_length);
  out.total = out.dense + out.attention;
  return out;
}

double mfu(double achieved_tflops_per_device, double peak_tflops_per_device) {
  require(peak_tflops_per_device > 0.0, "peak throughput must be positive");
  require(achieved_tflops_per_device > 0.0, "achieved throughput must be positive");
  return achieved_tflops_per_device / peak_tflops_per_device;
}

void TrainLayout::validate() const {
  require(data_parallel_degree > 0 && micro_batch_size > 0 && grad_accum_steps > 0 && sequence_length > 0,
          "layout fields must be positive");
}

std::int64_t layout_tokens(const TrainLayout& layout) {
  layout.validate();
  return layout.data_parallel_degree * layout.micro_batch_size * layout.grad_accum_steps *
         layout.sequence_length;
}

void CarbonInput::validate() const {
  require(gpu_hours >= 0.0 && avg_power_watts >= 0.0 && carbon_intensity >= 0.0,
          "carbon inputs must be nonnegative");
  require(pue >= 1.0, "PUE must be at least 1");
}

CarbonEstimate carbon(const CarbonInput& input) {
  input.validate();
  CarbonEstimate out;
  out.energy_wh = input.gpu_hours * input.avg_power_watts * input.pue;
  out.energy_mwh = out.energy_wh / 1e6;
  out.emissions_t = out.energy_wh / 1e3 * input.carbon_intensity / 1e3;
  return out;
}

double display_round(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(value * scale) / scale;
}

std::vector<std::int64_t> ffn_candidates(std::int64_t hidden_size) {
  std::set<std::int64_t> widths;
  for (std::int64_t k = 1; k <= 6; ++k) {
    const std::int64_t raw = (4 * k * hidden_size + 2) / 3;
    widths.insert((raw + 255) / 256 * 256);
  }
  widths.insert(8 * hidden_size / 3);
  widths.insert(4 * hidden_size);
  widths.insert(5632);
  widths.insert(6144);
  widths.insert(8192);
  return {widths.begin(), widths.end()};
}

SearchResult search_param_grid(const ArchConfig& base, std::int64_t target) {
  require(target > 0, "target parameter count must be positive");
  SearchResult result;
  result.target = target;
  for (const std::int64_t width : ffn_candidates(base.hidden_size)) {
    for (const bool norm_bias : {true, false}) {
      for (const bool final_norm : {true, false}) {
        for (const bool tied : {false, true}) {
          SearchCandidate c;
          c.config = base;
          c.config.ffn_inner_size = width;
          c.config.norm_bias = norm_bias;
          c.config.final_norm = final_norm;
          c.config.tied_embeddings = tied;
          c.params = param_count(c.config);
          c.deviation = c.params - target;
          c.relative_deviation = static_cast<double>(c.deviation) / static_cast<double>(target);
          result.ranked.push_back(c);
        }
      }
    }
  }
  result.grid_size = result.ranked.size();
  std::stable_sort(result.ranked.begin(), result.ranked.end(), [](const auto& a, const auto& b) {
    return std::llabs(a.deviation) < std::llabs(b.deviation);
  });
  result.exact = !result.ranked.empty() && result.ranked.front().deviation == 0;
  return result;
}

void to_json(nlohmann::json& j, const ArchConfig& c) {
  j = nlohmann::json{{"hidden_size", c.hidden_size},
                     {"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},
                     {"sequence_length", c.sequence_length},
                     {"vocab_size", c.vocab_size},
                     {"ffn_inner_size", c.ffn_inner_size},
                     {"rotary_fraction", c.rotary_fraction},
                     {"qkv_bias", c.qkv_bias},
                     {"ffn_bias", c.ffn_bias},
                     {"attn_out_bias", c.attn_out_bias},
                     {"norm_bias", c.norm_bias},
                     {"final_norm", c.final_norm},
                     {"tied_embeddings", c.tied_embeddings}};
}

void from_json(const nlohmann::json& j, ArchConfig& c) {
  c = ArchConfig{};
  j.at("hidden_size").get_to(c.hidden_size);
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("sequence_length").get_to(c.sequence_length);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("ffn_inner_size").get_to(c.ffn_inner_size);
  c.rotary_fraction = j.value("rotary_fraction", c.rotary_fraction);
  c.qkv_bias = j.value("qkv_bias", c.qkv_bias);
  c.ffn_bias = j.value("ffn_bias", c.ffn_bias);
  c.attn_out_bias = j.value("attn_out_bias", c.attn_out_bias);
  c.norm_bias = j.value("norm_bias", c.norm_bias);
  c.final_norm = j.value("final_norm", c.final_norm);
  c.tied_embeddings = j.value("tied_embeddings", c.tied_embeddings);
  c.validate();
}

void to_json(nlohmann::json& j, const ParamBreakdown& p) {
  j = nlohmann::json{{"embedding", p.embedding},
                     {"attention_per_layer", p.attention_per_layer},
                     {"ffn_per_layer", p.ffn_per_layer},
                     {"norms_per_layer", p.norms_per_layer},
                     {"per_layer", p.per_layer},
                     {"final_norm", p.final_norm},
                     {"head", p.head},
                     {"total", p.total}};
}

void to_json(nlohmann::json& j, const TrainLayout& l) {
  j = nlohmann::json{{"data_parallel_degree", l.data_parallel_degree},
                     {"micro_batch_size", l.micro_batch_size},
                     {"grad_accum_steps", l.grad_accum_steps},
                     {"sequence_length", l.sequence_length}};
}

void from_json(const nlohmann::json& j, TrainLayout& l) {
  j.at("data_parallel_degree").get_to(l.data_parallel_degree);
  j.at("micro_batch_size").get_to(l.micro_batch_size);
  j.at("grad_accum_steps").get_to(l.grad_accum_steps);
  j.at("sequence_length").get_to(l.sequence_length);
  l.validate();
}

void to_json(nlohmann::json& j, const CarbonInput& c) {
  j = nlohmann::json{{"gpu_hours", c.gpu_hours},
                     {"avg_power_watts", c.avg_power_watts},
                     {"pue", c.pue},
                     {"carbon_intensity", c.carbon_intensity}};
}

void from_json(const nlohmann::json& j, CarbonInput& c) {
  j.at("gpu_hours").get_to(c.gpu_hours);
  j.at("avg_power_watts").get_to(c.avg_power_watts);
  c.pue = j.value("pue", c.pue);
  c.carbon_intensity = j.value("carbon_intensity", c.carbon_intensity);
  c.validate();
}

}  // namespace ptk::perf
