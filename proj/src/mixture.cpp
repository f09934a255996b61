#include "ptk/mixture.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "ptk/error.hpp"
#include "ptk/random.hpp"

namespace ptk::mixture {

namespace {

constexpr std::array<std::string_view, kCategoryCount> kCategoryNames = {
    "Academic", "Books", "Web", "Social", "Law", "Math", "Wiki", "Code", "Instruction"};

std::string percent(double fraction) {
  std::ostringstream os;
  os.precision(4);
  os << fraction * 100.0 << "%";
  return os.str();
}

}  // namespace

std::string_view to_string(Category c) noexcept { return kCategoryNames[static_cast<std::size_t>(c)]; }

Category parse_category(std::string_view text) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == text) return static_cast<Category>(i);
  }
  throw InvalidArgument("unknown category '" + std::string(text) + "'");
}

double MixtureSpec::weight_sum() const noexcept {
  double sum = 0.0;
  for (const auto& e : entries) sum += e.weight;
  return sum;
}

const DatasetEntry* MixtureSpec::find(std::string_view source) const noexcept {
  for (const auto& e : entries) {
    if (e.name == source) return &e;
  }
  return nullptr;
}

double per_epoch_size(const DatasetEntry& entry) {
  require(entry.epochs > 0.0, "dataset '" + entry.name + "' has nonpositive epochs");
  return static_cast<double>(entry.effective_tokens) / entry.epochs;
}

ValidationReport validate(const MixtureSpec& spec, const ValidationOptions& options) {
  require(!spec.entries.empty(), "mixture has no entries");
  require(spec.total_tokens > 0, "mixture total_tokens must be positive");

  ValidationReport report;
  const auto total = static_cast<double>(spec.total_tokens);

  report.weight_sum = spec.weight_sum();
  report.weight_residual = std::abs(report.weight_sum - 1.0);
  report.weight_ok = report.weight_residual <= options.weight_tol;
  if (!report.weight_ok) {
    report.violations.push_back("weights sum to " + std::to_string(report.weight_sum) +
                                ", outside 1 +/- " + std::to_string(options.weight_tol));
  }

  const double slack = options.use_weight_quantum ? 0.5 * spec.weight_quantum * total : 0.0;
  for (const auto& e : spec.entries) {
    EntryCheck check;
    check.name = e.name;
    check.expected_tokens = e.weight * total;
    report.token_sum += static_cast<double>(e.effective_tokens);

    const double gap = std::abs(check.expected_tokens - static_cast<double>(e.effective_tokens));
    if (e.effective_tokens > 0) {
      const auto effective = static_cast<double>(e.effective_tokens);
      check.token_residual = gap / effective;
      check.quantized_residual = std::max(0.0, gap - slack) / effective;
    } else {
      check.token_residual = gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
      check.quantized_residual = std::max(0.0, gap - slack) == 0.0 ? 0.0 : check.token_residual;
    }
    const double residual = options.use_weight_quantum ? check.quantized_residual : check.token_residual;
    check.tokens_ok = residual <= options.token_tol;
    if (!check.tokens_ok) {
      report.violations.push_back(e.name + ": token residual " + percent(residual) + " exceeds " +
                                  percent(options.token_tol));
    }

    check.epochs_ok = e.epochs > 0.0 && e.effective_tokens > 0;
    if (check.epochs_ok) {
      check.per_epoch_tokens = per_epoch_size(e);
    } else {
      report.violations.push_back(e.name + ": per-epoch size is not positive");
    }
    report.entries.push_back(std::move(check));
  }

  report.total_residual = std::abs(report.token_sum - total) / total;
  report.total_ok = report.total_residual <= options.total_tol;
  if (!report.total_ok) {
    report.violations.push_back("effective tokens sum to " + std::to_string(report.token_sum) +
                                ", off the declared total by " + percent(report.total_residual));
  }
  return report;
}

std::map<Category, double> category_breakdown(const MixtureSpec& spec) {
  std::map<Category, double> out;
  for (std::size_t i = 0; i < kCategoryCount; ++i) out[static_cast<Category>(i)] = 0.0;
  for (const auto& e : spec.entries) out[e.category] += e.weight;
  return out;
}

std::vector<BudgetLine> plan_budget(const std::map<std::string, double>& weights,
                                    std::uint64_t total_tokens,
                                    const std::map<std::string, double>& raw_sizes,
                                    const BudgetOptions& options) {
  double sum = 0.0;
  for (const auto& [name, w] : weights) {
    require(w >= 0.0 && std::isfinite(w), "weight of '" + name + "' must be finite and nonnegative");
    sum += w;
  }
  require(std::abs(sum - 1.0) <= options.weight_tol,
          "weights sum to " + std::to_string(sum) + ", outside 1 +/- " + std::to_string(options.weight_tol));

  const auto total = static_cast<double>(total_tokens);
  std::vector<BudgetLine> plan;
  plan.reserve(weights.size());
  for (const auto& [name, w] : weights) {
    BudgetLine line;
    line.name = name;
    line.weight = w;
    line.tokens = w * total;
    if (w > 0.0) {
      const auto raw = raw_sizes.find(name);
      require(raw != raw_sizes.end(), "no raw size for weighted source '" + name + "'");
      require(raw->second > 0.0, "raw size of '" + name + "' must be positive");
      line.epochs = line.tokens / raw->second;
    }
    line.over_ceiling = line.epochs > options.repetition_ceiling;
    plan.push_back(std::move(line));
  }
  return plan;
}

MixtureSpec to_mixture(const std::vector<BudgetLine>& plan, std::uint64_t total_tokens,
                       const MixtureSpec& categories_from) {
  MixtureSpec out;
  out.name = categories_from.name + "-planned";
  out.total_tokens = total_tokens;
  for (const auto& line : plan) {
    if (line.weight <= 0.0) continue;
    const DatasetEntry* source = categories_from.find(line.name);
    require(source != nullptr, "no category known for '" + line.name + "'");
    DatasetEntry e;
    e.name = line.name;
    e.weight = line.weight;
    e.effective_tokens = static_cast<std::uint64_t>(std::llround(line.tokens));
    e.epochs = line.epochs;
    e.category = source->category;
    out.entries.push_back(std::move(e));
  }
  return out;
}

const WeightMix& AblationSet::mix(std::string_view name) const {
  for (const auto& m : mixes) {
    if (m.name == name) return m;
  }
  throw InvalidArgument("unknown ablation mix '" + std::string(name) + "'");
}

std::map<std::string, double> ablation_raw_sizes(const AblationSet& set, const MixtureSpec& full) {
  std::map<std::string, double> sizes;
  for (const auto& m : set.mixes) {
    for (const auto& [source, w] : m.weights) {
      if (sizes.contains(source)) continue;
      if (const auto pool = set.pools.find(source); pool != set.pools.end()) {
        double size = 0.0;
        for (const auto& e : full.entries) {
          if (std::find(pool->second.begin(), pool->second.end(), e.category) != pool->second.end()) {
            size += per_epoch_size(e);
          }
        }
        sizes[source] = size;
        continue;
      }
      const auto alias = set.aliases.find(source);
      const std::string& target = alias != set.aliases.end() ? alias->second : source;
      const DatasetEntry* entry = full.find(target);
      require(entry != nullptr, "ablation source '" + source + "' not found in the full mixture");
      sizes[source] = per_epoch_size(*entry);
    }
  }
  return sizes;
}

// ---------------------------------------------------------------------------

Sampler::Sampler(const MixtureSpec& spec, std::uint64_t seed, SamplerOptions options) : seed_(seed) {
  require(!spec.entries.empty(), "mixture has no entries");
  require(options.tokens_per_document > 0.0, "tokens_per_document must be positive");
  double running = 0.0;
  for (const auto& e : spec.entries) {
    require(e.weight >= 0.0 && std::isfinite(e.weight), "weight of '" + e.name + "' must be nonnegative");
    running += e.weight;
    names_.push_back(e.name);
    cumulative_.push_back(running);
    std::uint64_t docs = 1;
    if (e.epochs > 0.0 && e.effective_tokens > 0) {
      docs = static_cast<std::uint64_t>(
          std::max(1.0, std::round(per_epoch_size(e) / options.tokens_per_document)));
    }
    docs_per_epoch_.push_back(docs);
  }
  require(running > 0.0, "mixture weights sum to zero");
  counts_.assign(names_.size(), 0);
}

std::size_t Sampler::pick(std::uint64_t position) const {
  const double target = random::to_unit(random::splitmix_at(seed_, position)) * cumulative_.back();
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), target);
  if (it == cumulative_.end()) --it;
  // Skip trailing zero-weight sources that share the final cumulative value.
  while (it != cumulative_.begin() && *(it - 1) == *it) --it;
  return static_cast<std::size_t>(it - cumulative_.begin());
}

Draw Sampler::next() {
  Draw d;
  d.source = pick(position_++);
  const std::uint64_t count = counts_[d.source]++;
  const std::uint64_t docs = docs_per_epoch_[d.source];
  d.epoch = count / docs;
  const random::FeistelPermutation order(docs, random::derive_seed({seed_, d.source, d.epoch}));
  d.document = order(count % docs);
  return d;
}

void Sampler::skip(std::uint64_t n) {
  for (std::uint64_t i = 0; i < n; ++i) counts_[pick(position_++)]++;
}

double Sampler::epoch_progress(std::size_t source) const {
  return static_cast<double>(counts_.at(source)) / static_cast<double>(docs_per_epoch_.at(source));
}

SamplerSnapshot Sampler::snapshot() const { return {seed_, position_, counts_}; }

void Sampler::restore(const SamplerSnapshot& snap) {
  require(snap.seed == seed_, "snapshot was taken with a different seed");
  require(snap.counts.size() == counts_.size(), "snapshot source count does not match the mixture");
  position_ = snap.position;
  counts_ = snap.counts;
}

std::vector<std::string> sample_stream(const MixtureSpec& spec, std::uint64_t seed, std::uint64_t n) {
  Sampler sampler(spec, seed);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) out.push_back(sampler.source_name(sampler.next().source));
  return out;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const DatasetEntry& e) {
  j = nlohmann::json{{"name", e.name},
                     {"weight", e.weight},
                     {"effective_tokens", e.effective_tokens},
                     {"epochs", e.epochs},
                     {"category", to_string(e.category)}};
}

void from_json(const nlohmann::json& j, DatasetEntry& e) {
  j.at("name").get_to(e.name);
  j.at("weight").get_to(e.weight);
  j.at("effective_tokens").get_to(e.effective_tokens);
  j.at("epochs").get_to(e.epochs);
  e.category = parse_category(j.at("category").get<std::string>());
}

void to_json(nlohmann::json& j, const MixtureSpec& m) {
  j = nlohmann::json{{"name", m.name}, {"total_tokens", m.total_tokens}, {"entries", m.entries}};
  if (m.weight_quantum > 0.0) j["weight_quantum"] = m.weight_quantum;
}

void from_json(const nlohmann::json& j, MixtureSpec& m) {
  m.name = j.value("name", std::string{});
  j.at("entries").get_to(m.entries);
  if (j.contains("total_tokens")) {
    j.at("total_tokens").get_to(m.total_tokens);
  } else {
    m.total_tokens = 0;
    for (const auto& e : m.entries) m.total_tokens += e.effective_tokens;
  }
  m.weight_quantum = j.value("weight_quantum", 0.0);
}

void to_json(nlohmann::json& j, const ValidationReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"name", e.name},
                       {"expected_tokens", e.expected_tokens},
                       {"token_residual", e.token_residual},
                       {"quantized_residual", e.quantized_residual},
                       {"per_epoch_tokens", e.per_epoch_tokens},
                       {"tokens_ok", e.tokens_ok},
                       {"epochs_ok", e.epochs_ok}});
  }
  j = nlohmann::json{{"passed", r.passed()},
                     {"weight_sum", r.weight_sum},
                     {"weight_residual", r.weight_residual},
                     {"weight_ok", r.weight_ok},
                     {"token_sum", r.token_sum},
                     {"total_residual", r.total_residual},
                     {"total_ok", r.total_ok},
                     {"entries", std::move(entries)},
                     {"violations", r.violations}};
}

void to_json(nlohmann::json& j, const BudgetLine& b) {
  j = nlohmann::json{{"name", b.name},
                     {"weight", b.weight},
                     {"tokens", b.tokens},
                     {"epochs", b.epochs},
                     {"over_ceiling", b.over_ceiling}};
}

void from_json(const nlohmann::json& j, AblationSet& a) {
  j.at("total_tokens").get_to(a.total_tokens);
  a.weight_tol = j.value("weight_tolerance", 1e-3);
  a.mixes.clear();
  for (const auto& m : j.at("mixes")) {
    WeightMix mix;
    m.at("name").get_to(mix.name);
    m.at("weights").get_to(mix.weights);
    a.mixes.push_back(std::move(mix));
  }
  a.pools.clear();
  if (j.contains("pools")) {
    for (const auto& [pool, cats] : j.at("pools").items()) {
      auto& members = a.pools[pool];
      for (const auto& c : cats) members.push_back(parse_category(c.get<std::string>()));
    }
  }
  a.aliases = j.value("aliases", std::map<std::string, std::string>{});
}

}  // namespace ptk::mixture
