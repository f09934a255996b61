#pragma once

// Data-mixture accounting: per-source sampling weights and token counts,
// consistency checks, category totals, token budgeting and a deterministic
// weighted interleaving of sources.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ptk::mixture {

enum class Category { Academic, Books, Web, Social, Law, Math, Wiki, Code, Instruction };

inline constexpr std::size_t kCategoryCount = 9;

std::string_view to_string(Category c) noexcept;
Category parse_category(std::string_view text);

struct DatasetEntry {
  std::string name;
  double weight = 0.0;
  std::uint64_t effective_tokens = 0;  ///< includes repetition across epochs
  double epochs = 1.0;
  Category category = Category::Web;
};

struct MixtureSpec {
  std::string name;
  std::vector<DatasetEntry> entries;
  std::uint64_t total_tokens = 0;
  /// Resolution the weights were published at (0 = exact). Only consulted
  /// when ValidationOptions::use_weight_quantum is set.
  double weight_quantum = 0.0;

  double weight_sum() const noexcept;
  const DatasetEntry* find(std::string_view source) const noexcept;
};

double per_epoch_size(const DatasetEntry& entry);

struct ValidationOptions {
  double weight_tol = 1e-3;
  double token_tol = 0.01;
  double total_tol = 1e-3;  ///< sum of effective tokens against total_tokens
  /// Discount the token residual by half the weight quantum times the total,
  /// i.e. accept any weight that rounds to the published value.
  bool use_weight_quantum = false;
};

struct EntryCheck {
  std::string name;
  double expected_tokens = 0.0;  ///< weight * total_tokens
  double token_residual = 0.0;   ///< |expected - effective| / effective
  double quantized_residual = 0.0;
  double per_epoch_tokens = 0.0;
  bool tokens_ok = false;
  bool epochs_ok = false;
};

struct ValidationReport {
  double weight_sum = 0.0;
  double weight_residual = 0.0;
  bool weight_ok = false;
  double token_sum = 0.0;
  double total_residual = 0.0;
  bool total_ok = false;
  std::vector<EntryCheck> entries;
  std::vector<std::string> violations;

  bool passed() const noexcept { return violations.empty(); }
};

ValidationReport validate(const MixtureSpec& spec, const ValidationOptions& options = {});

/// Category -> summed weight, in enum order; absent categories map to 0.
std::map<Category, double> category_breakdown(const MixtureSpec& spec);

struct BudgetLine {
  std::string name;
  double weight = 0.0;
  double tokens = 0.0;
  double epochs = 0.0;
  bool over_ceiling = false;
};

struct BudgetOptions {
  double weight_tol = 1e-3;
  double repetition_ceiling = 4.0;  ///< epochs above this are flagged
};

std::vector<BudgetLine> plan_budget(const std::map<std::string, double>& weights,
                                    std::uint64_t total_tokens,
                                    const std::map<std::string, double>& raw_sizes,
                                    const BudgetOptions& options = {});

/// Builds a mixture from a plan (zero-weight lines dropped) so it can be validated.
MixtureSpec to_mixture(const std::vector<BudgetLine>& plan, std::uint64_t total_tokens,
                       const MixtureSpec& categories_from);

/// A weight-only ablation mix that draws on pooled sources.
struct WeightMix {
  std::string name;
  std::map<std::string, double> weights;
};

struct AblationSet {
  std::uint64_t total_tokens = 0;
  double weight_tol = 1e-3;
  std::vector<WeightMix> mixes;
  /// Pooled source name -> member categories of the full mixture.
  std::map<std::string, std::vector<Category>> pools;
  /// Ablation source name -> full-mixture entry name, when they differ.
  std::map<std::string, std::string> aliases;

  const WeightMix& mix(std::string_view name) const;
};

/// Per-epoch sizes for every ablation source, derived from the full mixture.
std::map<std::string, double> ablation_raw_sizes(const AblationSet& set, const MixtureSpec& full);

// ---------------------------------------------------------------------------
// Sampling

struct Draw {
  std::size_t source = 0;
  std::uint64_t epoch = 0;
  std::uint64_t document = 0;  ///< index inside the source, permuted per epoch
};

struct SamplerOptions {
  double tokens_per_document = 1024.0;
};

struct SamplerSnapshot {
  std::uint64_t seed = 0;
  std::uint64_t position = 0;
  std::vector<std::uint64_t> counts;
};

/// Single-consumer iterator over documents. Draw k picks a source by inverting
/// the cumulative weights at the k-th SplitMix64 output, so the stream is a
/// pure function of (spec, seed) and every prefix is stable.
class Sampler {
 public:
  Sampler(const MixtureSpec& spec, std::uint64_t seed, SamplerOptions options = {});

  Draw next();
  void skip(std::uint64_t n);

  std::uint64_t position() const noexcept { return position_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }
  std::uint64_t documents_per_epoch(std::size_t source) const { return docs_per_epoch_.at(source); }
  /// Draws so far from `source` divided by its documents per epoch.
  double epoch_progress(std::size_t source) const;
  const std::string& source_name(std::size_t source) const { return names_.at(source); }
  std::size_t source_count() const noexcept { return names_.size(); }

  SamplerSnapshot snapshot() const;
  void restore(const SamplerSnapshot& snap);

 private:
  std::size_t pick(std::uint64_t position) const;

  std::uint64_t seed_;
  std::vector<std::string> names_;
  std::vector<double> cumulative_;
  std::vector<std::uint64_t> docs_per_epoch_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t position_ = 0;
};

std::vector<std::string> sample_stream(const MixtureSpec& spec, std::uint64_t seed, std::uint64_t n);

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const DatasetEntry& e);
void from_json(const nlohmann::json& j, DatasetEntry& e);
void to_json(nlohmann::json& j, const MixtureSpec& m);
void from_json(const nlohmann::json& j, MixtureSpec& m);
void to_json(nlohmann::json& j, const ValidationReport& r);
void to_json(nlohmann::json& j, const BudgetLine& b);
void from_json(const nlohmann::json& j, AblationSet& a);

}  // namespace ptk::mixture
