#include "ptk/batchscale.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "ptk/error.hpp"
#include "ptk/random.hpp"

namespace ptk::batchscale {

ToyProblem<double> make_least_squares(const ToyOptions& options, std::uint64_t seed) {
  require(options.examples > 0 && options.dim > 0, "toy problem needs examples and dimensions");
  require(options.noise_std >= 0.0, "noise_std must be nonnegative");
  random::SplitMix64 rng(random::derive_seed({seed, 0x70790001ULL}));

  ToyProblem<double> p;
  p.features.resize(options.examples, options.dim);
  for (Eigen::Index i = 0; i < options.examples; ++i) {
    for (Eigen::Index d = 0; d < options.dim; ++d) p.features(i, d) = rng.normal();
  }
  Eigen::VectorXd truth(options.dim);
  for (Eigen::Index d = 0; d < options.dim; ++d) truth(d) = rng.normal();
  p.targets = p.features * truth;
  for (Eigen::Index i = 0; i < options.examples; ++i) p.targets(i) += options.noise_std * rng.normal();
  p.theta = truth.array() + options.theta_offset;
  return p;
}

double per_example_variance(const ToyProblem<double>& problem) {
  const Eigen::MatrixXd g = problem.per_example_gradients();
  const Eigen::RowVectorXd mean = g.colwise().mean();
  return (g.rowwise() - mean).array().square().colwise().mean().mean();
}

double gradient_variance(const ToyProblem<double>& problem, Eigen::Index batch_size,
                         std::int64_t trials, std::uint64_t seed, unsigned threads) {
  const Eigen::Index n = problem.size();
  require(batch_size >= 1, "batch_size must be positive");
  require(batch_size <= n, "batch_size exceeds the dataset");
  require(trials >= 2, "at least two trials are needed for a variance");

  const Eigen::MatrixXd grads = problem.per_example_gradients();
  const Eigen::Index dim = problem.dim();
  Eigen::MatrixXd means(dim, trials);

  auto run_trial = [&](std::int64_t t, std::vector<Eigen::Index>& pool) {
    random::SplitMix64 rng(random::derive_seed({seed, static_cast<std::uint64_t>(t)}));
    std::iota(pool.begin(), pool.end(), Eigen::Index{0});
    for (Eigen::Index k = 0; k < batch_size; ++k) {
      const auto j = k + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n - k)));
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
    }
    // Sum in index order so equal batches give bit-equal means.
    std::sort(pool.begin(), pool.begin() + batch_size);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    for (Eigen::Index k = 0; k < batch_size; ++k) sum += grads.row(pool[static_cast<std::size_t>(k)]).transpose();
    means.col(t) = sum / static_cast<double>(batch_size);
  };

  unsigned workers = threads != 0 ? threads : std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::int64_t>(workers, trials));
  if (workers <= 1) {
    std::vector<Eigen::Index> pool(static_cast<std::size_t>(n));
    for (std::int64_t t = 0; t < trials; ++t) run_trial(t, pool);
  } else {
    std::vector<std::jthread> team;
    for (unsigned w = 0; w < workers; ++w) {
      team.emplace_back([&, w] {
        std::vector<Eigen::Index> pool(static_cast<std::size_t>(n));
        for (std::int64_t t = w; t < trials; t += workers) run_trial(t, pool);
      });
    }
  }

  // Shifted by the first trial: identical trials yield exactly zero.
  const Eigen::MatrixXd shifted = means.colwise() - means.col(0);
  const Eigen::VectorXd s1 = shifted.rowwise().sum();
  const Eigen::VectorXd s2 = shifted.array().square().rowwise().sum();
  const auto count = static_cast<double>(trials);
  const Eigen::VectorXd var = (s2.array() - s1.array().square() / count) / (count - 1.0);
  return var.mean();
}

PowerLawFit fit_inverse_scaling(std::span<const NoisePoint> points) {
  require(points.size() >= 3, "power-law fit needs at least three points");
  const auto m = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd design(m, 2);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& p = points[static_cast<std::size_t>(i)];
    require(p.batch_size > 0.0 && p.variance > 0.0, "power-law fit needs positive batch sizes and variances");
    design(i, 0) = 1.0;
    design(i, 1) = std::log(p.batch_size);
    y(i) = std::log(p.variance);
  }
  const Eigen::Vector2d beta = design.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd residual = y - design * beta;

  PowerLawFit fit;
  fit.exponent = beta(1);
  fit.coefficient = std::exp(beta(0));
  fit.max_log_residual = residual.cwiseAbs().maxCoeff();
  const double ss_tot = (y.array() - y.mean()).square().sum();
  fit.r_squared = ss_tot > 0.0 ? 1.0 - residual.squaredNorm() / ss_tot : 1.0;
  return fit;
}

std::vector<TradeoffRow> tradeoff(const BatchRun& baseline, std::span<const BatchRun> candidates) {
  require(baseline.batch_tokens > 0 && baseline.tokens_to_match > 0, "baseline fields must be positive");
  std::vector<TradeoffRow> rows;
  rows.reserve(candidates.size());
  for (const auto& c : candidates) {
    require(c.batch_tokens > 0, "candidate batch must be positive");
    require(c.tokens_to_match > 0, "candidate tokens must be positive");
    TradeoffRow row;
    row.run = c;
    row.iterations = c.iterations();
    row.iteration_speedup = baseline.iterations() / row.iterations;
    row.token_overhead = static_cast<double>(c.tokens_to_match) / static_cast<double>(baseline.tokens_to_match);
    rows.push_back(row);
  }
  return rows;
}

void to_json(nlohmann::json& j, const BatchRun& r) {
  j = nlohmann::json{{"batch_tokens", r.batch_tokens}, {"tokens_to_match", r.tokens_to_match}};
}

void from_json(const nlohmann::json& j, BatchRun& r) {
  j.at("batch_tokens").get_to(r.batch_tokens);
  j.at("tokens_to_match").get_to(r.tokens_to_match);
}

void to_json(nlohmann::json& j, const TradeoffRow& r) {
  j = nlohmann::json{{"batch_tokens", r.run.batch_tokens},
                     {"tokens_to_match", r.run.tokens_to_match},
                     {"iterations", r.iterations},
                     {"iteration_speedup", r.iteration_speedup},
                     {"token_overhead", r.token_overhead}};
}

void to_json(nlohmann::json& j, const PowerLawFit& f) {
  j = nlohmann::json{{"exponent", f.exponent},
                     {"coefficient", f.coefficient},
                     {"r_squared", f.r_squared},
                     {"max_log_residual", f.max_log_residual}};
}

}  // namespace ptk::batchscale
