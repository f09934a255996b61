#pragma once

// Minibatch gradient noise on a least-squares problem, the log-log power-law
// fit used to read off its batch-size exponent, and the iterations-versus-
// tokens arithmetic for choosing a global batch.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ptk::batchscale {

/// Linear regression with Gaussian label noise. Per-example loss is
/// 0.5 * (x_i . theta - y_i)^2, so the per-example gradient is
/// (x_i . theta - y_i) * x_i.
template <typename Scalar = double>
struct ToyProblem {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix features;  ///< one example per row
  Vector targets;
  Vector theta;

  Eigen::Index size() const noexcept { return features.rows(); }
  Eigen::Index dim() const noexcept { return features.cols(); }

  Vector residuals() const { return features * theta - targets; }

  /// Row i is the gradient of example i.
  Matrix per_example_gradients() const { return residuals().asDiagonal() * features; }

  Vector full_gradient() const {
    return features.transpose() * residuals() / static_cast<Scalar>(size());
  }
};

struct ToyOptions {
  Eigen::Index examples = 20000;
  Eigen::Index dim = 8;
  double noise_std = 0.5;
  double theta_offset = 0.25;  ///< theta = true weights + offset, so gradients have signal
};

ToyProblem<double> make_least_squares(const ToyOptions& options, std::uint64_t seed);

/// Mean over coordinates of the population variance of per-example gradients.
double per_example_variance(const ToyProblem<double>& problem);

/// Empirical variance of the minibatch-mean gradient across `trials` batches
/// drawn without replacement, averaged over coordinates. Trials run in
/// parallel; the reduction is ordered, so results depend only on the seed.
double gradient_variance(const ToyProblem<double>& problem, Eigen::Index batch_size,
                         std::int64_t trials, std::uint64_t seed, unsigned threads = 0);

struct PowerLawFit {
  double exponent = 0.0;
  double coefficient = 0.0;
  double r_squared = 0.0;
  double max_log_residual = 0.0;
};

struct NoisePoint {
  double batch_size;
  double variance;
};

/// Least squares of log(variance) on log(batch_size).
PowerLawFit fit_inverse_scaling(std::span<const NoisePoint> points);

struct BatchRun {
  std::uint64_t batch_tokens = 0;
  std::uint64_t tokens_to_match = 0;

  double iterations() const noexcept {
    return static_cast<double>(tokens_to_match) / static_cast<double>(batch_tokens);
  }
};

struct TradeoffRow {
  BatchRun run;
  double iterations = 0.0;
  double iteration_speedup = 0.0;
  double token_overhead = 0.0;
};

std::vector<TradeoffRow> tradeoff(const BatchRun& baseline, std::span<const BatchRun> candidates);

void to_json(nlohmann::json& j, const BatchRun& r);
void from_json(const nlohmann::json& j, BatchRun& r);
void to_json(nlohmann::json& j, const TradeoffRow& r);
void to_json(nlohmann::json& j, const PowerLawFit& f);

}  // namespace ptk::batchscale
