#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ptk/error.hpp"
#include "ptk/perfmodel.hpp"
#include "ptk/random.hpp"
#include "ptk/refmodel.hpp"

using namespace ptk::ref;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  ptk::random::SplitMix64 rng(seed);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("rope at position zero is the identity") {
  const RopeSpec spec{64, 0.25, 10000.0};
  const MatrixXd x = random_matrix(5, 64, 1);
  const std::vector<std::int64_t> zeros(5, 0);
  CHECK(rope_apply(x, zeros, spec) == x);
}

TEST_CASE("rope leaves the unrotated tail bit-identical") {
  const RopeSpec spec{64, 0.25, 10000.0};
  CHECK(spec.rotary_dims() == 16);
  const MatrixXd x = random_matrix(8, 64, 2);
  const auto y = rope_apply(x, default_positions(8), spec);
  CHECK(y.rightCols(48) == x.rightCols(48));
  CHECK(y.leftCols(16) != x.leftCols(16));
}

TEST_CASE("rope preserves the norm of the rotated slice") {
  const RopeSpec spec{64, 0.25, 10000.0};
  const MatrixXd x = random_matrix(32, 64, 3);
  std::vector<std::int64_t> pos;
  ptk::random::SplitMix64 rng(4);
  for (int i = 0; i < 32; ++i) pos.push_back(static_cast<std::int64_t>(rng.below(100000)));
  const auto y = rope_apply(x, pos, spec);
  for (Eigen::Index r = 0; r < 32; ++r) {
    const double a = x.row(r).head(16).norm();
    CHECK(std::abs(y.row(r).head(16).norm() - a) / a < 1e-12);
  }
}

TEST_CASE("rotated dot product depends only on the offset") {
  const RopeSpec spec{64, 0.25, 10000.0};
  const MatrixXd q = random_matrix(1, 64, 5);
  const MatrixXd k = random_matrix(1, 64, 6);
  auto dot = [&](std::int64_t pq, std::int64_t pk) {
    const std::vector<std::int64_t> a{pq}, b{pk};
    return rope_apply(q, a, spec).row(0).head(16).dot(rope_apply(k, b, spec).row(0).head(16));
  };
  CHECK(std::abs(dot(3, 7) - dot(103, 107)) < 1e-10);
  CHECK(std::abs(dot(3, 7) - dot(3, 8)) > 1e-6);
}

TEST_CASE("rope is stateless") {
  const RopeSpec spec{8, 0.5, 10000.0};
  const MatrixXd x = random_matrix(3, 8, 7);
  const std::vector<std::int64_t> p{4, 9, 2};
  CHECK(rope_apply(x, p, spec) == rope_apply(x, p, spec));
  const auto all = rope_apply(x, p, spec);
  for (Eigen::Index r = 0; r < 3; ++r) {
    const std::vector<std::int64_t> one{p[static_cast<std::size_t>(r)]};
    CHECK(rope_apply(x.row(r), one, spec) == all.row(r));
  }
}

TEST_CASE("rope spec errors") {
  CHECK_THROWS_AS((RopeSpec{4, 0.25, 10000.0}.validate()), ptk::InvalidArgument);
  CHECK_THROWS_AS((RopeSpec{6, 0.5, 10000.0}.validate()), ptk::InvalidArgument);
  const MatrixXd x = random_matrix(2, 8, 1);
  const std::vector<std::int64_t> one{0};
  CHECK_THROWS_AS(rope_apply(x, one, RopeSpec{8, 0.5, 10000.0}), ptk::InvalidArgument);
}

TEST_CASE("block output keeps the input shape and is causal") {
  const auto cfg = toy_config();
  const auto params = init_params<double>(cfg, 11);
  const MatrixXd x = random_matrix(10, 16, 12);
  const MatrixXd y = block_forward(params.layers[0], x, cfg);
  CHECK(y.rows() == 10);
  CHECK(y.cols() == 16);

  MatrixXd bumped = x;
  bumped.row(6) += random_matrix(1, 16, 13);
  const MatrixXd y2 = block_forward(params.layers[0], bumped, cfg);
  CHECK(y2.topRows(6) == y.topRows(6));
  CHECK(y2.row(6) != y.row(6));
}

TEST_CASE("prefix of the full output equals the output of the prefix") {
  const auto cfg = toy_config();
  const auto params = init_params<double>(cfg, 21);
  const MatrixXd x = random_matrix(16, 16, 22);
  const MatrixXd full = block_forward(params.layers[1], x, cfg);
  for (Eigen::Index t = 1; t <= 16; ++t) {
    const MatrixXd part = block_forward(params.layers[1], MatrixXd(x.topRows(t)), cfg);
    REQUIRE(max_abs(part - full.topRows(t)) < 1e-12);
  }
}

TEST_CASE("block rejects mismatched shapes") {
  const auto cfg = toy_config();
  const auto params = init_params<double>(cfg, 1);
  CHECK_THROWS_AS(block_forward(params.layers[0], random_matrix(4, 15, 1), cfg), ptk::InvalidArgument);
  CHECK_THROWS_AS(block_forward(params.layers[0], random_matrix(17, 16, 1), cfg), ptk::InvalidArgument);
}

TEST_CASE("element counts agree with the parameter calculator") {
  auto cfg = toy_config();
  for (bool tied : {false, true}) {
    for (bool nb : {false, true}) {
      for (bool fb : {false, true}) {
        cfg.tied_embeddings = tied;
        cfg.norm_bias = nb;
        cfg.ffn_bias = fb;
        const auto p = zero_params<double>(cfg);
        const auto breakdown = ptk::perf::param_breakdown(cfg);
        CHECK(element_count(p.layers[0]) == breakdown.per_layer);
        CHECK(element_count(p) == ptk::perf::param_count(cfg));
      }
    }
  }
}

TEST_CASE("flatten and unflatten are inverse") {
  const auto cfg = toy_config();
  const auto p = init_params<double>(cfg, 3);
  const VectorXd flat = flatten(p);
  CHECK(flat.size() == element_count(p));
  CHECK(flatten(unflatten(flat, p)) == flat);
  CHECK_THROWS_AS(unflatten(VectorXd(flat.head(10)), p), ptk::InvalidArgument);
}

TEST_CASE("z-loss closed forms") {
  const Eigen::RowVector2d two(0.0, 0.0);
  CHECK(z_loss(two, 1.0) == doctest::Approx(std::log(2.0) * std::log(2.0)).epsilon(1e-15));
  Eigen::RowVectorXd c = Eigen::RowVectorXd::Constant(32, 1.5);
  CHECK(z_loss(c, 0.3) == doctest::Approx(0.3 * std::pow(1.5 + std::log(32.0), 2)).epsilon(1e-14));
  Eigen::RowVectorXd shifted = random_matrix(1, 32, 9).row(0);
  const double log_z = std::log(shifted.array().exp().sum());
  shifted.array() -= log_z;
  CHECK(z_loss(shifted, 1.0) < 1e-28);
  Eigen::RowVectorXd huge = Eigen::RowVectorXd::Constant(4, 1000.0);
  CHECK(std::isfinite(z_loss(huge, 1.0)));
  CHECK_THROWS_AS(z_loss(Eigen::RowVectorXd(), 1.0), ptk::InvalidArgument);
  CHECK_THROWS_AS(z_loss(two, -1.0), ptk::InvalidArgument);
}

TEST_CASE("z-loss is nonnegative and its shift derivative is 2 c log Z") {
  ptk::random::SplitMix64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::RowVectorXd logits = 3.0 * random_matrix(1, 32, rng()).row(0);
    const double coef = 0.1 + rng.uniform();
    CHECK(z_loss(logits, coef) >= 0.0);
    const double log_z = std::log(logits.array().exp().sum());
    const Differentiable f = [&](const VectorXd& s, VectorXd* g) {
      const Eigen::RowVectorXd moved = logits.array() + s(0);
      const double lz = std::log(moved.array().exp().sum());
      if (g != nullptr) *g = VectorXd::Constant(1, 2.0 * coef * lz);
      return z_loss(moved, coef);
    };
    const auto r = grad_check(f, VectorXd::Zero(1));
    CHECK(r.max_relative_error < 1e-8);
    CHECK(r.worst_analytic == doctest::Approx(2.0 * coef * log_z));
  }
}

TEST_CASE("grad check of a quadratic") {
  const MatrixXd a = random_matrix(6, 6, 41);
  const VectorXd theta = random_matrix(6, 1, 42).col(0);
  const Differentiable f = [&](const VectorXd& x, VectorXd* g) {
    if (g != nullptr) *g = (a + a.transpose()) * x;
    return x.dot(a * x);
  };
  CHECK(grad_check(f, theta).max_relative_error < 1e-9);

  const Differentiable wrong = [&](const VectorXd& x, VectorXd* g) {
    if (g != nullptr) *g = -(a + a.transpose()) * x;
    return x.dot(a * x);
  };
  CHECK(grad_check(wrong, theta).max_relative_error == doctest::Approx(2.0).epsilon(1e-3));

  const Differentiable blowup = [](const VectorXd& x, VectorXd* g) {
    if (g != nullptr) *g = VectorXd::Ones(x.size());
    return x(0) > 1.0 ? std::numeric_limits<double>::infinity() : x.sum();
  };
  CHECK_THROWS_AS(grad_check(blowup, VectorXd::Constant(1, 1.0)), ptk::ValidationFailure);
}

TEST_CASE("toy model gradient passes the finite-difference check") {
  const auto r = check_model_gradient(toy_config(), 0, 8);
  CHECK(r.max_relative_error < 1e-4);
  CHECK(r.evaluations == 2 * element_count(init_params<double>(toy_config(), 0)) + 1);
  const auto negated = check_model_gradient(toy_config(), 0, 8, {}, {}, true);
  CHECK(negated.max_relative_error == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("gradient check across configuration variants") {
  auto cfg = toy_config();
  cfg.tied_embeddings = true;
  cfg.ffn_bias = true;
  cfg.attn_out_bias = true;
  // This loss is about 138, so one ulp over 2h is 1.4e-9 where the key bias
  // gradient is exactly zero; the floor scales with the loss.
  GradCheckOptions floor;
  floor.epsilon = 1e-4;
  CHECK(check_model_gradient(cfg, 5, 6, {}, floor).max_relative_error < 1e-4);
  cfg = toy_config();
  cfg.final_norm = false;
  cfg.norm_bias = false;
  cfg.qkv_bias = false;
  cfg.rotary_fraction = 1.0;
  LossOptions no_z;
  no_z.z_coefficient = 0.0;
  CHECK(check_model_gradient(cfg, 6, 5, no_z).max_relative_error < 1e-4);
}

TEST_CASE("forward passes are reproducible and scalar-generic") {
  const auto cfg = toy_config();
  const auto p = init_params<double>(cfg, 8);
  const std::vector<std::int64_t> tokens{1, 5, 9, 31, 0, 2};
  const double a = model_loss(p, cfg, tokens);
  CHECK(model_loss(p, cfg, tokens) == a);

  const auto pf = init_params<float>(cfg, 8);
  CHECK(static_cast<double>(model_loss(pf, cfg, tokens)) == doctest::Approx(a).epsilon(1e-4));

  const std::vector<std::int64_t> bad{32};
  CHECK_THROWS_AS(model_loss(p, cfg, bad), ptk::InvalidArgument);
}

TEST_CASE("parameter files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "ptk_refmodel_test";
  std::filesystem::create_directories(dir);
  const std::string prefix = (dir / "toy").string();
  auto cfg = toy_config();
  cfg.tied_embeddings = true;
  const auto p = init_params<double>(cfg, 77);
  save_params(p, cfg, prefix);
  CHECK(std::filesystem::file_size(prefix + ".bin") == static_cast<std::uintmax_t>(8 * element_count(p)));

  ArchConfig loaded_cfg;
  const auto q = load_params(prefix, &loaded_cfg);
  CHECK(flatten(q) == flatten(p));
  CHECK(loaded_cfg.tied_embeddings);
  CHECK(q.head.size() == 0);

  std::filesystem::resize_file(prefix + ".bin", 80);
  CHECK_THROWS(load_params(prefix));
  CHECK_THROWS(load_params((dir / "missing").string()));
  std::filesystem::remove_all(dir);
}
