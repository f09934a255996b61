#pragma once

// Reference decoder numerics at desk scale: partial rotary position
// embedding, LayerNorm with optional bias, attention with optional QKV
// biases, a gated SiLU feed-forward, and the z-loss on the softmax
// normalizer. Forward passes are templated on the scalar type; the hand
// written backward pass is checked against central differences.
//
// Layout conventions: activations are (positions x features); linear maps
// are applied as `x * W` with W of shape (in x out); bias vectors are row
// vectors and are empty when the configuration disables them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ptk/error.hpp"
#include "ptk/perfmodel.hpp"
#include "ptk/random.hpp"

namespace ptk::ref {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using perf::ArchConfig;

/// Default toy configuration: small enough that central differences over
/// every parameter are cheap. The rotary fraction is 1/2 because a quarter
/// of a 4-wide head is a single (unpairable) dimension.
inline ArchConfig toy_config() {
  ArchConfig c;
  c.hidden_size = 16;
  c.num_layers = 2;
  c.num_heads = 4;
  c.sequence_length = 16;
  c.vocab_size = 32;
  c.ffn_inner_size = 32;
  c.rotary_fraction = 0.5;
  c.qkv_bias = true;
  c.ffn_bias = false;
  c.attn_out_bias = false;
  c.norm_bias = true;
  c.final_norm = true;
  c.tied_embeddings = false;
  return c;
}

// ---------------------------------------------------------------------------
// Rotary position embedding

struct RopeSpec {
  std::int64_t head_dim = 64;
  double rotary_fraction = 0.25;
  double base = 10000.0;

  std::int64_t rotary_dims() const {
    const double dims = rotary_fraction * static_cast<double>(head_dim);
    const auto rounded = static_cast<std::int64_t>(std::llround(dims));
    require(std::abs(dims - static_cast<double>(rounded)) < 1e-9, "rotary_fraction * head_dim must be an integer");
    return rounded;
  }

  void validate() const {
    require(head_dim > 0, "head_dim must be positive");
    require(rotary_fraction > 0.0 && rotary_fraction <= 1.0, "rotary_fraction must lie in (0, 1]");
    require(base > 0.0, "rotary base must be positive");
    const std::int64_t rot = rotary_dims();
    require(rot > 0 && rot % 2 == 0, "rotated dimension count must be a positive even integer");
  }

  /// Angular frequency of pair j: base^(-2j / rotary_dims).
  double frequency(std::int64_t pair) const {
    return std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(rotary_dims()));
  }
};

inline RopeSpec rope_spec(const ArchConfig& cfg) {
  return RopeSpec{cfg.head_dim(), cfg.rotary_fraction, 10000.0};
}

namespace detail {

/// Rotates columns [offset, offset + rotary_dims) of every row in place.
/// Pairs are interleaved: (offset + 2j, offset + 2j + 1). `direction` is +1
/// for the forward rotation and -1 for its transpose.
template <typename Scalar>
void rotate_rows(Matrix<Scalar>& x, Eigen::Index offset, std::span<const std::int64_t> positions,
                 const RopeSpec& spec, double direction) {
  const std::int64_t pairs = spec.rotary_dims() / 2;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto pos = static_cast<double>(positions[static_cast<std::size_t>(r)]);
    for (std::int64_t j = 0; j < pairs; ++j) {
      const double angle = direction * pos * spec.frequency(j);
      const auto c = static_cast<Scalar>(std::cos(angle));
      const auto s = static_cast<Scalar>(std::sin(angle));
      const Eigen::Index a = offset + 2 * j;
      const Scalar u = x(r, a);
      const Scalar v = x(r, a + 1);
      x(r, a) = u * c - v * s;
      x(r, a + 1) = u * s + v * c;
    }
  }
}

}  // namespace detail

/// Rotates the leading rotary dimensions of each row (one head-dim vector per
/// row) by its position; trailing dimensions pass through untouched.
template <typename Derived>
Matrix<typename Derived::Scalar> rope_apply(const Eigen::MatrixBase<Derived>& vectors,
                                            std::span<const std::int64_t> positions, const RopeSpec& spec) {
  spec.validate();
  require(vectors.cols() == spec.head_dim, "vector width must equal head_dim");
  require(static_cast<std::size_t>(vectors.rows()) == positions.size(), "one position per vector is required");
  Matrix<typename Derived::Scalar> out = vectors;
  detail::rotate_rows(out, 0, positions, spec, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
struct LayerParams {
  Matrix<Scalar> wq, wk, wv, wo;
  RowVector<Scalar> bq, bk, bv, bo;
  Matrix<Scalar> w_gate, w_up, w_down;
  RowVector<Scalar> b_gate, b_up, b_down;
  RowVector<Scalar> ln1_scale, ln1_bias, ln2_scale, ln2_bias;
};

template <typename Scalar>
struct ModelParams {
  Matrix<Scalar> embedding;  ///< vocab x hidden
  std::vector<LayerParams<Scalar>> layers;
  RowVector<Scalar> final_scale, final_bias;
  Matrix<Scalar> head;  ///< hidden x vocab; empty when tied
};

/// Calls f(name, tensor) for every tensor in a fixed order, empties included.
template <typename Layer, typename F>
void visit_layer(Layer& p, const std::string& prefix, F&& f) {
  f(prefix + "attn.wq", p.wq);
  f(prefix + "attn.wk", p.wk);
  f(prefix + "attn.wv", p.wv);
  f(prefix + "attn.bq", p.bq);
  f(prefix + "attn.bk", p.bk);
  f(prefix + "attn.bv", p.bv);
  f(prefix + "attn.wo", p.wo);
  f(prefix + "attn.bo", p.bo);
  f(prefix + "ffn.w_gate", p.w_gate);
  f(prefix + "ffn.w_up", p.w_up);
  f(prefix + "ffn.w_down", p.w_down);
  f(prefix + "ffn.b_gate", p.b_gate);
  f(prefix + "ffn.b_up", p.b_up);
  f(prefix + "ffn.b_down", p.b_down);
  f(prefix + "ln1.scale", p.ln1_scale);
  f(prefix + "ln1.bias", p.ln1_bias);
  f(prefix + "ln2.scale", p.ln2_scale);
  f(prefix + "ln2.bias", p.ln2_bias);
}

template <typename Model, typename F>
void visit(Model& p, F&& f) {
  f(std::string("embedding"), p.embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) visit_layer(p.layers[l], "layers." + std::to_string(l) + ".", f);
  f(std::string("final_norm.scale"), p.final_scale);
  f(std::string("final_norm.bias"), p.final_bias);
  f(std::string("head"), p.head);
}

template <typename Scalar>
std::int64_t element_count(const LayerParams<Scalar>& layer) {
  std::int64_t n = 0;
  visit_layer(layer, "", [&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

template <typename Scalar>
std::int64_t element_count(const ModelParams<Scalar>& p) {
  std::int64_t n = 0;
  visit(p, [&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

/// Zero tensors with the shapes implied by `cfg`.
template <typename Scalar>
ModelParams<Scalar> zero_params(const ArchConfig& cfg) {
  cfg.validate();
  const auto h = static_cast<Eigen::Index>(cfg.hidden_size);
  const auto f = static_cast<Eigen::Index>(cfg.ffn_inner_size);
  const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
  auto row = [](bool on, Eigen::Index n) { return on ? RowVector<Scalar>::Zero(n).eval() : RowVector<Scalar>(); };

  ModelParams<Scalar> p;
  p.embedding = Matrix<Scalar>::Zero(v, h);
  p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (auto& l : p.layers) {
    l.wq = l.wk = l.wv = l.wo = Matrix<Scalar>::Zero(h, h);
    l.bq = l.bk = l.bv = row(cfg.qkv_bias, h);
    l.bo = row(cfg.attn_out_bias, h);
    l.w_gate = l.w_up = Matrix<Scalar>::Zero(h, f);
    l.w_down = Matrix<Scalar>::Zero(f, h);
    l.b_gate = l.b_up = row(cfg.ffn_bias, f);
    l.b_down = row(cfg.ffn_bias, h);
    l.ln1_scale = l.ln2_scale = RowVector<Scalar>::Zero(h);
    l.ln1_bias = l.ln2_bias = row(cfg.norm_bias, h);
  }
  if (cfg.final_norm) {
    p.final_scale = RowVector<Scalar>::Zero(h);
    p.final_bias = row(cfg.norm_bias, h);
  }
  if (!cfg.tied_embeddings) p.head = Matrix<Scalar>::Zero(h, v);
  return p;
}

/// Gaussian initialisation: weights ~ N(0, 1/fan_in), norm scales ~ 1 + N(0, 0.1^2),
/// biases and embeddings ~ N(0, 0.1^2) and N(0, 1) respectively.
template <typename Scalar>
ModelParams<Scalar> init_params(const ArchConfig& cfg, std::uint64_t seed) {
  ModelParams<Scalar> p = zero_params<Scalar>(cfg);
  random::SplitMix64 rng(random::derive_seed({seed, 0x7265666dULL}));
  visit(p, [&](const std::string& name, auto& t) {
    double mean = 0.0;
    double stddev = 0.1;
    if (name.ends_with(".scale")) {
      mean = 1.0;
    } else if (name == "embedding") {
      stddev = 1.0;
    } else if (t.rows() > 1) {
      stddev = 1.0 / std::sqrt(static_cast<double>(t.rows()));
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(mean + stddev * rng.normal());
  });
  return p;
}

/// Concatenates every tensor (column-major) in visit order.
template <typename Scalar>
ColVector<Scalar> flatten(const ModelParams<Scalar>& p) {
  ColVector<Scalar> out(element_count(p));
  Eigen::Index at = 0;
  visit(p, [&](const std::string&, const auto& t) {
    out.segment(at, t.size()) = Eigen::Map<const ColVector<Scalar>>(t.data(), t.size());
    at += t.size();
  });
  return out;
}

/// Inverse of flatten; `shape` supplies the tensor shapes.
template <typename Scalar>
ModelParams<Scalar> unflatten(const ColVector<Scalar>& flat, const ModelParams<Scalar>& shape) {
  require(flat.size() == element_count(shape), "flat vector length does not match the parameter shapes");
  ModelParams<Scalar> p = shape;
  Eigen::Index at = 0;
  visit(p, [&](const std::string&, auto& t) {
    Eigen::Map<ColVector<Scalar>>(t.data(), t.size()) = flat.segment(at, t.size());
    at += t.size();
  });
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

inline constexpr double kNormEps = 1e-5;

template <typename Scalar>
struct NormCache {
  Matrix<Scalar> normalized;       ///< (x - mean) / std, before scale and bias
  ColVector<Scalar> inv_std;
};

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const RowVector<Scalar>& scale, const RowVector<Scalar>& bias,
                          NormCache<Scalar>* cache = nullptr) {
  const ColVector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  const ColVector<Scalar> var = centered.array().square().rowwise().mean();
  const ColVector<Scalar> inv_std = (var.array() + static_cast<Scalar>(kNormEps)).rsqrt();
  Matrix<Scalar> normalized = inv_std.asDiagonal() * centered;
  Matrix<Scalar> y = normalized * scale.asDiagonal();
  if (bias.size() > 0) y.rowwise() += bias;
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> affine(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const RowVector<Scalar>& b) {
  Matrix<Scalar> y = x * w;
  if (b.size() > 0) y.rowwise() += b;
  return y;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  return Scalar(1) / (Scalar(1) + exp(-x));
}

template <typename Scalar>
struct BlockCache {
  NormCache<Scalar> norm1, norm2;
  Matrix<Scalar> n1, n2;
  Matrix<Scalar> q, k, v;  ///< q and k after rotation
  std::vector<Matrix<Scalar>> probs;  ///< per head, lower-triangular
  Matrix<Scalar> attn;  ///< concatenated head outputs
  Matrix<Scalar> gate, up, hidden;
};

inline std::vector<std::int64_t> default_positions(Eigen::Index n) {
  std::vector<std::int64_t> pos(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i);
  return pos;
}

/// Pre-norm causal self-attention then pre-norm gated feed-forward, each
/// with a residual connection. Rotary is applied to q and k after their biases.
template <typename Scalar>
Matrix<Scalar> block_forward(const LayerParams<Scalar>& p, const Matrix<Scalar>& x, const ArchConfig& cfg,
                             BlockCache<Scalar>* cache = nullptr) {
  using std::exp;
  using std::sqrt;
  const Eigen::Index t = x.rows();
  const auto h = static_cast<Eigen::Index>(cfg.hidden_size);
  require(x.cols() == h, "input width must equal hidden_size");
  require(t <= cfg.sequence_length, "sequence longer than the configured sequence_length");
  require(p.wq.rows() == h && p.wq.cols() == h && p.w_gate.rows() == h && p.w_down.cols() == h,
          "block parameters do not match the configuration");

  const auto heads = static_cast<Eigen::Index>(cfg.num_heads);
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const RopeSpec rope = rope_spec(cfg);
  const std::vector<std::int64_t> positions = default_positions(t);
  const Scalar scale = Scalar(1) / sqrt(static_cast<Scalar>(hd));

  BlockCache<Scalar> local;
  BlockCache<Scalar>& c = cache != nullptr ? *cache : local;

  c.n1 = layer_norm(x, p.ln1_scale, p.ln1_bias, &c.norm1);
  c.q = affine(c.n1, p.wq, p.bq);
  c.k = affine(c.n1, p.wk, p.bk);
  c.v = affine(c.n1, p.wv, p.bv);
  for (Eigen::Index head = 0; head < heads; ++head) {
    detail::rotate_rows(c.q, head * hd, positions, rope, 1.0);
    detail::rotate_rows(c.k, head * hd, positions, rope, 1.0);
  }

  c.attn = Matrix<Scalar>::Zero(t, h);
  c.probs.assign(static_cast<std::size_t>(heads), Matrix<Scalar>());
  for (Eigen::Index head = 0; head < heads; ++head) {
    const auto qh = c.q.middleCols(head * hd, hd);
    const auto kh = c.k.middleCols(head * hd, hd);
    const auto vh = c.v.middleCols(head * hd, hd);
    Matrix<Scalar> probs = Matrix<Scalar>::Zero(t, t);
    for (Eigen::Index i = 0; i < t; ++i) {
      Scalar peak = qh.row(i).dot(kh.row(0)) * scale;
      for (Eigen::Index j = 0; j <= i; ++j) {
        probs(i, j) = qh.row(i).dot(kh.row(j)) * scale;
        if (probs(i, j) > peak) peak = probs(i, j);
      }
      Scalar total(0);
      for (Eigen::Index j = 0; j <= i; ++j) {
        probs(i, j) = exp(probs(i, j) - peak);
        total += probs(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) probs(i, j) /= total;
    }
    c.attn.middleCols(head * hd, hd) = probs * vh;
    c.probs[static_cast<std::size_t>(head)] = std::move(probs);
  }
  const Matrix<Scalar> x1 = x + affine(c.attn, p.wo, p.bo);

  c.n2 = layer_norm(x1, p.ln2_scale, p.ln2_bias, &c.norm2);
  c.gate = affine(c.n2, p.w_gate, p.b_gate);
  c.up = affine(c.n2, p.w_up, p.b_up);
  c.hidden = c.gate.unaryExpr([](Scalar g) { return g * sigmoid(g); }).cwiseProduct(c.up);
  return x1 + affine(c.hidden, p.w_down, p.b_down);
}

/// coefficient * (log sum exp(logits))^2, with max subtraction.
template <typename Derived>
typename Derived::Scalar z_loss(const Eigen::MatrixBase<Derived>& logits, double coefficient) {
  using Scalar = typename Derived::Scalar;
  using std::exp;
  using std::log;
  require(logits.size() > 0, "z_loss needs a nonempty vocabulary");
  require(coefficient >= 0.0, "z_loss coefficient must be nonnegative");
  const Scalar peak = logits.maxCoeff();
  const Scalar log_z = peak + log((logits.array() - peak).exp().sum());
  return static_cast<Scalar>(coefficient) * log_z * log_z;
}

struct LossOptions {
  double z_coefficient = 1.0;
};

template <typename Scalar>
struct ForwardTrace {
  Matrix<Scalar> embedded;
  std::vector<BlockCache<Scalar>> blocks;
  std::vector<Matrix<Scalar>> inputs;  ///< input of each block
  Matrix<Scalar> last;                 ///< output of the final block
  NormCache<Scalar> final_norm;
  Matrix<Scalar> features;             ///< final norm output (or `last`)
  Matrix<Scalar> logits;
};

template <typename Scalar>
Matrix<Scalar> output_projection(const ModelParams<Scalar>& p) {
  return p.head.size() > 0 ? p.head : Matrix<Scalar>(p.embedding.transpose());
}

/// Embeds `tokens`, runs every block, applies the final norm and output head.
template <typename Scalar>
Matrix<Scalar> model_forward(const ModelParams<Scalar>& p, const ArchConfig& cfg,
                             std::span<const std::int64_t> tokens, ForwardTrace<Scalar>* trace = nullptr) {
  require(!tokens.empty(), "token sequence is empty");
  ForwardTrace<Scalar> local;
  ForwardTrace<Scalar>& tr = trace != nullptr ? *trace : local;
  const auto t = static_cast<Eigen::Index>(tokens.size());
  tr.embedded.resize(t, p.embedding.cols());
  for (Eigen::Index i = 0; i < t; ++i) {
    const std::int64_t tok = tokens[static_cast<std::size_t>(i)];
    require(tok >= 0 && tok < p.embedding.rows(), "token id outside the vocabulary");
    tr.embedded.row(i) = p.embedding.row(tok);
  }
  tr.blocks.resize(p.layers.size());
  tr.inputs.resize(p.layers.size());
  Matrix<Scalar> x = tr.embedded;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    tr.inputs[l] = x;
    x = block_forward(p.layers[l], x, cfg, &tr.blocks[l]);
  }
  tr.last = x;
  tr.features = cfg.final_norm ? layer_norm(x, p.final_scale, p.final_bias, &tr.final_norm) : x;
  tr.logits = tr.features * output_projection(p);
  return tr.logits;
}

/// mean(last block output^2) + z_coefficient * mean over positions of z_loss.
template <typename Scalar>
Scalar model_loss(const ModelParams<Scalar>& p, const ArchConfig& cfg, std::span<const std::int64_t> tokens,
                  const LossOptions& options = {}, ForwardTrace<Scalar>* trace = nullptr) {
  ForwardTrace<Scalar> local;
  ForwardTrace<Scalar>& tr = trace != nullptr ? *trace : local;
  model_forward(p, cfg, tokens, &tr);
  Scalar z(0);
  for (Eigen::Index i = 0; i < tr.logits.rows(); ++i) z += z_loss(tr.logits.row(i), options.z_coefficient);
  return tr.last.array().square().mean() + z / static_cast<Scalar>(tr.logits.rows());
}

// ---------------------------------------------------------------------------
// Backward pass (double precision)

/// Gradient of model_loss with respect to every parameter; returns the loss.
double model_gradient(const ModelParams<double>& p, const ArchConfig& cfg, std::span<const std::int64_t> tokens,
                      const LossOptions& options, ModelParams<double>& grad);

/// Backpropagates `d_out` through one block, accumulating into `grad` and
/// returning the gradient with respect to the block input.
Matrix<double> block_backward(const LayerParams<double>& p, const BlockCache<double>& cache,
                              const Matrix<double>& d_out, const ArchConfig& cfg, LayerParams<double>& grad);

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Value and, when `gradient` is non-null, its analytic gradient.
using Differentiable = std::function<double(const Eigen::VectorXd& params, Eigen::VectorXd* gradient)>;

struct GradCheckOptions {
  double relative_step = 1e-5;  ///< h_i = relative_step * max(1, |theta_i|)
  /// Floor in the relative-error denominator. Some gradients are exactly zero
  /// (a key bias shifts every score in a softmax row equally), and there the
  /// numeric estimate is one ulp of the loss over 2h, about 2e-10 for the toy.
  double epsilon = 1e-5;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t evaluations = 0;
};

/// max_i |g_i - (f(theta + h e_i) - f(theta - h e_i)) / 2h| / (|g_i| + epsilon),
/// probed sequentially in coordinate order.
GradCheckResult grad_check(const Differentiable& f, const Eigen::VectorXd& params,
                           const GradCheckOptions& options = {});

/// The gating check: model_loss on `cfg` with seeded parameters and tokens.
GradCheckResult check_model_gradient(const ArchConfig& cfg, std::uint64_t seed, Eigen::Index sequence,
                                     const LossOptions& loss = {}, const GradCheckOptions& options = {},
                                     bool negate_analytic = false);

// ---------------------------------------------------------------------------
// Serialization: <prefix>.bin holds little-endian float64 values in visit
// order; <prefix>.json is the manifest with config, names, shapes and offsets.

void save_params(const ModelParams<double>& p, const ArchConfig& cfg, const std::string& prefix);
ModelParams<double> load_params(const std::string& prefix, ArchConfig* cfg_out = nullptr);

}  // namespace ptk::ref
