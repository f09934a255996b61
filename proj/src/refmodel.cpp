#include "ptk/refmodel.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace ptk::ref {

namespace {

using Mat = Matrix<double>;
using Row = RowVector<double>;
using Col = ColVector<double>;

Mat norm_backward(const Mat& dy, const NormCache<double>& c, const Row& scale, Row& d_scale, Row& d_bias) {
  d_scale += dy.cwiseProduct(c.normalized).colwise().sum();
  if (d_bias.size() > 0) d_bias += dy.colwise().sum();
  const Mat dn = dy * scale.asDiagonal();
  const Col mean_dn = dn.rowwise().mean();
  const Col mean_dn_n = dn.cwiseProduct(c.normalized).rowwise().mean();
  Mat dx = dn.colwise() - mean_dn;
  dx -= mean_dn_n.asDiagonal() * c.normalized;
  return c.inv_std.asDiagonal() * dx;
}

/// Accumulates the weight and bias gradients of y = x * w + b; returns dL/dx.
Mat affine_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dw, Row& db) {
  dw += x.transpose() * dy;
  if (db.size() > 0) db += dy.colwise().sum();
  return dy * w.transpose();
}

}  // namespace

Mat block_backward(const LayerParams<double>& p, const BlockCache<double>& c, const Mat& d_out,
                   const ArchConfig& cfg, LayerParams<double>& g) {
  const Eigen::Index t = d_out.rows();
  const auto heads = static_cast<Eigen::Index>(cfg.num_heads);
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const RopeSpec rope = rope_spec(cfg);
  const std::vector<std::int64_t> positions = default_positions(t);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Feed-forward: out = x1 + (silu(gate) * up) w_down.
  Mat d_x1 = d_out;
  const Mat d_hidden = affine_backward(c.hidden, p.w_down, d_out, g.w_down, g.b_down);
  Mat d_gate(c.gate.rows(), c.gate.cols());
  Mat d_up(c.up.rows(), c.up.cols());
  for (Eigen::Index i = 0; i < c.gate.size(); ++i) {
    const double z = c.gate.data()[i];
    const double s = sigmoid(z);
    d_up.data()[i] = d_hidden.data()[i] * z * s;
    d_gate.data()[i] = d_hidden.data()[i] * c.up.data()[i] * s * (1.0 + z * (1.0 - s));
  }
  Mat d_n2 = affine_backward(c.n2, p.w_gate, d_gate, g.w_gate, g.b_gate);
  d_n2 += affine_backward(c.n2, p.w_up, d_up, g.w_up, g.b_up);
  d_x1 += norm_backward(d_n2, c.norm2, p.ln2_scale, g.ln2_scale, g.ln2_bias);

  // Attention: x1 = x + attn w_o.
  const Mat d_attn = affine_backward(c.attn, p.wo, d_x1, g.wo, g.bo);
  Mat d_q = Mat::Zero(t, c.q.cols());
  Mat d_k = Mat::Zero(t, c.k.cols());
  Mat d_v = Mat::Zero(t, c.v.cols());
  for (Eigen::Index head = 0; head < heads; ++head) {
    const Mat& probs = c.probs[static_cast<std::size_t>(head)];
    const auto d_o = d_attn.middleCols(head * hd, hd);
    const Mat d_probs = d_o * c.v.middleCols(head * hd, hd).transpose();
    d_v.middleCols(head * hd, hd) = probs.transpose() * d_o;
    const Col row_dot = d_probs.cwiseProduct(probs).rowwise().sum();
    const Mat d_scores = probs.cwiseProduct(d_probs.colwise() - row_dot);
    d_q.middleCols(head * hd, hd) = d_scores * c.k.middleCols(head * hd, hd) * scale;
    d_k.middleCols(head * hd, hd) = d_scores.transpose() * c.q.middleCols(head * hd, hd) * scale;
  }
  // The rotation is orthogonal, so its transpose is the rotation by -angle.
  for (Eigen::Index head = 0; head < heads; ++head) {
    detail::rotate_rows(d_q, head * hd, positions, rope, -1.0);
    detail::rotate_rows(d_k, head * hd, positions, rope, -1.0);
  }
  Mat d_n1 = affine_backward(c.n1, p.wq, d_q, g.wq, g.bq);
  d_n1 += affine_backward(c.n1, p.wk, d_k, g.wk, g.bk);
  d_n1 += affine_backward(c.n1, p.wv, d_v, g.wv, g.bv);
  return d_x1 + norm_backward(d_n1, c.norm1, p.ln1_scale, g.ln1_scale, g.ln1_bias);
}

double model_gradient(const ModelParams<double>& p, const ArchConfig& cfg, std::span<const std::int64_t> tokens,
                      const LossOptions& options, ModelParams<double>& grad) {
  ForwardTrace<double> tr;
  const double loss = model_loss(p, cfg, tokens, options, &tr);
  grad = zero_params<double>(cfg);

  const auto t = static_cast<double>(tr.logits.rows());
  // d/dlogit of c * logZ^2 is 2 c logZ softmax(logit).
  Mat d_logits(tr.logits.rows(), tr.logits.cols());
  for (Eigen::Index i = 0; i < tr.logits.rows(); ++i) {
    const double peak = tr.logits.row(i).maxCoeff();
    const Row e = (tr.logits.row(i).array() - peak).exp();
    const double sum = e.sum();
    const double log_z = peak + std::log(sum);
    d_logits.row(i) = (2.0 * options.z_coefficient * log_z / (t * sum)) * e;
  }

  const Mat projection = output_projection(p);
  if (p.head.size() > 0) {
    grad.head += tr.features.transpose() * d_logits;
  } else {
    grad.embedding += d_logits.transpose() * tr.features;
  }
  const Mat d_features = d_logits * projection.transpose();

  Mat d_x = (2.0 / static_cast<double>(tr.last.size())) * tr.last;
  if (cfg.final_norm) {
    d_x += norm_backward(d_features, tr.final_norm, p.final_scale, grad.final_scale, grad.final_bias);
  } else {
    d_x += d_features;
  }
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    d_x = block_backward(p.layers[l], tr.blocks[l], d_x, cfg, grad.layers[l]);
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    grad.embedding.row(tokens[i]) += d_x.row(static_cast<Eigen::Index>(i));
  }
  return loss;
}

GradCheckResult grad_check(const Differentiable& f, const Eigen::VectorXd& params, const GradCheckOptions& options) {
  require(options.relative_step > 0.0, "finite-difference step must be positive");
  require(options.epsilon >= 0.0, "epsilon must be nonnegative");
  Eigen::VectorXd analytic(params.size());
  const double base = f(params, &analytic);
  require(std::isfinite(base) && analytic.allFinite(), "function or gradient is not finite at params");
  require(analytic.size() == params.size(), "gradient length does not match params");

  GradCheckResult result;
  result.evaluations = 1;
  Eigen::VectorXd probe = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double step = options.relative_step * std::max(1.0, std::abs(params(i)));
    probe(i) = params(i) + step;
    const double plus = f(probe, nullptr);
    probe(i) = params(i) - step;
    const double minus = f(probe, nullptr);
    probe(i) = params(i);
    result.evaluations += 2;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw ValidationFailure("non-finite evaluation while probing coordinate " + std::to_string(i));
    }
    const double numeric = (plus - minus) / (2.0 * step);
    const double err = std::abs(analytic(i) - numeric) / (std::abs(analytic(i)) + options.epsilon);
    if (err > result.max_relative_error || result.worst_index < 0) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.worst_analytic = analytic(i);
      result.worst_numeric = numeric;
    }
  }
  return result;
}

GradCheckResult check_model_gradient(const ArchConfig& cfg, std::uint64_t seed, Eigen::Index sequence,
                                     const LossOptions& loss, const GradCheckOptions& options, bool negate_analytic) {
  require(sequence > 0 && sequence <= cfg.sequence_length, "sequence length outside the configured window");
  const ModelParams<double> shape = init_params<double>(cfg, seed);
  random::SplitMix64 rng(random::derive_seed({seed, 0x746f6b73ULL}));
  std::vector<std::int64_t> tokens(static_cast<std::size_t>(sequence));
  for (auto& tok : tokens) tok = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));

  const Differentiable f = [&](const Eigen::VectorXd& flat, Eigen::VectorXd* gradient) {
    const ModelParams<double> p = unflatten(flat, shape);
    if (gradient == nullptr) return model_loss(p, cfg, tokens, loss);
    ModelParams<double> g;
    const double value = model_gradient(p, cfg, tokens, loss, g);
    *gradient = flatten(g);
    if (negate_analytic) *gradient = -*gradient;
    return value;
  };
  return grad_check(f, flatten(shape), options);
}

// ---------------------------------------------------------------------------

void save_params(const ModelParams<double>& p, const ArchConfig& cfg, const std::string& prefix) {
  nlohmann::json tensors = nlohmann::json::array();
  std::int64_t offset = 0;
  visit(p, [&](const std::string& name, const auto& t) {
    if (t.size() == 0) return;
    tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  });
  const nlohmann::json manifest = {{"format", "ptk-params"},
                                   {"version", 1},
                                   {"dtype", "float64"},
                                   {"byte_order", "little"},
                                   {"layout", "column-major"},
                                   {"config", cfg},
                                   {"total", offset},
                                   {"tensors", tensors}};

  std::ofstream bin(prefix + ".bin", std::ios::binary);
  require(static_cast<bool>(bin), "cannot open " + prefix + ".bin for writing");
  visit(p, [&](const std::string&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      auto bits = std::bit_cast<std::uint64_t>(t.data()[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  });
  std::ofstream json(prefix + ".json");
  require(static_cast<bool>(json), "cannot open " + prefix + ".json for writing");
  json << manifest.dump(2) << '\n';
}

ModelParams<double> load_params(const std::string& prefix, ArchConfig* cfg_out) {
  std::ifstream json(prefix + ".json");
  require(static_cast<bool>(json), "cannot open " + prefix + ".json");
  const nlohmann::json manifest = nlohmann::json::parse(json);
  require(manifest.value("format", "") == "ptk-params" && manifest.value("version", 0) == 1,
          "unrecognised parameter manifest");
  require(manifest.value("dtype", "") == "float64", "only float64 parameters are supported");
  const ArchConfig cfg = manifest.at("config").get<ArchConfig>();
  ModelParams<double> p = zero_params<double>(cfg);

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  require(static_cast<bool>(bin), "cannot open " + prefix + ".bin");
  std::size_t index = 0;
  const auto& tensors = manifest.at("tensors");
  visit(p, [&](const std::string& name, auto& t) {
    if (t.size() == 0) return;
    require(index < tensors.size(), "manifest lists fewer tensors than the configuration implies");
    const auto& entry = tensors[index++];
    require(entry.at("name") == name, "manifest tensor order mismatch at '" + name + "'");
    require(entry.at("shape")[0] == t.rows() && entry.at("shape")[1] == t.cols(), "shape mismatch for '" + name + "'");
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      std::uint64_t bits = 0;
      bin.read(reinterpret_cast<char*>(&bits), sizeof bits);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      t.data()[i] = std::bit_cast<double>(bits);
    }
  });
  require(index == tensors.size(), "manifest lists more tensors than the configuration implies");
  require(static_cast<bool>(bin), "parameter file is truncated");
  if (cfg_out != nullptr) *cfg_out = cfg;
  return p;
}

}  // namespace ptk::ref
