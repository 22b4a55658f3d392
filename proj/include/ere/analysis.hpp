#pragma once

// Desk-scale diagnostics on a small feed-forward network: log-normal and
// low-rank perturbation of full weights versus residuals, and the prior-rank
// (alpha) and Stiefel-projection ablations of the codec.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ere/codec.hpp"
#include "ere/spectral.hpp"
#include "ere/tensor.hpp"

namespace ere::analysis {

enum class Activation { tanh, relu };

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

inline std::string weight_name(std::size_t i) { return "layer" + std::to_string(i) + ".weight"; }
inline std::string bias_name(std::size_t i) { return "layer" + std::to_string(i) + ".bias"; }

struct ToyNet {
  std::vector<DenseLayer> layers;
  Activation activation = Activation::tanh;

  /// x is batch x in; the last layer is linear and its output is the feature.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = (h * layers[i].weight.transpose()).rowwise() + layers[i].bias.transpose();
      if (i + 1 < layers.size()) {
        if (activation == Activation::tanh)
          h = h.array().tanh();
        else
          h = h.array().max(0.0);
      }
    }
    return h;
  }

  TensorMap to_tensors() const {
    TensorMap map;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      map.insert(weight_name(i), from_matrix(layers[i].weight));
      const auto& b = layers[i].bias;
      std::vector<float> bv(static_cast<std::size_t>(b.size()));
      for (Eigen::Index k = 0; k < b.size(); ++k) bv[static_cast<std::size_t>(k)] = static_cast<float>(b(k));
      map.insert(bias_name(i), Tensor(DType::f32, {static_cast<std::uint64_t>(b.size())}, std::move(bv)));
    }
    return map;
  }

  static ToyNet from_tensors(const TensorMap& map, Activation act = Activation::tanh) {
    ToyNet net;
    net.activation = act;
    for (std::size_t i = 0; map.contains(weight_name(i)); ++i) {
      DenseLayer l;
      l.weight = to_matrix(map.at(weight_name(i)));
      const auto& b = map.at(bias_name(i));
      if (b.values.size() != static_cast<std::size_t>(l.weight.rows()))
        throw Error("toy net: bias size mismatch for layer " + std::to_string(i));
      l.bias = Eigen::Map<const Eigen::VectorXf>(b.values.data(), l.weight.rows()).cast<double>();
      if (!net.layers.empty() && net.layers.back().weight.rows() != l.weight.cols())
        throw Error("toy net: width mismatch at layer " + std::to_string(i));
      net.layers.push_back(std::move(l));
    }
    if (net.layers.empty()) throw Error("toy net: no layers found");
    return net;
  }
};

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                                       double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * normal(rng);
  return m;
}

/// Fixed-seed standard Gaussian probe batch.
inline Eigen::MatrixXd probe_batch(Eigen::Index count, Eigen::Index width, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  return gaussian_matrix(count, width, rng);
}

/// Mean over probes of the cosine similarity between the two nets' outputs.
inline double feature_cosine(const ToyNet& a, const ToyNet& b, const Eigen::MatrixXd& probes) {
  if (a.layers.size() != b.layers.size()) throw Error("feature_cosine: architectures differ");
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].weight.rows() != b.layers[i].weight.rows() ||
        a.layers[i].weight.cols() != b.layers[i].weight.cols())
      throw Error("feature_cosine: architectures differ");
  const Eigen::MatrixXd fa = a.forward(probes);
  const Eigen::MatrixXd fb = b.forward(probes);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < fa.rows(); ++r) {
    const double na = fa.row(r).norm(), nb = fb.row(r).norm();
    if (na == 0.0 || nb == 0.0) throw Error("feature_cosine: zero-norm feature vector");
    sum += fa.row(r).dot(fb.row(r)) / (na * nb);
  }
  return sum / static_cast<double>(fa.rows());
}

// ---------------------------------------------------------------- perturbation

enum class PerturbMode { full, residual };

struct PerturbConfig {
  double sigma = 0.1;
  PerturbMode mode = PerturbMode::residual;
  std::uint64_t seed = 0;
};

inline void require_aligned(const TensorMap& theta, const TensorMap& delta) {
  for (const auto& [name, t] : theta) {
    if (!delta.contains(name)) throw Error("perturb: residual missing '" + name + "'");
    if (delta.at(name).shape != t.shape) throw Error("perturb: shape mismatch for '" + name + "'");
  }
  if (delta.size() != theta.size()) throw Error("perturb: maps are not aligned");
}

/// Log-normal noise on 2-D weights: full mode gives (theta + delta) * exp(Z),
/// residual mode gives theta + exp(Z) * delta, Z ~ N(0, sigma^2) i.i.d. per
/// parameter. Other tensors come back as theta + delta.
inline TensorMap perturb(const TensorMap& theta, const TensorMap& delta, const PerturbConfig& cfg) {
  if (!(cfg.sigma >= 0.0)) throw Error("perturb: sigma must be >= 0");
  require_aligned(theta, delta);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  TensorMap out;
  for (const auto& [name, t] : theta) {
    const auto& d = delta.at(name);
    std::vector<float> v(t.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float sum = t.values[i] + d.values[i];
      if (!t.is_matrix()) {
        v[i] = sum;
        continue;
      }
      const float scale = static_cast<float>(std::exp(cfg.sigma * normal(rng)));
      v[i] = cfg.mode == PerturbMode::full ? sum * scale : t.values[i] + scale * d.values[i];
    }
    out.insert(name, Tensor(t.dtype, t.shape, std::move(v)));
  }
  return out;
}

/// Keeps ceil(keep_fraction * min(n, m)) singular triplets of either the full
/// weight or the residual of every 2-D tensor.
inline TensorMap lowrank_perturb(const TensorMap& theta, const TensorMap& delta, double keep_fraction,
                                 PerturbMode mode) {
  if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) throw Error("lowrank_perturb: keep_fraction outside [0,1]");
  require_aligned(theta, delta);
  TensorMap out;
  for (const auto& [name, t] : theta) {
    const auto& d = delta.at(name);
    if (!t.is_matrix()) {
      std::vector<float> v(t.values.size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = t.values[i] + d.values[i];
      out.insert(name, Tensor(t.dtype, t.shape, std::move(v)));
      continue;
    }
    const auto k = static_cast<Eigen::Index>(
        std::ceil(keep_fraction * static_cast<double>(std::min(t.rows(), t.cols())) - 1e-12));
    const Eigen::MatrixXd base = to_matrix(t);
    const Eigen::MatrixXd res = to_matrix(d);
    Eigen::MatrixXd w;
    if (mode == PerturbMode::full)
      w = spectral::truncate(spectral::svd_full(base + res), k).reconstruct();
    else
      w = base + spectral::truncate(spectral::svd_full(res), k).reconstruct();
    out.insert(name, from_matrix(w, t.dtype));
  }
  return out;
}

inline TensorMap difference(const TensorMap& a, const TensorMap& b) {
  TensorMap out;
  for (const auto& [name, t] : a) {
    const auto& u = b.at(name);
    if (u.shape != t.shape) throw Error("difference: shape mismatch for '" + name + "'");
    std::vector<float> v(t.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = t.values[i] - u.values[i];
    out.insert(name, Tensor(DType::f32, t.shape, std::move(v)));
  }
  return out;
}

// ---------------------------------------------------------------- toy training

struct TrainConfig {
  std::vector<Eigen::Index> widths = {32, 64, 64, 16};
  std::size_t samples = 256;
  std::size_t pretrain_steps = 400;
  std::size_t finetune_steps = 200;
  double learning_rate = 0.05;
  std::size_t shift_rank = 2;     // rank of the linear map added to the fine-tune target
  double shift_scale = 0.5;
};

struct ToyPair {
  TensorMap theta;
  TensorMap theta_prime;
  double finetune_loss_start = 0.0;
  double finetune_loss_end = 0.0;
};

namespace detail {

inline double mse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  return 0.5 * (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

/// One full-batch gradient step on 0.5 * mean squared error; returns the loss
/// before the step.
inline double gradient_step(ToyNet& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lr) {
  const std::size_t L = net.layers.size();
  std::vector<Eigen::MatrixXd> acts{x};
  for (std::size_t i = 0; i < L; ++i) {
    Eigen::MatrixXd z = (acts.back() * net.layers[i].weight.transpose()).rowwise() +
                        net.layers[i].bias.transpose();
    if (i + 1 < L) z = z.array().tanh();
    acts.push_back(std::move(z));
  }
  const double loss = mse(acts.back(), y);
  Eigen::MatrixXd grad = (acts.back() - y) / static_cast<double>(x.rows());
  for (std::size_t i = L; i-- > 0;) {
    const Eigen::MatrixXd dw = grad.transpose() * acts[i];
    const Eigen::VectorXd db = grad.colwise().sum().transpose();
    if (i > 0) {
      grad = (grad * net.layers[i].weight).array() * (1.0 - acts[i].array().square());
    }
    net.layers[i].weight -= lr * dw;
    net.layers[i].bias -= lr * db;
  }
  return loss;
}

}  // namespace detail

/// "Pre-trains" a tanh net by full-batch gradient descent on a teacher task,
/// then "fine-tunes" it on the teacher plus a fixed low-rank linear shift.
inline ToyPair train_toy_pair(std::uint64_t seed, const TrainConfig& cfg = {}) {
  std::mt19937_64 rng(seed);
  const auto& w = cfg.widths;
  if (w.size() < 2) throw Error("train_toy_pair: need at least two widths");

  ToyNet net;
  for (std::size_t i = 0; i + 1 < w.size(); ++i)
    net.layers.push_back({gaussian_matrix(w[i + 1], w[i], rng, 1.0 / std::sqrt(double(w[i]))),
                          Eigen::VectorXd::Zero(w[i + 1])});

  ToyNet teacher;
  for (std::size_t i = 0; i + 1 < w.size(); ++i)
    teacher.layers.push_back({gaussian_matrix(w[i + 1], w[i], rng, 1.5 / std::sqrt(double(w[i]))),
                              gaussian_matrix(w[i + 1], 1, rng, 0.1).col(0)});

  const Eigen::MatrixXd x = gaussian_matrix(static_cast<Eigen::Index>(cfg.samples), w.front(), rng);
  const Eigen::MatrixXd y = teacher.forward(x);
  const Eigen::MatrixXd shift =
      gaussian_matrix(w.front(), static_cast<Eigen::Index>(cfg.shift_rank), rng) *
      gaussian_matrix(static_cast<Eigen::Index>(cfg.shift_rank), w.back(), rng) *
      (cfg.shift_scale / std::sqrt(double(w.front())));
  const Eigen::MatrixXd y_shifted = y + x * shift;

  for (std::size_t s = 0; s < cfg.pretrain_steps; ++s) {
    const double loss = detail::gradient_step(net, x, y, cfg.learning_rate);
    if (!std::isfinite(loss)) throw Error("train_toy_pair: pre-training diverged");
  }
  ToyPair pair;
  pair.theta = net.to_tensors();
  pair.finetune_loss_start = detail::mse(net.forward(x), y_shifted);
  for (std::size_t s = 0; s < cfg.finetune_steps; ++s) {
    const double loss = detail::gradient_step(net, x, y_shifted, cfg.learning_rate);
    if (!std::isfinite(loss)) throw Error("train_toy_pair: fine-tuning diverged");
  }
  pair.finetune_loss_end = detail::mse(net.forward(x), y_shifted);
  pair.theta_prime = net.to_tensors();
  return pair;
}

// ---------------------------------------------------------------- ablations

struct AlphaRow {
  double alpha = 0.0;
  double cosine = 0.0;
};

inline double codec_cosine(const TensorMap& theta, const TensorMap& theta_prime, const codec::EreConfig& cfg,
                           bool projection, const Eigen::MatrixXd& probes) {
  const auto archive = codec::encode(theta, theta_prime, cfg);
  const auto recon = codec::decode(theta, archive, {projection, cfg.threads});
  return feature_cosine(ToyNet::from_tensors(recon), ToyNet::from_tensors(theta_prime), probes);
}

inline Eigen::MatrixXd default_probes(const TensorMap& theta) {
  return probe_batch(256, static_cast<Eigen::Index>(theta.at(weight_name(0)).cols()));
}

inline std::vector<AlphaRow> alpha_sweep(const TensorMap& theta, const TensorMap& theta_prime,
                                         std::size_t prior_rank, const std::vector<double>& alphas,
                                         int bits = 4) {
  const auto probes = default_probes(theta);
  std::vector<AlphaRow> rows;
  for (double a : alphas) {
    codec::EreConfig cfg;
    cfg.prior_rank = prior_rank;
    cfg.bits = bits;
    cfg.alpha = a;
    rows.push_back({a, codec_cosine(theta, theta_prime, cfg, true, probes)});
  }
  return rows;
}

/// Uniform-rank low-rank approximation at the same bit width.
inline double uniform_rank_cosine(const TensorMap& theta, const TensorMap& theta_prime, std::size_t prior_rank,
                                  int bits = 4) {
  codec::EreConfig cfg;
  cfg.prior_rank = prior_rank;
  cfg.bits = bits;
  cfg.uniform_rank = true;
  return codec_cosine(theta, theta_prime, cfg, true, default_probes(theta));
}

inline double erank_of(const Tensor& t) {
  return spectral::effective_rank(spectral::singular_values(to_matrix(t)));
}

}  // namespace ere::analysis
