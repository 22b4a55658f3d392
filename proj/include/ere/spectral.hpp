#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include "ere/tensor.hpp"

namespace ere::spectral {

/// Thin SVD w = u * diag(d) * v^T with d descending. In every column of u the
/// entry of largest magnitude is positive (ties go to the lowest row), and the
/// matching column of v carries the compensating sign.
struct SvdFactors {
  Eigen::MatrixXd u;
  Eigen::VectorXd d;
  Eigen::MatrixXd v;

  Eigen::Index rank() const { return d.size(); }
  Eigen::MatrixXd reconstruct() const { return u * d.asDiagonal() * v.transpose(); }
};

inline void apply_sign_convention(SvdFactors& f) {
  for (Eigen::Index c = 0; c < f.u.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < f.u.rows(); ++r)
      if (std::abs(f.u(r, c)) > std::abs(f.u(best, c))) best = r;
    if (f.u.rows() > 0 && f.u(best, c) < 0) {
      f.u.col(c) *= -1.0;
      f.v.col(c) *= -1.0;
    }
  }
}

inline SvdFactors svd_full(const Eigen::MatrixXd& w) {
  if (!w.allFinite()) throw Error("svd_full: non-finite input");
  SvdFactors f;
  if (w.size() == 0) {
    const Eigen::Index k = std::min(w.rows(), w.cols());
    f.u = Eigen::MatrixXd::Zero(w.rows(), k);
    f.v = Eigen::MatrixXd::Zero(w.cols(), k);
    f.d = Eigen::VectorXd::Zero(k);
    return f;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  f.u = svd.matrixU();
  f.d = svd.singularValues();
  f.v = svd.matrixV();
  apply_sign_convention(f);
  return f;
}

inline SvdFactors truncate(const SvdFactors& f, Eigen::Index k) {
  if (k < 0 || k > f.rank()) throw Error("truncate: rank out of range");
  return {f.u.leftCols(k), f.d.head(k), f.v.leftCols(k)};
}

/// Sum of sigma_l^2 for l > r (1-based), i.e. the squared Frobenius error of
/// the best rank-r approximation.
inline double tail_energy(std::span<const double> sigma, std::size_t r) {
  if (r > sigma.size()) throw Error("tail_energy: rank out of range");
  double s = 0.0;
  for (std::size_t l = sigma.size(); l > r; --l) s += sigma[l - 1] * sigma[l - 1];
  return s;
}

/// tail[r] = tail_energy(sigma, r) for r = 0..len.
inline std::vector<double> tail_curve(std::span<const double> sigma) {
  std::vector<double> tail(sigma.size() + 1, 0.0);
  for (std::size_t l = sigma.size(); l > 0; --l)
    tail[l - 1] = tail[l] + sigma[l - 1] * sigma[l - 1];
  return tail;
}

/// exp of the Shannon entropy of the L1-normalised spectrum.
inline double effective_rank(std::span<const double> sigma) {
  double total = 0.0;
  for (double s : sigma) {
    if (s < 0 || !std::isfinite(s)) throw Error("effective_rank: invalid singular value");
    total += s;
  }
  if (total <= 0.0) throw Error("effective_rank: all-zero spectrum");
  double entropy = 0.0;
  for (double s : sigma) {
    const double p = s / total;
    if (p > 0) entropy -= p * std::log(p);
  }
  return std::clamp(std::exp(entropy), 1.0, static_cast<double>(sigma.size()));
}

inline std::vector<double> singular_values(const Eigen::MatrixXd& w) {
  if (!w.allFinite()) throw Error("singular_values: non-finite input");
  if (w.size() == 0) return {};
  Eigen::BDCSVD<Eigen::MatrixXd> svd(w);
  const Eigen::VectorXd& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

/// Singular-value quantiles of the Marchenko-Pastur law with aspect ratio
/// `ratio` = min/max dimension and unit variance. Eigenvalues live on
/// [(1-sqrt(ratio))^2, (1+sqrt(ratio))^2]; the result is the square root of the
/// eigenvalue quantile.
inline std::vector<double> mp_singular_quantiles(double ratio, std::span<const double> quantiles) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("mp_singular_quantiles: ratio must be in (0,1]");
  const double lo = std::pow(1.0 - std::sqrt(ratio), 2);
  const double hi = std::pow(1.0 + std::sqrt(ratio), 2);
  const double mid = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo);

  // x = mid - half*cos(t) removes the square-root endpoint singularities:
  // density(x) dx = half^2 sin^2(t) / (2 pi ratio x) dt.
  auto integrand = [&](double t) {
    const double x = mid - half * std::cos(t);
    const double s = std::sin(t);
    if (x <= 0.0) return half * half / (2.0 * std::numbers::pi * ratio) * (1.0 + std::cos(t)) / half;
    return half * half * s * s / (2.0 * std::numbers::pi * ratio * x);
  };
  auto cdf = [&](double t) {
    if (t <= 0.0) return 0.0;
    return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, 0.0, t, 15, 1e-13);
  };
  const double total = cdf(std::numbers::pi);

  std::vector<double> out;
  out.reserve(quantiles.size());
  for (double q : quantiles) {
    if (!(q >= 0.0 && q <= 1.0)) throw Error("mp_singular_quantiles: quantile outside [0,1]");
    double t;
    if (q == 0.0) {
      t = 0.0;
    } else if (q == 1.0) {
      t = std::numbers::pi;
    } else {
      auto [a, b] = boost::math::tools::bisect(
          [&](double tt) { return cdf(tt) / total - q; }, 0.0, std::numbers::pi,
          [](double l, double r) { return r - l < 1e-12; });
      t = 0.5 * (a + b);
    }
    out.push_back(std::sqrt(std::max(0.0, mid - half * std::cos(t))));
  }
  return out;
}

/// Per-layer spectrum summary used by the allocator: exact tail curve plus a
/// least-squares fit log f(r) ~ a*r + b.
struct SpectralProfile {
  std::string layer_name;
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<double> sigma;
  std::vector<double> tail;
  double fit_a = 0.0;
  double fit_b = 0.0;
  bool fit_valid = false;

  std::size_t max_rank() const { return std::min(n, m); }
  std::size_t param_cost() const { return n + m; }
};

inline constexpr double kFitFloor = 1e-12;
inline constexpr std::size_t kMinFitPoints = 3;

inline void fit_log_linear(SpectralProfile& p) {
  p.fit_a = p.fit_b = 0.0;
  p.fit_valid = false;
  if (p.tail.empty() || p.tail[0] <= 0.0) return;
  const double floor = kFitFloor * p.tail[0];
  const std::size_t r_max = p.max_rank() == 0 ? 0 : p.max_rank() - 1;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r <= r_max; ++r) {
    if (p.tail[r] < floor || p.tail[r] <= 0.0) continue;
    const double x = static_cast<double>(r);
    const double y = std::log(p.tail[r]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++count;
  }
  if (count < kMinFitPoints) return;
  const double cnt = static_cast<double>(count);
  const double denom = cnt * sxx - sx * sx;
  if (denom <= 0.0) return;
  p.fit_a = (cnt * sxy - sx * sy) / denom;
  p.fit_b = (sy - p.fit_a * sx) / cnt;
  p.fit_valid = p.fit_a < 0.0 && std::isfinite(p.fit_a) && std::isfinite(p.fit_b);
}

inline SpectralProfile profile_from_sigma(std::string name, std::size_t n, std::size_t m,
                                          std::vector<double> sigma) {
  SpectralProfile p;
  p.layer_name = std::move(name);
  p.n = n;
  p.m = m;
  p.sigma = std::move(sigma);
  p.tail = tail_curve(p.sigma);
  fit_log_linear(p);
  return p;
}

inline SpectralProfile build_profile(const Eigen::MatrixXd& w, std::string name) {
  return profile_from_sigma(std::move(name), static_cast<std::size_t>(w.rows()),
                            static_cast<std::size_t>(w.cols()), singular_values(w));
}

inline SpectralProfile build_profile(const Tensor& t, std::string name) {
  if (!t.is_matrix()) throw Error("build_profile: '" + name + "' is not 2-D");
  return build_profile(to_matrix(t), std::move(name));
}

}  // namespace ere::spectral
