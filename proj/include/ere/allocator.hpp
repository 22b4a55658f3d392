#pragma once

// Rank-budget allocation. Minimises sum_i f_i(r_i), f_i the tail energy of
// layer i, subject to sum_i r_i (n_i + m_i) <= M. Each f_i is replaced by its
// log-linear fit exp(a_i r + b_i); stationarity of the Lagrangian gives
//   r_i(lambda) = (log(-(n_i + m_i) / a_i) - b_i + log lambda) / a_i,
// clamped to [0, min(n_i, m_i)]. lambda is found by bisection on the budget
// curve C(lambda), the continuous ranks are mixed with the uniform prior, then
// rounded and repaired back into the budget.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ere/spectral.hpp"

namespace ere::allocator {

using spectral::SpectralProfile;

struct AllocationConfig {
  std::size_t prior_rank = 1;
  double alpha = 0.5;
  double lambda_tolerance = 1e-9;
  std::size_t min_dim_eligible = 8;
};

struct LayerAllocation {
  std::string name;
  std::size_t n = 0;
  std::size_t m = 0;
  double continuous_rank = 0.0;
  std::size_t rank = 0;
  bool pinned = false;  // excluded from the Lagrangian

  std::uint64_t param_cost() const { return rank * (n + m); }
};

struct AllocationPlan {
  std::uint64_t budget = 0;
  double lambda_star = 0.0;
  std::vector<LayerAllocation> layers;
  double objective_estimate = 0.0;

  std::uint64_t used_budget() const {
    std::uint64_t s = 0;
    for (const auto& l : layers) s += l.param_cost();
    return s;
  }
};

struct Shape2 {
  std::size_t n = 0;
  std::size_t m = 0;
};

inline std::uint64_t budget_from_prior(std::span<const Shape2> shapes, std::size_t prior_rank) {
  if (shapes.empty()) throw Error("budget_from_prior: no layers");
  std::uint64_t total = 0;
  for (const auto& s : shapes) {
    if (s.n == 0 || s.m == 0) throw Error("budget_from_prior: empty dimension");
    total += static_cast<std::uint64_t>(prior_rank) * (s.n + s.m);
  }
  return total;
}

inline double clamped_rank(const SpectralProfile& p, double lambda) {
  if (!p.fit_valid || p.fit_a >= 0.0) throw Error("clamped_rank: invalid fit for '" + p.layer_name + "'");
  if (!(lambda > 0.0)) throw Error("clamped_rank: lambda must be positive");
  const double cost = static_cast<double>(p.param_cost());
  const double r = (std::log(-cost / p.fit_a) - p.fit_b + std::log(lambda)) / p.fit_a;
  return std::clamp(r, 0.0, static_cast<double>(p.max_rank()));
}

/// C(lambda): parameters consumed by the clamped continuous solution.
inline double budget_curve(std::span<const SpectralProfile* const> profiles, double lambda) {
  double c = 0.0;
  for (const auto* p : profiles) c += clamped_rank(*p, lambda) * static_cast<double>(p->param_cost());
  return c;
}

inline constexpr int kBracketSteps = 60;

/// Bisection on log(lambda) for C(lambda) = M. The monotone direction of C is
/// read off the bracket endpoints rather than assumed. Returns the endpoint
/// whose budget does not exceed M.
inline double solve_lambda(std::span<const SpectralProfile* const> profiles, double budget,
                           double tol = 1e-9) {
  if (profiles.empty()) throw Error("solve_lambda: no valid profiles");
  if (!(budget > 0.0)) throw Error("solve_lambda: budget must be positive");
  auto C = [&](double lambda) { return budget_curve(profiles, lambda); };

  // Expand geometrically from lambda = 1 until C - M changes sign between the
  // endpoints.
  double lo = 1.0, hi = 1.0;
  double c_lo = C(lo), c_hi = c_lo;
  auto bracketed = [&] { return (c_lo - budget) * (c_hi - budget) <= 0.0 && c_lo != c_hi; };
  for (int i = 0; i < kBracketSteps && !bracketed(); ++i) {
    c_lo = C(lo /= 10.0);
    if (bracketed()) break;
    c_hi = C(hi *= 10.0);
  }
  if (!bracketed()) {
    // Saturated: C never crosses M. Take the feasible endpoint that spends the
    // most, or the cheapest one if neither fits.
    if (c_lo <= budget && c_hi <= budget) return c_lo >= c_hi ? lo : hi;
    return c_lo <= c_hi ? lo : hi;
  }
  const bool increasing = c_hi > c_lo;

  double log_lo = std::log(lo), log_hi = std::log(hi);
  while (log_hi - log_lo > tol) {
    const double mid = 0.5 * (log_lo + log_hi);
    const double c = C(std::exp(mid));
    if (c == budget) return std::exp(mid);
    if ((c > budget) == increasing) {
      log_hi = mid;
    } else {
      log_lo = mid;
    }
  }
  return std::exp(increasing ? log_lo : log_hi);
}

inline std::vector<double> mix_prior(std::span<const double> ranks, double prior_rank, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("mix_prior: alpha outside [0,1]");
  std::vector<double> out;
  out.reserve(ranks.size());
  for (double r : ranks) out.push_back((1.0 - alpha) * r + alpha * prior_rank);
  return out;
}

/// Rounds to nearest, then while over budget removes one rank from the layer
/// whose next-lost singular value costs the least energy per freed parameter.
inline std::vector<std::size_t> round_and_repair(std::span<const double> ranks,
                                                 std::span<const SpectralProfile* const> profiles,
                                                 std::uint64_t budget) {
  if (ranks.size() != profiles.size()) throw Error("round_and_repair: size mismatch");
  std::vector<std::size_t> out(ranks.size());
  std::uint64_t used = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const double r = std::clamp(std::round(ranks[i]), 0.0,
                                static_cast<double>(profiles[i]->max_rank()));
    out[i] = static_cast<std::size_t>(r);
    used += out[i] * profiles[i]->param_cost();
  }
  while (used > budget) {
    std::size_t best = ranks.size();
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] == 0) continue;
      const auto& tail = profiles[i]->tail;
      const double loss = out[i] < tail.size() ? tail[out[i] - 1] - tail[out[i]] : 0.0;
      const double per_param = loss / static_cast<double>(profiles[i]->param_cost());
      if (per_param < best_cost) {
        best_cost = per_param;
        best = i;
      }
    }
    if (best == ranks.size()) break;
    --out[best];
    used -= profiles[best]->param_cost();
  }
  return out;
}

inline double tail_at(const SpectralProfile& p, std::size_t r) {
  return r < p.tail.size() ? p.tail[r] : 0.0;
}

/// Full budget allocation over all layers. Layers whose fit is invalid or
/// whose smaller dimension is below `min_dim_eligible` are pinned to the prior
/// rank and their cost is deducted before solving.
inline AllocationPlan allocate(std::span<const SpectralProfile> profiles, const AllocationConfig& cfg) {
  if (profiles.empty()) throw Error("allocate: no layers");
  if (cfg.prior_rank < 1) throw Error("allocate: prior rank must be >= 1");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw Error("allocate: alpha outside [0,1]");

  std::vector<Shape2> shapes;
  for (const auto& p : profiles) shapes.push_back({p.n, p.m});

  AllocationPlan plan;
  plan.budget = budget_from_prior(shapes, cfg.prior_rank);
  plan.layers.resize(profiles.size());

  std::uint64_t remaining = plan.budget;
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const auto& p = profiles[i];
    auto& l = plan.layers[i];
    l.name = p.layer_name;
    l.n = p.n;
    l.m = p.m;
    if (!p.fit_valid || p.max_rank() < cfg.min_dim_eligible) {
      l.pinned = true;
      l.rank = std::min(cfg.prior_rank, p.max_rank());
      l.continuous_rank = static_cast<double>(l.rank);
      remaining -= l.param_cost();
    } else {
      active.push_back(i);
    }
  }

  if (!active.empty()) {
    std::vector<const SpectralProfile*> act;
    std::uint64_t full = 0;
    for (auto i : active) {
      act.push_back(&profiles[i]);
      full += profiles[i].max_rank() * profiles[i].param_cost();
    }

    std::vector<double> continuous(act.size());
    if (remaining >= full) {
      for (std::size_t k = 0; k < act.size(); ++k)
        continuous[k] = static_cast<double>(act[k]->max_rank());
      plan.lambda_star = 0.0;
    } else if (remaining == 0) {
      plan.lambda_star = std::numeric_limits<double>::infinity();
    } else {
      plan.lambda_star = solve_lambda(act, static_cast<double>(remaining), cfg.lambda_tolerance);
      for (std::size_t k = 0; k < act.size(); ++k) continuous[k] = clamped_rank(*act[k], plan.lambda_star);
    }

    continuous = mix_prior(continuous, static_cast<double>(cfg.prior_rank), cfg.alpha);
    for (std::size_t k = 0; k < act.size(); ++k)
      continuous[k] = std::clamp(continuous[k], 0.0, static_cast<double>(act[k]->max_rank()));
    const auto ranks = round_and_repair(continuous, act, remaining);
    for (std::size_t k = 0; k < act.size(); ++k) {
      plan.layers[active[k]].continuous_rank = continuous[k];
      plan.layers[active[k]].rank = ranks[k];
    }
  }

  for (std::size_t i = 0; i < profiles.size(); ++i)
    plan.objective_estimate += tail_at(profiles[i], plan.layers[i].rank);
  return plan;
}

}  // namespace ere::allocator
