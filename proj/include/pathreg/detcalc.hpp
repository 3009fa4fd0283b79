#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pathreg/pathgrid.hpp"

namespace pathreg {

enum class Mode { Closed, HalfOpen };

// Regularization levels in time units, coarsest first, each an integer multiple of the grid step.
struct EpsSchedule {
  std::vector<double> eps;
  double tol_cauchy = 1e-3;
  bool extrapolate = false;

  static EpsSchedule geometric(double dt, std::size_t K, double tol = 1e-3, bool extrapolate = false) {
    EpsSchedule s;
    for (std::size_t k = K + 1; k-- > 0;) s.eps.push_back(std::ldexp(dt, static_cast<int>(k)));
    s.tol_cauchy = tol;
    s.extrapolate = extrapolate;
    return s;
  }

  // 2^K*dt, ..., dt with K <= 4 and 2^K*dt <= span/8.
  static EpsSchedule for_grid(double dt, double span, bool extrapolate = false, double tol = 1e-3) {
    std::size_t K = 0;
    while (K < 4 && std::ldexp(dt, static_cast<int>(K + 1)) <= span / 8.0 * (1 + 1e-12)) ++K;
    return geometric(dt, K, tol, extrapolate);
  }

  std::vector<std::size_t> multiples(double dt) const {
    require(!eps.empty(), "EpsSchedule: empty schedule");
    std::vector<std::size_t> k;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      require(eps[i] >= dt * (1 - 1e-9), "EpsSchedule: schedule finer than grid");
      require(is_grid_multiple(eps[i], dt), "EpsSchedule: eps must be a multiple of the grid step");
      if (i > 0) require(eps[i] < eps[i - 1], "EpsSchedule: eps must be strictly decreasing");
      k.push_back(static_cast<std::size_t>(std::llround(eps[i] / dt)));
    }
    return k;
  }
};

struct IntegralResult {
  double value = std::nan("");
  bool converged = false;
  double cauchy_gap = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> per_eps;
};

inline nlohmann::json to_json(const IntegralResult& r) {
  nlohmann::json pe = nlohmann::json::array();
  for (const auto& [e, v] : r.per_eps) pe.push_back({e, v});
  return {{"value", r.value}, {"converged", r.converged}, {"cauchy_gap", r.cauchy_gap}, {"per_eps", pe}};
}

// Richardson value at level j from levels j-1, j (first-order error model).
inline double richardson(double eps_prev, double v_prev, double eps, double v) {
  const double r = eps_prev / eps;
  return (r * v - v_prev) / (r - 1.0);
}

// Turns a per-eps trace into a limit estimate with the Cauchy acceptance rule.
inline IntegralResult certify(std::vector<std::pair<double, double>> per_eps, const EpsSchedule& sched) {
  IntegralResult r;
  r.per_eps = std::move(per_eps);
  const auto& p = r.per_eps;
  const std::size_t L = p.size();
  if (L == 0) return r;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(a)); };
  if (sched.extrapolate && L >= 2) {
    const double r1 = richardson(p[L - 2].first, p[L - 2].second, p[L - 1].first, p[L - 1].second);
    r.value = r1;
    if (L >= 3) {
      const double r0 = richardson(p[L - 3].first, p[L - 3].second, p[L - 2].first, p[L - 2].second);
      r.cauchy_gap = rel(r1, r0);
    } else {
      r.cauchy_gap = rel(p[L - 1].second, p[L - 2].second);
    }
  } else {
    r.value = p[L - 1].second;
    if (L >= 2) r.cauchy_gap = rel(p[L - 1].second, p[L - 2].second);
  }
  r.converged = std::isfinite(r.value) && r.cauchy_gap <= sched.tol_cauchy;
  return r;
}

namespace quotient {

// (1/k) * sum over left-point cells of g_J(s) (f_Jbar(s + k dt) - f_Jbar(s)); grid units dt = 1.
inline double forward(std::span<const double> g, std::span<const double> f, std::size_t k, Mode mode) {
  const std::size_t n = f.size() - 1;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += g[i] * (f[std::min(i + k, n)] - f[i]);
  if (mode == Mode::Closed) {
    double head = 0.0;
    for (std::size_t m = 0; m < k; ++m) head += f[std::min(m, n)];
    s += g[0] * head;
  }
  return s / static_cast<double>(k);
}

inline double backward(std::span<const double> g, std::span<const double> f, std::size_t k, Mode mode) {
  const std::size_t n = f.size() - 1;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += g[i] * (f[i] - (i >= k ? f[i - k] : 0.0));
  if (mode == Mode::Closed) {
    double tail = 0.0;
    for (std::size_t i = n; i < n + k; ++i) tail += f[n] - (i >= k ? f[i - k] : 0.0);
    s += g[n] * tail;
  }
  return s / static_cast<double>(k);
}

}  // namespace quotient

namespace detail {
inline void require_same_domain(const GridPath& g, const GridPath& f) {
  require(g.same_grid(f), "integrand and integrator must share domain and grid");
}
}  // namespace detail

// Forward integral of g against f by regularization.
inline IntegralResult forward_integral_det(const GridPath& g, const GridPath& f, Mode mode, const EpsSchedule& sched) {
  detail::require_same_domain(g, f);
  const auto ks = sched.multiples(f.step());
  std::vector<std::pair<double, double>> trace;
  for (std::size_t j = 0; j < ks.size(); ++j)
    trace.emplace_back(sched.eps[j], quotient::forward(g.values(), f.values(), ks[j], mode));
  return certify(std::move(trace), sched);
}

inline IntegralResult backward_integral_det(const GridPath& g, const GridPath& f, Mode mode, const EpsSchedule& sched) {
  detail::require_same_domain(g, f);
  const auto ks = sched.multiples(f.step());
  std::vector<std::pair<double, double>> trace;
  for (std::size_t j = 0; j < ks.size(); ++j)
    trace.emplace_back(sched.eps[j], quotient::backward(g.values(), f.values(), ks[j], mode));
  return certify(std::move(trace), sched);
}

struct MeasureIntegral {
  IntegralResult integral;
  // Part of the value carried by atoms sitting exactly at the left end of the domain.
  double left_atom_contribution = 0.0;
};

namespace detail {

struct MeasureDomain {
  std::size_t ia, ib;
};

inline MeasureDomain measure_domain(const SignedMeasure1D& mu, const GridPath& f) {
  mu.validate();
  const double tol = 1e-9 * f.step();
  require(mu.a >= f.t_start() - tol && mu.b <= f.t_end() + tol, "measure domain must lie inside the path domain");
  return {grid_index(mu.a, f.t_start(), f.step(), f.n_steps(), "measure left end"),
          grid_index(mu.b, f.t_start(), f.step(), f.n_steps(), "measure right end")};
}

}  // namespace detail

// int_[a,b] mu(ds) (f_Jbar(s+eps) - f(s)) / eps at eps = k * step, f_Jbar taken relative to [a,b].
inline double forward_measure_quotient(const SignedMeasure1D& mu, const GridPath& f, std::size_t k,
                                       double* left_atom = nullptr) {
  const auto [ia, ib] = detail::measure_domain(mu, f);
  const double eps = f.step() * static_cast<double>(k);
  const auto v = f.values();
  double s = 0.0;
  if (mu.density) {
    double d = 0.0;
    for (std::size_t i = ia; i < ib; ++i) d += mu.density->at(f.time(i)) * (v[std::min(i + k, ib)] - v[i]);
    s += d / static_cast<double>(k);
  }
  const double fb = v[ib];
  const double tol = 1e-12 * std::max(1.0, mu.b - mu.a);
  double left = 0.0;
  for (const auto& at : mu.atoms) {
    const double x = at.location + eps;
    const double q = at.mass * ((x >= mu.b ? fb : f.at(x)) - f.at(at.location)) / eps;
    s += q;
    if (std::abs(at.location - mu.a) <= tol) left += q;
  }
  if (left_atom) *left_atom = left;
  return s;
}

inline double backward_measure_quotient(const SignedMeasure1D& mu, const GridPath& f, std::size_t k) {
  const auto [ia, ib] = detail::measure_domain(mu, f);
  const double eps = f.step() * static_cast<double>(k);
  const auto v = f.values();
  double s = 0.0;
  if (mu.density) {
    double d = 0.0;
    for (std::size_t i = ia; i < ib; ++i) d += mu.density->at(f.time(i)) * (v[i] - (i >= ia + k ? v[i - k] : 0.0));
    s += d / static_cast<double>(k);
  }
  for (const auto& at : mu.atoms) {
    const double x = at.location - eps;
    s += at.mass * (f.at(at.location) - (x < mu.a ? 0.0 : f.at(x))) / eps;
  }
  return s;
}

inline MeasureIntegral forward_integral_measure(const SignedMeasure1D& mu, const GridPath& f, const EpsSchedule& sched) {
  const auto ks = sched.multiples(f.step());
  std::vector<std::pair<double, double>> trace;
  double left = 0.0;
  for (std::size_t j = 0; j < ks.size(); ++j) trace.emplace_back(sched.eps[j], forward_measure_quotient(mu, f, ks[j], &left));
  return {certify(std::move(trace), sched), left};
}

inline IntegralResult backward_integral_measure(const SignedMeasure1D& mu, const GridPath& f, const EpsSchedule& sched) {
  const auto ks = sched.multiples(f.step());
  std::vector<std::pair<double, double>> trace;
  for (std::size_t j = 0; j < ks.size(); ++j) trace.emplace_back(sched.eps[j], backward_measure_quotient(mu, f, ks[j]));
  return certify(std::move(trace), sched);
}

struct CovariationResult {
  GridPath bracket;  // x -> [f,g](x), zero at x = 0
  // value = bracket at the right end; cauchy_gap = relative sup-distance of the last two levels
  IntegralResult summary;
};

namespace detail {

// Cumulative (1/k) sum of increment products, anchored to zero at node i0.
inline void covariation_path(std::span<const double> f, std::span<const double> g, std::size_t k, std::size_t i0,
                             std::span<double> out) {
  const std::size_t n = f.size() - 1;
  const double inv = 1.0 / static_cast<double>(k);
  auto q = [&](std::size_t i) {
    const std::size_t j = std::min(i + k, n);
    return (f[j] - f[i]) * (g[j] - g[i]);
  };
  out[i0] = 0.0;
  double acc = 0.0;
  for (std::size_t i = i0; i < n; ++i) {
    acc += q(i);
    out[i + 1] = acc * inv;
  }
  acc = 0.0;
  for (std::size_t i = i0; i-- > 0;) {
    acc += q(i);
    out[i] = -acc * inv;
  }
}

}  // namespace detail

inline CovariationResult covariation_det(const GridPath& f, const GridPath& g, const EpsSchedule& sched) {
  detail::require_same_domain(f, g);
  require(f.t_start() <= 0.0 && f.t_end() >= 0.0, "covariation: domain must contain 0");
  const std::size_t i0 = grid_index(0.0, f.t_start(), f.step(), f.n_steps(), "covariation origin");
  const auto ks = sched.multiples(f.step());
  const std::size_t n = f.n_steps();
  std::vector<double> cur(n + 1), prev(n + 1);
  std::vector<std::pair<double, double>> trace;
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < ks.size(); ++j) {
    std::swap(cur, prev);
    detail::covariation_path(f.values(), g.values(), ks[j], i0, cur);
    trace.emplace_back(sched.eps[j], cur[n]);
    if (j > 0) {
      double d = 0.0, m = 0.0;
      for (std::size_t i = 0; i <= n; ++i) {
        d = std::max(d, std::abs(cur[i] - prev[i]));
        m = std::max(m, std::abs(cur[i]));
      }
      gap = d / std::max(1.0, m);
    }
  }
  CovariationResult r{GridPath(f.t_start(), f.t_end(), cur), {}};
  r.summary.value = cur[n];
  r.summary.per_eps = std::move(trace);
  r.summary.cauchy_gap = gap;
  r.summary.converged = gap <= sched.tol_cauchy;
  return r;
}

inline CovariationResult quadratic_variation_det(const GridPath& f, const EpsSchedule& sched) {
  return covariation_det(f, f, sched);
}

using MeasureKernel = std::function<SignedMeasure1D(double t, const GridPath& gamma)>;

struct StrongExistenceOptions {
  std::size_t n_times = 16;
  double overflow_guard = 1e100;
};

struct StrongExistenceReport {
  std::vector<double> t;
  std::vector<IntegralResult> existence;  // I^-(t, eta) per t
  std::vector<double> envelope;           // sup over lattice of |I^-(t, gamma, eps)|
  double envelope_integral = 0.0;
  bool all_converged = true;
  bool dominated = true;
  bool passed() const noexcept { return all_converged && dominated; }
};

// Existence of I^-(t, eta) on a time grid plus an empirical dominating envelope over the
// shift lattice gamma_j = eta(. - j/m) and regularization lattice {j/m} U schedule.
inline StrongExistenceReport gamma_strong_existence_check(const MeasureKernel& Gk, const GridPath& eta,
                                                          const EpsSchedule& sched, std::size_t m,
                                                          const StrongExistenceOptions& opt = {}) {
  require(m >= 1, "strong existence: lattice size must be positive");
  require(eta.t_end() == 0.0, "strong existence: eta must live on [-T,0]");
  const double dt = eta.step();
  const std::size_t n = eta.n_steps();
  const std::size_t nt = std::max<std::size_t>(1, std::min(opt.n_times, n));

  std::vector<GridPath> lattice;
  for (std::size_t j = 0; j <= m; ++j) {
    const double e = std::min(1.0, dt * std::round(static_cast<double>(j) / static_cast<double>(m) / dt));
    lattice.push_back(shift_member(eta, e));
  }
  std::vector<std::size_t> eps_k = sched.multiples(dt);
  for (std::size_t j = 1; j <= m; ++j) {
    const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(j) / static_cast<double>(m) / dt));
    if (k >= 1) eps_k.push_back(k);
  }

  StrongExistenceReport rep;
  for (std::size_t i = 0; i <= nt; ++i) {
    const std::size_t node = static_cast<std::size_t>(std::llround(static_cast<double>(n) * static_cast<double>(i) / static_cast<double>(nt)));
    const double t = dt * static_cast<double>(node);
    rep.t.push_back(t);
    if (node == 0) {
      IntegralResult zero;
      zero.value = 0.0;
      zero.converged = true;
      zero.cauchy_gap = 0.0;
      rep.existence.push_back(zero);
      rep.envelope.push_back(0.0);
      continue;
    }
    auto restrict = [&](const SignedMeasure1D& mu) { return mu.a < -t ? mu.restricted_left(-t) : mu; };
    const auto ex = forward_integral_measure(restrict(Gk(t, eta)), eta, sched).integral;
    rep.all_converged = rep.all_converged && ex.converged;
    rep.existence.push_back(ex);
    double env = 0.0;
    for (const auto& gamma : lattice) {
      const SignedMeasure1D mu = restrict(Gk(t, gamma));
      for (std::size_t k : eps_k) {
        const double v = forward_measure_quotient(mu, gamma, k);
        if (!std::isfinite(v) || std::abs(v) > opt.overflow_guard)
          throw NumericalError("strong existence: regularized integral diverged beyond the overflow guard");
        env = std::max(env, std::abs(v));
      }
    }
    rep.envelope.push_back(env);
  }
  for (std::size_t i = 1; i < rep.t.size(); ++i)
    rep.envelope_integral += 0.5 * (rep.t[i] - rep.t[i - 1]) * (rep.envelope[i] + rep.envelope[i - 1]);
  rep.dominated = std::isfinite(rep.envelope_integral);
  return rep;
}

}  // namespace pathreg
