#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pathreg/detcalc.hpp"

namespace pathreg {

// |U| <= C (1 + ||eta||^m)
struct GrowthBound {
  double C = 1.0;
  double m = 1.0;
  double bound(double sup_norm) const { return C * (1.0 + std::pow(sup_norm, m)); }
};

using WindowFn = std::function<double(double t, const WindowView& w)>;

struct PathFunctional {
  std::string name;
  WindowFn eval;
  WindowFn time_derivative;
  WindowFn vertical;
  std::function<SignedMeasure1D(double, const WindowView&)> perp;
  std::function<DiagonalMeasure(double, const WindowView&)> second;
  // The second-derivative supplier may be queried at shifted times t + x.
  bool second_at_shifted_times = true;
  // eval accepts windows carrying a jump at 0.
  bool jump_extension = true;
  std::optional<GrowthBound> growth;

  double operator()(double t, const WindowView& w) const { return eval(t, w); }
};

inline double window_trapezoid(const WindowView& w, std::size_t from_node = 0) {
  const std::size_t n = w.n_steps();
  if (from_node >= n) return 0.0;
  double s = 0.5 * (w.raw_node(from_node) + w.raw_node(n));
  for (std::size_t j = from_node + 1; j < n; ++j) s += w.raw_node(j);
  return s * w.step();
}

// ---- built-in functionals ----

inline PathFunctional present_value() {
  PathFunctional f;
  f.name = "present_value";
  f.eval = [](double, const WindowView& w) { return w.present(); };
  f.time_derivative = [](double, const WindowView&) { return 0.0; };
  f.vertical = [](double, const WindowView&) { return 1.0; };
  f.perp = [](double, const WindowView& w) { return SignedMeasure1D::zero(-w.width(), 0.0); };
  f.second = [](double, const WindowView& w) { return DiagonalMeasure::atom(w.width(), 0.0); };
  f.growth = GrowthBound{1.0, 1.0};
  return f;
}

// U(t, eta) = F(t, eta(0)) for a smooth scalar F.
struct ScalarField {
  std::function<double(double, double)> f, ft, fx, fxx;
};

inline PathFunctional present_field(std::string name, ScalarField F) {
  PathFunctional u;
  u.name = std::move(name);
  u.eval = [F](double t, const WindowView& w) { return F.f(t, w.present()); };
  u.time_derivative = [F](double t, const WindowView& w) { return F.ft(t, w.present()); };
  u.vertical = [F](double t, const WindowView& w) { return F.fx(t, w.present()); };
  u.perp = [](double, const WindowView& w) { return SignedMeasure1D::zero(-w.width(), 0.0); };
  u.second = [F](double t, const WindowView& w) { return DiagonalMeasure::atom(w.width(), F.fxx(t, w.present())); };
  return u;
}

// eta(0)^2, plus (T - t) when with_time_term.
inline PathFunctional present_square(double T, bool with_time_term = false) {
  PathFunctional f = present_field(with_time_term ? "present_square_solution" : "present_square",
                                   {[T, with_time_term](double t, double x) { return x * x + (with_time_term ? T - t : 0.0); },
                                    [with_time_term](double, double) { return with_time_term ? -1.0 : 0.0; },
                                    [](double, double x) { return 2.0 * x; }, [](double, double) { return 2.0; }});
  f.growth = GrowthBound{1.0 + T, 2.0};
  return f;
}

// int_{-T}^0 eta(x) dx by the trapezoid rule; the jump at 0 does not contribute.
inline PathFunctional path_integral() {
  PathFunctional f;
  f.name = "path_integral";
  f.eval = [](double, const WindowView& w) { return window_trapezoid(w); };
  f.time_derivative = [](double, const WindowView&) { return 0.0; };
  f.vertical = [](double, const WindowView&) { return 0.0; };
  f.perp = [](double, const WindowView& w) {
    return SignedMeasure1D::with_density(GridPath::constant(-w.width(), 0.0, 1, 1.0));
  };
  f.second = [](double, const WindowView& w) { return DiagonalMeasure::atom(w.width(), 0.0); };
  f.growth = GrowthBound{1.0, 1.0};
  return f;
}

// int_{-t}^0 eta + (T - t) eta(0): solution of the path-dependent heat equation with terminal path_integral.
inline PathFunctional path_integral_solution(double T) {
  PathFunctional f;
  f.name = "path_integral_solution";
  auto first = [](double t, const WindowView& w) {
    return grid_index(-t, -w.width(), w.step(), w.n_steps(), "path_integral_solution time");
  };
  f.eval = [T, first](double t, const WindowView& w) {
    return window_trapezoid(w, first(t, w)) + (T - t) * w.present();
  };
  f.time_derivative = [first](double t, const WindowView& w) { return w.raw_node(first(t, w)) - w.present(); };
  f.vertical = [T](double t, const WindowView&) { return T - t; };
  f.perp = [](double t, const WindowView& w) {
    if (t <= 0.0) return SignedMeasure1D::zero(-w.width(), 0.0);
    return SignedMeasure1D::with_density(GridPath::constant(-w.width(), 0.0, 1, 1.0)).restricted_left(-t);
  };
  f.second = [](double, const WindowView& w) { return DiagonalMeasure::atom(w.width(), 0.0); };
  f.growth = GrowthBound{2.0 * T, 1.0};
  return f;
}

inline PathFunctional sup_norm() {
  PathFunctional f;
  f.name = "sup_norm";
  f.eval = [](double, const WindowView& w) { return w.sup_norm(); };
  f.growth = GrowthBound{1.0, 1.0};
  return f;
}

inline PathFunctional abs_integral() {
  PathFunctional f;
  f.name = "abs_integral";
  f.eval = [](double, const WindowView& w) {
    const std::size_t n = w.n_steps();
    double s = 0.5 * (std::abs(w.raw_node(0)) + std::abs(w.raw_node(n)));
    for (std::size_t j = 1; j < n; ++j) s += std::abs(w.raw_node(j));
    return s * w.step();
  };
  f.growth = GrowthBound{1.0, 1.0};
  return f;
}

inline PathFunctional constant_functional(double c) {
  PathFunctional f;
  f.name = "constant";
  f.eval = [c](double, const WindowView&) { return c; };
  f.time_derivative = [](double, const WindowView&) { return 0.0; };
  f.vertical = [](double, const WindowView&) { return 0.0; };
  f.perp = [](double, const WindowView& w) { return SignedMeasure1D::zero(-w.width(), 0.0); };
  f.second = [](double, const WindowView& w) { return DiagonalMeasure::atom(w.width(), 0.0); };
  f.growth = GrowthBound{std::max(1e-300, std::abs(c)), 0.0};
  return f;
}

// ---- cylindrical functionals ----

struct Kernel {
  std::string name;
  std::function<double(double)> phi, dphi, d2phi;
};

struct CylindricalFunctional {
  std::string name;
  double T = 1.0;
  std::vector<Kernel> phi;
  std::function<double(std::span<const double>)> g;
  std::function<void(std::span<const double>, std::span<double>)> grad;
  std::function<void(std::span<const double>, std::span<double>)> hess;  // row-major N x N
  std::size_t N() const { return phi.size(); }
};

inline Kernel named_kernel(const std::string& key) {
  if (key == "one") return {key, [](double) { return 1.0; }, [](double) { return 0.0; }, [](double) { return 0.0; }};
  if (key == "u") return {key, [](double u) { return u; }, [](double) { return 1.0; }, [](double) { return 0.0; }};
  if (key == "u2") return {key, [](double u) { return u * u; }, [](double u) { return 2 * u; }, [](double) { return 2.0; }};
  if (key == "u3")
    return {key, [](double u) { return u * u * u; }, [](double u) { return 3 * u * u; }, [](double u) { return 6 * u; }};
  if (key == "cos")
    return {key, [](double u) { return std::cos(u); }, [](double u) { return -std::sin(u); }, [](double u) { return -std::cos(u); }};
  if (key == "sin")
    return {key, [](double u) { return std::sin(u); }, [](double u) { return std::cos(u); }, [](double u) { return -std::sin(u); }};
  throw ValidationError("unknown cylindrical kernel: " + key);
}

// g families on R^N with analytic gradient and Hessian.
inline void set_named_outer(CylindricalFunctional& G, const std::string& key) {
  const std::size_t N = G.N();
  auto sum = [](std::span<const double> y) { return std::accumulate(y.begin(), y.end(), 0.0); };
  auto fill = [N](std::span<double> h, double v) { std::fill(h.begin(), h.begin() + static_cast<long>(N * N), v); };
  if (key == "linear") {
    G.g = sum;
    G.grad = [](std::span<const double>, std::span<double> d) { std::fill(d.begin(), d.end(), 1.0); };
    G.hess = [fill](std::span<const double>, std::span<double> h) { fill(h, 0.0); };
  } else if (key == "square") {
    G.g = [sum](std::span<const double> y) { return sum(y) * sum(y); };
    G.grad = [sum](std::span<const double> y, std::span<double> d) { std::fill(d.begin(), d.end(), 2 * sum(y)); };
    G.hess = [fill](std::span<const double>, std::span<double> h) { fill(h, 2.0); };
  } else if (key == "sumsq") {
    G.g = [](std::span<const double> y) {
      double s = 0;
      for (double v : y) s += v * v;
      return s;
    };
    G.grad = [](std::span<const double> y, std::span<double> d) {
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = 2 * y[i];
    };
    G.hess = [N, fill](std::span<const double>, std::span<double> h) {
      fill(h, 0.0);
      for (std::size_t i = 0; i < N; ++i) h[i * N + i] = 2.0;
    };
  } else if (key == "product") {
    G.g = [](std::span<const double> y) {
      double p = 1;
      for (double v : y) p *= v;
      return p;
    };
    auto prod_except = [](std::span<const double> y, std::size_t a, std::size_t b) {
      double p = 1;
      for (std::size_t k = 0; k < y.size(); ++k)
        if (k != a && k != b) p *= y[k];
      return p;
    };
    G.grad = [prod_except](std::span<const double> y, std::span<double> d) {
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = prod_except(y, i, i);
    };
    G.hess = [N, prod_except](std::span<const double> y, std::span<double> h) {
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) h[i * N + j] = i == j ? 0.0 : prod_except(y, i, j);
    };
  } else if (key == "cos") {
    G.g = [sum](std::span<const double> y) { return std::cos(sum(y)); };
    G.grad = [sum](std::span<const double> y, std::span<double> d) { std::fill(d.begin(), d.end(), -std::sin(sum(y))); };
    G.hess = [sum, fill](std::span<const double> y, std::span<double> h) { fill(h, -std::cos(sum(y))); };
  } else if (key == "quad") {
    // sum y_i^2 + 0.5 sum_{i<j} y_i y_j + sum_i (i+1) y_i / N
    G.g = [N](std::span<const double> y) {
      double s = 0;
      for (std::size_t i = 0; i < N; ++i) {
        s += y[i] * y[i] + static_cast<double>(i + 1) * y[i] / static_cast<double>(N);
        for (std::size_t j = i + 1; j < N; ++j) s += 0.5 * y[i] * y[j];
      }
      return s;
    };
    G.grad = [N](std::span<const double> y, std::span<double> d) {
      for (std::size_t i = 0; i < N; ++i) {
        d[i] = 2 * y[i] + static_cast<double>(i + 1) / static_cast<double>(N);
        for (std::size_t j = 0; j < N; ++j)
          if (j != i) d[i] += 0.5 * y[j];
      }
    };
    G.hess = [N](std::span<const double>, std::span<double> h) {
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) h[i * N + j] = i == j ? 2.0 : 0.5;
    };
  } else {
    throw ValidationError("unknown cylindrical outer function: " + key);
  }
}

// "cylindrical:<g>:<phi1,phi2,...>"
inline CylindricalFunctional parse_cylindrical(const std::string& key, double T) {
  const std::string prefix = "cylindrical:";
  require(key.rfind(prefix, 0) == 0, "cylindrical key must start with \"cylindrical:\"");
  const std::string rest = key.substr(prefix.size());
  const auto colon = rest.find(':');
  require(colon != std::string::npos, "cylindrical key needs <g>:<phi,...>");
  CylindricalFunctional G;
  G.name = key;
  G.T = T;
  std::stringstream ss(rest.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, ',')) G.phi.push_back(named_kernel(item));
  require(!G.phi.empty(), "cylindrical key needs at least one kernel");
  set_named_outer(G, rest.substr(0, colon));
  return G;
}

inline EpsSchedule cylindrical_schedule(double dt, double T) { return EpsSchedule::for_grid(dt, T, true); }

// Closed forward integrals int_[-T,0] phi_i(x+T) d^- eta(x), plus phi_i(T) * jump.
inline std::vector<IntegralResult> cylindrical_integrals(const CylindricalFunctional& G, const WindowView& w,
                                                         const EpsSchedule& sched) {
  require(std::abs(w.width() - G.T) <= 1e-12 * std::max(1.0, G.T), "cylindrical functional: window width differs from T");
  const GridPath eta = w.materialize();
  std::vector<IntegralResult> out;
  for (const auto& k : G.phi) {
    const GridPath ker = GridPath::sample(-G.T, 0.0, eta.n_steps(), [&](double x) { return k.phi(x + G.T); });
    auto r = forward_integral_det(ker, eta, Mode::Closed, sched);
    const double add = k.phi(G.T) * w.jump();
    r.value += add;
    for (auto& [e, v] : r.per_eps) v += add;
    out.push_back(std::move(r));
  }
  return out;
}

inline double eval_cylindrical(const CylindricalFunctional& G, const WindowView& w, const EpsSchedule& sched) {
  const auto ints = cylindrical_integrals(G, w, sched);
  std::vector<double> y;
  for (const auto& r : ints) {
    if (!r.converged)
      throw NonConvergenceError("cylindrical functional " + G.name + ": forward integral did not converge (gap " +
                                std::to_string(r.cauchy_gap) + ")");
    y.push_back(r.value);
  }
  return check_finite(G.g(y), "cylindrical outer function");
}

inline double eval_cylindrical(const CylindricalFunctional& G, const WindowView& w) {
  return eval_cylindrical(G, w, cylindrical_schedule(w.step(), G.T));
}

struct CylindricalDerivatives {
  double vertical = 0.0;
  SignedMeasure1D perp;
  DiagonalMeasure second;
};

// Chain rule through y_i = phi_i(T) eta(0) - int eta(x) phi_i'(x+T) dx.
inline CylindricalDerivatives derivatives_cylindrical(const CylindricalFunctional& G, const WindowView& w,
                                                      std::size_t square_nodes = 64) {
  require(static_cast<bool>(G.grad) && static_cast<bool>(G.hess), "cylindrical derivatives need gradient and Hessian");
  const std::size_t N = G.N();
  const double T = G.T;
  std::vector<double> y;
  for (const auto& r : cylindrical_integrals(G, w, cylindrical_schedule(w.step(), T))) y.push_back(r.value);
  std::vector<double> d(N), h(N * N);
  G.grad(y, d);
  G.hess(y, h);
  const std::size_t n = w.n_steps();
  CylindricalDerivatives out;
  for (std::size_t i = 0; i < N; ++i) out.vertical += d[i] * G.phi[i].phi(T);
  auto psi = [&](std::size_t i, double x) { return -G.phi[i].dphi(x + T); };
  out.perp = SignedMeasure1D::with_density(GridPath::sample(-T, 0.0, n, [&](double x) {
    double s = 0;
    for (std::size_t i = 0; i < N; ++i) s += d[i] * psi(i, x);
    return s;
  }));
  DiagonalMeasure mu = DiagonalMeasure::atom(T, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) mu.lambda += h[i * N + j] * G.phi[i].phi(T) * G.phi[j].phi(T);
  mu.g2 = GridPath::sample(-T, 0.0, n, [&](double x) {
    double s = 0;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) s += h[i * N + j] * psi(i, x) * G.phi[j].phi(T);
    return s;
  });
  mu.g3 = GridPath::sample(-T, 0.0, n, [&](double x) {
    double s = 0;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) s += h[i * N + j] * G.phi[i].phi(T) * psi(j, x);
    return s;
  });
  SquareDensity sq;
  sq.n = std::max<std::size_t>(1, std::min(square_nodes, n));
  const double dq = T / static_cast<double>(sq.n);
  for (std::size_t a = 0; a <= sq.n; ++a)
    for (std::size_t b = 0; b <= sq.n; ++b) {
      const double x = a == sq.n ? 0.0 : -T + dq * static_cast<double>(a);
      const double yy = b == sq.n ? 0.0 : -T + dq * static_cast<double>(b);
      double s = 0;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) s += h[i * N + j] * psi(i, x) * psi(j, yy);
      sq.values.push_back(s);
    }
  mu.g1 = std::move(sq);
  out.second = std::move(mu);
  return out;
}

inline PathFunctional as_path_functional(const CylindricalFunctional& G) {
  PathFunctional f;
  f.name = G.name;
  f.eval = [G](double, const WindowView& w) { return eval_cylindrical(G, w); };
  if (G.grad && G.hess) {
    f.vertical = [G](double, const WindowView& w) { return derivatives_cylindrical(G, w, 1).vertical; };
    f.perp = [G](double, const WindowView& w) { return derivatives_cylindrical(G, w, 1).perp; };
    f.second = [G](double, const WindowView& w) { return derivatives_cylindrical(G, w).second; };
    f.time_derivative = [](double, const WindowView&) { return 0.0; };
  }
  return f;
}

// Registry of named functionals; T is the window width.
inline PathFunctional make_functional(const std::string& key, double T) {
  if (key == "present_square") return present_square(T, false);
  if (key == "present_square_solution") return present_square(T, true);
  if (key == "present_value") return present_value();
  if (key == "path_integral") return path_integral();
  if (key == "path_integral_solution") return path_integral_solution(T);
  if (key == "sup_norm") return sup_norm();
  if (key == "abs_integral") return abs_integral();
  if (key.rfind("cylindrical:", 0) == 0) return as_path_functional(parse_cylindrical(key, T));
  throw ValidationError("unknown functional key: " + key);
}

// ---- finite-difference estimators ----

inline double default_bump(const WindowView& w) { return 1e-4 * (1.0 + std::abs(w.present())); }

inline double fd_vertical(const PathFunctional& U, double t, const WindowView& w, double h = 0.0) {
  require(U.jump_extension, "fd_vertical: functional " + U.name + " has no extension to paths with a jump at 0");
  if (h <= 0.0) h = default_bump(w);
  return (U(t, w.with_jump(w.jump() + h)) - U(t, w.with_jump(w.jump() - h))) / (2.0 * h);
}

// Central difference of U along a continuous direction zeta sampled on the window nodes.
inline double fd_directional(const PathFunctional& U, double t, const WindowView& w, std::span<const double> zeta,
                             double h) {
  const GridPath base = w.materialize();
  std::vector<double> up(base.n_steps() + 1), dn(base.n_steps() + 1);
  for (std::size_t j = 0; j <= base.n_steps(); ++j) {
    up[j] = base[j] + h * zeta[j];
    dn[j] = base[j] - h * zeta[j];
  }
  const GridPath pu(base.t_start(), 0.0, std::move(up)), pd(base.t_start(), 0.0, std::move(dn));
  return (U(t, WindowView::of(pu, w.jump())) - U(t, WindowView::of(pd, w.jump()))) / (2.0 * h);
}

inline double fd_time_derivative(const PathFunctional& U, double t, const WindowView& w, double T, double h = 1e-5) {
  if (t - h < 0.0) return (U(t + h, w) - U(t, w)) / h;
  if (t + h > T) return (U(t, w) - U(t - h, w)) / h;
  return (U(t + h, w) - U(t - h, w)) / (2.0 * h);
}

// Density of D^perp on a lattice of m hat functions; the vertical part is removed at x = 0.
inline SignedMeasure1D fd_perp(const PathFunctional& U, double t, const WindowView& w, std::size_t m = 32) {
  const std::size_t n = w.n_steps();
  m = std::max<std::size_t>(1, std::min(m, n));
  require(n % m == 0, "fd_perp: lattice must divide the window grid");
  const std::size_t stride = n / m;
  const double hc = w.width() / static_cast<double>(m);
  const double h = default_bump(w);
  const double vert = U.vertical ? U.vertical(t, w) : fd_vertical(U, t, w);
  std::vector<double> dens(m + 1), zeta(n + 1);
  for (std::size_t c = 0; c <= m; ++c) {
    for (std::size_t j = 0; j <= n; ++j) {
      const double r = std::abs(static_cast<double>(j) - static_cast<double>(c * stride)) / static_cast<double>(stride);
      zeta[j] = std::max(0.0, 1.0 - r);
    }
    double dd = fd_directional(U, t, w, zeta, h);
    double mass = hc;
    if (c == 0 || c == m) mass = 0.5 * hc;
    if (c == m) dd -= vert;
    dens[c] = dd / mass;
  }
  return SignedMeasure1D::with_density(GridPath(-w.width(), 0.0, std::move(dens)));
}

// ---- operator L ----

using SigmaFn = std::function<double(double t, const WindowView& w)>;

inline SigmaFn unit_sigma() {
  return [](double, const WindowView&) { return 1.0; };
}

struct OperatorLOptions {
  bool check_existence = true;
  std::size_t existence_lattice = 4;
  std::size_t existence_times = 4;
};

struct OperatorLResult {
  double value = 0.0;
  double time_term = 0.0;
  double perp_term = 0.0;
  double second_term = 0.0;
  bool frozen_time = false;
  IntegralResult perp_integral;
  std::optional<StrongExistenceReport> existence;
};

inline OperatorLResult operator_L(const PathFunctional& U, double t, const GridPath& eta, const SigmaFn& sigma,
                                  const EpsSchedule& sched, const OperatorLOptions& opt = {}) {
  require(std::abs(eta.t_end()) <= 1e-12, "operator_L: eta must live on [-T,0]");
  require(static_cast<bool>(U.second), "operator_L: functional " + U.name + " has no second-derivative supplier");
  const double T = -eta.t_start();
  require(t >= 0.0 && t <= T + 1e-12, "operator_L: t outside [0,T]");
  const WindowView w = WindowView::of(eta);
  const std::size_t n = eta.n_steps();
  OperatorLResult r;

  r.time_term = U.time_derivative ? U.time_derivative(t, w) : fd_time_derivative(U, t, w, T);

  auto perp_at = [&U](double s, const WindowView& v) { return U.perp ? U.perp(s, v) : fd_perp(U, s, v); };
  if (t > 0.0) {
    const std::size_t it = grid_index(-t, -T, eta.step(), n, "operator_L time");
    const double a = eta.time(it);
    const SignedMeasure1D mu = perp_at(t, w).restricted_left(a, false);
    r.perp_integral = forward_integral_measure(mu, eta, sched).integral;
    if (!r.perp_integral.converged)
      throw NonConvergenceError("operator_L: perpendicular forward integral did not converge for " + U.name +
                                " (gap " + std::to_string(r.perp_integral.cauchy_gap) + ")");
    r.perp_term = r.perp_integral.value;
    if (opt.check_existence) {
      MeasureKernel Gk = [&](double s, const GridPath& gamma) { return perp_at(s, WindowView::of(gamma)); };
      StrongExistenceOptions so;
      so.n_times = opt.existence_times;
      r.existence = gamma_strong_existence_check(Gk, eta, sched, opt.existence_lattice, so);
      if (!r.existence->passed())
        throw NonConvergenceError("operator_L: strong existence diagnostic failed for " + U.name);
    }
  } else {
    r.perp_integral.value = 0.0;
    r.perp_integral.converged = true;
    r.perp_integral.cauchy_gap = 0.0;
  }

  const DiagonalMeasure mu_t = U.second(t, w);
  const double s0 = sigma(t, w);
  double second = mu_t.lambda * s0 * s0;
  if (t > 0.0) {
    const std::size_t it = grid_index(-t, -T, eta.step(), n, "operator_L time");
    r.frozen_time = !U.second_at_shifted_times;
    double acc = 0.0;
    for (std::size_t j = it; j <= n; ++j) {
      const double x = eta.time(j);
      double g4;
      if (U.second_at_shifted_times) {
        const DiagonalMeasure mu_s = U.second(t + x, w);
        g4 = mu_s.g4 ? mu_s.g4->at(x) : 0.0;
      } else {
        g4 = mu_t.g4 ? mu_t.g4->at(x) : 0.0;
      }
      if (g4 == 0.0) continue;
      const double sx = sigma(t + x, w.reanchored(w.anchor() + x));
      const double wgt = (j == it || j == n) ? 0.5 : 1.0;
      acc += wgt * g4 * sx * sx;
    }
    second += acc * eta.step();
  }
  r.second_term = 0.5 * second;
  r.value = r.time_term + r.perp_term + r.second_term;
  return r;
}

// ---- horizontal-derivative identities ----

struct HorizontalOptions {
  bool fd_horizontal = false;
  double fd_step = 0.0;  // 0 selects 4 grid steps
  double qv_tolerance = 0.05;
};

struct HorizontalReport {
  bool absolutely_continuous = true;  // D^perp has no atoms
  IntegralResult rhs_ac;              // int_[-T,0] D^ac U d^+ eta (Closed backward)
  IntegralResult rhs_perp;            // int_]-T,0] D^perp U d^+ eta
  double correction = 0.0;            // 0.5 * int g4 d[eta]
  double rhs_second_order = 0.0;      // rhs_perp - correction
  CovariationResult qv;
  std::optional<double> fd_estimate;
};

inline HorizontalReport horizontal_identity_check(const PathFunctional& U, const GridPath& eta, const EpsSchedule& sched,
                                                  double t = 0.0, const HorizontalOptions& opt = {}) {
  require(std::abs(eta.t_end()) <= 1e-12, "horizontal identities: eta must live on [-T,0]");
  const WindowView w = WindowView::of(eta);
  const double T = -eta.t_start();
  const std::size_t n = eta.n_steps();
  HorizontalReport rep;
  const SignedMeasure1D perp = U.perp ? U.perp(t, w) : fd_perp(U, t, w);
  for (const auto& a : perp.atoms)
    if (a.mass != 0.0) rep.absolutely_continuous = false;

  const GridPath dac = GridPath::sample(-T, 0.0, n, [&](double x) { return perp.density ? perp.density->at(x) : 0.0; });
  if (rep.absolutely_continuous) {
    rep.rhs_ac = backward_integral_det(dac, eta, Mode::Closed, sched);
    if (!rep.rhs_ac.converged) throw NonConvergenceError("horizontal identities: backward integral did not converge");
  }

  SignedMeasure1D open_perp = perp;
  open_perp.atoms.clear();
  for (const auto& a : perp.atoms)
    if (a.location > -T + 1e-12 * std::max(1.0, T)) open_perp.atoms.push_back(a);
  rep.rhs_perp = backward_integral_measure(open_perp, eta, sched);
  if (!rep.rhs_perp.converged) throw NonConvergenceError("horizontal identities: backward integral did not converge");

  EpsSchedule qs = sched;
  qs.tol_cauchy = opt.qv_tolerance;
  qs.extrapolate = false;
  rep.qv = quadratic_variation_det(eta, qs);
  if (!rep.qv.summary.converged) throw NonConvergenceError("horizontal identities: quadratic variation did not converge");
  if (U.second) {
    const DiagonalMeasure mu = U.second(t, w);
    if (mu.g4) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += mu.g4->at(eta.time(i)) * (rep.qv.bracket[i + 1] - rep.qv.bracket[i]);
      rep.correction = 0.5 * s;
    }
  }
  rep.rhs_second_order = rep.rhs_perp.value - rep.correction;

  if (opt.fd_horizontal) {
    const double h = opt.fd_step > 0.0 ? opt.fd_step : 4.0 * eta.step();
    const GridPath shifted = shift_path(eta, h);
    rep.fd_estimate = (U(t, w) - U(t, WindowView::of(shifted))) / h;
  }
  return rep;
}

}  // namespace pathreg
