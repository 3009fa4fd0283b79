#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/random/sobol.hpp>

#include "pathreg/stochcalc.hpp"

namespace pathreg {

// ---- stochastic flow ----

// W_s^{t,eta}: eta shifted into the past, eta(0) plus a Brownian increment afterwards.
struct FlowSpec {
  double t = 0.0;
  GridPath eta;
  std::uint64_t seed = 0;
  std::size_t n_paths = 1;

  double horizon() const { return -eta.t_start(); }
  double step() const { return eta.step(); }
  std::size_t past_steps() const { return eta.n_steps(); }
  std::size_t flow_steps() const { return grid_index(horizon() - t, 0.0, step(), 1u << 30, "flow start"); }

  void validate() const {
    require(std::abs(eta.t_end()) <= 1e-12, "FlowSpec: eta must live on [-T, 0]");
    require(t >= 0.0 && t <= horizon() + 1e-12, "FlowSpec: t outside [0, T]");
    require(is_grid_multiple(t, step()), "FlowSpec: t must be a grid node");
    require(n_paths >= 1, "FlowSpec: n_paths must be positive");
  }
};

// Concatenated trajectory on [t - T, T]: eta on the past, eta(0) + W on [t, T].
class Flow {
 public:
  explicit Flow(FlowSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const FlowSpec& spec() const noexcept { return spec_; }
  double origin() const { return spec_.t - spec_.horizon(); }

  std::vector<double> path(std::size_t i) const {
    const std::size_t n = spec_.past_steps(), m = spec_.flow_steps();
    std::vector<double> z(n + m + 1);
    for (std::size_t j = 0; j <= n; ++j) z[j] = spec_.eta[j];
    auto rng = substream(spec_.seed, i, 0x666c6f77);
    std::normal_distribution<double> nd;
    const double sq = std::sqrt(spec_.step());
    for (std::size_t l = 0; l < m; ++l) z[n + l + 1] = z[n + l] + sq * nd(rng);
    return z;
  }

  WindowView window(std::span<const double> z, double s) const {
    require(s >= spec_.t - 1e-12 && s <= spec_.horizon() + 1e-12, "flow: s outside [t, T]");
    return WindowView(z, origin(), spec_.step(), s, spec_.horizon());
  }

  // Flow-grid times t = s_0 < ... < s_m = T.
  double time(std::size_t l) const {
    return l == spec_.flow_steps() ? spec_.horizon() : spec_.t + spec_.step() * static_cast<double>(l);
  }

 private:
  FlowSpec spec_;
};

inline std::vector<GridPath> flow_sample(const FlowSpec& spec, double s) {
  const Flow flow(spec);
  grid_index(s - spec.t, 0.0, spec.step(), spec.flow_steps(), "flow_sample time");
  std::vector<std::optional<GridPath>> out(spec.n_paths);
  parallel_partitions(spec.n_paths, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto z = flow.path(i);
      out[i] = flow.window(z, s).materialize();
    }
  });
  return detail::unwrap(std::move(out));
}

// ---- Monte-Carlo representation ----

struct SolutionEstimate {
  double value = std::nan("");
  double std_error = 0.0;
  std::size_t n_paths = 0;
  nlohmann::json diagnostics = nlohmann::json::object();
};

inline nlohmann::json to_json(const SolutionEstimate& s) {
  return {{"value", s.value}, {"std_error", s.std_error}, {"n_paths", s.n_paths}, {"diagnostics", s.diagnostics}};
}

inline SolutionEstimate estimate_from(const std::vector<double>& v) {
  SolutionEstimate s;
  s.value = stats::mean(v);
  s.std_error = stats::std_error(v);
  s.n_paths = v.size();
  return s;
}

using PathDriver = std::function<double(double s, const WindowView& w)>;

struct LinearMcOptions {
  double growth_guard = 1.0;  // multiplier on the declared growth bound
};

// E[G(W_T) + int_t^T F(s, W_s) ds] with the time integral by trapezoid along each path.
inline SolutionEstimate solve_linear_mc(const PathFunctional& G, const PathDriver& F, const FlowSpec& spec,
                                        const LinearMcOptions& opt = {}) {
  const Flow flow(spec);
  const double T = spec.horizon();
  const std::size_t m = spec.flow_steps();
  std::vector<double> v(spec.n_paths);
  parallel_partitions(spec.n_paths, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto z = flow.path(i);
      const WindowView wT = flow.window(z, T);
      double g = G(T, wT);
      if (!std::isfinite(g)) throw NumericalError("solve_linear_mc: non-finite terminal value");
      if (G.growth && std::abs(g) > opt.growth_guard * G.growth->bound(wT.sup_norm()))
        throw NumericalError("solve_linear_mc: growth guard tripped for " + G.name);
      if (F && m > 0) {
        double acc = 0.0;
        for (std::size_t l = 0; l <= m; ++l) {
          const double s = flow.time(l);
          acc += ((l == 0 || l == m) ? 0.5 : 1.0) * F(s, flow.window(z, s));
        }
        g += check_finite(acc * spec.step(), "driver integral");
      }
      v[i] = g;
    }
  });
  auto r = estimate_from(v);
  r.diagnostics = {{"t", spec.t}, {"flow_steps", m}, {"functional", G.name}};
  return r;
}

// Sample mean of U(s, W_s) at each checkpoint s along the flow.
struct MartingalePoint {
  double s;
  SolutionEstimate mean;
};

inline std::vector<MartingalePoint> martingale_check(const PathFunctional& U, const FlowSpec& spec,
                                                     const std::vector<double>& checkpoints) {
  const Flow flow(spec);
  for (double s : checkpoints) grid_index(s - spec.t, 0.0, spec.step(), spec.flow_steps(), "martingale checkpoint");
  std::vector<std::vector<double>> vals(checkpoints.size(), std::vector<double>(spec.n_paths));
  parallel_partitions(spec.n_paths, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto z = flow.path(i);
      for (std::size_t c = 0; c < checkpoints.size(); ++c)
        vals[c][i] = check_finite(U(checkpoints[c], flow.window(z, checkpoints[c])), "martingale value");
    }
  });
  std::vector<MartingalePoint> out;
  for (std::size_t c = 0; c < checkpoints.size(); ++c) out.push_back({checkpoints[c], estimate_from(vals[c])});
  return out;
}

// ---- Gaussian expectations ----

struct GaussianOptions {
  std::size_t max_quadrature_dim = 3;
  std::size_t hermite_nodes = 24;
  std::size_t qmc_points = 1u << 12;
  std::size_t qmc_shifts = 32;
  std::uint64_t qmc_seed = 0x51ab5eedULL;
};

// Nodes and weights for E[f(Z)], Z ~ N(0,1), by Golub-Welsch on the Hermite recurrence.
inline std::pair<std::vector<double>, std::vector<double>> gauss_hermite(std::size_t n) {
  require(n >= 1, "gauss_hermite: at least one node");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t k = 1; k < n; ++k) {
    const auto a = static_cast<Eigen::Index>(k);
    J(a, a - 1) = J(a - 1, a) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  std::vector<double> x(n), w(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto a = static_cast<Eigen::Index>(k);
    x[k] = es.eigenvalues()(a);
    const double v0 = es.eigenvectors()(0, a);
    w[k] = v0 * v0;
  }
  return {x, w};
}

using VectorFn = std::function<double(std::span<const double>)>;

// E[g(mean + L z)] with L L^T = cov; cov may be zero (degenerate to g(mean)).
inline SolutionEstimate gaussian_expectation(const VectorFn& g, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                             const GaussianOptions& opt = {}) {
  const auto N = static_cast<std::size_t>(mean.size());
  SolutionEstimate r;
  std::vector<double> y(N);
  if (cov.cwiseAbs().maxCoeff() == 0.0) {
    for (std::size_t i = 0; i < N; ++i) y[i] = mean(static_cast<Eigen::Index>(i));
    r.value = check_finite(g(y), "gaussian expectation");
    r.diagnostics = {{"method", "degenerate"}};
    return r;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("gaussian_expectation: covariance is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  Eigen::VectorXd z(static_cast<Eigen::Index>(N));
  auto at = [&](const Eigen::VectorXd& zz) {
    const Eigen::VectorXd v = mean + L * zz;
    for (std::size_t i = 0; i < N; ++i) y[i] = v(static_cast<Eigen::Index>(i));
    return check_finite(g(y), "gaussian expectation");
  };
  if (N <= opt.max_quadrature_dim) {
    const auto [x, w] = gauss_hermite(opt.hermite_nodes);
    const std::size_t q = x.size();
    std::size_t total = 1;
    for (std::size_t d = 0; d < N; ++d) total *= q;
    double acc = 0.0;
    for (std::size_t idx = 0; idx < total; ++idx) {
      std::size_t rest = idx;
      double wt = 1.0;
      for (std::size_t d = 0; d < N; ++d) {
        const std::size_t k = rest % q;
        rest /= q;
        z(static_cast<Eigen::Index>(d)) = x[k];
        wt *= w[k];
      }
      acc += wt * at(z);
    }
    r.value = acc;
    r.diagnostics = {{"method", "gauss_hermite"}, {"nodes_per_dim", q}};
    return r;
  }
  const boost::math::normal_distribution<double> nd;
  auto rng = substream(opt.qmc_seed, N);
  std::uniform_real_distribution<double> u01;
  std::vector<double> shift_means;
  std::vector<std::vector<double>> pts(opt.qmc_points, std::vector<double>(N));
  boost::random::sobol sob(N);
  for (auto& p : pts)
    for (double& c : p) c = std::ldexp(static_cast<double>(sob()), -64);
  for (std::size_t s = 0; s < opt.qmc_shifts; ++s) {
    std::vector<double> shift(N);
    for (double& c : shift) c = u01(rng);
    double acc = 0.0;
    for (const auto& p : pts) {
      for (std::size_t d = 0; d < N; ++d) {
        double u = p[d] + shift[d];
        u -= std::floor(u);
        u = std::clamp(u, 1e-16, 1.0 - 1e-16);
        z(static_cast<Eigen::Index>(d)) = boost::math::quantile(nd, u);
      }
      acc += at(z);
    }
    shift_means.push_back(acc / static_cast<double>(pts.size()));
  }
  r.value = stats::mean(shift_means);
  r.std_error = stats::std_error(shift_means);
  r.n_paths = opt.qmc_points * opt.qmc_shifts;
  r.diagnostics = {{"method", "sobol_random_shift"}, {"points", opt.qmc_points}, {"shifts", opt.qmc_shifts}};
  return r;
}

// ---- cylindrical Gaussian oracle ----

struct CylindricalMoments {
  Eigen::VectorXd mean;  // phi-integrals of the frozen past
  Eigen::MatrixXd cov;   // int_t^T phi_i phi_j
};

// m_i = phi_i(t) eta(0) - int_{-t}^0 eta(y) phi_i'(y+t) dy, Sigma_ij = int_t^T phi_i phi_j.
inline CylindricalMoments cylindrical_moments(const CylindricalFunctional& G, double t, const GridPath& eta,
                                              std::size_t refine = 8, std::size_t panels = 2048) {
  const double T = G.T;
  require(std::abs(eta.t_end()) <= 1e-12 && std::abs(-eta.t_start() - T) <= 1e-9, "cylindrical oracle: eta must live on [-T, 0]");
  require(t >= 0.0 && t <= T + 1e-12, "cylindrical oracle: t outside [0, T]");
  const std::size_t N = G.N();
  CylindricalMoments mo{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(N)),
                        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N))};
  std::vector<double> nodes{-t};
  for (std::size_t j = 0; j <= eta.n_steps(); ++j)
    if (eta.time(j) > -t + 1e-14) nodes.push_back(eta.time(j));
  for (std::size_t i = 0; i < N; ++i) {
    const auto& k = G.phi[i];
    double acc = 0.0;
    if (t > 0.0) {
      for (std::size_t c = 0; c + 1 < nodes.size(); ++c) {
        const double a = nodes[c], h = (nodes[c + 1] - a) / static_cast<double>(refine);
        auto f = [&](double y) { return eta.at(y) * k.dphi(y + t); };
        double s = 0.5 * (f(a) + f(nodes[c + 1]));
        for (std::size_t r = 1; r < refine; ++r) s += f(a + h * static_cast<double>(r));
        acc += s * h;
      }
    }
    mo.mean(static_cast<Eigen::Index>(i)) = k.phi(t) * eta[eta.n_steps()] - acc;
  }
  if (t < T) {
    const double h = (T - t) / static_cast<double>(panels);
    for (std::size_t p = 0; p <= panels; ++p) {
      const double u = p == panels ? T : t + h * static_cast<double>(p);
      const double w = (p == 0 || p == panels) ? 1.0 : (p % 2 == 1 ? 4.0 : 2.0);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j <= i; ++j)
          mo.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += w * G.phi[i].phi(u) * G.phi[j].phi(u);
    }
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
        mo.cov(a, b) *= h / 3.0;
        mo.cov(b, a) = mo.cov(a, b);
      }
  }
  return mo;
}

// Rejects Sigma with det <= tol * prod(diag), including zero diagonal entries.
inline void require_nonsingular(const Eigen::MatrixXd& cov, double tol = 1e-12) {
  double prod = 1.0;
  for (Eigen::Index i = 0; i < cov.rows(); ++i) prod *= cov(i, i);
  const double det = cov.determinant();
  if (!(prod > 0.0) || !(det > tol * prod))
    throw ValidationError("cylindrical oracle: covariance Sigma_t is singular (det " + std::to_string(det) + ")");
}

inline SolutionEstimate cylindrical_gaussian_solution(const CylindricalFunctional& G, double t, const GridPath& eta,
                                                      const GaussianOptions& opt = {}) {
  const auto mo = cylindrical_moments(G, t, eta);
  const bool terminal = t >= G.T - 1e-12;
  if (!terminal) require_nonsingular(mo.cov);
  auto r = gaussian_expectation(G.g, mo.mean, terminal ? Eigen::MatrixXd::Zero(mo.cov.rows(), mo.cov.cols()) : mo.cov, opt);
  r.diagnostics["det_sigma"] = terminal ? 0.0 : mo.cov.determinant();
  r.diagnostics["functional"] = G.name;
  return r;
}

// ---- strict residual ----

struct Probe {
  double t;
  GridPath eta;
};

// Smooth random paths on [-T, 0] with probe times on the grid in [0, t_max].
inline std::vector<Probe> make_probe_design(double T, std::size_t n_steps, std::size_t count, std::uint64_t seed,
                                            double t_max_fraction = 0.75) {
  std::vector<Probe> out;
  auto rng = substream(seed, 0, 0x70726f6265);
  std::uniform_real_distribution<double> u(-1, 1);
  const std::size_t max_node = static_cast<std::size_t>(t_max_fraction * static_cast<double>(n_steps));
  std::uniform_int_distribution<std::size_t> node(0, max_node);
  for (std::size_t k = 0; k < count; ++k) {
    const double a = u(rng), b = u(rng), c = 0.5 * u(rng), w = 1 + 3 * (u(rng) + 1);
    GridPath eta = GridPath::sample(-T, 0, n_steps, [=](double x) { return a + b * x + c * std::sin(w * x); });
    const double t = T * static_cast<double>(node(rng)) / static_cast<double>(n_steps);
    out.push_back({t, std::move(eta)});
  }
  return out;
}

struct ResidualRow {
  double t, L, F, residual, terminal, vertical_gap;
};

struct StrictResidualReport {
  double max_residual = 0.0;
  double max_terminal = 0.0;
  double max_vertical_gap = 0.0;  // |fd_vertical - supplier| at the default bump
  std::vector<ResidualRow> rows;
};

// max |L U + F| and |U(T, eta) - G(eta)| over the probe design.
inline StrictResidualReport strict_residual(const PathFunctional& U, const PathFunctional& G, const PathDriver& F,
                                            const SigmaFn& sigma, const std::vector<Probe>& design,
                                            const OperatorLOptions& lopt = {}) {
  require(!design.empty(), "strict_residual: empty probe design");
  StrictResidualReport rep;
  for (const auto& p : design) {
    const double T = -p.eta.t_start();
    const auto sched = EpsSchedule::for_grid(p.eta.step(), T);
    const auto L = operator_L(U, p.t, p.eta, sigma, sched, lopt);
    const WindowView w = WindowView::of(p.eta);
    const double f = F ? F(p.t, w) : 0.0;
    const double term = std::abs(U(T, w) - G(T, w));
    double vgap = 0.0;
    if (U.vertical && U.jump_extension) vgap = std::abs(fd_vertical(U, p.t, w) - U.vertical(p.t, w));
    const double res = std::abs(L.value + f);
    rep.rows.push_back({p.t, L.value, f, res, term, vgap});
    rep.max_residual = std::max(rep.max_residual, res);
    rep.max_terminal = std::max(rep.max_terminal, term);
    rep.max_vertical_gap = std::max(rep.max_vertical_gap, vgap);
  }
  return rep;
}

// ---- strong-viscosity approximation ----

// Orthonormal cosine basis of L^2([-T, 0]) written as cylindrical kernels:
// int e_k(x) eta(x) dx = int phi_k(x + T) d^- eta(x) with phi_k(u) = int_u^T e_k(y - T) dy.
inline Kernel cosine_kernel(std::size_t k, double T) {
  if (k == 0) {
    const double c = 1.0 / std::sqrt(T);
    return {"cos0", [=](double u) { return c * (T - u); }, [=](double) { return -c; }, [](double) { return 0.0; }};
  }
  const double a = std::sqrt(2.0 / T), w = static_cast<double>(k) * M_PI / T;
  return {"cos" + std::to_string(k), [=](double u) { return -a / w * std::sin(w * u); },
          [=](double u) { return -a * std::cos(w * u); }, [=](double u) { return a * w * std::sin(w * u); }};
}

inline double cosine_basis(std::size_t k, double T, double x) {
  if (k == 0) return 1.0 / std::sqrt(T);
  return std::sqrt(2.0 / T) * std::cos(static_cast<double>(k) * M_PI * (x + T) / T);
}

// Path on the grid of `like` rebuilt from the first c.size() cosine coefficients.
inline GridPath reconstruct(std::span<const double> c, const GridPath& like) {
  const double T = -like.t_start();
  std::vector<double> v(like.n_steps() + 1, 0.0);
  for (std::size_t j = 0; j <= like.n_steps(); ++j)
    for (std::size_t k = 0; k < c.size(); ++k) v[j] += c[k] * cosine_basis(k, T, like.time(j));
  return GridPath(like.t_start(), 0.0, std::move(v));
}

struct ViscosityOptions {
  std::vector<std::size_t> n_terms{1, 2, 3, 4, 5, 6, 7, 8};
  double width0 = 0.05;  // mollification width w_n = width0 / n
  std::size_t growth_design = 8;
  std::vector<double> equi_distances{0.5, 0.25, 0.125, 0.0625};
  std::size_t equi_pairs = 4;
  double equi_radius = 2.0;
  std::uint64_t seed = 7;
  GaussianOptions gauss{};
  std::size_t mollifier_points = 256;
  std::optional<GrowthBound> declared_growth;
};

struct ViscosityStep {
  std::size_t n = 0;
  double width = 0.0;
  SolutionEstimate value;
  GrowthBound growth_U{0, 0};
  GrowthBound growth_G{0, 0};
  std::vector<double> equicontinuity;  // max |G_n(eta) - G_n(eta')| per distance
  double equicontinuity_max = 0.0;
};

struct ViscositySequence {
  std::vector<ViscosityStep> steps;
  std::vector<double> successive_gaps;
  double limit = std::nan("");
  bool converged = false;
};

// Least-squares fit log|f| = log C + m log(1 + |eta|) over a design.
inline GrowthBound fit_growth(const std::vector<double>& norms, const std::vector<double>& values) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (std::abs(values[i]) <= 0.0) continue;
    x.push_back(std::log1p(norms[i]));
    y.push_back(std::log(std::abs(values[i])));
  }
  if (x.size() < 2) return {x.empty() ? 0.0 : std::exp(y[0]), 0.0};
  const double xb = stats::mean(x), yb = stats::mean(y);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - xb) * (x[i] - xb);
    sxy += (x[i] - xb) * (y[i] - yb);
  }
  const double m = sxx > 0 ? sxy / sxx : 0.0;
  return {std::exp(yb - m * xb), m};
}

namespace detail {

// G_n(c) = E[G(reconstruct(c + w Z))] by a fixed randomized-QMC rule (common across calls).
class Mollified {
 public:
  Mollified(const PathFunctional& G, const GridPath& like, std::size_t n, double width, std::size_t points,
            std::uint64_t seed)
      : G_(&G), like_(&like), n_(n), width_(width), basis_(n * (like.n_steps() + 1)) {
    const double T = -like.t_start();
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j <= like.n_steps(); ++j) basis_[k * (like.n_steps() + 1) + j] = cosine_basis(k, T, like.time(j));
    const boost::math::normal_distribution<double> nd;
    boost::random::sobol sob(n);
    auto rng = substream(seed, n, 0x6d6f6c6c);
    std::uniform_real_distribution<double> u01;
    std::vector<double> shift(n);
    for (double& s : shift) s = u01(rng);
    for (std::size_t p = 0; p < points; ++p) {
      std::vector<double> z(n);
      for (std::size_t d = 0; d < n; ++d) {
        double u = std::ldexp(static_cast<double>(sob()), -64) + shift[d];
        u -= std::floor(u);
        z[d] = boost::math::quantile(nd, std::clamp(u, 1e-16, 1.0 - 1e-16));
      }
      z_.push_back(std::move(z));
    }
  }

  double raw(std::span<const double> c) const {
    const std::size_t m = like_->n_steps() + 1;
    std::vector<double> v(m, 0.0);
    for (std::size_t k = 0; k < n_; ++k)
      for (std::size_t j = 0; j < m; ++j) v[j] += c[k] * basis_[k * m + j];
    const GridPath p(like_->t_start(), 0.0, std::move(v));
    return (*G_)(-like_->t_start(), WindowView::of(p));
  }

  double operator()(std::span<const double> c) const {
    if (width_ == 0.0) return raw(c);
    std::vector<double> y(n_);
    double acc = 0.0;
    for (const auto& z : z_) {
      for (std::size_t d = 0; d < n_; ++d) y[d] = c[d] + width_ * z[d];
      acc += raw(y);
    }
    return acc / static_cast<double>(z_.size());
  }

 private:
  const PathFunctional* G_;
  const GridPath* like_;
  std::size_t n_;
  double width_;
  std::vector<double> basis_;
  std::vector<std::vector<double>> z_;
};

inline std::vector<double> coefficients(const GridPath& eta, std::size_t n) {
  const double T = -eta.t_start();
  std::vector<double> c(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t j = 0; j <= eta.n_steps(); ++j)
      acc += ((j == 0 || j == eta.n_steps()) ? 0.5 : 1.0) * eta[j] * cosine_basis(k, T, eta.time(j));
    c[k] = acc * eta.step();
  }
  return c;
}

}  // namespace detail

// U_n(t, eta) = E[G_n(W_T)] with G_n = mollified G o reconstruction of the first n cosine coefficients.
// The coefficients of W_T are Gaussian with the cylindrical moments; mollification adds w_n^2 I.
inline ViscositySequence strong_viscosity_sequence(const PathFunctional& G, double t, const GridPath& eta,
                                                   const ViscosityOptions& opt = {}) {
  require(!opt.n_terms.empty(), "strong_viscosity_sequence: empty n schedule");
  const double T = -eta.t_start();
  ViscositySequence seq;

  auto rng = substream(opt.seed, 0, 0x67726f77);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<GridPath> design;
  for (std::size_t j = 0; j < opt.growth_design; ++j) {
    const double amp = std::ldexp(1.0, static_cast<int>(j % 6)) / 4.0;
    const double a = u(rng), b = u(rng), c = u(rng);
    design.push_back(GridPath::sample(-T, 0, eta.n_steps(), [=](double x) {
      return amp * (1.0 + 0.5 * a + 0.5 * b * x / T + 0.25 * c * std::cos(3 * x));
    }));
  }
  std::vector<std::pair<GridPath, GridPath>> pairs;
  for (double d : opt.equi_distances)
    for (std::size_t q = 0; q < opt.equi_pairs; ++q) {
      const double a = u(rng), b = u(rng), c = u(rng);
      const double r = 0.5 * opt.equi_radius;
      GridPath p = GridPath::sample(-T, 0, eta.n_steps(), [=](double x) { return r * (a + 0.5 * b * std::sin(2 * x)); });
      GridPath p2 = GridPath::sample(-T, 0, eta.n_steps(), [=, &p](double x) { return p.at(x) + d * std::cos(c * x); });
      pairs.emplace_back(std::move(p), std::move(p2));
    }

  for (std::size_t n : opt.n_terms) {
    require(n >= 1, "strong_viscosity_sequence: n must be positive");
    ViscosityStep st;
    st.n = n;
    st.width = opt.width0 / static_cast<double>(n);
    CylindricalFunctional basis;
    basis.T = T;
    for (std::size_t k = 0; k < n; ++k) basis.phi.push_back(cosine_kernel(k, T));
    const detail::Mollified Gn(G, eta, n, 0.0, 0, opt.seed);
    const detail::Mollified Gn_soft(G, eta, n, st.width, opt.mollifier_points, opt.seed);
    auto solve = [&](double tt, const GridPath& e) {
      const auto mo = cylindrical_moments(basis, tt, e);
      Eigen::MatrixXd cov = mo.cov;
      cov.diagonal().array() += st.width * st.width;
      return gaussian_expectation([&Gn](std::span<const double> c) { return Gn(c); }, mo.mean, cov, opt.gauss);
    };
    st.value = solve(t, eta);
    st.value.diagnostics["n"] = n;
    st.value.diagnostics["width"] = st.width;

    std::vector<double> norms, vu, vg;
    for (const auto& d : design) {
      norms.push_back(d.sup_norm());
      vu.push_back(solve(t, d).value);
      vg.push_back(Gn_soft(detail::coefficients(d, n)));
    }
    st.growth_U = fit_growth(norms, vu);
    st.growth_G = fit_growth(norms, vg);

    std::size_t idx = 0;
    for (std::size_t di = 0; di < opt.equi_distances.size(); ++di) {
      double worst = 0.0;
      for (std::size_t q = 0; q < opt.equi_pairs; ++q, ++idx) {
        const auto& [a, b] = pairs[idx];
        worst = std::max(worst, std::abs(Gn_soft(detail::coefficients(a, n)) - Gn_soft(detail::coefficients(b, n))));
      }
      st.equicontinuity.push_back(worst);
      st.equicontinuity_max = std::max(st.equicontinuity_max, worst);
    }
    seq.steps.push_back(std::move(st));
  }
  for (std::size_t j = 1; j < seq.steps.size(); ++j)
    seq.successive_gaps.push_back(std::abs(seq.steps[j].value.value - seq.steps[j - 1].value.value));
  seq.limit = seq.steps.back().value.value;
  const auto& g = seq.successive_gaps;
  const double noise = 3.0 * seq.steps.back().value.std_error + 1e-12;
  seq.converged = g.empty() || g.back() <= noise || (g.size() >= 2 && g.back() < g[g.size() - 2]);
  return seq;
}

}  // namespace pathreg
