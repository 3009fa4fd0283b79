#pragma once

#include <Eigen/Dense>

#include "pathreg/kolmogorov.hpp"

namespace pathreg {

// ---- drivers ----

using DriverFn = std::function<double(double t, const WindowView& w, double y, double z)>;

struct Driver {
  std::string name = "zero";
  DriverFn f;              // empty means F = 0
  double lipschitz = 0.0;  // in (y, z)
  GrowthBound growth{0.0, 0.0};

  double operator()(double t, const WindowView& w, double y, double z) const { return f ? f(t, w, y, z) : 0.0; }
};

inline Driver zero_driver() { return {}; }

// F = alpha * y
inline Driver linear_driver(double alpha) {
  return {"linear", [alpha](double, const WindowView&, double y, double) { return alpha * y; }, std::abs(alpha),
          {0.0, 0.0}};
}

// F = f(t)
inline Driver deterministic_driver(std::function<double(double)> f, double bound = 1.0) {
  return {"deterministic", [f](double t, const WindowView&, double, double) { return f(t); }, 0.0, {bound, 0.0}};
}

// Largest observed |F(y,z) - F(y',z')| / (|y-y'| + |z-z'|) over random (y, z) pairs at (t, w).
inline double lipschitz_ratio(const Driver& F, double t, const WindowView& w, std::size_t probes = 16,
                              std::uint64_t seed = 11) {
  if (!F.f) return 0.0;
  auto rng = substream(seed, probes, 0x6c6970);
  std::normal_distribution<double> nd(0.0, 2.0);
  double worst = 0.0;
  for (std::size_t q = 0; q < probes; ++q) {
    const double y = nd(rng), z = nd(rng), y2 = nd(rng), z2 = nd(rng);
    const double d = std::abs(y - y2) + std::abs(z - z2);
    if (d == 0.0) continue;
    worst = std::max(worst, std::abs(F(t, w, y, z) - F(t, w, y2, z2)) / d);
  }
  return worst;
}

// ---- regression basis ----

// Monomials of total degree <= degree in the features (present value, first cosine coefficients).
struct RegressionBasis {
  std::size_t fourier_terms = 4;
  std::size_t degree = 2;
  bool include_present = true;

  std::size_t n_features() const { return fourier_terms + (include_present ? 1 : 0); }

  std::vector<std::vector<std::size_t>> monomials() const {
    std::vector<std::vector<std::size_t>> out{{}};
    std::vector<std::vector<std::size_t>> layer{{}};
    for (std::size_t d = 1; d <= degree; ++d) {
      std::vector<std::vector<std::size_t>> next;
      for (const auto& m : layer)
        for (std::size_t f = m.empty() ? 0 : m.back(); f < n_features(); ++f) {
          auto e = m;
          e.push_back(f);
          next.push_back(e);
        }
      out.insert(out.end(), next.begin(), next.end());
      layer = std::move(next);
    }
    return out;
  }

  std::size_t size() const { return monomials().size(); }
};

namespace detail {

// Feature extraction for windows of a fixed width and step.
class FeatureMap {
 public:
  FeatureMap(const RegressionBasis& b, double T, std::size_t n_steps) : basis_(b), n_(n_steps), mono_(b.monomials()) {
    require(b.n_features() >= 1, "RegressionBasis: at least one feature needed");
    require(b.degree >= 1, "RegressionBasis: degree must be positive");
    const double dt = T / static_cast<double>(n_steps);
    table_.assign(b.fourier_terms * (n_ + 1), 0.0);
    for (std::size_t k = 0; k < b.fourier_terms; ++k)
      for (std::size_t j = 0; j <= n_; ++j) {
        const double x = j == n_ ? 0.0 : -T + dt * static_cast<double>(j);
        table_[k * (n_ + 1) + j] = ((j == 0 || j == n_) ? 0.5 : 1.0) * dt * cosine_basis(k, T, x);
      }
  }

  std::size_t size() const { return mono_.size(); }

  void operator()(const WindowView& w, std::span<double> out, std::vector<double>& feat) const {
    feat.assign(basis_.n_features(), 0.0);
    std::size_t f = 0;
    if (basis_.include_present) feat[f++] = w.present();
    for (std::size_t k = 0; k < basis_.fourier_terms; ++k, ++f) {
      double acc = 0.0;
      const double* row = &table_[k * (n_ + 1)];
      for (std::size_t j = 0; j <= n_; ++j) acc += row[j] * w.raw_node(j);
      feat[f] = acc;
    }
    for (std::size_t m = 0; m < mono_.size(); ++m) {
      double v = 1.0;
      for (std::size_t e : mono_[m]) v *= feat[e];
      out[m] = v;
    }
  }

 private:
  RegressionBasis basis_;
  std::size_t n_;
  std::vector<std::vector<std::size_t>> mono_;
  std::vector<double> table_;
};

// Least squares on standardized columns with rank truncation at pivot ratio 1 / condition_guard.
class Regression {
 public:
  Regression(Eigen::MatrixXd design, double condition_guard) {
    const Eigen::Index P = design.rows(), B = design.cols();
    if (!design.allFinite()) throw NumericalError("regression: non-finite design matrix");
    std::vector<Eigen::Index> keep;
    mean_.resize(B);
    scale_.resize(B);
    for (Eigen::Index c = 0; c < B; ++c) {
      mean_[c] = design.col(c).mean();
      const double sd = std::sqrt((design.col(c).array() - mean_[c]).square().mean());
      scale_[c] = sd;
      if (sd > 1e-12 * (1.0 + std::abs(mean_[c]))) keep.push_back(c);
    }
    Eigen::MatrixXd A(P, static_cast<Eigen::Index>(keep.size()) + 1);
    A.col(0).setOnes();
    for (std::size_t j = 0; j < keep.size(); ++j)
      A.col(static_cast<Eigen::Index>(j) + 1) = (design.col(keep[j]).array() - mean_[keep[j]]) / scale_[keep[j]];
    qr_.setThreshold(1.0 / condition_guard);
    qr_.compute(A);
    if (qr_.rank() == 0) throw NumericalError("regression: design has rank zero");
    A_ = std::move(A);
  }

  std::size_t rank() const { return static_cast<std::size_t>(qr_.rank()); }

  // Fitted values of the regression of y.
  Eigen::VectorXd fit(const Eigen::VectorXd& y) const {
    const Eigen::VectorXd beta = qr_.solve(y);
    Eigen::VectorXd out = A_ * beta;
    if (!out.allFinite()) throw NumericalError("regression: non-finite fitted values");
    return out;
  }

 private:
  Eigen::VectorXd mean_, scale_;
  Eigen::MatrixXd A_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

}  // namespace detail

// ---- solver ----

struct BsdeOptions {
  RegressionBasis basis{};
  std::size_t n_picard = 3;
  double condition_guard = 1e10;
  bool keep_paths = true;
};

struct BsdeSolution {
  std::vector<GridPath> Y;  // per path on [t, T]
  std::vector<GridPath> Z;  // per path on [t, T - dt], terminal node excluded
  SolutionEstimate y0;
  double s2_norm = 0.0;
  double h2_norm = 0.0;
  std::vector<double> picard_gaps;  // sup over time and paths of successive Picard differences
  bool picard_contracted = true;
  double lipschitz_horizon = 0.0;  // C_lip (T - t)
  std::size_t min_rank = 0;
};

inline nlohmann::json to_json(const BsdeSolution& s) {
  return {{"y0", to_json(s.y0)},
          {"s2_norm", s.s2_norm},
          {"h2_norm", s.h2_norm},
          {"picard_gaps", s.picard_gaps},
          {"picard_contracted", s.picard_contracted},
          {"lipschitz_horizon", s.lipschitz_horizon},
          {"min_rank", s.min_rank}};
}

struct ProcessNorms {
  double s2 = 0.0;  // E sup |Y|^2
  double h2 = 0.0;  // E int |Z|^2 ds
};

// Z paths carry nodes on [t, T - dt]; each node covers one step of length dt.
inline ProcessNorms process_norms(const std::vector<GridPath>& Y, const std::vector<GridPath>& Z, double dt) {
  ProcessNorms r;
  if (!Y.empty()) {
    std::vector<double> s(Y.size());
    for (std::size_t i = 0; i < Y.size(); ++i) s[i] = Y[i].sup_norm() * Y[i].sup_norm();
    r.s2 = stats::mean(s);
  }
  if (!Z.empty()) {
    std::vector<double> h(Z.size());
    for (std::size_t i = 0; i < Z.size(); ++i) {
      double acc = 0.0;
      for (double v : Z[i].values()) acc += v * v * dt;
      h[i] = acc;
    }
    r.h2 = stats::mean(h);
  }
  return r;
}

inline ProcessNorms process_norms(const BsdeSolution& sol) {
  return {sol.s2_norm, sol.h2_norm};
}

// Backward regression on the flow W^{t,eta}: for each flow step l (backwards)
//   Z_l = E[(Y_{l+1} - Ybar_l) dW_l | F_l] / dt,  Ybar_l = E[G + sum_{j>l} F_j dt | F_l],
//   Y_l = Ybar_l + F(s_l, W_l, Y_l, Z_l) dt, solved by n_picard fixed-point iterations.
inline BsdeSolution solve_bsde(const PathFunctional& G, const Driver& F, const FlowSpec& spec,
                               const BsdeOptions& opt = {}) {
  const Flow flow(spec);
  const std::size_t m = spec.flow_steps(), P = spec.n_paths;
  require(m >= 1, "solve_bsde: the flow needs at least one step (t < T)");
  require(P >= 2, "solve_bsde: at least two paths needed");
  require(opt.n_picard >= 1, "solve_bsde: n_picard must be positive");
  const double T = spec.horizon(), dt = spec.step();
  const detail::FeatureMap features(opt.basis, T, spec.past_steps());
  const std::size_t B = features.size();

  {
    const WindowView w0 = WindowView::of(spec.eta);
    if (lipschitz_ratio(F, spec.t, w0) > F.lipschitz * (1.0 + 1e-9) + 1e-12)
      throw ValidationError("solve_bsde: driver " + F.name + " exceeds its declared Lipschitz constant");
  }

  std::vector<std::vector<double>> z(P);
  parallel_partitions(P, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) z[i] = flow.path(i);
  });

  const std::size_t n = spec.past_steps();
  Eigen::MatrixXd Y(P, m + 1), Z(P, m);
  Eigen::VectorXd acc(P);  // G + sum_{j>l} F_j dt
  for (std::size_t i = 0; i < P; ++i) {
    const double g = G(T, flow.window(z[i], T));
    if (!std::isfinite(g)) throw NumericalError("solve_bsde: non-finite terminal value");
    Y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m)) = g;
    acc[static_cast<Eigen::Index>(i)] = g;
  }

  BsdeSolution sol;
  sol.picard_gaps.assign(opt.n_picard, 0.0);
  sol.lipschitz_horizon = F.lipschitz * (T - spec.t);
  sol.min_rank = B + 1;
  Eigen::VectorXd last_sample(P);

  for (std::size_t l = m; l-- > 0;) {
    const double s = flow.time(l);
    const auto L = static_cast<Eigen::Index>(l);
    Eigen::MatrixXd design(P, B);
    parallel_partitions(P, [&](std::size_t b, std::size_t e) {
      std::vector<double> row(B), feat;
      for (std::size_t i = b; i < e; ++i) {
        features(flow.window(z[i], s), row, feat);
        for (std::size_t c = 0; c < B; ++c) design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
      }
    });
    const detail::Regression reg(std::move(design), opt.condition_guard);
    sol.min_rank = std::min(sol.min_rank, reg.rank());

    const Eigen::VectorXd ybar = reg.fit(acc);
    Eigen::VectorXd target(P);
    for (std::size_t i = 0; i < P; ++i) {
      const auto I = static_cast<Eigen::Index>(i);
      const double dw = z[i][n + l + 1] - z[i][n + l];
      target[I] = (Y(I, L + 1) - ybar[I]) * dw / dt;
    }
    Z.col(L) = reg.fit(target);

    Eigen::VectorXd y = ybar;
    if (F.f) {
      for (std::size_t k = 0; k < opt.n_picard; ++k) {
        double gap = 0.0;
        for (std::size_t i = 0; i < P; ++i) {
          const auto I = static_cast<Eigen::Index>(i);
          const double next = ybar[I] + F(s, flow.window(z[i], s), y[I], Z(I, L)) * dt;
          if (!std::isfinite(next)) throw NumericalError("solve_bsde: non-finite Picard iterate");
          gap = std::max(gap, std::abs(next - y[I]));
          y[I] = next;
        }
        sol.picard_gaps[k] = std::max(sol.picard_gaps[k], gap);
      }
    }
    Y.col(L) = y;
    for (std::size_t i = 0; i < P; ++i) {
      const auto I = static_cast<Eigen::Index>(i);
      const double f = F(s, flow.window(z[i], s), y[I], Z(I, L)) * dt;
      acc[I] += f;
      if (l == 0) last_sample[I] = acc[I];
    }
  }
  for (std::size_t k = 1; k < sol.picard_gaps.size(); ++k)
    if (sol.picard_gaps[k] > sol.picard_gaps[k - 1] * (1 + 1e-9) && sol.picard_gaps[k] > 1e-14)
      sol.picard_contracted = false;
  if (F.lipschitz * dt >= 1.0) sol.picard_contracted = false;

  std::vector<double> samples(last_sample.data(), last_sample.data() + P);
  sol.y0.value = Y(0, 0);
  sol.y0.std_error = stats::std_error(samples);
  sol.y0.n_paths = P;
  sol.y0.diagnostics = {{"t", spec.t},
                        {"flow_steps", m},
                        {"basis_size", B},
                        {"min_rank", sol.min_rank},
                        {"picard_gaps", sol.picard_gaps},
                        {"picard_contracted", sol.picard_contracted},
                        {"driver", F.name}};

  std::vector<double> sup2(P), h2(P);
  for (std::size_t i = 0; i < P; ++i) {
    const auto I = static_cast<Eigen::Index>(i);
    sup2[i] = Y.row(I).cwiseAbs2().maxCoeff();
    h2[i] = Z.row(I).squaredNorm() * dt;
  }
  sol.s2_norm = stats::mean(sup2);
  sol.h2_norm = stats::mean(h2);

  if (opt.keep_paths) {
    const double t0 = spec.t;
    for (std::size_t i = 0; i < P; ++i) {
      const auto I = static_cast<Eigen::Index>(i);
      std::vector<double> yv(m + 1);
      for (std::size_t l = 0; l <= m; ++l) yv[l] = Y(I, static_cast<Eigen::Index>(l));
      sol.Y.emplace_back(t0, T, std::move(yv));
      std::vector<double> zv(m);
      for (std::size_t l = 0; l < m; ++l) zv[l] = Z(I, static_cast<Eigen::Index>(l));
      if (m >= 2) sol.Z.emplace_back(t0, T - dt, std::move(zv));
      else sol.Z.emplace_back(t0, t0 + dt, std::vector<double>{zv[0], zv[0]});
    }
  }
  return sol;
}

// ---- robust Clark-Ocone representation ----

struct RobustOptions {
  double qv_tolerance = 0.05;  // relative tolerance on the median [X]_T against T
  ProbabilityOptions probability{};
};

struct RobustReport {
  std::string model;
  std::vector<double> h, h_hat, error;  // error = |h_hat - h| / (1 + |h|)
  double median_error = 0.0;
  double q95_error = 0.0;
  double qv_median = 0.0;
  ConvergenceInProbability convergence;
};

inline nlohmann::json to_json(const RobustReport& r) {
  return {{"model", r.model},
          {"median_error", r.median_error},
          {"q95_error", r.q95_error},
          {"qv_median", r.qv_median},
          {"convergence", to_json(r.convergence)}};
}

// h_hat = u(0, X_0) - int F(s, X_s, u, v) ds + int v(s, X_s) d^-X with v = D^d0 u, against h = G(X_T).
inline RobustReport robust_representation(const PathFunctional& G, const Driver& F, const PathFunctional& u,
                                          const PathEnsemble& X, const EpsSchedule& sched, const RobustOptions& opt = {}) {
  const auto& g = X.grid();
  RobustReport r;
  r.model = X.model().name();
  {
    const auto qv = quadratic_variation_sp(X, sched, opt.probability);
    std::vector<double> end;
    for (const auto& b : qv.bracket) end.push_back(b[g.n_steps]);
    r.qv_median = stats::median(end);
    if (std::abs(r.qv_median / g.T - 1.0) > opt.qv_tolerance)
      throw ValidationError("robust_representation: quadratic-variation precondition failed for model " + r.model +
                            " (median [X]_T = " + std::to_string(r.qv_median) + ")");
  }
  const auto ks = sched.multiples(g.step());
  const std::size_t n = g.n_steps, N = X.size();
  const double dt = g.step(), T = g.T;
  r.h.resize(N);
  r.h_hat.resize(N);
  r.error.resize(N);
  std::vector<detail::LevelDiffs> diffs(N);
  X.for_each([&](std::size_t p, const PathSample& s) {
    const auto x = s.X.values();
    std::vector<double> v(n + 1), cur(n + 1);
    double Fint = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      const double t = g.time(i);
      const WindowView w(x, 0.0, dt, t, T);
      v[i] = check_finite(u.vertical ? u.vertical(t, w) : fd_vertical(u, t, w), "vertical derivative");
      if (i < n && F.f) Fint += check_finite(F(t, w, u(t, w), v[i]), "driver") * dt;
    }
    const double u0 = check_finite(u(0.0, WindowView(x, 0.0, dt, 0.0, T)), "initial value");
    const double h = check_finite(G(T, WindowView(x, 0.0, dt, T, T)), "terminal functional");
    for (std::size_t k : ks) {
      detail::cumulative_forward(v, x, k, cur);
      diffs[p].push(cur);
    }
    r.h[p] = h;
    r.h_hat[p] = u0 - Fint + cur[n];
    r.error[p] = std::abs(r.h_hat[p] - h) / (1.0 + std::abs(h));
  });
  r.convergence = detail::summarize_levels(diffs, sched, opt.probability);
  r.median_error = stats::median(r.error);
  r.q95_error = stats::quantile(r.error, 0.95);
  return r;
}

}  // namespace pathreg
