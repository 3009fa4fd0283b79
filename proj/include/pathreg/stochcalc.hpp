#pragma once

#include <complex>
#include <memory>
#include <optional>
#include <variant>

#include <unsupported/Eigen/FFT>

#include "pathreg/functional.hpp"

namespace pathreg {

// ---- process models ----

struct BrownianMotion {};

// X_t = x0 + W_t + drift(t).
struct BrownianPlusSmoothDrift {
  std::function<double(double)> drift;
};

// X = x0 + W + weight * B^H with B^H a fractional Brownian motion, H > 1/2.
struct HolderMix {
  double hurst = 0.75;
  double weight = 0.5;
};

// dX = sigma(t, window of X) dW, explicit Euler.
struct PathDependentSDE {
  SigmaFn sigma;
  double overflow_guard = 1e100;
};

struct ProcessModel {
  std::variant<BrownianMotion, BrownianPlusSmoothDrift, HolderMix, PathDependentSDE> kind;
  double x0 = 0.0;

  std::string name() const {
    switch (kind.index()) {
      case 0: return "brownian";
      case 1: return "brownian_drift";
      case 2: return "holder_mix";
      default: return "path_sde";
    }
  }

  // sigma^2 such that [X]_t = int sigma^2(s, X_s) ds.
  SigmaFn diffusion() const {
    if (const auto* sde = std::get_if<PathDependentSDE>(&kind)) return sde->sigma;
    return unit_sigma();
  }
};

struct TimeGrid {
  double T = 1.0;
  std::size_t n_steps = 0;
  double step() const { return T / static_cast<double>(n_steps); }
  double time(std::size_t i) const { return i == n_steps ? T : step() * static_cast<double>(i); }
};

struct PathSample {
  GridPath X;  // the process on [0, T]
  GridPath W;  // driving Brownian motion, W_0 = 0
};

namespace detail {

// Square roots of the circulant eigenvalues of unit-step fractional Gaussian noise of length n.
inline std::vector<double> davies_harte_roots(double H, std::size_t n) {
  const std::size_t M = 2 * n;
  auto gamma = [H](double k) {
    return 0.5 * (std::pow(std::abs(k + 1), 2 * H) - 2 * std::pow(std::abs(k), 2 * H) + std::pow(std::abs(k - 1), 2 * H));
  };
  std::vector<std::complex<double>> c(M), lam;
  for (std::size_t k = 0; k <= n; ++k) c[k] = gamma(static_cast<double>(k));
  for (std::size_t k = n + 1; k < M; ++k) c[k] = gamma(static_cast<double>(M - k));
  Eigen::FFT<double> fft;
  fft.fwd(lam, c);
  double top = 0.0;
  for (const auto& l : lam) top = std::max(top, l.real());
  std::vector<double> root(M);
  for (std::size_t k = 0; k < M; ++k) {
    double l = lam[k].real();
    if (l < 0.0) {
      if (l < -1e-10 * top) throw NumericalError("HolderMix: circulant embedding is not positive semidefinite");
      l = 0.0;
    }
    root[k] = std::sqrt(l / static_cast<double>(M));
  }
  return root;
}

}  // namespace detail

// Ensemble of n_paths trajectories; path i depends only on (seed, i).
class PathEnsemble {
 public:
  PathEnsemble(ProcessModel model, TimeGrid grid, std::uint64_t seed, std::size_t n_paths)
      : model_(std::move(model)), grid_(grid), seed_(seed), n_paths_(n_paths) {
    require(grid_.T > 0 && grid_.n_steps >= 2, "PathEnsemble: grid needs T > 0 and at least 2 steps");
    require(n_paths_ >= 1, "PathEnsemble: n_paths must be positive");
    if (const auto* hm = std::get_if<HolderMix>(&model_.kind)) {
      require(hm->hurst > 0.5 && hm->hurst < 1.0, "HolderMix: Hurst index must lie in (1/2, 1)");
      roots_ = std::make_shared<const std::vector<double>>(detail::davies_harte_roots(hm->hurst, grid_.n_steps));
    }
    if (const auto* bd = std::get_if<BrownianPlusSmoothDrift>(&model_.kind))
      require(static_cast<bool>(bd->drift), "BrownianPlusSmoothDrift: drift function missing");
    if (const auto* sde = std::get_if<PathDependentSDE>(&model_.kind))
      require(static_cast<bool>(sde->sigma), "PathDependentSDE: sigma functional missing");
  }

  const ProcessModel& model() const noexcept { return model_; }
  const TimeGrid& grid() const noexcept { return grid_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t size() const noexcept { return n_paths_; }

  // Per-partition sampler holding scratch buffers.
  class Generator {
   public:
    explicit Generator(const PathEnsemble& e) : e_(&e) {}

    PathSample operator()(std::size_t i) {
      require(i < e_->n_paths_, "PathEnsemble: path index out of range");
      const std::size_t n = e_->grid_.n_steps;
      const double dt = e_->grid_.step();
      auto rng = substream(e_->seed_, i);
      std::normal_distribution<double> z;
      std::vector<double> w(n + 1, 0.0), x(n + 1);
      const double sq = std::sqrt(dt);
      for (std::size_t k = 0; k < n; ++k) w[k + 1] = w[k] + sq * z(rng);
      const double x0 = e_->model_.x0;
      std::visit(
          [&](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, BrownianMotion>) {
              for (std::size_t k = 0; k <= n; ++k) x[k] = x0 + w[k];
            } else if constexpr (std::is_same_v<M, BrownianPlusSmoothDrift>) {
              for (std::size_t k = 0; k <= n; ++k)
                x[k] = x0 + w[k] + check_finite(m.drift(e_->grid_.time(k)), "drift");
            } else if constexpr (std::is_same_v<M, HolderMix>) {
              fbm(rng, z, x);
              for (std::size_t k = 0; k <= n; ++k) x[k] = x0 + w[k] + m.weight * x[k];
            } else {
              x[0] = x0;
              for (std::size_t k = 0; k < n; ++k) {
                const double t = e_->grid_.time(k);
                const WindowView win(std::span<const double>(x), 0.0, dt, t, e_->grid_.T);
                const double s = m.sigma(t, win);
                if (!std::isfinite(s) || std::abs(s) > m.overflow_guard)
                  throw NumericalError("PathDependentSDE: sigma is non-finite or exceeds the overflow guard");
                x[k + 1] = x[k] + s * (w[k + 1] - w[k]);
              }
            }
          },
          e_->model_.kind);
      return {GridPath(0.0, e_->grid_.T, std::move(x)), GridPath(0.0, e_->grid_.T, std::move(w))};
    }

   private:
    // Fractional Brownian motion on the grid by circulant embedding; writes B^H into out.
    void fbm(std::mt19937_64& rng, std::normal_distribution<double>& z, std::vector<double>& out) {
      const auto& root = *e_->roots_;
      const std::size_t M = root.size(), n = M / 2;
      in_.resize(M);
      for (std::size_t k = 0; k < M; ++k) {
        const double a = z(rng), b = z(rng);
        in_[k] = root[k] * std::complex<double>(a, b);
      }
      fft_.fwd(out_, in_);
      const auto& hm = std::get<HolderMix>(e_->model_.kind);
      const double scale = std::pow(e_->grid_.step(), hm.hurst);
      out[0] = 0.0;
      for (std::size_t k = 0; k < n; ++k) out[k + 1] = out[k] + scale * out_[k].real();
    }

    const PathEnsemble* e_;
    Eigen::FFT<double> fft_;
    std::vector<std::complex<double>> in_, out_;
  };

  Generator generator() const { return Generator(*this); }
  PathSample sample(std::size_t i) const { return generator()(i); }

  // fn(i, sample) for every path, partitioned across workers.
  template <class Fn>
  void for_each(Fn&& fn) const {
    parallel_partitions(n_paths_, [&](std::size_t b, std::size_t e) {
      Generator g(*this);
      for (std::size_t i = b; i < e; ++i) fn(i, g(i));
    });
  }

  std::vector<GridPath> materialize() const {
    std::vector<std::optional<GridPath>> tmp(n_paths_);
    for_each([&](std::size_t i, PathSample s) { tmp[i] = std::move(s.X); });
    std::vector<GridPath> out;
    out.reserve(n_paths_);
    for (auto& p : tmp) out.push_back(std::move(*p));
    return out;
  }

 private:
  ProcessModel model_;
  TimeGrid grid_;
  std::uint64_t seed_;
  std::size_t n_paths_;
  std::shared_ptr<const std::vector<double>> roots_;
};

inline PathEnsemble simulate(const ProcessModel& model, const TimeGrid& grid, std::uint64_t seed, std::size_t n_paths) {
  return PathEnsemble(model, grid, seed, n_paths);
}

// ---- convergence in probability ----

struct ProbabilityOptions {
  std::vector<double> deltas{1e-2, 1e-3};
  double scale = 1.0;
  double max_fraction = 0.05;
};

// Successive-level diagnostics: pair j compares levels j and j+1 of the schedule.
struct ConvergenceInProbability {
  std::vector<double> eps;
  std::vector<double> deltas;                     // thresholds after scaling
  std::vector<std::vector<double>> fraction;      // [pair][delta], terminal values
  std::vector<std::vector<double>> ucp_fraction;  // [pair][delta], sup over t
  bool converged = false;
  bool ucp_converged = false;
};

inline nlohmann::json to_json(const ConvergenceInProbability& c) {
  return {{"eps", c.eps},
          {"deltas", c.deltas},
          {"fraction", c.fraction},
          {"ucp_fraction", c.ucp_fraction},
          {"converged", c.converged},
          {"ucp_converged", c.ucp_converged}};
}

namespace detail {

// Per-path differences between successive schedule levels.
struct LevelDiffs {
  std::vector<double> terminal, sup;
  std::vector<double> prev;

  void push(std::span<const double> cur) {
    if (!prev.empty()) {
      double s = 0.0;
      for (std::size_t i = 0; i < cur.size(); ++i) s = std::max(s, std::abs(cur[i] - prev[i]));
      terminal.push_back(std::abs(cur.back() - prev.back()));
      sup.push_back(s);
    }
    prev.assign(cur.begin(), cur.end());
  }
};

inline ConvergenceInProbability summarize_levels(const std::vector<LevelDiffs>& per_path, const EpsSchedule& sched,
                                                 const ProbabilityOptions& opt) {
  require(!opt.deltas.empty(), "ProbabilityOptions: at least one threshold needed");
  ConvergenceInProbability c;
  c.eps = sched.eps;
  for (double d : opt.deltas) c.deltas.push_back(d * opt.scale);
  const std::size_t pairs = sched.eps.size() - 1;
  const double N = static_cast<double>(per_path.size());
  for (std::size_t j = 0; j < pairs; ++j) {
    std::vector<double> f, u;
    for (double d : c.deltas) {
      std::size_t a = 0, b = 0;
      for (const auto& p : per_path) {
        a += p.terminal[j] > d;
        b += p.sup[j] > d;
      }
      f.push_back(static_cast<double>(a) / N);
      u.push_back(static_cast<double>(b) / N);
    }
    c.fraction.push_back(std::move(f));
    c.ucp_fraction.push_back(std::move(u));
  }
  if (pairs > 0) {
    c.converged = c.fraction.back()[0] <= opt.max_fraction;
    c.ucp_converged = c.ucp_fraction.back()[0] <= opt.max_fraction;
  }
  return c;
}

// Cumulative (1/k) sum_{i<m} y_i (x[min(i+k,n)] - x_i).
inline void cumulative_forward(std::span<const double> y, std::span<const double> x, std::size_t k, std::span<double> out) {
  const std::size_t n = x.size() - 1;
  const double inv = 1.0 / static_cast<double>(k);
  double acc = 0.0;
  out[0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += y[i] * (x[std::min(i + k, n)] - x[i]);
    out[i + 1] = acc * inv;
  }
}

template <class T>
std::vector<T> unwrap(std::vector<std::optional<T>>&& v) {
  std::vector<T> out;
  out.reserve(v.size());
  for (auto& o : v) out.push_back(std::move(*o));
  return out;
}

}  // namespace detail

// ---- forward integrals in probability ----

enum class IntegralMode { Open, Improper, Proper };

// Node values Y_0..Y_n of an adapted integrand built from a path sample.
using PathIntegrand = std::function<std::vector<double>(const PathSample&)>;

struct ImproperValue {
  std::optional<double> value;  // withheld when the extrapolations are not Cauchy
  double stderr_fit = 0.0;
  double cauchy_gap = 0.0;
};

struct ForwardIntegralSP {
  std::vector<GridPath> paths;         // t -> A_t at the finest level; last node is the full quotient
  std::vector<double> proper;          // full-interval quotient at T (Proper mode)
  std::vector<ImproperValue> improper;  // t -> T^- extrapolation (Improper mode)
  std::size_t withheld = 0;
  ConvergenceInProbability convergence;
};

// Least-squares line through (t_m, A_m) over the last 5% of nodes before T, evaluated at T.
inline std::pair<double, double> extrapolate_to_end(std::span<const double> a, const TimeGrid& g) {
  const std::size_t n = g.n_steps;
  const std::size_t m = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(n))));
  const std::size_t lo = n - std::min(m, n);
  std::vector<double> t, y;
  for (std::size_t i = lo; i < n; ++i) {
    t.push_back(g.time(i));
    y.push_back(a[i]);
  }
  const double N = static_cast<double>(t.size());
  const double tb = stats::mean(t), yb = stats::mean(y);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    sxx += (t[i] - tb) * (t[i] - tb);
    sxy += (t[i] - tb) * (y[i] - yb);
  }
  const double slope = sxy / sxx;
  const double pred = yb + slope * (g.T - tb);
  double rss = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = y[i] - (yb + slope * (t[i] - tb));
    rss += r * r;
  }
  const double s2 = t.size() > 2 ? rss / (N - 2) : 0.0;
  return {pred, std::sqrt(s2 * (1.0 / N + (g.T - tb) * (g.T - tb) / sxx))};
}

inline ForwardIntegralSP forward_integral_sp(const PathIntegrand& Y, const PathEnsemble& X, IntegralMode mode,
                                             const EpsSchedule& sched, const ProbabilityOptions& opt = {}) {
  const auto& g = X.grid();
  const auto ks = sched.multiples(g.step());
  const std::size_t n = g.n_steps, N = X.size();
  std::vector<std::optional<GridPath>> paths(N);
  std::vector<detail::LevelDiffs> diffs(N);
  std::vector<ImproperValue> improper(mode == IntegralMode::Improper ? N : 0);
  X.for_each([&](std::size_t p, const PathSample& s) {
    const auto y = Y(s);
    require(y.size() == n + 1, "forward_integral_sp: integrand has the wrong number of nodes");
    for (double v : y) check_finite(v, "forward integrand");
    std::vector<double> cur(n + 1);
    double prev_ext = 0.0;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      detail::cumulative_forward(y, s.X.values(), ks[j], cur);
      diffs[p].push(cur);
      if (mode == IntegralMode::Improper) {
        const auto [v, se] = extrapolate_to_end(cur, g);
        auto& iv = improper[p];
        iv.stderr_fit = se;
        iv.cauchy_gap = j > 0 ? std::abs(v - prev_ext) : std::numeric_limits<double>::infinity();
        iv.value = v;
        prev_ext = v;
      }
    }
    paths[p] = GridPath(0.0, g.T, std::move(cur));
  });
  ForwardIntegralSP r;
  r.paths = detail::unwrap(std::move(paths));
  r.convergence = detail::summarize_levels(diffs, sched, opt);
  if (mode == IntegralMode::Proper)
    for (const auto& p : r.paths) r.proper.push_back(p[n]);
  if (mode == IntegralMode::Improper) {
    const double tol = opt.deltas.front() * opt.scale;
    for (auto& iv : improper) {
      if (!(iv.cauchy_gap <= tol)) {
        iv.value.reset();
        ++r.withheld;
      }
    }
    r.improper = std::move(improper);
  }
  return r;
}

// ---- covariation in probability ----

struct CovariationSP {
  std::vector<GridPath> bracket;  // t -> [X,Y]_t at the finest level
  ConvergenceInProbability convergence;
};

namespace detail {

inline CovariationSP covariation_impl(const PathEnsemble& X, const PathEnsemble* Y, const EpsSchedule& sched,
                                      const ProbabilityOptions& opt) {
  const auto& g = X.grid();
  if (Y) {
    require(Y->grid().n_steps == g.n_steps && std::abs(Y->grid().T - g.T) <= 1e-12,
            "covariation_sp: ensembles must share the grid");
    require(Y->size() == X.size(), "covariation_sp: ensembles must have the same number of paths");
  }
  const auto ks = sched.multiples(g.step());
  const std::size_t n = g.n_steps, N = X.size();
  std::vector<std::optional<GridPath>> out(N);
  std::vector<LevelDiffs> diffs(N);
  parallel_partitions(N, [&](std::size_t b, std::size_t e) {
    PathEnsemble::Generator gx(X);
    std::optional<PathEnsemble::Generator> gy;
    if (Y) gy.emplace(*Y);
    std::vector<double> cur(n + 1);
    for (std::size_t p = b; p < e; ++p) {
      const PathSample sx = gx(p);
      const std::optional<PathSample> sy = Y ? std::optional<PathSample>((*gy)(p)) : std::nullopt;
      const auto xv = sx.X.values();
      const auto yv = sy ? sy->X.values() : xv;
      for (std::size_t j = 0; j < ks.size(); ++j) {
        covariation_path(xv, yv, ks[j], 0, cur);
        diffs[p].push(cur);
      }
      out[p] = GridPath(0.0, g.T, cur);
    }
  });
  return {unwrap(std::move(out)), summarize_levels(diffs, sched, opt)};
}

}  // namespace detail

inline CovariationSP covariation_sp(const PathEnsemble& X, const PathEnsemble& Y, const EpsSchedule& sched,
                                    const ProbabilityOptions& opt = {}) {
  return detail::covariation_impl(X, &Y, sched, opt);
}

inline CovariationSP quadratic_variation_sp(const PathEnsemble& X, const EpsSchedule& sched,
                                            const ProbabilityOptions& opt = {}) {
  return detail::covariation_impl(X, nullptr, sched, opt);
}

// ---- Ito-formula residuals ----

struct ResidualSP {
  std::vector<GridPath> residual;  // per path, finest level
  std::vector<double> sup;         // per path sup_t |residual|
  ConvergenceInProbability convergence;
};

// F(t,X_t) - F(0,X_0) - int F_t ds - int F_x d^-X - 1/2 int F_xx d[X], all at level eps.
inline void ito_residual_level(const ScalarField& F, const GridPath& X, std::size_t k, std::span<double> out) {
  const std::size_t n = X.n_steps();
  const auto x = X.values();
  const double dt = X.step();
  std::vector<double> fx(n + 1), qv(n + 1), fwd(n + 1);
  for (std::size_t i = 0; i <= n; ++i) fx[i] = check_finite(F.fx(X.time(i), x[i]), "F_x");
  detail::cumulative_forward(fx, x, k, fwd);
  detail::covariation_path(x, x, k, 0, qv);
  const double f0 = F.f(X.time(0), x[0]);
  double time_int = 0.0, second = 0.0;
  double ft_prev = check_finite(F.ft(X.time(0), x[0]), "F_t");
  out[0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ft_next = check_finite(F.ft(X.time(i + 1), x[i + 1]), "F_t");
    time_int += 0.5 * (ft_prev + ft_next) * dt;
    ft_prev = ft_next;
    second += check_finite(F.fxx(X.time(i), x[i]), "F_xx") * (qv[i + 1] - qv[i]);
    out[i + 1] = F.f(X.time(i + 1), x[i + 1]) - f0 - time_int - fwd[i + 1] - 0.5 * second;
  }
}

inline ResidualSP ito_residual(const ScalarField& F, const PathEnsemble& X, const EpsSchedule& sched,
                               const ProbabilityOptions& opt = {}) {
  require(F.f && F.ft && F.fx && F.fxx, "ito_residual: F and its derivatives t, x, xx must be supplied");
  const auto& g = X.grid();
  const auto ks = sched.multiples(g.step());
  const std::size_t n = g.n_steps, N = X.size();
  std::vector<std::optional<GridPath>> out(N);
  std::vector<double> sup(N);
  std::vector<detail::LevelDiffs> diffs(N);
  X.for_each([&](std::size_t p, const PathSample& s) {
    std::vector<double> cur(n + 1);
    for (std::size_t j = 0; j < ks.size(); ++j) {
      ito_residual_level(F, s.X, ks[j], cur);
      diffs[p].push(cur);
    }
    double m = 0.0;
    for (double v : cur) m = std::max(m, std::abs(v));
    sup[p] = m;
    out[p] = GridPath(0.0, g.T, std::move(cur));
  });
  return {detail::unwrap(std::move(out)), std::move(sup), detail::summarize_levels(diffs, sched, opt)};
}

// ---- chi-quadratic variation of the window process ----

// lambda [X]_t + int_{-t}^0 g4(x) [X]_{t+x} dx with [X] given as a function of time.
inline double chi_qv_window(const DiagonalMeasure& mu, double t, const std::function<double(double)>& bracket,
                            double T_max, std::size_t refine = 8) {
  require(t >= 0.0 && t <= T_max + 1e-12, "chi_qv_window: t outside [0, T]");
  require(t <= mu.T + 1e-12, "chi_qv_window: t exceeds the measure window");
  double v = mu.lambda * bracket(t);
  if (mu.g4 && t > 0.0) {
    const GridPath& g4 = *mu.g4;
    std::vector<double> nodes{-t};
    for (std::size_t j = 0; j <= g4.n_steps(); ++j)
      if (g4.time(j) > -t) nodes.push_back(g4.time(j));
    if (nodes.back() < 0.0) nodes.push_back(0.0);
    double acc = 0.0;
    for (std::size_t c = 0; c + 1 < nodes.size(); ++c) {
      const double a = nodes[c], h = (nodes[c + 1] - a) / static_cast<double>(refine);
      auto f = [&](double x) { return g4.at(x) * bracket(t + x); };
      double s = 0.5 * (f(a) + f(nodes[c + 1]));
      for (std::size_t r = 1; r < refine; ++r) s += f(a + h * static_cast<double>(r));
      acc += s * h;
    }
    v += acc;
  }
  return check_finite(v, "chi_qv_window");
}

// Time-ordered form int_0^t (lambda Z_s + int_{-s}^0 g4(x) Z_{s+x} dx) ds for [X]_t = int_0^t Z.
inline double chi_qv_window_time_ordered(const DiagonalMeasure& mu, double t, const std::function<double(double)>& Z,
                                         std::size_t n_outer = 512, std::size_t n_inner = 256) {
  require(t >= 0.0 && t <= mu.T + 1e-12, "chi_qv_window: t outside the measure window");
  if (t == 0.0) return 0.0;
  auto inner = [&](double s) {
    double v = mu.lambda * Z(s);
    if (mu.g4 && s > 0.0) {
      const double h = s / static_cast<double>(n_inner);
      double acc = 0.5 * (mu.g4->at(-s) * Z(0.0) + mu.g4->at(0.0) * Z(s));
      for (std::size_t r = 1; r < n_inner; ++r) {
        const double x = -s + h * static_cast<double>(r);
        acc += mu.g4->at(x) * Z(s + x);
      }
      v += acc * h;
    }
    return v;
  };
  const double h = t / static_cast<double>(n_outer);
  double acc = 0.5 * (inner(0.0) + inner(t));
  for (std::size_t r = 1; r < n_outer; ++r) acc += inner(h * static_cast<double>(r));
  return acc * h;
}

// Per-path values from estimated brackets (GridPaths on [0, T]).
inline std::vector<double> chi_qv_window(const DiagonalMeasure& mu, double t, const std::vector<GridPath>& brackets) {
  std::vector<double> out;
  out.reserve(brackets.size());
  for (const auto& b : brackets) out.push_back(chi_qv_window(mu, t, [&b](double s) { return b.at(s); }, b.t_end()));
  return out;
}

// ---- window Ito residual ----

// 1/2 [lambda sigma^2(t, w) + int_{-t}^0 g4(x) sigma^2(t+x, window at t+x) dx] with D^2 taken at time t.
inline double window_second_order(const DiagonalMeasure& mu, double t, const WindowView& w, const SigmaFn& sigma) {
  const double s0 = sigma(t, w);
  double v = mu.lambda * s0 * s0;
  if (mu.g4 && t > 0.0) {
    const std::size_t n = w.n_steps();
    const std::size_t it = grid_index(-t, -w.width(), w.step(), n, "window second-order term");
    double acc = 0.0;
    for (std::size_t j = it; j <= n; ++j) {
      const double x = w.node_x(j);
      const double g = mu.g4->at(x);
      if (g == 0.0) continue;
      const double sx = sigma(t + x, w.reanchored(w.anchor() + x));
      acc += ((j == it || j == n) ? 0.5 : 1.0) * g * sx * sx;
    }
    v += acc * w.step();
  }
  return 0.5 * check_finite(v, "second-order term");
}

// U(t, X_t) - U(0, X_0) - int dU/dt ds - int I^-(s) ds - int D^d0 U d^-X - 1/2 int <D^2 U, sigma^2> ds
// on the window process of width T, at the finest level of the schedule.
inline void window_ito_residual_path(const PathFunctional& U, const GridPath& X, const SigmaFn& sigma, std::size_t k,
                                     std::span<double> out) {
  const std::size_t n = X.n_steps();
  const double dt = X.step(), T = X.t_end();
  const auto x = X.values();
  std::vector<double> u(n + 1), vert(n + 1), rate(n + 1, 0.0), fwd(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const double t = X.time(i);
    const WindowView w(x, 0.0, dt, t, T);
    u[i] = check_finite(U(t, w), "window functional");
    vert[i] = check_finite(U.vertical(t, w), "vertical derivative");
    if (i == n) break;
    double r = U.time_derivative ? U.time_derivative(t, w) : fd_time_derivative(U, t, w, T);
    if (t > 0.0) {
      const SignedMeasure1D mu = U.perp(t, w);
      if (!mu.is_zero()) {
        const double a = w.node_x(grid_index(-t, -T, dt, w.n_steps(), "window residual time"));
        r += forward_measure_quotient(mu.restricted_left(a, false), w.materialize(), k);
      }
    }
    r += window_second_order(U.second(t, w), t, w, sigma);
    rate[i] = check_finite(r, "window drift");
  }
  detail::cumulative_forward(vert, x, k, fwd);
  double drift = 0.0;
  out[0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    drift += rate[i] * dt;
    out[i + 1] = u[i + 1] - u[0] - drift - fwd[i + 1];
  }
}

inline ResidualSP window_ito_residual(const PathFunctional& U, const PathEnsemble& X, const SigmaFn& sigma,
                                      const EpsSchedule& sched) {
  require(U.vertical && U.perp && U.second,
          "window_ito_residual: functional " + U.name + " must supply vertical, perpendicular and second derivatives");
  const auto& g = X.grid();
  const auto ks = sched.multiples(g.step());
  const std::size_t k = ks.back(), n = g.n_steps, N = X.size();
  std::vector<std::optional<GridPath>> out(N);
  std::vector<double> sup(N);
  X.for_each([&](std::size_t p, const PathSample& s) {
    std::vector<double> cur(n + 1);
    window_ito_residual_path(U, s.X, sigma, k, cur);
    double m = 0.0;
    for (double v : cur) m = std::max(m, std::abs(v));
    sup[p] = m;
    out[p] = GridPath(0.0, g.T, std::move(cur));
  });
  ResidualSP r{detail::unwrap(std::move(out)), std::move(sup), {}};
  r.convergence.eps = {sched.eps.back()};
  return r;
}

// ---- ensemble summaries ----

struct SummaryRow {
  double t, q05, median, q95;
};

// Quantile bands over paths at up to max_rows evenly strided nodes (always including both ends).
inline std::vector<SummaryRow> summarize_paths(const std::vector<GridPath>& paths, std::size_t max_rows = 257) {
  require(!paths.empty(), "summarize_paths: empty ensemble");
  const std::size_t n = paths.front().n_steps();
  const std::size_t stride = std::max<std::size_t>(1, (n + max_rows - 2) / std::max<std::size_t>(1, max_rows - 1));
  std::vector<SummaryRow> rows;
  std::vector<double> col(paths.size());
  for (std::size_t i = 0;; i = std::min(i + stride, n)) {
    for (std::size_t p = 0; p < paths.size(); ++p) col[p] = paths[p][i];
    rows.push_back({paths.front().time(i), stats::quantile(col, 0.05), stats::quantile(col, 0.5),
                    stats::quantile(col, 0.95)});
    if (i == n) break;
  }
  return rows;
}

}  // namespace pathreg
