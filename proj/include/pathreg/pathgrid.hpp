#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pathreg/core.hpp"

namespace pathreg {

// Trajectory sampled at t_start + i*step, i = 0..n_steps.
class GridPath {
 public:
  GridPath() = default;

  GridPath(double t_start, double t_end, std::vector<double> values)
      : t0_(t_start), t1_(t_end), v_(std::move(values)) {
    require(v_.size() >= 2, "GridPath needs at least one step");
    require(t_end > t_start, "GridPath needs t_end > t_start");
    dt_ = (t1_ - t0_) / static_cast<double>(v_.size() - 1);
    for (double x : v_) require(std::isfinite(x), "GridPath values must be finite");
  }

  template <class F>
  static GridPath sample(double t_start, double t_end, std::size_t n_steps, F&& f) {
    require(n_steps >= 1, "GridPath needs at least one step");
    std::vector<double> v(n_steps + 1);
    const double dt = (t_end - t_start) / static_cast<double>(n_steps);
    for (std::size_t i = 0; i <= n_steps; ++i) v[i] = f(i == n_steps ? t_end : t_start + dt * static_cast<double>(i));
    return GridPath(t_start, t_end, std::move(v));
  }

  static GridPath constant(double t_start, double t_end, std::size_t n_steps, double c) {
    return GridPath(t_start, t_end, std::vector<double>(n_steps + 1, c));
  }

  double t_start() const noexcept { return t0_; }
  double t_end() const noexcept { return t1_; }
  double step() const noexcept { return dt_; }
  std::size_t n_steps() const noexcept { return v_.size() - 1; }
  double time(std::size_t i) const noexcept { return i + 1 == v_.size() ? t1_ : t0_ + dt_ * static_cast<double>(i); }
  double operator[](std::size_t i) const noexcept { return v_[i]; }
  std::span<const double> values() const noexcept { return v_; }
  bool empty() const noexcept { return v_.empty(); }

  // Linear interpolation, constant beyond both ends.
  double at(double t) const noexcept {
    if (t <= t0_) return v_.front();
    if (t >= t1_) return v_.back();
    const double r = (t - t0_) / dt_;
    auto i = static_cast<std::size_t>(r);
    if (i >= n_steps()) i = n_steps() - 1;
    const double frac = r - static_cast<double>(i);
    return frac == 0.0 ? v_[i] : v_[i] + frac * (v_[i + 1] - v_[i]);
  }

  double sup_norm() const noexcept {
    double m = 0.0;
    for (double x : v_) m = std::max(m, std::abs(x));
    return m;
  }

  bool same_grid(const GridPath& o) const noexcept {
    const double tol = 1e-12 * std::max(1.0, std::abs(t1_ - t0_));
    return n_steps() == o.n_steps() && std::abs(t0_ - o.t0_) <= tol && std::abs(t1_ - o.t1_) <= tol;
  }

 private:
  double t0_ = 0.0, t1_ = 1.0, dt_ = 1.0;
  std::vector<double> v_;
};

inline double extend_clamped(const GridPath& p, double t) { return p.at(t); }

inline double extend_zero_left(const GridPath& f, double s) { return s < f.t_start() ? 0.0 : f.at(s); }

// x -> eta(x - shift) on eta's own grid, clamped on the left.
inline GridPath shift_path(const GridPath& eta, double shift) {
  std::vector<double> v(eta.n_steps() + 1);
  const bool exact = is_grid_multiple(shift, eta.step());
  const auto k = static_cast<long long>(std::llround(shift / eta.step()));
  for (std::size_t j = 0; j <= eta.n_steps(); ++j) {
    if (exact) {
      const long long idx = std::clamp<long long>(static_cast<long long>(j) - k, 0, static_cast<long long>(eta.n_steps()));
      v[j] = eta[static_cast<std::size_t>(idx)];
    } else {
      v[j] = eta.at(eta.time(j) - shift);
    }
  }
  return GridPath(eta.t_start(), eta.t_end(), std::move(v));
}

// Member gamma(x) = eta(x - eps) of the left-shift family of eta.
inline GridPath shift_member(const GridPath& eta, double eps) {
  require(eps >= 0.0 && eps <= 1.0, "shift_member: eps must lie in [0,1]");
  if (eps == 0.0) return eta;
  return shift_path(eta, eps);
}

// Read-only window x -> X(anchor + x), x in [-width, 0], over a base trajectory,
// with an optional vertical jump added at x = 0.
class WindowView {
 public:
  WindowView(std::span<const double> base, double base_t0, double dt, double anchor, double width, double jump = 0.0)
      : base_(base), t0_(base_t0), dt_(dt), anchor_(anchor), width_(width), jump_(jump) {
    require(base.size() >= 2 && dt > 0 && width > 0, "WindowView: invalid base or width");
    require(is_grid_multiple(width, dt), "WindowView: width must be a multiple of the step");
    n_ = static_cast<std::size_t>(std::llround(width / dt));
    const double r = (anchor - base_t0) / dt;
    aligned_ = is_grid_multiple(anchor - base_t0, dt);
    offset_ = static_cast<long long>(std::llround(r)) - static_cast<long long>(n_);
  }

  static WindowView of(const GridPath& eta, double jump = 0.0) {
    return WindowView(eta.values(), eta.t_start(), eta.step(), eta.t_end(), eta.t_end() - eta.t_start(), jump);
  }

  double anchor() const noexcept { return anchor_; }
  double width() const noexcept { return width_; }
  double step() const noexcept { return dt_; }
  double jump() const noexcept { return jump_; }
  std::size_t n_steps() const noexcept { return n_; }
  double node_x(std::size_t j) const noexcept { return j == n_ ? 0.0 : -width_ + dt_ * static_cast<double>(j); }

  WindowView with_jump(double jump) const {
    WindowView w = *this;
    w.jump_ = jump;
    return w;
  }

  // Same base trajectory, different present time, no jump.
  WindowView reanchored(double anchor) const {
    return WindowView(base_, t0_, dt_, anchor, width_, 0.0);
  }

  double base_at(double t) const noexcept {
    const double r = (t - t0_) / dt_;
    const std::size_t last = base_.size() - 1;
    if (r <= 0) return base_[0];
    if (r >= static_cast<double>(last)) return base_[last];
    auto i = static_cast<std::size_t>(r);
    const double frac = r - static_cast<double>(i);
    return frac == 0.0 ? base_[i] : base_[i] + frac * (base_[i + 1] - base_[i]);
  }

  double operator()(double x) const noexcept {
    if (x >= 0.0) return base_at(anchor_) + jump_;
    return base_at(anchor_ + std::max(x, -width_));
  }

  // Node value without the jump.
  double raw_node(std::size_t j) const noexcept {
    if (aligned_) {
      const long long last = static_cast<long long>(base_.size()) - 1;
      const long long idx = std::clamp<long long>(offset_ + static_cast<long long>(j), 0, last);
      return base_[static_cast<std::size_t>(idx)];
    }
    return base_at(anchor_ + node_x(j));
  }

  double node(std::size_t j) const noexcept { return j == n_ ? raw_node(j) + jump_ : raw_node(j); }

  double present() const noexcept { return node(n_); }

  double sup_norm() const noexcept {
    double m = 0.0;
    for (std::size_t j = 0; j <= n_; ++j) m = std::max(m, std::abs(node(j)));
    return m;
  }

  // Nodes on [-width, 0] without the jump.
  GridPath materialize() const {
    std::vector<double> v(n_ + 1);
    for (std::size_t j = 0; j <= n_; ++j) v[j] = raw_node(j);
    return GridPath(-width_, 0.0, std::move(v));
  }

 private:
  std::span<const double> base_;
  double t0_, dt_, anchor_, width_, jump_;
  std::size_t n_ = 0;
  bool aligned_ = false;
  long long offset_ = 0;
};

struct Atom {
  double location;
  double mass;
};

// Finite signed measure on [a, b]: atoms plus a sampled density.
struct SignedMeasure1D {
  double a = -1.0;
  double b = 0.0;
  std::vector<Atom> atoms;
  std::optional<GridPath> density;

  static SignedMeasure1D zero(double a, double b) { return SignedMeasure1D{a, b, {}, std::nullopt}; }
  static SignedMeasure1D with_density(GridPath g) {
    const double a = g.t_start(), b = g.t_end();
    return SignedMeasure1D{a, b, {}, std::move(g)};
  }

  bool is_zero() const noexcept {
    for (const auto& at : atoms)
      if (at.mass != 0.0) return false;
    if (!density) return true;
    for (double v : density->values())
      if (v != 0.0) return false;
    return true;
  }

  void validate() const {
    require(b > a, "SignedMeasure1D: empty domain");
    const double tol = 1e-12 * std::max(1.0, b - a);
    for (const auto& at : atoms) {
      require(std::isfinite(at.mass), "SignedMeasure1D: non-finite atom mass");
      require(at.location >= a - tol && at.location <= b + tol, "SignedMeasure1D: atom outside domain");
    }
    if (density)
      require(density->t_start() <= a + tol && density->t_end() >= b - tol,
              "SignedMeasure1D: density does not cover the measure domain");
  }

  // The same measure seen on [a_new, b] with a_new >= a.
  SignedMeasure1D restricted_left(double a_new, bool keep_atom_at_left = true) const {
    require(a_new >= a - 1e-12 && a_new < b, "SignedMeasure1D: invalid restriction");
    SignedMeasure1D r{a_new, b, {}, density};
    const double tol = 1e-12 * std::max(1.0, b - a);
    for (const auto& at : atoms) {
      if (at.location > a_new + tol || (keep_atom_at_left && at.location >= a_new - tol)) r.atoms.push_back(at);
    }
    return r;
  }

  double total_variation() const {
    double tv = 0.0;
    for (const auto& at : atoms) tv += std::abs(at.mass);
    if (density) {
      const auto v = density->values();
      for (std::size_t i = 0; i + 1 < v.size(); ++i) {
        const double lo = std::max(a, density->time(i)), hi = std::min(b, density->time(i + 1));
        if (hi > lo) tv += 0.5 * (hi - lo) * (std::abs(v[i]) + std::abs(v[i + 1]));
      }
    }
    return tv;
  }
};

// Density sampled on a uniform (n+1)x(n+1) node lattice of [-T,0]^2, row index = x.
struct SquareDensity {
  std::size_t n = 0;
  std::vector<double> values;
  double operator()(std::size_t i, std::size_t j) const { return values[i * (n + 1) + j]; }
};

// lambda * delta_(0,0) + g2(x)dx (x) delta_0 + delta_0 (x) g3(y)dy + g4 on the diagonal + g1 dx dy.
struct DiagonalMeasure {
  double T = 1.0;
  double lambda = 0.0;
  std::optional<GridPath> g2, g3, g4;
  std::optional<SquareDensity> g1;

  static DiagonalMeasure atom(double T, double lambda) { return DiagonalMeasure{T, lambda, {}, {}, {}, {}}; }

  void validate() const {
    require(T > 0 && std::isfinite(lambda), "DiagonalMeasure: invalid T or lambda");
    const double tol = 1e-12 * std::max(1.0, T);
    for (const auto* g : {&g2, &g3, &g4})
      if (*g)
        require(std::abs((*g)->t_start() + T) <= tol && std::abs((*g)->t_end()) <= tol,
                "DiagonalMeasure: densities must live on [-T,0]");
    if (g1) require(g1->n >= 1 && g1->values.size() == (g1->n + 1) * (g1->n + 1), "DiagonalMeasure: malformed g1");
  }
};

namespace detail {

inline std::optional<GridPath> combine(double a, const std::optional<GridPath>& x, double b,
                                       const std::optional<GridPath>& y) {
  if (!x && !y) return std::nullopt;
  const GridPath& ref = x ? *x : *y;
  if (x && y) require(x->same_grid(*y), "DiagonalMeasure: densities on different grids");
  std::vector<double> v(ref.n_steps() + 1, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (x ? a * (*x)[i] : 0.0) + (y ? b * (*y)[i] : 0.0);
  return GridPath(ref.t_start(), ref.t_end(), std::move(v));
}

template <class H>
double trapezoid(const GridPath& g, H&& h) {
  const auto v = g.values();
  const std::size_t n = g.n_steps();
  double s = 0.0;
  for (std::size_t j = 0; j <= n; ++j) {
    const double w = (j == 0 || j == n) ? 0.5 : 1.0;
    s += w * v[j] * h(g.time(j));
  }
  return s * g.step();
}

}  // namespace detail

inline DiagonalMeasure linear_combination(double a, const DiagonalMeasure& m1, double b, const DiagonalMeasure& m2) {
  require(std::abs(m1.T - m2.T) <= 1e-12 * std::max(1.0, m1.T), "DiagonalMeasure: different T");
  DiagonalMeasure r;
  r.T = m1.T;
  r.lambda = a * m1.lambda + b * m2.lambda;
  r.g2 = detail::combine(a, m1.g2, b, m2.g2);
  r.g3 = detail::combine(a, m1.g3, b, m2.g3);
  r.g4 = detail::combine(a, m1.g4, b, m2.g4);
  if (m1.g1 || m2.g1) {
    if (m1.g1 && m2.g1) require(m1.g1->n == m2.g1->n, "DiagonalMeasure: g1 on different lattices");
    SquareDensity s;
    s.n = m1.g1 ? m1.g1->n : m2.g1->n;
    s.values.assign((s.n + 1) * (s.n + 1), 0.0);
    for (std::size_t k = 0; k < s.values.size(); ++k)
      s.values[k] = (m1.g1 ? a * m1.g1->values[k] : 0.0) + (m2.g1 ? b * m2.g1->values[k] : 0.0);
    r.g1 = std::move(s);
  }
  return r;
}

// <mu, h> with trapezoidal quadrature on each density's own nodes.
inline double apply_diag_measure(const DiagonalMeasure& mu, const std::function<double(double, double)>& h) {
  mu.validate();
  auto eval = [&](double x, double y) { return check_finite(h(x, y), "apply_diag_measure kernel"); };
  double s = mu.lambda == 0.0 ? 0.0 : mu.lambda * eval(0.0, 0.0);
  if (mu.g2) s += detail::trapezoid(*mu.g2, [&](double x) { return eval(x, 0.0); });
  if (mu.g3) s += detail::trapezoid(*mu.g3, [&](double y) { return eval(0.0, y); });
  if (mu.g4) s += detail::trapezoid(*mu.g4, [&](double x) { return eval(x, x); });
  if (mu.g1) {
    const std::size_t n = mu.g1->n;
    const double d = mu.T / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      const double wi = (i == 0 || i == n) ? 0.5 : 1.0;
      const double x = i == n ? 0.0 : -mu.T + d * static_cast<double>(i);
      for (std::size_t j = 0; j <= n; ++j) {
        const double wj = (j == 0 || j == n) ? 0.5 : 1.0;
        const double y = j == n ? 0.0 : -mu.T + d * static_cast<double>(j);
        acc += wi * wj * (*mu.g1)(i, j) * eval(x, y);
      }
    }
    s += acc * d * d;
  }
  return s;
}

enum class PathClass { AllContinuous, FiniteQV, CustomSpan };

inline bool admits_qv_diagnostic(PathClass c) noexcept { return c == PathClass::FiniteQV; }

// ---- serialization ----

inline void write_path_csv(std::ostream& os, const GridPath& p) {
  os << "t,x\n" << std::setprecision(17);
  for (std::size_t i = 0; i <= p.n_steps(); ++i) os << p.time(i) << ',' << p[i] << '\n';
}

inline GridPath read_path_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "path csv: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "t,x", "path csv: header must be \"t,x\"");
  std::vector<double> ts, xs;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    std::istringstream row(line);
    double t, x;
    char comma;
    require(static_cast<bool>(row >> t >> comma >> x) && comma == ',', "path csv: malformed row: " + line);
    ts.push_back(t);
    xs.push_back(x);
  }
  require(ts.size() >= 2, "path csv: need at least two rows");
  const double dt = (ts.back() - ts.front()) / static_cast<double>(ts.size() - 1);
  for (std::size_t i = 0; i < ts.size(); ++i)
    require(std::abs(ts[i] - (ts.front() + dt * static_cast<double>(i))) <= 1e-9 * std::max(1.0, std::abs(ts.back())),
            "path csv: times are not uniformly spaced");
  return GridPath(ts.front(), ts.back(), std::move(xs));
}

inline nlohmann::json measure_to_json(const DiagonalMeasure& mu) {
  auto arr = [](const std::optional<GridPath>& g) -> nlohmann::json {
    if (!g) return nullptr;
    return std::vector<double>(g->values().begin(), g->values().end());
  };
  nlohmann::json j;
  j["T"] = mu.T;
  j["lambda"] = mu.lambda;
  j["g2"] = arr(mu.g2);
  j["g3"] = arr(mu.g3);
  j["g4"] = arr(mu.g4);
  if (mu.g1) {
    std::vector<std::vector<double>> rows(mu.g1->n + 1);
    for (std::size_t i = 0; i <= mu.g1->n; ++i)
      for (std::size_t k = 0; k <= mu.g1->n; ++k) rows[i].push_back((*mu.g1)(i, k));
    j["g1"] = rows;
  } else {
    j["g1"] = nullptr;
  }
  return j;
}

inline DiagonalMeasure measure_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("lambda"), "measure json: missing lambda");
  DiagonalMeasure mu;
  mu.T = j.value("T", 1.0);
  mu.lambda = j.at("lambda").get<double>();
  auto arr = [&](const char* key) -> std::optional<GridPath> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return GridPath(-mu.T, 0.0, j.at(key).get<std::vector<double>>());
  };
  mu.g2 = arr("g2");
  mu.g3 = arr("g3");
  mu.g4 = arr("g4");
  if (j.contains("g1") && !j.at("g1").is_null()) {
    const auto rows = j.at("g1").get<std::vector<std::vector<double>>>();
    SquareDensity s;
    require(rows.size() >= 2, "measure json: g1 too small");
    s.n = rows.size() - 1;
    for (const auto& r : rows) {
      require(r.size() == rows.size(), "measure json: g1 must be square");
      s.values.insert(s.values.end(), r.begin(), r.end());
    }
    mu.g1 = std::move(s);
  }
  mu.validate();
  return mu;
}

}  // namespace pathreg
