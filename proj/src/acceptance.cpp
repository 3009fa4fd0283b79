#include <iomanip>
#include <ostream>
#include <sstream>

#include "pathreg/harness.hpp"

namespace pathreg {

Tier parse_tier(const std::string& s) {
  if (s == "quick") return Tier::Quick;
  if (s == "full") return Tier::Full;
  throw ValidationError("tier must be quick or full, got \"" + s + "\"");
}

namespace {

struct Res {
  std::size_t mult;
  std::size_t operator()(std::size_t n) const { return n * mult; }
};

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << " FAILED(" << what << ")";
    }
  }
  template <class T>
  Outcome& operator<<(const T& v) {
    detail << v;
    return *this;
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

GridPath probe_eta(double T, std::size_t n, double level) {
  return GridPath::sample(-T, 0.0, n, [level](double x) { return level + 0.6 * std::sin(2 * x) + 0.3 * x; });
}

// 1. Brownian quadratic variation
void c1(Res r, Outcome& o) {
  const std::size_t n = r(4096);
  const auto X = simulate({BrownianMotion{}}, {1.0, n}, 101, r(2000));
  const auto sched = EpsSchedule::geometric(1.0 / static_cast<double>(n), 4);
  ProbabilityOptions po;
  po.deltas = {0.05};
  const auto q = quadratic_variation_sp(X, sched, po);
  std::vector<double> end;
  std::size_t within = 0;
  for (const auto& b : q.bracket) {
    end.push_back(b[n]);
    double dev = 0.0;
    for (std::size_t i = 0; i <= n; ++i) dev = std::max(dev, std::abs(b[i] - b.time(i)));
    within += dev < 0.05;
  }
  const double med = stats::median(end);
  const double ucp_ok = 1.0 - q.convergence.ucp_fraction.back()[0];
  o << "median [W]_1=" << fmt(med) << " ucp paths with successive sup-gap<0.05: " << fmt(100 * ucp_ok, 3)
    << "% (sup_t|[W]_t-t|<0.05: " << fmt(100.0 * static_cast<double>(within) / static_cast<double>(end.size()), 3)
    << "%)";
  o.check(med >= 0.98 && med <= 1.02, "median");
  o.check(q.convergence.ucp_converged, "ucp");
}

// 2. forward integral of W against W vs the Ito value
void c2(Res r, Outcome& o) {
  const std::size_t n = r(4096);
  const auto X = simulate({BrownianMotion{}}, {1.0, n}, 102, r(2000));
  const auto sched = EpsSchedule::geometric(1.0 / static_cast<double>(n), 4);
  const auto res = forward_integral_sp(
      [](const PathSample& s) { return std::vector<double>(s.W.values().begin(), s.W.values().end()); }, X,
      IntegralMode::Proper, sched);
  const auto paths = X.materialize();
  std::vector<double> dev;
  double worst_bitwise = 0.0;
  for (std::size_t p = 0; p < paths.size(); ++p) {
    const double wT = paths[p][n];
    dev.push_back(std::abs(res.proper[p] - (wT * wT - 1.0) / 2.0));
    double ito = 0.0;
    for (std::size_t k = 0; k < n; ++k) ito += paths[p][k] * (paths[p][k + 1] - paths[p][k]);
    worst_bitwise = std::max(worst_bitwise, std::abs(res.proper[p] - ito) / (1.0 + std::abs(ito)));
  }
  const double med = stats::median(dev);
  o << "median |A_T-(W_T^2-T)/2|=" << fmt(med) << " max relative gap to the left-point sum=" << fmt(worst_bitwise, 3);
  o.check(med < 0.02, "median");
  o.check(worst_bitwise <= 1e-13, "bitwise");
}

// 3. Ito-formula residuals
void c3(Res r, Outcome& o) {
  const std::size_t n = r(4096);
  for (const auto& [mname, model] : {std::pair<const char*, ProcessModel>{"brownian", {BrownianMotion{}}},
                                     std::pair<const char*, ProcessModel>{"holder_mix", {HolderMix{0.75, 0.5}}}}) {
    const auto X = simulate(model, {1.0, n}, 103, r(200));
    for (const char* f : {"square", "tx"}) {
      const auto res = ito_residual(make_field(f), X, EpsSchedule::for_grid(X.grid().step(), 1.0));
      const double med = stats::median(res.sup);
      o << mname << "/" << f << "=" << fmt(med, 3) << " ";
      o.check(med < 0.02, std::string(mname) + "/" + f);
    }
  }
}

// 4. chi-quadratic variation of the window
void c4(Res r, Outcome& o) {
  const double T = 1.0;
  DiagonalMeasure mu = DiagonalMeasure::atom(T, 2.0);
  mu.g4 = GridPath::constant(-T, 0.0, 64, 1.0);
  const double det = chi_qv_window(mu, 1.0, [](double s) { return s; }, T);
  const double ordered = chi_qv_window_time_ordered(mu, 1.0, [](double) { return 1.0; });
  const auto X = simulate({BrownianMotion{}}, {T, r(2048)}, 104, r(400));
  const auto q = quadratic_variation_sp(X, EpsSchedule::for_grid(X.grid().step(), T));
  const double mc = stats::median(chi_qv_window(mu, 1.0, q.bracket));
  o << "deterministic=" << fmt(det, 10) << " time-ordered=" << fmt(ordered, 10) << " monte-carlo median=" << fmt(mc);
  o.check(std::abs(det - 2.5) <= 1e-6, "deterministic");
  o.check(std::abs(ordered - 2.5) <= 1e-6, "time-ordered");
  o.check(std::abs(mc - 2.5) <= 0.03 * 2.5, "monte-carlo");
}

// 5. window Ito residual
void c5(Res r, Outcome& o) {
  const double T = 1.0;
  const auto X = simulate({BrownianMotion{}}, {T, r(4096)}, 105, r(128));
  const auto sched = EpsSchedule::for_grid(X.grid().step(), T);
  for (const auto& U : {present_square(T, true), path_integral()}) {
    const auto res = window_ito_residual(U, X, unit_sigma(), sched);
    const double med = stats::median(res.sup);
    o << U.name << "=" << fmt(med, 3) << " ";
    o.check(med < 0.03, U.name);
  }
}

// 6. Kolmogorov closed forms by Monte-Carlo
void c6(Res r, Outcome& o) {
  const double T = 1.0;
  const std::vector<std::pair<double, double>> probes{{0.0, 0.8}, {0.25, -0.4}, {0.5, 1.3}, {0.75, 0.1}, {0.875, -1.0}};
  double worst = 0.0;
  for (const auto& [G, U] : {std::pair{present_square(T), present_square(T, true)},
                             std::pair{path_integral(), path_integral_solution(T)}}) {
    std::uint64_t seed = 600;
    for (const auto& [t, level] : probes) {
      const auto eta = probe_eta(T, 64, level);
      const auto est = solve_linear_mc(G, nullptr, {t, eta, ++seed, r(100000)});
      const double z = std::abs(est.value - U(t, WindowView::of(eta))) / est.std_error;
      worst = std::max(worst, z);
      o.check(z <= 3.0, G.name + " t=" + fmt(t));
    }
  }
  o << "max |mc-closed|/stderr over 10 probes=" << fmt(worst, 3);
}

// 7. strict residual of the closed-form solutions
void c7(Res r, Outcome& o) {
  const double T = 1.0;
  const auto design = make_probe_design(T, r(1024), 10, 107);
  const auto a = strict_residual(present_square(T, true), present_square(T), nullptr, unit_sigma(), design);
  const auto b = strict_residual(path_integral_solution(T), path_integral(), nullptr, unit_sigma(), design);
  o << "present_square max residual=" << fmt(a.max_residual, 3) << " terminal=" << fmt(a.max_terminal, 3)
    << " path_integral max residual=" << fmt(b.max_residual, 3) << " terminal=" << fmt(b.max_terminal, 3);
  o.check(a.max_residual <= 1e-3 && a.max_terminal <= 1e-3, "present_square");
  o.check(b.max_residual <= 1e-3 && b.max_terminal <= 1e-3, "path_integral");
}

// 8. cylindrical Gaussian oracle
void c8(Res r, Outcome& o) {
  const double T = 1.0;
  const auto eta = GridPath::sample(-T, 0.0, 256, [](double x) { return 0.3 + 0.6 * std::sin(2 * x) + 0.3 * x; });
  double worst = 0.0;
  for (const char* key : {"cylindrical:square:one", "cylindrical:product:one,u", "cylindrical:cos:u",
                          "cylindrical:sumsq:one,u,u2", "cylindrical:quad:one,u,cos,sin"}) {
    const auto G = parse_cylindrical(key, T);
    const auto oracle = cylindrical_gaussian_solution(G, 0.25, eta);
    const auto mc = solve_linear_mc(as_path_functional(G), nullptr, {0.25, eta, 108, r(20000)});
    const double z = std::abs(mc.value - oracle.value) / std::hypot(mc.std_error, oracle.std_error);
    worst = std::max(worst, z);
    o.check(z <= 3.0, key);
  }
  bool rejected = false;
  try {
    cylindrical_gaussian_solution(parse_cylindrical("cylindrical:product:u,u", T), 0.25, eta);
  } catch (const ValidationError&) {
    rejected = true;
  }
  o << "max |mc-oracle|/stderr over 5 functionals=" << fmt(worst, 3) << " singular rejected=" << rejected;
  o.check(rejected, "singular");
}

// 9. BSDE with linear driver
void c9(Res r, Outcome& o) {
  const double T = 1.0, alpha = 0.5;
  const auto eta = probe_eta(T, 64, 0.8);
  BsdeOptions opt;
  opt.keep_paths = false;
  opt.n_picard = 3;
  const auto sol = solve_bsde(present_square(T), linear_driver(alpha), {0.0, eta, 109, r(50000)}, opt);
  const double eta0 = eta[eta.n_steps()];
  const double exact = std::exp(alpha * T) * (eta0 * eta0 + T);
  const double err = std::abs(sol.y0.value - exact);
  o << "Y_t=" << fmt(sol.y0.value, 6) << " closed form=" << fmt(exact, 6) << " stderr=" << fmt(sol.y0.std_error, 3)
    << " rel err=" << fmt(err / exact, 3);
  o.check(err <= std::max(3 * sol.y0.std_error, 0.01 * exact), "closed form");
}

// 10. robust Clark-Ocone reconstruction
void c10(Res r, Outcome& o) {
  const double T = 1.0;
  const TimeGrid grid{T, r(4096)};
  const auto sched = EpsSchedule::for_grid(grid.step(), T);
  std::vector<double> meds;
  for (const ProcessModel& m : {ProcessModel{BrownianMotion{}}, ProcessModel{BrownianPlusSmoothDrift{[](double s) { return s * s; }}},
                                ProcessModel{HolderMix{0.75, 0.5}}}) {
    const auto X = simulate(m, grid, 110, r(500));
    const auto rep = robust_representation(present_square(T), zero_driver(), present_square(T, true), X, sched);
    meds.push_back(rep.median_error);
    o << m.name() << "=" << fmt(rep.median_error, 3) << " ";
    o.check(rep.median_error < 0.01, m.name());
  }
  const double ratio = *std::max_element(meds.begin(), meds.end()) / *std::min_element(meds.begin(), meds.end());
  o << "max/min=" << fmt(ratio, 3);
  o.check(ratio <= 3.0, "cross-model");
}

// 11. strong-viscosity pipeline
void c11(Res r, Outcome& o) {
  const double T = 1.0, t = 0.25;
  const auto eta = probe_eta(T, 256, 0.8);

  CylindricalFunctional G;
  G.T = T;
  G.phi = {cosine_kernel(0, T), cosine_kernel(1, T), cosine_kernel(2, T)};
  set_named_outer(G, "quad");
  ViscosityOptions vo;
  vo.n_terms = {1, 2, 3, 4, 5};
  vo.growth_design = 3;
  vo.gauss.qmc_points = 1 << 10;
  vo.gauss.qmc_shifts = 16;
  const auto cyl = strong_viscosity_sequence(as_path_functional(G), t, eta, vo);
  const double oracle = cylindrical_gaussian_solution(G, t, eta).value;
  double worst = 0.0;
  for (const auto& s : cyl.steps) {
    if (s.n < 3) continue;
    const double tol = 9 * s.width * s.width + 3 * s.value.std_error + 1e-3;
    worst = std::max(worst, std::abs(s.value.value - oracle) / tol);
  }
  o << "cylindrical: max |U_n-oracle|/tol (n>=3)=" << fmt(worst, 3);
  o.check(worst <= 1.0, "cylindrical stabilization");

  ViscosityOptions ao;
  ao.n_terms.clear();
  for (std::size_t n = 1; n <= 8; ++n) ao.n_terms.push_back(n);
  ao.growth_design = 6;
  ao.gauss.qmc_points = 1 << 10;
  ao.gauss.qmc_shifts = 16;
  const auto A = abs_integral();
  const auto seq = strong_viscosity_sequence(A, t, eta, ao);
  const auto direct = solve_linear_mc(A, nullptr, {t, eta, 111, r(400000)});
  std::vector<double> gaps;
  for (const auto& s : seq.steps) gaps.push_back(std::abs(s.value.value - direct.value) / std::abs(direct.value));
  bool decreasing = true;
  for (std::size_t j = 1; j < gaps.size(); ++j) decreasing = decreasing && gaps[j] < gaps[j - 1];
  o << "; abs_integral: gaps " << fmt(gaps.front(), 3) << " -> " << fmt(gaps.back(), 3) << " decreasing=" << decreasing;
  o.check(decreasing, "gap decreasing");
  o.check(gaps.back() < 0.02, "final gap");

  double R = 0.0;
  {
    auto rng = substream(ao.seed, 0, 0x67726f77);
    std::uniform_real_distribution<double> u(-1, 1);
    for (std::size_t j = 0; j < ao.growth_design; ++j) {
      const double amp = std::ldexp(1.0, static_cast<int>(j % 6)) / 4.0;
      const double a = u(rng), b = u(rng), c = u(rng);
      R = std::max(R, GridPath::sample(-T, 0, eta.n_steps(), [=](double x) {
                        return amp * (1.0 + 0.5 * a + 0.5 * b * x / T + 0.25 * c * std::cos(3 * x));
                      }).sup_norm());
    }
  }
  bool growth_ok = true;
  for (std::size_t j = 1; j < seq.steps.size(); ++j) {
    const auto& p = seq.steps[j - 1];
    const auto& c = seq.steps[j];
    growth_ok = growth_ok && c.growth_U.bound(R) <= p.growth_U.bound(R) * 1.01 && c.growth_G.bound(R) <= p.growth_G.bound(R) * 1.01;
  }
  o << " growth envelope at R=" << fmt(R, 3) << ": U " << fmt(seq.steps.front().growth_U.bound(R), 4) << " -> "
    << fmt(seq.steps.back().growth_U.bound(R), 4) << ", G " << fmt(seq.steps.front().growth_G.bound(R), 4) << " -> "
    << fmt(seq.steps.back().growth_G.bound(R), 4);
  o.check(growth_ok, "growth non-increasing");
}

// 12. martingale property along the flow
void c12(Res r, Outcome& o) {
  const double T = 1.0;
  const auto eta = probe_eta(T, 64, 0.8);
  double worst = 0.0;
  for (const auto& U : {present_square(T, true), path_integral_solution(T)}) {
    const double u0 = U(0.25, WindowView::of(eta));
    for (const auto& p : martingale_check(U, {0.25, eta, 112, r(100000)}, {0.25, 0.4375, 0.625, 0.8125, 1.0})) {
      const double z = std::abs(p.mean.value - u0) / std::max(p.mean.std_error, 1e-12 * (1.0 + std::abs(u0)));
      worst = std::max(worst, z);
      o.check(z <= 3.0, U.name + " s=" + fmt(p.s));
    }
  }
  o << "max |mean U(s,W_s)-U(t,eta)|/stderr over 5 checkpoints=" << fmt(worst, 3);
}

struct Criterion {
  int id;
  const char* name;
  void (*fn)(Res, Outcome&);
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "quadratic variation", c1},      {2, "forward integral vs Ito", c2},
      {3, "Ito-formula residual", c3},     {4, "window chi-quadratic variation", c4},
      {5, "window Ito residual", c5},      {6, "Kolmogorov closed forms", c6},
      {7, "strict PDE residual", c7},      {8, "cylindrical oracle agreement", c8},
      {9, "BSDE linear driver", c9},       {10, "robust Clark-Ocone", c10},
      {11, "strong-viscosity pipeline", c11}, {12, "martingale along the flow", c12}};
  return all;
}

}  // namespace

std::vector<CriterionResult> run_acceptance_suite(Tier tier, std::ostream& out, const std::set<int>& only) {
  const Res res{tier == Tier::Full ? 2u : 1u};
  std::vector<CriterionResult> results;
  for (const auto& c : criteria()) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.fn(res, o);
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail << " ERROR(" << e.what() << ")";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CriterionResult cr{c.id, c.name, o.passed, o.detail.str(), secs};
    out << (cr.passed ? "PASS" : "FAIL") << " criterion " << std::setw(2) << cr.id << " [" << cr.name << "] "
        << cr.detail << " (" << std::fixed << std::setprecision(1) << secs << " s)" << std::defaultfloat << std::endl;
    results.push_back(std::move(cr));
  }
  return results;
}

}  // namespace pathreg
