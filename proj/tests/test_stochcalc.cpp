#include <catch_amalgamated.hpp>

#include <cstdlib>

#include "pathreg/stochcalc.hpp"

using namespace pathreg;
using Catch::Approx;

namespace {

ProcessModel brownian_model(double x0 = 0.0) { return {BrownianMotion{}, x0}; }

std::vector<double> column(const PathEnsemble& e, std::size_t node) {
  std::vector<double> v(e.size());
  e.for_each([&](std::size_t i, const PathSample& s) { v[i] = s.X[node]; });
  return v;
}

double sample_variance(const std::vector<double>& x) {
  const double m = stats::mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

struct WorkerEnv {
  explicit WorkerEnv(const char* v) { setenv("PATHREG_WORKERS", v, 1); }
  ~WorkerEnv() { unsetenv("PATHREG_WORKERS"); }
};

}  // namespace

TEST_CASE("Brownian terminal variance matches T") {
  const double T = 1.5;
  const auto e = simulate(brownian_model(), {T, 8}, 42, 100000);
  const auto x = column(e, 8);
  CHECK(std::abs(sample_variance(x) - T) <= 3 * T * std::sqrt(2.0 / 1e5));
  CHECK(std::abs(stats::mean(x)) <= 3 * std::sqrt(T / 1e5));
}

TEST_CASE("Brownian increments have mean zero and variance equal to the step") {
  const auto e = simulate(brownian_model(), {1.0, 64}, 8, 200);
  std::vector<double> inc;
  for (std::size_t p = 0; p < 200; ++p) {
    const auto s = e.sample(p);
    for (std::size_t i = 0; i < 64; ++i) inc.push_back(s.W[i + 1] - s.W[i]);
  }
  const double dt = 1.0 / 64;
  CHECK(std::abs(stats::mean(inc)) <= 3 * std::sqrt(dt / static_cast<double>(inc.size())));
  CHECK(std::abs(sample_variance(inc) - dt) <= 3 * dt * std::sqrt(2.0 / static_cast<double>(inc.size())));
}

TEST_CASE("deterministic drift shifts the mean") {
  const double T = 2.0;
  ProcessModel m{BrownianPlusSmoothDrift{[](double t) { return t * t; }}, 0.0};
  const auto x = column(simulate(m, {T, 16}, 3, 50000), 16);
  CHECK(std::abs(stats::mean(x) - T * T) <= 3 * std::sqrt(T / 5e4));
}

TEST_CASE("path-dependent SDE with unit sigma reproduces Brownian motion pathwise") {
  ProcessModel sde{PathDependentSDE{unit_sigma()}, 0.3};
  const auto a = simulate(sde, {1.0, 128}, 77, 5);
  const auto b = simulate(brownian_model(0.3), {1.0, 128}, 77, 5);
  for (std::size_t p = 0; p < 5; ++p) {
    const auto sa = a.sample(p), sb = b.sample(p);
    for (std::size_t i = 0; i <= 128; ++i) CHECK(sa.X[i] == Approx(sb.X[i]).margin(1e-12));
  }
}

TEST_CASE("path-dependent SDE rejects non-finite sigma") {
  ProcessModel sde{PathDependentSDE{[](double, const WindowView&) { return std::nan(""); }}, 0.0};
  CHECK_THROWS_AS(simulate(sde, {1.0, 16}, 1, 2).sample(0), NumericalError);
}

TEST_CASE("ensembles are bit-identical across worker counts") {
  ProcessModel hm{HolderMix{0.75, 0.5}, 0.0};
  std::vector<GridPath> one, three;
  {
    WorkerEnv env("1");
    one = simulate(hm, {1.0, 256}, 9, 7).materialize();
  }
  {
    WorkerEnv env("3");
    three = simulate(hm, {1.0, 256}, 9, 7).materialize();
  }
  for (std::size_t p = 0; p < 7; ++p)
    for (std::size_t i = 0; i <= 256; ++i) REQUIRE(one[p][i] == three[p][i]);
  CHECK(simulate(hm, {1.0, 256}, 9, 7).sample(4).X[100] == one[4][100]);
}

TEST_CASE("HolderMix terminal variance adds the fractional component") {
  const double H = 0.75, w = 0.5, T = 1.0;
  ProcessModel hm{HolderMix{H, w}, 0.0};
  const auto x = column(simulate(hm, {T, 64}, 5, 20000), 64);
  const double expect = T + w * w * std::pow(T, 2 * H);
  CHECK(std::abs(sample_variance(x) - expect) <= 3 * expect * std::sqrt(2.0 / 2e4));
}

TEST_CASE("fractional increments have the fGn lag-one correlation") {
  const double H = 0.8;
  ProcessModel hm{HolderMix{H, 1.0}, 0.0};
  const auto e = simulate(hm, {1.0, 32}, 6, 4000);
  double s01 = 0, s00 = 0;
  for (std::size_t p = 0; p < 4000; ++p) {
    const auto s = e.sample(p);
    const double b0 = (s.X[11] - s.X[10]) - (s.W[11] - s.W[10]);
    const double b1 = (s.X[12] - s.X[11]) - (s.W[12] - s.W[11]);
    s01 += b0 * b1;
    s00 += b0 * b0;
  }
  const double rho = 0.5 * (std::pow(2.0, 2 * H) - 2.0);
  CHECK(s01 / s00 == Approx(rho).margin(0.05));
}

TEST_CASE("HolderMix has unit quadratic variation") {
  ProcessModel hm{HolderMix{0.75, 0.5}, 0.0};
  const auto e = simulate(hm, {1.0, 4096}, 12, 64);
  const auto qv = quadratic_variation_sp(e, EpsSchedule::for_grid(1.0 / 4096, 1.0));
  std::vector<double> end;
  for (const auto& b : qv.bracket) end.push_back(b[4096]);
  CHECK(stats::median(end) == Approx(1.0).margin(0.03));
}

TEST_CASE("forward integral of one telescopes to the increment") {
  const auto e = simulate(brownian_model(0.7), {1.0, 512}, 2, 6);
  const auto r = forward_integral_sp([](const PathSample& s) { return std::vector<double>(s.X.n_steps() + 1, 1.0); }, e,
                                     IntegralMode::Open, EpsSchedule::for_grid(1.0 / 512, 1.0));
  for (std::size_t p = 0; p < 6; ++p) {
    const auto s = e.sample(p);
    for (std::size_t i = 0; i <= 512; i += 64) CHECK(r.paths[p][i] == Approx(s.X[i] - s.X[0]).margin(1e-12));
  }
}

TEST_CASE("forward integral at the grid step equals the left-point Ito sum") {
  const std::size_t n = 1024;
  const auto e = simulate(brownian_model(), {1.0, n}, 31, 50);
  const auto Y = [](const PathSample& s) { return std::vector<double>(s.W.values().begin(), s.W.values().end()); };
  const auto r = forward_integral_sp(Y, e, IntegralMode::Proper, EpsSchedule::geometric(1.0 / n, 0));
  std::vector<double> err;
  for (std::size_t p = 0; p < 50; ++p) {
    const auto s = e.sample(p);
    double ito = 0;
    for (std::size_t i = 0; i < n; ++i) ito += s.W[i] * (s.W[i + 1] - s.W[i]);
    CHECK(r.proper[p] == Approx(ito).margin(1e-13));
    err.push_back(std::abs(r.proper[p] - 0.5 * (s.W[n] * s.W[n] - 1.0)));
  }
  CHECK(stats::median(err) < 0.03);
}

TEST_CASE("deterministic integrand reproduces the Wiener sum and Stieltjes kernel oracle") {
  const std::size_t n = 256;
  const auto e = simulate(brownian_model(), {1.0, n}, 4, 4);
  auto f = [](double t) { return std::cos(3 * t); };
  const auto Y = [&](const PathSample& s) {
    std::vector<double> y(s.X.n_steps() + 1);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(s.X.time(i));
    return y;
  };
  const auto r = forward_integral_sp(Y, e, IntegralMode::Proper, EpsSchedule::geometric(1.0 / n, 0));
  for (std::size_t p = 0; p < 4; ++p) {
    const auto s = e.sample(p);
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += f(s.X.time(i)) * (s.X[i + 1] - s.X[i]);
    CHECK(r.proper[p] == Approx(sum).margin(1e-12));
  }
  const auto bv = GridPath::sample(0, 1, n, [](double t) { return t < 0.5 ? t : 0.5 + 2 * (t - 0.5); });
  std::vector<double> y(n + 1), out(n + 1);
  for (std::size_t i = 0; i <= n; ++i) y[i] = f(bv.time(i));
  detail::cumulative_forward(y, bv.values(), 4, out);
  const double stieltjes = (std::sin(1.5) - 0.0) / 3 + 2 * (std::sin(3.0) - std::sin(1.5)) / 3;
  CHECK(out[n] == Approx(stieltjes).margin(0.02));
}

TEST_CASE("forward integral is linear in the integrand at every level") {
  const std::size_t n = 512;
  const auto e = simulate(ProcessModel{HolderMix{0.7, 0.4}, 0.0}, {1.0, n}, 13, 5);
  const auto s = EpsSchedule::for_grid(1.0 / n, 1.0);
  auto make = [](double a, double b) {
    return [a, b](const PathSample& p) {
      std::vector<double> y(p.X.n_steps() + 1);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * p.X[i] + b * std::sin(p.W[i]);
      return y;
    };
  };
  for (std::size_t lvl = 0; lvl < s.eps.size(); ++lvl) {
    EpsSchedule one;
    one.eps = {s.eps[lvl]};
    const auto r1 = forward_integral_sp(make(1, 0), e, IntegralMode::Proper, one);
    const auto r2 = forward_integral_sp(make(0, 1), e, IntegralMode::Proper, one);
    const auto rc = forward_integral_sp(make(2.5, -1.5), e, IntegralMode::Proper, one);
    for (std::size_t p = 0; p < 5; ++p) CHECK(rc.proper[p] == Approx(2.5 * r1.proper[p] - 1.5 * r2.proper[p]).margin(1e-12));
  }
}

TEST_CASE("improper extrapolation is exact on linear profiles and withholds non-Cauchy values") {
  TimeGrid g{2.0, 400};
  std::vector<double> a(401);
  for (std::size_t i = 0; i <= 400; ++i) a[i] = 3 - 1.5 * g.time(i);
  const auto [v, se] = extrapolate_to_end(a, g);
  CHECK(v == Approx(0.0).margin(1e-12));
  CHECK(se == Approx(0.0).margin(1e-10));

  const auto e = simulate(brownian_model(), g, 1, 40);
  const auto Y = [](const PathSample& s) { return std::vector<double>(s.W.values().begin(), s.W.values().end()); };
  ProbabilityOptions strict;
  strict.deltas = {1e-9};
  const auto r = forward_integral_sp(Y, e, IntegralMode::Improper, EpsSchedule::for_grid(g.step(), g.T), strict);
  CHECK(r.withheld == 40);
  ProbabilityOptions loose;
  loose.deltas = {10.0};
  const auto q = forward_integral_sp(Y, e, IntegralMode::Improper, EpsSchedule::for_grid(g.step(), g.T), loose);
  CHECK(q.withheld == 0);
  for (const auto& iv : q.improper) CHECK(iv.value.has_value());
}

TEST_CASE("Brownian quadratic variation median near t") {
  const std::size_t n = 4096;
  const auto e = simulate(brownian_model(), {1.0, n}, 100, 200);
  ProbabilityOptions o;
  o.deltas = {0.05};
  const auto qv = quadratic_variation_sp(e, EpsSchedule::for_grid(1.0 / n, 1.0), o);
  std::vector<double> end, half;
  for (const auto& b : qv.bracket) {
    end.push_back(b[n]);
    half.push_back(b[n / 2]);
  }
  CHECK(stats::median(end) == Approx(1.0).epsilon(0.02));
  CHECK(stats::median(half) == Approx(0.5).epsilon(0.03));
  REQUIRE(qv.convergence.ucp_fraction.size() == 4);
  CHECK(qv.convergence.ucp_converged);
}

TEST_CASE("covariation with a smooth deterministic factor vanishes") {
  const std::size_t n = 2048;
  const auto W = simulate(brownian_model(), {1.0, n}, 55, 20);
  const auto Wf = simulate(ProcessModel{BrownianPlusSmoothDrift{[](double t) { return std::sin(5 * t); }}, 0.0},
                           {1.0, n}, 55, 20);
  const auto s = EpsSchedule::for_grid(1.0 / n, 1.0);
  const auto a = covariation_sp(W, Wf, s), b = quadratic_variation_sp(W, s);
  for (std::size_t p = 0; p < 20; ++p) CHECK(std::abs(a.bracket[p][n] - b.bracket[p][n]) < 0.02);
}

TEST_CASE("independent Brownian ensembles have zero covariation") {
  const std::size_t n = 1024;
  const auto A = simulate(brownian_model(), {1.0, n}, 1, 2000), B = simulate(brownian_model(), {1.0, n}, 2, 2000);
  const auto c = covariation_sp(A, B, EpsSchedule::geometric(1.0 / n, 0));
  std::vector<double> end;
  for (const auto& b : c.bracket) end.push_back(b[n]);
  CHECK(std::abs(stats::mean(end)) <= 3 * stats::std_error(end));
  CHECK(stats::std_error(end) == Approx(std::sqrt(1.0 / n / 2000)).epsilon(0.1));
}

TEST_CASE("ensemble covariation obeys polarization with the deterministic bracket") {
  const std::size_t n = 256;
  const auto A = simulate(brownian_model(), {1.0, n}, 5, 3), B = simulate(ProcessModel{HolderMix{}, 0.0}, {1.0, n}, 6, 3);
  const auto s = EpsSchedule::for_grid(1.0 / n, 1.0);
  const auto c = covariation_sp(A, B, s);
  for (std::size_t p = 0; p < 3; ++p) {
    const auto a = A.sample(p).X, b = B.sample(p).X;
    std::vector<double> sp(n + 1), sm(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
      sp[i] = a[i] + b[i];
      sm[i] = a[i] - b[i];
    }
    const double pol = (quadratic_variation_det(GridPath(0, 1, sp), s).summary.value -
                        quadratic_variation_det(GridPath(0, 1, sm), s).summary.value) / 4;
    CHECK(c.bracket[p][n] == Approx(pol).margin(1e-12));
  }
}

TEST_CASE("covariation rejects mismatched ensembles") {
  const auto A = simulate(brownian_model(), {1.0, 64}, 1, 3), B = simulate(brownian_model(), {1.0, 128}, 1, 3);
  CHECK_THROWS_AS(covariation_sp(A, B, EpsSchedule::geometric(1.0 / 64, 0)), ValidationError);
}

TEST_CASE("Ito residuals of x^2 and t x vanish") {
  const std::size_t n = 2048;
  const auto e = simulate(brownian_model(0.4), {1.0, n}, 21, 20);
  ScalarField sq{[](double, double x) { return x * x; }, [](double, double) { return 0.0; },
                 [](double, double x) { return 2 * x; }, [](double, double) { return 2.0; }};
  const auto r = ito_residual(sq, e, EpsSchedule::geometric(1.0 / n, 0));
  for (double v : r.sup) CHECK(v < 1e-10);
  ScalarField tx{[](double t, double x) { return t * x; }, [](double, double x) { return x; },
                 [](double t, double) { return t; }, [](double, double) { return 0.0; }};
  const auto q = ito_residual(tx, e, EpsSchedule::for_grid(1.0 / n, 1.0));
  CHECK(stats::median(q.sup) < 0.02);
}

TEST_CASE("Ito residual of x^3 on HolderMix matches direct Ito-sum recomputation") {
  const std::size_t n = 2048;
  const auto e = simulate(ProcessModel{HolderMix{0.75, 0.5}, 0.0}, {1.0, n}, 8, 10);
  ScalarField cube{[](double, double x) { return x * x * x; }, [](double, double) { return 0.0; },
                   [](double, double x) { return 3 * x * x; }, [](double, double x) { return 6 * x; }};
  const auto r = ito_residual(cube, e, EpsSchedule::geometric(1.0 / n, 0));
  std::vector<double> sup;
  for (std::size_t p = 0; p < 10; ++p) {
    const auto x = e.sample(p).X;
    double ito = 0, qv = 0, worst = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[i + 1] - x[i];
      ito += 3 * x[i] * x[i] * d;
      qv += 6 * x[i] * d * d;
      const double res = x[i + 1] * x[i + 1] * x[i + 1] - x[0] * x[0] * x[0] - ito - 0.5 * qv;
      CHECK(r.residual[p][i + 1] == Approx(res).margin(1e-10));
      worst = std::max(worst, std::abs(res));
    }
    sup.push_back(worst);
  }
  CHECK(stats::median(sup) < 0.05);
}

TEST_CASE("chi quadratic variation worked values") {
  const auto id = [](double s) { return s; };
  const double t = 0.8;
  CHECK(chi_qv_window(DiagonalMeasure::atom(1, 1), t, id, 1) == Approx(t));
  DiagonalMeasure strip = DiagonalMeasure::atom(1, 0);
  strip.g4 = GridPath::constant(-1, 0, 16, 1.0);
  CHECK(chi_qv_window(strip, t, id, 1) == Approx(t * t / 2).margin(1e-12));
  DiagonalMeasure both = strip;
  both.lambda = 2;
  CHECK(chi_qv_window(both, 1.0, id, 1) == Approx(2.5).margin(1e-12));
  CHECK_THROWS_AS(chi_qv_window(both, 1.5, id, 1), ValidationError);
}

TEST_CASE("chi quadratic variation agrees with the time-ordered form and is linear in the measure") {
  auto Z = [](double s) { return 1 + 0.5 * std::sin(4 * s); };
  auto bracket = [](double t) { return t + 0.125 * (1 - std::cos(4 * t)); };
  DiagonalMeasure mu = DiagonalMeasure::atom(1.5, 0.7);
  mu.g4 = GridPath::sample(-1.5, 0, 60, [](double x) { return std::exp(x) - 0.3 * x; });
  for (double t : {0.3, 1.0, 1.5}) {
    CHECK(chi_qv_window(mu, t, bracket, 1.5, 32) == Approx(chi_qv_window_time_ordered(mu, t, Z, 1024, 512)).epsilon(1e-4));
  }
  DiagonalMeasure nu = DiagonalMeasure::atom(1.5, -1.1);
  nu.g4 = GridPath::sample(-1.5, 0, 60, [](double x) { return x * x; });
  const auto combo = linear_combination(2.0, mu, -0.5, nu);
  CHECK(chi_qv_window(combo, 1.2, bracket, 1.5) ==
        Approx(2.0 * chi_qv_window(mu, 1.2, bracket, 1.5) - 0.5 * chi_qv_window(nu, 1.2, bracket, 1.5)).margin(1e-12));
}

TEST_CASE("Monte-Carlo chi quadratic variation uses estimated brackets") {
  const std::size_t n = 2048;
  const auto e = simulate(brownian_model(), {1.0, n}, 19, 100);
  const auto qv = quadratic_variation_sp(e, EpsSchedule::for_grid(1.0 / n, 1.0));
  DiagonalMeasure mu = DiagonalMeasure::atom(1, 2);
  mu.g4 = GridPath::constant(-1, 0, 8, 1.0);
  const auto v = chi_qv_window(mu, 1.0, qv.bracket);
  CHECK(stats::median(v) == Approx(2.5).epsilon(0.03));
}

TEST_CASE("window Ito residual of the present square reduces to realized variance minus t") {
  const std::size_t n = 512;
  const double T = 1.0;
  const auto e = simulate(brownian_model(0.2), {T, n}, 3, 4);
  const auto r = window_ito_residual(present_square(T, true), e, unit_sigma(), EpsSchedule::geometric(T / n, 0));
  for (std::size_t p = 0; p < 4; ++p) {
    const auto x = e.sample(p).X;
    double rv = 0;
    for (std::size_t i = 0; i < n; ++i) {
      rv += (x[i + 1] - x[i]) * (x[i + 1] - x[i]);
      CHECK(r.residual[p][i + 1] == Approx(rv - x.time(i + 1)).margin(1e-10));
    }
  }
}

TEST_CASE("window Ito residual of the path integral vanishes") {
  const std::size_t n = 512;
  const auto e = simulate(brownian_model(0.5), {1.0, n}, 4, 4);
  const auto r = window_ito_residual(path_integral(), e, unit_sigma(), EpsSchedule::geometric(1.0 / n, 0));
  for (std::size_t p = 0; p < 4; ++p) {
    const auto x = e.sample(p).X;
    CHECK(r.residual[p][n] == Approx(0.5 * (x[n] - x[0]) / n).margin(1e-10));
    CHECK(r.sup[p] < 0.01);
  }
}

TEST_CASE("window Ito residual with a diagonal second derivative") {
  const std::size_t n = 256;
  const double T = 1.0;
  PathFunctional U;
  U.name = "diag";
  U.eval = [](double t, const WindowView&) { return t * t / 2; };
  U.time_derivative = [](double, const WindowView&) { return 0.0; };
  U.vertical = [](double, const WindowView&) { return 0.0; };
  U.perp = [](double, const WindowView& w) { return SignedMeasure1D::zero(-w.width(), 0.0); };
  U.second = [](double, const WindowView& w) {
    DiagonalMeasure mu = DiagonalMeasure::atom(w.width(), 0.0);
    mu.g4 = GridPath::constant(-w.width(), 0.0, 4, 2.0);
    return mu;
  };
  const auto e = simulate(brownian_model(), {T, n}, 1, 2);
  const auto r = window_ito_residual(U, e, unit_sigma(), EpsSchedule::geometric(T / n, 0));
  CHECK(r.sup[0] < 2.0 / n);
}

TEST_CASE("window Ito residual requires derivative suppliers") {
  const auto e = simulate(brownian_model(), {1.0, 16}, 1, 2);
  CHECK_THROWS_AS(window_ito_residual(sup_norm(), e, unit_sigma(), EpsSchedule::geometric(1.0 / 16, 0)),
                  ValidationError);
}

TEST_CASE("path summaries report quantile bands at both ends") {
  const auto paths = simulate(brownian_model(), {1.0, 1000}, 2, 50).materialize();
  const auto rows = summarize_paths(paths, 11);
  CHECK(rows.front().t == 0.0);
  CHECK(rows.back().t == 1.0);
  CHECK(rows.size() <= 12);
  for (const auto& r : rows) CHECK((r.q05 <= r.median && r.median <= r.q95));
}
