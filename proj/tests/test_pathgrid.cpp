#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "pathreg/pathgrid.hpp"

using namespace pathreg;
using Catch::Approx;

namespace {

GridPath random_path(std::mt19937_64& rng, double a, double b, std::size_t n) {
  std::normal_distribution<double> z;
  std::vector<double> v(n + 1);
  v[0] = z(rng);
  for (std::size_t i = 1; i <= n; ++i) v[i] = v[i - 1] + z(rng) * std::sqrt((b - a) / static_cast<double>(n));
  return GridPath(a, b, v);
}

DiagonalMeasure random_measure(std::mt19937_64& rng, double T, std::size_t n) {
  std::uniform_real_distribution<double> u(-2, 2);
  DiagonalMeasure mu;
  mu.T = T;
  mu.lambda = u(rng);
  auto dens = [&] { return GridPath::sample(-T, 0, n, [&](double) { return u(rng); }); };
  mu.g2 = dens();
  mu.g3 = dens();
  mu.g4 = dens();
  SquareDensity s;
  s.n = n;
  for (std::size_t k = 0; k < (n + 1) * (n + 1); ++k) s.values.push_back(u(rng));
  mu.g1 = s;
  return mu;
}

}  // namespace

TEST_CASE("clamped extension holds the end values outside the domain") {
  GridPath p(0, 1, {3, 5, 7});
  CHECK(extend_clamped(p, -5) == 3);
  CHECK(extend_clamped(p, 2) == 7);
  const auto id = GridPath::sample(0, 1, 10, [](double t) { return t; });
  CHECK(extend_clamped(id, 0.5) == Approx(0.5));
  CHECK(extend_clamped(id, 0.55) == Approx(0.55));
}

TEST_CASE("zero-left extension") {
  const auto one = GridPath::constant(-1, 0, 8, 1.0);
  CHECK(extend_zero_left(one, -2) == 0);
  CHECK(extend_zero_left(one, 1) == 1);
  const auto id = GridPath::sample(-1, 0, 8, [](double x) { return x; });
  CHECK(extend_zero_left(id, -0.5) == Approx(-0.5));
}

TEST_CASE("shift members of the left-shift family") {
  const auto eta = GridPath::sample(-1, 0, 100, [](double x) { return x; });
  CHECK(shift_member(eta, 0.0).values()[37] == eta[37]);
  const auto g = shift_member(eta, 0.1);
  for (std::size_t j = 0; j <= 100; ++j) CHECK(g[j] == Approx(std::max(eta.time(j) - 0.1, -1.0)).margin(1e-12));
  const auto c = GridPath::constant(-1, 0, 50, 2.5);
  for (double e : {0.0, 0.3, 1.0}) {
    const auto s = shift_member(c, e);
    for (double v : s.values()) CHECK(v == 2.5);
  }
  CHECK_THROWS_AS(shift_member(eta, -0.1), ValidationError);
  CHECK_THROWS_AS(shift_member(eta, 1.5), ValidationError);
}

TEST_CASE("shift semigroup up to one-step modulus of continuity") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 0.5);
  for (int rep = 0; rep < 20; ++rep) {
    const auto eta = random_path(rng, -2, 0, 400);
    const double e1 = u(rng), e2 = u(rng);
    const auto lhs = shift_member(shift_member(eta, e1), e2);
    const auto rhs = shift_member(eta, e1 + e2);
    double modulus = 0;
    for (std::size_t i = 0; i < eta.n_steps(); ++i) modulus = std::max(modulus, std::abs(eta[i + 1] - eta[i]));
    for (std::size_t j = 0; j <= eta.n_steps(); ++j) CHECK(std::abs(lhs[j] - rhs[j]) <= modulus + 1e-12);
  }
}

TEST_CASE("shift on grid multiples is an exact index shift") {
  std::mt19937_64 rng(3);
  const auto eta = random_path(rng, -1, 0, 64);
  const auto a = shift_member(shift_member(eta, 3.0 / 64), 5.0 / 64);
  const auto b = shift_member(eta, 8.0 / 64);
  for (std::size_t j = 0; j <= 64; ++j) CHECK(a[j] == b[j]);
}

TEST_CASE("window lookup agrees with clamped extension at every grid time") {
  std::mt19937_64 rng(11);
  const auto p = random_path(rng, 0, 1, 64);
  for (std::size_t it = 0; it <= 64; it += 7) {
    const double t = p.time(it);
    WindowView w(p.values(), 0, p.step(), t, 0.5);
    for (std::size_t j = 0; j <= w.n_steps(); ++j) {
      const double x = w.node_x(j);
      CHECK(w.node(j) == Approx(extend_clamped(p, t + x)).margin(1e-14));
      CHECK(w(x) == Approx(extend_clamped(p, t + x)).margin(1e-14));
    }
    CHECK(w(0.0) == extend_clamped(p, t));
  }
}

TEST_CASE("window translation invariance") {
  std::mt19937_64 rng(12);
  const auto p = random_path(rng, 0, 2, 128);
  const double t = 1.0, d = 0.25;
  WindowView a(p.values(), 0, p.step(), t, 1.0), b(p.values(), 0, p.step(), t + d, 1.0);
  for (double x = -0.75; x <= 0.0; x += 1.0 / 64) CHECK(a(x) == Approx(b(x - d)).margin(1e-14));
}

TEST_CASE("jump at zero is carried separately from the base path") {
  const auto eta = GridPath::sample(-1, 0, 10, [](double x) { return 1 + x; });
  const auto w = WindowView::of(eta, 0.5);
  CHECK(w.present() == Approx(1.5));
  CHECK(w(-0.5) == Approx(0.5));
  const auto m = w.materialize();
  CHECK(m[10] == 1.0);
  CHECK(w.with_jump(0).present() == 1.0);
}

TEST_CASE("apply_diag_measure worked values") {
  auto h_any = [](double x, double y) { return 3 + x * y + std::sin(x - y); };
  CHECK(apply_diag_measure(DiagonalMeasure::atom(1, 1), h_any) == Approx(h_any(0, 0)));

  DiagonalMeasure strip = DiagonalMeasure::atom(1, 0);
  strip.g4 = GridPath::constant(-1, 0, 32, 1.0);
  CHECK(apply_diag_measure(strip, [](double, double) { return 1.0; }) == Approx(1.0));

  DiagonalMeasure m2 = DiagonalMeasure::atom(1, 0);
  m2.g2 = GridPath::constant(-1, 0, 32, 1.0);
  CHECK(apply_diag_measure(m2, [](double x, double) { return x; }) == Approx(-0.5));
}

TEST_CASE("apply_diag_measure is linear in the measure") {
  std::mt19937_64 rng(5);
  auto h = [](double x, double y) { return std::cos(2 * x) + x * y - y; };
  for (int rep = 0; rep < 10; ++rep) {
    const auto m1 = random_measure(rng, 1.5, 12), m2 = random_measure(rng, 1.5, 12);
    const double a = 0.7 * rep - 2, b = 1.3 - 0.2 * rep;
    const double lhs = apply_diag_measure(linear_combination(a, m1, b, m2), h);
    const double rhs = a * apply_diag_measure(m1, h) + b * apply_diag_measure(m2, h);
    CHECK(lhs == Approx(rhs).epsilon(1e-12).margin(1e-12));
  }
}

TEST_CASE("apply_diag_measure rejects non-finite kernels") {
  CHECK_THROWS_AS(apply_diag_measure(DiagonalMeasure::atom(1, 1), [](double, double) { return std::nan(""); }),
                  NumericalError);
}

TEST_CASE("signed measures validate their support") {
  SignedMeasure1D mu{-1, 0, {{0.5, 1.0}}, std::nullopt};
  CHECK_THROWS_AS(mu.validate(), ValidationError);
  SignedMeasure1D ok{-1, 0, {{-0.5, -2.0}}, GridPath::constant(-1, 0, 4, 1.0)};
  ok.validate();
  CHECK(ok.total_variation() == Approx(3.0));
  CHECK(ok.restricted_left(-0.25).atoms.empty());
}

TEST_CASE("path csv round trip and header check") {
  std::mt19937_64 rng(1);
  const auto p = random_path(rng, -1, 0, 20);
  std::stringstream ss;
  write_path_csv(ss, p);
  const auto q = read_path_csv(ss);
  REQUIRE(q.same_grid(p));
  for (std::size_t i = 0; i <= 20; ++i) CHECK(q[i] == p[i]);
  std::stringstream bad("time,value\n0,1\n1,2\n");
  CHECK_THROWS_AS(read_path_csv(bad), ValidationError);
}

TEST_CASE("measure json round trip") {
  std::mt19937_64 rng(2);
  auto mu = random_measure(rng, 1.0, 4);
  mu.g3.reset();
  const auto j = measure_to_json(mu);
  CHECK(j["g3"].is_null());
  const auto back = measure_from_json(nlohmann::json::parse(j.dump()));
  auto h = [](double x, double y) { return 1 + x - 2 * y; };
  CHECK(apply_diag_measure(back, h) == Approx(apply_diag_measure(mu, h)).epsilon(1e-14));
}

TEST_CASE("path class tags") {
  CHECK(admits_qv_diagnostic(PathClass::FiniteQV));
  CHECK_FALSE(admits_qv_diagnostic(PathClass::AllContinuous));
}
