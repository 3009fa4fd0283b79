#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pathreg/harness.hpp"

namespace pathreg {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void Table::add(std::initializer_list<Cell> cells) {
  require(cells.size() == columns.size(), "table " + name + ": row width differs from header");
  std::vector<std::string> row;
  for (const auto& c : cells) {
    if (const auto* d = std::get_if<double>(&c)) row.push_back(format_number(*d));
    else if (const auto* i = std::get_if<long long>(&c)) row.push_back(std::to_string(*i));
    else row.push_back(std::get<std::string>(c));
  }
  rows.push_back(std::move(row));
}

void Table::write_csv(std::ostream& os) const {
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << "\n";
  }
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& t : r.tables) tables.push_back({{"name", t.name}, {"file", t.name + ".csv"}, {"rows", t.rows.size()}});
  return {{"experiment", r.experiment}, {"config_hash", r.config_hash}, {"version", r.version},
          {"started", r.started},       {"finished", r.finished},       {"config", r.config},
          {"summary", r.summary},       {"tables", tables},             {"acceptance", r.acceptance},
          {"converged", r.converged}};
}

void write_run(const RunRecord& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& t : r.tables) {
    std::ofstream os(dir / (t.name + ".csv"));
    if (!os) throw std::runtime_error("cannot write " + (dir / (t.name + ".csv")).string());
    t.write_csv(os);
  }
  std::ofstream os(dir / "run.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "run.json").string());
  os << to_json(r).dump(2) << "\n";
}

namespace {

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

Table summary_table(const std::string& name, const std::vector<GridPath>& paths) {
  Table t{name, {"t", "quantile05", "median", "quantile95"}, {}};
  for (const auto& r : summarize_paths(paths)) t.add({r.t, r.q05, r.median, r.q95});
  return t;
}

EpsSchedule schedule_for(const ExperimentConfig& c, double dt, double span) {
  EpsSchedule s = EpsSchedule::for_grid(dt, span, false, c.get_double("schedule.tol", 1e-3));
  const std::size_t K = c.get_size("schedule.levels", s.eps.size() - 1);
  if (K + 1 != s.eps.size()) s = EpsSchedule::geometric(dt, K, s.tol_cauchy, false);
  return s;
}

ProbabilityOptions probability_for(const ExperimentConfig& c) {
  ProbabilityOptions o;
  o.scale = c.get_double("probability.scale", 1.0);
  o.max_fraction = c.get_double("probability.max_fraction", 0.05);
  if (c.params.count("probability.delta")) o.deltas = {c.get_double("probability.delta", 0.01)};
  return o;
}

TimeGrid grid_for(const ExperimentConfig& c) { return {c.T, c.n_steps}; }

FlowSpec flow_for(const ExperimentConfig& c, const GridPath& eta) {
  return {c.get_double("t", 0.0), eta, c.seed, c.n_paths};
}

PathFunctional functional_for(const ExperimentConfig& c) { return make_functional(c.functional, c.T); }

double median_of(const std::vector<double>& v) { return stats::median(v); }

void integrate(const ExperimentConfig& c, RunRecord& r) {
  const auto X = simulate(make_model(c), grid_for(c), c.seed, c.n_paths);
  const auto sched = schedule_for(c, X.grid().step(), c.T);
  const std::string integrand = c.get("integrand", "self");
  PathIntegrand Y;
  if (integrand == "self") Y = [](const PathSample& s) { return std::vector<double>(s.X.values().begin(), s.X.values().end()); };
  else if (integrand == "one") Y = [](const PathSample& s) { return std::vector<double>(s.X.n_steps() + 1, 1.0); };
  else if (integrand == "driving") Y = [](const PathSample& s) { return std::vector<double>(s.W.values().begin(), s.W.values().end()); };
  else throw ValidationError("unknown integrand key: " + integrand);
  const std::string mode_key = c.get("mode", "open");
  IntegralMode mode = IntegralMode::Open;
  if (mode_key == "improper") mode = IntegralMode::Improper;
  else if (mode_key == "proper") mode = IntegralMode::Proper;
  else if (mode_key != "open") throw ValidationError("unknown integral mode: " + mode_key);
  const auto res = forward_integral_sp(Y, X, mode, sched, probability_for(c));
  r.tables.push_back(summary_table("integral", res.paths));
  std::vector<double> gap;
  if (integrand == "self") {
    const auto paths = X.materialize();
    for (std::size_t i = 0; i < paths.size(); ++i) {
      double ito = 0.0;
      for (std::size_t k = 0; k < c.n_steps; ++k) ito += paths[i][k] * (paths[i][k + 1] - paths[i][k]);
      gap.push_back(std::abs(res.paths[i][c.n_steps] - ito));
    }
    r.summary["median_abs_vs_left_point_sum"] = median_of(gap);
  }
  std::vector<double> end;
  for (const auto& p : res.paths) end.push_back(p[c.n_steps]);
  r.summary["median_terminal"] = median_of(end);
  r.summary["withheld"] = res.withheld;
  r.summary["convergence"] = to_json(res.convergence);
  r.converged = res.convergence.converged;
}

void qv(const ExperimentConfig& c, RunRecord& r) {
  const auto X = simulate(make_model(c), grid_for(c), c.seed, c.n_paths);
  const auto res = quadratic_variation_sp(X, schedule_for(c, X.grid().step(), c.T), probability_for(c));
  r.tables.push_back(summary_table("qv", res.bracket));
  std::vector<double> end;
  for (const auto& b : res.bracket) end.push_back(b[c.n_steps]);
  r.summary["median_qv_T"] = median_of(end);
  r.summary["convergence"] = to_json(res.convergence);
  r.converged = res.convergence.ucp_converged;
}

void chi_qv(const ExperimentConfig& c, RunRecord& r) {
  DiagonalMeasure mu = DiagonalMeasure::atom(c.T, c.get_double("measure.lambda", 2.0));
  const double g4 = c.get_double("measure.g4", 1.0);
  if (g4 != 0.0) mu.g4 = GridPath::constant(-c.T, 0.0, c.n_steps, g4);
  const double t = c.get_double("t", c.T);
  const double analytic = chi_qv_window(mu, t, [](double s) { return s; }, c.T);
  const double ordered = chi_qv_window_time_ordered(mu, t, [](double) { return 1.0; });
  const auto X = simulate(make_model(c), grid_for(c), c.seed, c.n_paths);
  const auto q = quadratic_variation_sp(X, schedule_for(c, X.grid().step(), c.T), probability_for(c));
  const auto mc = chi_qv_window(mu, t, q.bracket);
  Table tab{"chi_qv", {"path", "value"}, {}};
  for (std::size_t i = 0; i < mc.size(); ++i) tab.add({static_cast<long long>(i), mc[i]});
  r.tables.push_back(std::move(tab));
  r.summary["analytic"] = analytic;
  r.summary["time_ordered"] = ordered;
  r.summary["monte_carlo_median"] = median_of(mc);
  r.summary["monte_carlo_mean"] = stats::mean(mc);
}

void ito(const ExperimentConfig& c, RunRecord& r) {
  const auto X = simulate(make_model(c), grid_for(c), c.seed, c.n_paths);
  const auto res = ito_residual(make_field(c.get("field", "square")), X, schedule_for(c, X.grid().step(), c.T),
                                probability_for(c));
  r.tables.push_back(summary_table("residual", res.residual));
  r.summary["median_sup_residual"] = median_of(res.sup);
  r.summary["convergence"] = to_json(res.convergence);
}

void window_ito(const ExperimentConfig& c, RunRecord& r) {
  const auto X = simulate(make_model(c), grid_for(c), c.seed, c.n_paths);
  const auto U = functional_for(c);
  const auto res = window_ito_residual(U, X, X.model().diffusion(), schedule_for(c, X.grid().step(), c.T));
  r.tables.push_back(summary_table("residual", res.residual));
  r.summary["median_sup_residual"] = median_of(res.sup);
}

void solve(const ExperimentConfig& c, RunRecord& r) {
  const auto eta = make_eta(c);
  const auto spec = flow_for(c, eta);
  const auto est = solve_linear_mc(functional_for(c), nullptr, spec);
  double closed = std::nan("");
  if (const auto U = closed_form_solution(c.functional, c.T)) closed = (*U)(spec.t, WindowView::of(eta));
  else if (c.functional.rfind("cylindrical:", 0) == 0)
    closed = cylindrical_gaussian_solution(parse_cylindrical(c.functional, c.T), spec.t, eta).value;
  Table t{"solution", {"t", "value", "std_error", "n_paths", "closed_form"}, {}};
  t.add({spec.t, est.value, est.std_error, static_cast<long long>(est.n_paths), closed});
  r.tables.push_back(std::move(t));
  r.summary["estimate"] = to_json(est);
  r.summary["closed_form"] = closed;
  if (!std::isnan(closed)) r.summary["within_3_stderr"] = std::abs(est.value - closed) <= 3 * est.std_error;
}

void residual(const ExperimentConfig& c, RunRecord& r) {
  const std::string sol_key = c.get("functional.solution", "");
  const auto G = functional_for(c);
  std::optional<PathFunctional> U;
  if (!sol_key.empty()) U = make_functional(sol_key, c.T);
  else U = closed_form_solution(c.functional, c.T);
  if (!U) throw ValidationError("residual: no solution functional for " + c.functional + "; set functional.solution");
  const auto design = make_probe_design(c.T, c.n_steps, c.get_size("probes", 10), c.seed);
  const auto rep = strict_residual(*U, G, nullptr, make_model(c).diffusion(), design);
  Table t{"residual", {"t", "L", "F", "residual", "terminal", "vertical_gap"}, {}};
  for (const auto& row : rep.rows) t.add({row.t, row.L, row.F, row.residual, row.terminal, row.vertical_gap});
  r.tables.push_back(std::move(t));
  r.summary["max_residual"] = rep.max_residual;
  r.summary["max_terminal"] = rep.max_terminal;
  r.summary["max_vertical_gap"] = rep.max_vertical_gap;
}

void cylindrical(const ExperimentConfig& c, RunRecord& r) {
  require(c.functional.rfind("cylindrical:", 0) == 0, "cylindrical-oracle: functional must be a cylindrical key");
  const auto G = parse_cylindrical(c.functional, c.T);
  const auto eta = make_eta(c);
  const auto spec = flow_for(c, eta);
  const auto oracle = cylindrical_gaussian_solution(G, spec.t, eta);
  const auto mc = solve_linear_mc(as_path_functional(G), nullptr, spec);
  const double se = std::hypot(mc.std_error, oracle.std_error);
  Table t{"oracle", {"t", "oracle", "oracle_std_error", "monte_carlo", "mc_std_error", "abs_diff"}, {}};
  t.add({spec.t, oracle.value, oracle.std_error, mc.value, mc.std_error, std::abs(mc.value - oracle.value)});
  r.tables.push_back(std::move(t));
  r.summary["oracle"] = to_json(oracle);
  r.summary["monte_carlo"] = to_json(mc);
  r.summary["within_3_stderr"] = std::abs(mc.value - oracle.value) <= 3 * se;
}

void viscosity(const ExperimentConfig& c, RunRecord& r) {
  ViscosityOptions o;
  o.n_terms.clear();
  for (std::size_t n = 1; n <= c.get_size("viscosity.n_max", 8); ++n) o.n_terms.push_back(n);
  o.width0 = c.get_double("viscosity.width0", o.width0);
  o.seed = c.seed;
  o.gauss.qmc_points = c.get_size("viscosity.qmc_points", 1u << 10);
  o.gauss.qmc_shifts = c.get_size("viscosity.qmc_shifts", 16);
  o.growth_design = c.get_size("viscosity.growth_design", o.growth_design);
  const auto eta = make_eta(c);
  const double t = c.get_double("t", 0.0);
  const auto seq = strong_viscosity_sequence(functional_for(c), t, eta, o);
  Table tab{"viscosity", {"n", "value", "stderr", "C", "m", "equicontinuity_max"}, {}};
  for (const auto& s : seq.steps)
    tab.add({static_cast<long long>(s.n), s.value.value, s.value.std_error, s.growth_U.C, s.growth_U.m,
             s.equicontinuity_max});
  r.tables.push_back(std::move(tab));
  r.summary["limit"] = seq.limit;
  r.summary["successive_gaps"] = seq.successive_gaps;
  r.summary["converged"] = seq.converged;
  r.converged = seq.converged;
}

void bsde(const ExperimentConfig& c, RunRecord& r) {
  const auto eta = make_eta(c);
  const auto spec = flow_for(c, eta);
  const auto G = functional_for(c);
  const auto F = make_driver(c);
  BsdeOptions o;
  o.n_picard = c.get_size("bsde.picard", 3);
  o.basis.degree = c.get_size("bsde.degree", 2);
  o.basis.fourier_terms = c.get_size("bsde.fourier_terms", 4);
  o.keep_paths = false;
  const auto sol = solve_bsde(G, F, spec, o);
  double closed = std::nan("");
  const double eta0 = eta[eta.n_steps()];
  const double tau = c.T - spec.t;
  if (c.functional == "present_square") {
    const double base = eta0 * eta0 + tau;
    if (F.name == "zero") closed = base;
    else if (F.name == "linear") closed = std::exp(c.get_double("driver.alpha", 0.5) * tau) * base;
    else if (F.name == "deterministic") closed = base + c.get_double("driver.c", 1.0) * tau;
  }
  Table t{"bsde", {"model", "n_paths", "n_steps", "Y_t", "stderr", "closed_form", "abs_err"}, {}};
  t.add({std::string("flow"), static_cast<long long>(spec.n_paths), static_cast<long long>(spec.flow_steps()),
         sol.y0.value, sol.y0.std_error, closed, std::abs(sol.y0.value - closed)});
  r.tables.push_back(std::move(t));
  r.summary["solution"] = to_json(sol);
  r.converged = sol.picard_contracted;
}

void clark_ocone(const ExperimentConfig& c, RunRecord& r) {
  std::vector<std::string> models;
  if (c.model == "all") models = {"brownian", "brownian_drift", "holder_mix"};
  else models = {c.model};
  const auto G = functional_for(c);
  const std::string sol_key = c.get("functional.solution", "");
  const auto u = sol_key.empty() ? closed_form_solution(c.functional, c.T) : std::optional(make_functional(sol_key, c.T));
  if (!u) throw ValidationError("clark-ocone: no solution functional for " + c.functional + "; set functional.solution");
  Table t{"clark_ocone", {"model", "n_paths", "n_steps", "median_error", "q95_error", "qv_median"}, {}};
  nlohmann::json per = nlohmann::json::array();
  for (const auto& m : models) {
    ExperimentConfig cm = c;
    cm.model = m;
    const auto X = simulate(make_model(cm), grid_for(c), c.seed, c.n_paths);
    const auto rep = robust_representation(G, make_driver(c), *u, X, schedule_for(c, X.grid().step(), c.T));
    t.add({m, static_cast<long long>(c.n_paths), static_cast<long long>(c.n_steps), rep.median_error, rep.q95_error,
           rep.qv_median});
    per.push_back(to_json(rep));
  }
  r.tables.push_back(std::move(t));
  r.summary["models"] = per;
}

}  // namespace

RunRecord run(const ExperimentConfig& c) {
  RunRecord r;
  r.experiment = c.experiment;
  r.config_hash = c.hash();
  r.config = to_json(c);
  r.started = now_iso();
  const std::string& e = c.experiment;
  if (e == "integrate") integrate(c, r);
  else if (e == "qv") qv(c, r);
  else if (e == "chi-qv") chi_qv(c, r);
  else if (e == "ito-residual") ito(c, r);
  else if (e == "window-ito") window_ito(c, r);
  else if (e == "solve") solve(c, r);
  else if (e == "residual") residual(c, r);
  else if (e == "cylindrical-oracle") cylindrical(c, r);
  else if (e == "viscosity") viscosity(c, r);
  else if (e == "bsde") bsde(c, r);
  else if (e == "clark-ocone") clark_ocone(c, r);
  else throw ValidationError("unknown experiment: " + e);
  r.finished = now_iso();
  return r;
}

}  // namespace pathreg
