#include "pathreg/harness.hpp"

namespace pathreg {

const std::vector<std::string>& experiment_keys() {
  static const std::vector<std::string> keys{"integrate", "qv",       "chi-qv",   "ito-residual",
                                             "window-ito", "solve",   "residual", "cylindrical-oracle",
                                             "viscosity",  "bsde",    "clark-ocone"};
  return keys;
}

ProcessModel make_model(const ExperimentConfig& c) {
  ProcessModel m;
  m.x0 = c.get_double("model.x0", 0.0);
  const std::string& key = c.model;
  if (key == "brownian") {
    m.kind = BrownianMotion{};
  } else if (key == "brownian_drift") {
    const std::string d = c.get("model.drift", "square");
    const double a = c.get_double("model.drift_scale", 1.0);
    std::function<double(double)> f;
    if (d == "square") f = [a](double t) { return a * t * t; };
    else if (d == "sin") f = [a](double t) { return a * std::sin(t); };
    else if (d == "linear") f = [a](double t) { return a * t; };
    else throw ValidationError("unknown drift key: " + d);
    m.kind = BrownianPlusSmoothDrift{f};
  } else if (key == "holder_mix") {
    m.kind = HolderMix{c.get_double("model.hurst", 0.75), c.get_double("model.weight", 0.5)};
  } else if (key == "path_sde") {
    const std::string s = c.get("model.sigma", "constant");
    const double level = c.get_double("model.sigma_level", 1.0);
    PathDependentSDE sde;
    if (s == "constant") {
      sde.sigma = [level](double, const WindowView&) { return level; };
    } else if (s == "lagged") {
      const double lag = c.get_double("model.sigma_lag", 0.1);
      sde.sigma = [level, lag](double, const WindowView& w) { return level * (1.0 + 0.5 * std::sin(w(-lag))); };
    } else {
      throw ValidationError("unknown sigma key: " + s);
    }
    m.kind = sde;
  } else {
    throw ValidationError("unknown model key: " + key);
  }
  return m;
}

GridPath make_eta(const ExperimentConfig& c) {
  const std::string key = c.get("eta", "smooth");
  const double level = c.get_double("eta.level", 0.8);
  const std::size_t n = c.get_size("eta.n_steps", c.n_steps);
  require(n >= 2, "eta.n_steps must be at least 2");
  const double T = c.T;
  if (key == "zero") return GridPath::constant(-T, 0.0, n, 0.0);
  if (key == "constant") return GridPath::constant(-T, 0.0, n, level);
  if (key == "linear") return GridPath::sample(-T, 0.0, n, [level](double x) { return level + x; });
  if (key == "smooth")
    return GridPath::sample(-T, 0.0, n, [level](double x) { return level + 0.6 * std::sin(2 * x) + 0.3 * x; });
  throw ValidationError("unknown eta key: " + key);
}

Driver make_driver(const ExperimentConfig& c) {
  const std::string key = c.get("driver", "zero");
  if (key == "zero") return zero_driver();
  if (key == "linear") return linear_driver(c.get_double("driver.alpha", 0.5));
  if (key == "deterministic") {
    const double a = c.get_double("driver.c", 1.0);
    return deterministic_driver([a](double) { return a; }, std::abs(a));
  }
  throw ValidationError("unknown driver key: " + key);
}

ScalarField make_field(const std::string& key) {
  if (key == "square")
    return {[](double, double x) { return x * x; }, [](double, double) { return 0.0; },
            [](double, double x) { return 2 * x; }, [](double, double) { return 2.0; }};
  if (key == "tx")
    return {[](double t, double x) { return t * x; }, [](double, double x) { return x; },
            [](double t, double) { return t; }, [](double, double) { return 0.0; }};
  if (key == "cube")
    return {[](double, double x) { return x * x * x; }, [](double, double) { return 0.0; },
            [](double, double x) { return 3 * x * x; }, [](double, double x) { return 6 * x; }};
  throw ValidationError("unknown field key: " + key);
}

std::optional<PathFunctional> closed_form_solution(const std::string& key, double T) {
  if (key == "present_square") return present_square(T, true);
  if (key == "path_integral") return path_integral_solution(T);
  if (key == "present_value") return present_value();
  return std::nullopt;
}

}  // namespace pathreg
