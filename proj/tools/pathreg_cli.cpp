#include <CLI11.hpp>
#include <iostream>

#include "pathreg/harness.hpp"

using namespace pathreg;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kNumerical = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> paths, steps;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value config file");
  sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--paths", c.paths, "number of Monte-Carlo paths");
  sub->add_option("--steps", c.steps, "grid steps on [0, T]");
  sub->add_option("--out", c.out, "output directory for CSV tables and run.json");
  sub->add_option("--set", c.sets, "override a config key, key=value (repeatable)");
}

ExperimentConfig resolve(const std::string& experiment, const Common& c) {
  ConfigMap m;
  if (!c.config.empty()) m = load_config_file(c.config);
  m["experiment"] = experiment;
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got \"" + s + "\"");
    m[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (c.seed) m["seed"] = std::to_string(*c.seed);
  if (c.paths) m["paths"] = std::to_string(*c.paths);
  if (c.steps) m["grid.n_steps"] = std::to_string(*c.steps);
  if (!c.out.empty()) m["out"] = c.out;
  return ExperimentConfig::from_map(m);
}

int run_experiment(const std::string& experiment, const Common& c) {
  const auto cfg = resolve(experiment, c);
  const auto rec = run(cfg);
  if (!cfg.out_dir.empty()) write_run(rec, cfg.out_dir);
  std::cout << to_json(rec).dump(2) << "\n";
  return rec.converged ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Path-dependent calculus, Kolmogorov and BSDE experiments"};
  app.set_version_flag("--version", kArtifactVersion);
  app.require_subcommand(1);

  std::map<std::string, Common> opts;
  const std::map<std::string, std::string> help{
      {"integrate", "forward integral of an integrand against a simulated process"},
      {"qv", "quadratic variation of a simulated process"},
      {"chi-qv", "chi-quadratic variation over a window for a diagonal measure"},
      {"ito-residual", "Ito formula residual for a scalar field"},
      {"window-ito", "Ito formula residual for a window functional"},
      {"solve", "Monte-Carlo solution of the path-dependent Kolmogorov equation"},
      {"residual", "strict-solution residual on a probe design"},
      {"cylindrical-oracle", "Monte-Carlo solution against the cylindrical Gaussian oracle"},
      {"viscosity", "strong-viscosity approximating sequence"},
      {"bsde", "regression BSDE solver with a driver"},
      {"clark-ocone", "robust pathwise representation across models"}};
  for (const auto& key : experiment_keys()) add_common(app.add_subcommand(key, help.at(key)), opts[key]);

  std::string tier = "quick";
  std::vector<int> only;
  auto* accept = app.add_subcommand("accept", "run the acceptance criteria");
  accept->add_option("--tier", tier, "quick or full");
  accept->add_option("--only", only, "criterion ids to run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (accept->parsed()) {
      const auto results = run_acceptance_suite(parse_tier(tier), std::cout, {only.begin(), only.end()});
      for (const auto& r : results)
        if (!r.passed) return kNumerical;
      return kOk;
    }
    for (const auto& key : experiment_keys())
      if (app.got_subcommand(key)) return run_experiment(key, opts[key]);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
