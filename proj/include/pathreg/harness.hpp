#pragma once

#include <chrono>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "pathreg/bsde.hpp"

namespace pathreg {

inline constexpr const char* kArtifactVersion = "0.1.0";

// ---- configuration ----

using ConfigMap = std::map<std::string, std::string>;

// Flat "key = value" text; '#' starts a comment; later keys override earlier ones.
ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::filesystem::path& path);

struct ExperimentConfig {
  std::string experiment;
  std::uint64_t seed = 0;
  double T = 1.0;
  std::size_t n_steps = 256;
  std::size_t n_paths = 1000;
  std::string model = "brownian";
  std::string functional = "present_square";
  std::string out_dir;
  ConfigMap params;  // every resolved key, including the typed ones above

  static ExperimentConfig from_map(const ConfigMap& m);

  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;

  // Canonical "key=value" lines in key order; output settings excluded.
  std::string canonical() const;
  std::string hash() const;
};

std::uint64_t fnv1a64(const std::string& s);
nlohmann::json to_json(const ExperimentConfig& c);

// ---- registries ----

ProcessModel make_model(const ExperimentConfig& c);
GridPath make_eta(const ExperimentConfig& c);
Driver make_driver(const ExperimentConfig& c);
ScalarField make_field(const std::string& key);
std::optional<PathFunctional> closed_form_solution(const std::string& functional_key, double T);
const std::vector<std::string>& experiment_keys();

// ---- results ----

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  using Cell = std::variant<double, long long, std::string>;
  void add(std::initializer_list<Cell> cells);
  void write_csv(std::ostream& os) const;
};

std::string format_number(double v);

struct RunRecord {
  std::string experiment;
  std::string config_hash;
  std::string version = kArtifactVersion;
  std::string started, finished;
  nlohmann::json config;
  nlohmann::json summary = nlohmann::json::object();
  std::vector<Table> tables;
  std::map<std::string, bool> acceptance;
  bool converged = true;
};

nlohmann::json to_json(const RunRecord& r);

RunRecord run(const ExperimentConfig& config);

// Writes <table>.csv for every table and run.json into dir.
void write_run(const RunRecord& r, const std::filesystem::path& dir);

// ---- acceptance ----

enum class Tier { Quick, Full };

Tier parse_tier(const std::string& s);

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Runs the selected criteria (all when empty), printing one line per criterion to out.
std::vector<CriterionResult> run_acceptance_suite(Tier tier, std::ostream& out, const std::set<int>& only = {});

}  // namespace pathreg
