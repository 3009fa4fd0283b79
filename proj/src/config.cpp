#include <fstream>
#include <sstream>

#include "pathreg/harness.hpp"

namespace pathreg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || trim(v.substr(pos)) != "") throw ValidationError("config: " + key + " must be a number, got \"" + v + "\"");
  return d;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long u = 0;
  try {
    if (!v.empty() && v[0] != '-') u = std::stoull(v, &pos, 0);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size())
    throw ValidationError("config: " + key + " must be a non-negative integer, got \"" + v + "\"");
  return u;
}

// Keys that do not influence numerical results.
bool output_key(const std::string& k) { return k == "out" || k == "tier"; }

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap m;
  std::istringstream is(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError("config line " + std::to_string(no) + ": empty key");
    m[key] = trim(line.substr(eq + 1));
  }
  return m;
}

ConfigMap load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

ExperimentConfig ExperimentConfig::from_map(const ConfigMap& m) {
  ExperimentConfig c;
  c.params = m;
  auto it = m.find("experiment");
  if (it == m.end() || it->second.empty()) throw ValidationError("config: experiment key missing");
  c.experiment = it->second;
  const auto& keys = experiment_keys();
  if (std::find(keys.begin(), keys.end(), c.experiment) == keys.end())
    throw ValidationError("config: unknown experiment \"" + c.experiment + "\"");
  it = m.find("seed");
  if (it == m.end()) throw ValidationError("config: seed is mandatory");
  c.seed = parse_unsigned("seed", it->second);
  c.T = c.get_double("grid.T", c.T);
  c.n_steps = c.get_size("grid.n_steps", c.n_steps);
  c.n_paths = c.get_size("paths", c.n_paths);
  c.model = c.get("model", c.model);
  c.functional = c.get("functional", c.functional);
  c.out_dir = c.get("out", "");
  require(c.T > 0.0, "config: grid.T must be positive");
  require(c.n_steps >= 2, "config: grid.n_steps must be at least 2");
  require(c.n_paths >= 1, "config: paths must be positive");
  c.params["seed"] = std::to_string(c.seed);
  c.params["grid.T"] = format_number(c.T);
  c.params["grid.n_steps"] = std::to_string(c.n_steps);
  c.params["paths"] = std::to_string(c.n_paths);
  c.params["model"] = c.model;
  c.params["functional"] = c.functional;
  return c;
}

std::string ExperimentConfig::get(const std::string& key, const std::string& fallback) const {
  const auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

double ExperimentConfig::get_double(const std::string& key, double fallback) const {
  const auto it = params.find(key);
  return it == params.end() ? fallback : parse_double(key, it->second);
}

std::size_t ExperimentConfig::get_size(const std::string& key, std::size_t fallback) const {
  const auto it = params.find(key);
  return it == params.end() ? fallback : static_cast<std::size_t>(parse_unsigned(key, it->second));
}

std::string ExperimentConfig::canonical() const {
  std::string s;
  for (const auto& [k, v] : params)
    if (!output_key(k)) s += k + "=" + v + "\n";
  return s;
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : c.params) j[k] = v;
  return j;
}

}  // namespace pathreg
