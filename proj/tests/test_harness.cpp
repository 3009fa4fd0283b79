#include <sys/wait.h>

#include <catch_amalgamated.hpp>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pathreg/harness.hpp"

using namespace pathreg;
using Catch::Approx;

namespace {

ExperimentConfig config(ConfigMap m) { return ExperimentConfig::from_map(m); }

std::string csv(const Table& t) {
  std::ostringstream os;
  t.write_csv(os);
  return os.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(PATHREG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pathreg_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config text: comments, whitespace and later keys override") {
  const auto m = parse_config_text("# header\nexperiment = qv\n  seed=4 # inline\n\nseed = 5\nmodel.x0 = -0.5\n");
  CHECK(m.size() == 3);
  CHECK(m.at("experiment") == "qv");
  CHECK(m.at("seed") == "5");
  CHECK(m.at("model.x0") == "-0.5");
  CHECK_THROWS_AS(parse_config_text("seed 4\n"), ValidationError);
  CHECK_THROWS_AS(parse_config_text(" = 4\n"), ValidationError);
}

TEST_CASE("config validation rejects missing or malformed mandatory keys") {
  CHECK_THROWS_AS(config({{"seed", "1"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "qv"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "nonsense"}, {"seed", "1"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "qv"}, {"seed", "-1"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "qv"}, {"seed", "1"}, {"grid.T", "abc"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "qv"}, {"seed", "1"}, {"grid.T", "0"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "qv"}, {"seed", "1"}, {"grid.n_steps", "1"}}), ValidationError);
  CHECK_THROWS_AS(config({{"experiment", "qv"}, {"seed", "1"}, {"paths", "2.5"}}), ValidationError);
  const auto c = config({{"experiment", "qv"}, {"seed", "9"}, {"grid.T", "2"}, {"paths", "7"}});
  CHECK(c.T == 2.0);
  CHECK(c.n_paths == 7);
  CHECK(c.n_steps == 256);
  CHECK(c.model == "brownian");
}

TEST_CASE("FNV-1a reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("config hash ignores output keys and default spelling but not numerical keys") {
  const auto a = config({{"experiment", "qv"}, {"seed", "1"}});
  const auto b = config({{"experiment", "qv"}, {"seed", "1"}, {"out", "/tmp/x"}, {"grid.T", "1.0"}});
  const auto c = config({{"experiment", "qv"}, {"seed", "2"}});
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  CHECK(a.hash().size() == 16);
  CHECK(a.canonical().find("out=") == std::string::npos);
}

TEST_CASE("tier names") {
  CHECK(parse_tier("quick") == Tier::Quick);
  CHECK(parse_tier("full") == Tier::Full);
  CHECK_THROWS_AS(parse_tier("medium"), ValidationError);
}

TEST_CASE("table rows are rendered with round-trip precision") {
  Table t{"x", {"a", "b", "c"}, {}};
  t.add({0.1, 3LL, std::string("brownian")});
  t.add({-2.0, -1LL, std::string("")});
  CHECK(csv(t) == "a,b,c\n0.10000000000000001,3,brownian\n-2,-1,\n");
  CHECK(std::stod(t.rows[0][0]) == 0.1);
  CHECK_THROWS_AS(t.add({1.0}), ValidationError);
}

TEST_CASE("registries resolve every documented key and reject unknown ones") {
  for (const std::string m : {"brownian", "brownian_drift", "holder_mix", "path_sde"}) {
    const auto c = config({{"experiment", "qv"}, {"seed", "1"}, {"model", m}});
    const auto X = simulate(make_model(c), {1.0, 64}, 1, 3).materialize();
    CHECK(X.size() == 3);
  }
  CHECK_THROWS_AS(make_model(config({{"experiment", "qv"}, {"seed", "1"}, {"model", "levy"}})), ValidationError);
  for (const std::string e : {"zero", "constant", "linear", "smooth"}) {
    const auto eta = make_eta(config({{"experiment", "solve"}, {"seed", "1"}, {"eta", e}, {"eta.n_steps", "16"}}));
    CHECK(eta.n_steps() == 16);
    CHECK(eta.t_end() == 0.0);
  }
  CHECK_THROWS_AS(make_eta(config({{"experiment", "solve"}, {"seed", "1"}, {"eta", "wiggly"}})), ValidationError);
  for (const std::string d : {"zero", "linear", "deterministic"})
    CHECK_NOTHROW(make_driver(config({{"experiment", "bsde"}, {"seed", "1"}, {"driver", d}})));
  CHECK_THROWS_AS(make_field("sqrt"), ValidationError);
  CHECK(make_field("cube").fxx(0.0, 2.0) == 12.0);
  CHECK(closed_form_solution("present_square", 1.0).has_value());
  CHECK_FALSE(closed_form_solution("running_max", 1.0).has_value());
}

TEST_CASE("runs are reproducible and independent of the worker count") {
  const auto c = config({{"experiment", "qv"}, {"seed", "5"}, {"paths", "64"}, {"grid.n_steps", "512"}});
  const auto a = run(c);
  setenv("PATHREG_WORKERS", "1", 1);
  const auto b = run(c);
  unsetenv("PATHREG_WORKERS");
  REQUIRE(a.tables.size() == b.tables.size());
  for (std::size_t i = 0; i < a.tables.size(); ++i) CHECK(csv(a.tables[i]) == csv(b.tables[i]));
  CHECK(a.config_hash == b.config_hash);
  CHECK(a.summary["median_qv_T"] == b.summary["median_qv_T"]);
}

TEST_CASE("qv experiment recovers unit quadratic variation of Brownian motion") {
  const auto r = run(config({{"experiment", "qv"}, {"seed", "3"}, {"paths", "200"}, {"grid.n_steps", "4096"}}));
  CHECK(r.summary["median_qv_T"].get<double>() == Approx(1.0).margin(0.03));
}

TEST_CASE("solve experiment agrees with the closed-form present-square solution") {
  const auto r = run(config({{"experiment", "solve"},
                             {"seed", "8"},
                             {"paths", "20000"},
                             {"eta.n_steps", "64"},
                             {"functional", "present_square"}}));
  const double eta0 = 0.8;
  CHECK(r.summary["closed_form"].get<double>() == Approx(eta0 * eta0 + 1.0));
  CHECK(r.summary["within_3_stderr"].get<bool>());
}

TEST_CASE("bsde experiment with a linear driver reports its closed form") {
  const auto r = run(config({{"experiment", "bsde"},
                             {"seed", "8"},
                             {"paths", "4000"},
                             {"eta.n_steps", "32"},
                             {"driver", "linear"},
                             {"driver.alpha", "0.5"}}));
  REQUIRE(r.tables.size() == 1);
  const auto& row = r.tables[0].rows[0];
  const double y = std::stod(row[3]), se = std::stod(row[4]), closed = std::stod(row[5]);
  CHECK(closed == Approx(std::exp(0.5) * (0.64 + 1.0)));
  CHECK(std::abs(y - closed) <= std::max(3 * se, 0.01 * closed));
  CHECK(r.converged);
}

TEST_CASE("write_run stores one CSV per table and a parseable run.json") {
  const auto dir = scratch("write");
  const auto c = config({{"experiment", "qv"}, {"seed", "2"}, {"paths", "8"}, {"grid.n_steps", "256"}});
  write_run(run(c), dir);
  CHECK(std::filesystem::exists(dir / "qv.csv"));
  std::ifstream in(dir / "run.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["config_hash"] == c.hash());
  CHECK(j["version"] == kArtifactVersion);
  CHECK(j["tables"][0]["file"] == "qv.csv");
  std::filesystem::remove_all(dir);
}

TEST_CASE("command-line exit codes") {
  const auto dir = scratch("cli");
  CHECK(cli("--version") == 0);
  CHECK(cli("") == 2);
  CHECK(cli("teleport --seed 1") == 2);
  CHECK(cli("qv --paths 4") == 2);
  CHECK(cli("qv --seed 1 --set model=levy") == 2);
  CHECK(cli("qv --seed 1 --set grid.T=-1") == 2);
  CHECK(cli("qv --seed 1 --set nokey") == 2);
  CHECK(cli("accept --tier medium") == 2);
  CHECK(cli("qv --seed 1 --paths 16 --steps 4096 --set probability.delta=0.05 --out " + dir.string()) == 0);
  CHECK(std::filesystem::exists(dir / "run.json"));
  CHECK(cli("qv --seed 1 --paths 16 --steps 256 --set probability.delta=0.0001") == 3);
  std::filesystem::remove_all(dir);
}
