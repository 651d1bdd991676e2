#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "fluxinv/cli.hpp"
#include "fluxinv/util.hpp"

using namespace fluxinv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fluxinv_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fluxinv");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

// Twelve months keep the desk world small while the harmonic design stays full rank.
const char* kTinyManifest = R"({
  "schema_version": 1,
  "desk": {"months": 12},
  "experiments": {"iterations": 24, "warmup": 8},
  "output": {"sample_thin": 4, "export_inputs": true}
})";

/// Runs the tiny OSSE once per process and returns its directory.
const fs::path& osse_dir() {
  static const fs::path dir = [] {
    const auto d = scratch("osse");
    write_file(d / "manifest.json", kTinyManifest);
    REQUIRE(run_cli({"osse", "-m", (d / "manifest.json").string(), "--seed", "5", "-o", (d / "a").string()}) == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("run config rejects bad schema, unknown keys and missing files") {
  const auto dir = scratch("config");
  write_file(dir / "grid.csv", "x\n");
  CHECK_NOTHROW(cli::parse_run_config(R"({"schema_version":1,"seed":1,"output":"o","inputs":{"grid":"grid.csv"}})", dir));
  CHECK_THROWS_AS(cli::parse_run_config(R"({"schema_version":2,"seed":1,"output":"o"})", dir), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"seed":1,"output":"o"})", dir), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"schema_version":1,"output":"o"})", dir), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"schema_version":1,"seed":1,"output":"o","colour":"red"})", dir),
                  ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"schema_version":1,"seed":1,"output":"o","inputs":{"grid":"nope.csv"}})", dir),
                  ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"schema_version":1,"seed":"one","output":"o"})", dir), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"schema_version":1,"seed":1,"output":"o","gibbs":{"iterations":5,"warmup":9}})", dir),
                  ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("{not json", dir), ConfigError);

  const auto c = cli::parse_run_config(
      R"({"schema_version":1,"seed":9,"output":"o","inputs":{"grid":"grid.csv"},"harmonics":[2,1,0],"window":[3,4]})", dir);
  CHECK(c.seed == 9);
  CHECK(*c.grid == dir / "grid.csv");
  CHECK(c.output == dir / "o");
  CHECK(c.harmonics == std::array<int, 3>{2, 1, 0});
  CHECK(c.window->first_period == 3);
  // Key order does not change the hash; values do.
  const auto reordered = cli::parse_run_config(
      R"({"window":[3,4],"harmonics":[2,1,0],"output":"o","seed":9,"inputs":{"grid":"grid.csv"},"schema_version":1})", dir);
  CHECK(reordered.hash == c.hash);
  CHECK(cli::parse_run_config(R"({"schema_version":1,"seed":10,"output":"o"})", dir).hash !=
        cli::parse_run_config(R"({"schema_version":1,"seed":9,"output":"o"})", dir).hash);
}

TEST_CASE("osse manifest parsing") {
  const auto m = cli::parse_osse_manifest(kTinyManifest);
  CHECK(m.desk.months == 12);
  CHECK(m.osse.gibbs.iterations == 24);
  CHECK(m.osse.cases.size() == 4);
  CHECK(m.sample_output_thin == 4);
  CHECK_THROWS_AS(cli::parse_osse_manifest(R"({"schema_version":1,"experiments":{"cases":["sideways"]}})"), ConfigError);
  CHECK_THROWS_AS(cli::parse_osse_manifest(R"({"schema_version":1,"desk":{"moonths":3}})"), ConfigError);
}

TEST_CASE("usage errors exit with the usage code") {
  CHECK(run_cli({"osse", "--seed", "1"}) == cli::kExitUsage);
  CHECK(run_cli({"osse", "-m", "/nonexistent/manifest.json", "--seed", "1"}) == cli::kExitUsage);
  CHECK(run_cli({"invert"}) == cli::kExitUsage);
  CHECK(run_cli({"decompose", "-c", "/nonexistent/config.json"}) == cli::kExitUsage);
  CHECK(run_cli({"frobnicate"}) == cli::kExitUsage);
}

TEST_CASE("osse writes 16 experiment sections and per-experiment outputs and reruns byte-identically") {
  const auto& d = osse_dir();
  const auto report = read_file(d / "a" / "osse" / "report.txt");
  std::size_t sections = 0;
  for (auto p = report.find("[experiment "); p != std::string::npos; p = report.find("[experiment ", p + 1)) ++sections;
  CHECK(sections == 16);
  for (const char* f : {"observations.csv", "samples.csv", "scores.csv"})
    CHECK(fs::exists(d / "a" / "osse" / "negative-shift.fixed-rlt_no-sif" / f));
  const auto manifest = read_file(d / "a" / "osse" / "manifest.json");
  CHECK(manifest.find("\"seed\": 5") != std::string::npos);
  CHECK(manifest.find("\"config_hash\"") != std::string::npos);
  CHECK(manifest.find("\"version\": \"" + cli::version_string() + "\"") != std::string::npos);

  REQUIRE(run_cli({"osse", "-m", (d / "manifest.json").string(), "--seed", "5", "-o", (d / "b").string()}) == 0);
  CHECK(read_file(d / "b" / "osse" / "report.txt") == report);
  CHECK(read_file(d / "b" / "osse" / "bottom-up.inferred-rlt_sif" / "samples.csv") ==
        read_file(d / "a" / "osse" / "bottom-up.inferred-rlt_sif" / "samples.csv"));
  CHECK(read_file(d / "b" / "osse" / "manifest.json") == manifest);
}

TEST_CASE("pipeline stages on exported desk inputs") {
  const auto inputs = osse_dir() / "a" / "osse" / "inputs";
  const auto cfg_path = inputs / "config.json";
  REQUIRE(fs::exists(cfg_path));
  auto config = cli::load_run_config(cfg_path);
  config.output = scratch("pipeline");

  const auto first = cli::cmd_decompose(config);
  CHECK_FALSE(first.cache_hit);
  // 2R + 4 K_c R + Q R per component with R = 4, Q = 12 and K = (3, 3, 2).
  CHECK(first.dimension == (8 + 48 + 48) + (8 + 48 + 48) + (8 + 32 + 48));
  const auto second = cli::cmd_decompose(config);
  CHECK(second.cache_hit);
  CHECK(second.dimension == first.dimension);

  const auto link = cli::cmd_link(config);
  CHECK(fs::exists(config.output / "link" / "sif_link.csv"));
  CHECK_FALSE(link.entries().empty());
  const auto resp = cli::cmd_respond(config);
  CHECK(resp.rows > 500);

  config.gibbs = gibbs_budget(30, 10);
  config.stage_one.gibbs = gibbs_budget(20, 10);
  const auto inv = cli::cmd_invert(config);
  CHECK(inv.samples.draws() == 20);
  CHECK_FALSE(inv.ess_ok);  // floor 100 cannot be met by 20 draws
  const auto samples = read_file(config.output / "invert" / "alpha_samples.csv");
  (void)cli::cmd_invert(config);
  CHECK(read_file(config.output / "invert" / "alpha_samples.csv") == samples);
  const auto back = cli::read_alpha_samples(config.output / "invert" / "alpha_samples.csv", first.dimension);
  CHECK(back.alpha.isApprox(inv.samples.alpha, 0.0));

  const auto scores = cli::cmd_score(config);
  REQUIRE(scores.size() == 4);
  for (const auto& r : scores) CHECK(r.rmse >= 0.0);
  CHECK(fs::exists(config.output / "score" / "manifest.json"));

  // Deliberately short run through the binary entry point: ESS floor violated.
  const auto exported = read_file(cfg_path);
  const auto short_cfg = inputs / "short.json";
  auto text = exported;
  text.replace(text.find("\"output\": \"pipeline\""), std::string("\"output\": \"pipeline\"").size(),
               "\"output\": \"" + config.output.string() + "\", \"ess_floor\": 100, "
               "\"stage_one\": {\"iterations\": 20, \"warmup\": 10}");
  write_file(short_cfg, text);
  CHECK(run_cli({"invert", "-c", short_cfg.string()}) == cli::kExitEssFloor);

  // A corrupted cache header is reported, not silently refitted.
  const auto cache = config.output / "basis" / "basis.bin";
  std::string bytes = read_file(cache);
  bytes[0] ^= 0x5a;
  write_file(cache, bytes);
  CHECK_THROWS_AS(cli::cmd_decompose(config), CacheInvalidError);
  CHECK(run_cli({"decompose", "-c", short_cfg.string()}) == cli::kExitFailure);
}

TEST_CASE("alpha vector format round trip and validation") {
  const auto dir = scratch("alpha");
  Eigen::VectorXd a(3);
  a << 0.1, -2.5e-17, 1.0 / 3.0;
  write_file(dir / "a.csv", cli::format_alpha_vector(a));
  CHECK(cli::read_alpha_vector(dir / "a.csv", 3) == a);
  CHECK_THROWS_AS(cli::read_alpha_vector(dir / "a.csv", 4), ConfigError);
  CHECK_THROWS_AS(cli::read_alpha_vector(dir / "a.csv", 2), ConfigError);
}
