#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  if (const char* env = std::getenv("EPRSIM_BIN")) return env;
  return EPRSIM_CLI_PATH;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_cli(const std::string& args) {
  const fs::path out_file =
      fs::temp_directory_path() /
      ("eprsim_cli_out_" + std::to_string(::getpid()) + ".txt");
  const std::string command =
      cli_path() + " " + args + " > " + out_file.string() + " 2>&1";
  const int status = std::system(command.c_str());
  CommandResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::stringstream buffer;
  buffer << in.rdbuf();
  result.output = buffer.str();
  fs::remove(out_file);
  return result;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

double parsed_value(const std::string& output, const std::string& key) {
  const std::size_t pos = output.find(key + "=");
  REQUIRE(pos != std::string::npos);
  return std::stod(output.substr(pos + key.size() + 1));
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("eprsim_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("simulate writes a log and is byte-deterministic") {
  TempDir dir;
  const fs::path log1 = dir.path / "log1.txt";
  const fs::path log2 = dir.path / "log2.txt";
  const std::string flags =
      "simulate --trials 2000 --seed 42 --left-angles 0,0.7853982 "
      "--right-angles 0.3926991,-0.3926991";

  const CommandResult first = run_cli(flags + " --out " + log1.string());
  REQUIRE(first.exit_code == 0);
  REQUIRE(first.output.find("trials=2000") != std::string::npos);
  REQUIRE(first.output.find("side=left") != std::string::npos);

  const CommandResult second = run_cli(flags + " --out " + log2.string());
  REQUIRE(second.exit_code == 0);
  REQUIRE(slurp(log1) == slurp(log2));
  REQUIRE_FALSE(slurp(log1).empty());
}

TEST_CASE("simulate rejects zero trials with a usage exit code") {
  TempDir dir;
  const CommandResult result = run_cli(
      "simulate --trials 0 --out " + (dir.path / "never.txt").string());
  REQUIRE(result.exit_code == 2);
  REQUIRE_FALSE(fs::exists(dir.path / "never.txt"));
}

TEST_CASE("unknown flags are usage errors") {
  const CommandResult result = run_cli("simulate --no-such-flag 1");
  REQUIRE(result.exit_code == 2);
}

TEST_CASE("degree-suffixed angles are converted") {
  TempDir dir;
  const fs::path log = dir.path / "deg.txt";
  const CommandResult result = run_cli(
      "simulate --trials 10 --seed 1 --left-angles 0,45deg --out " +
      log.string());
  REQUIRE(result.exit_code == 0);
  const std::string text = slurp(log);
  REQUIRE(text.find("left2=0.7853981633974483") != std::string::npos);
}

TEST_CASE("analyze prints the rival statistics for the same log") {
  TempDir dir;
  const fs::path log = dir.path / "default.txt";
  REQUIRE(run_cli("simulate --trials 30000 --seed 42 --out " + log.string())
              .exit_code == 0);

  const CommandResult malus =
      run_cli("analyze --in " + log.string() + " --mode malus");
  REQUIRE(malus.exit_code == 0);
  REQUIRE(parsed_value(malus.output, "S") ==
          Catch::Approx(2.8284).margin(0.1));

  const CommandResult gill =
      run_cli("analyze --in " + log.string() + " --mode gill");
  REQUIRE(gill.exit_code == 0);
  REQUIRE(std::abs(parsed_value(gill.output, "S")) < 2.0);
  REQUIRE(parsed_value(gill.output, "S") ==
          Catch::Approx(-1.4142).margin(0.1));
}

TEST_CASE("analyze writes a curve with one row per stride multiple") {
  TempDir dir;
  const fs::path log = dir.path / "short.txt";
  const fs::path curve = dir.path / "curve.csv";
  REQUIRE(run_cli("simulate --trials 700 --seed 9 --out " + log.string())
              .exit_code == 0);
  const CommandResult result =
      run_cli("analyze --in " + log.string() +
              " --mode gill --stride 100 --curve-out " + curve.string());
  REQUIRE(result.exit_code == 0);
  const std::string text = slurp(curve);
  // Header plus seven rows (prefixes 100..700), fewer only if an early
  // prefix was undefined; at these sizes all pairs are populated.
  std::size_t lines = 0;
  for (const char c : text) lines += c == '\n';
  REQUIRE(lines == 8);
  REQUIRE(text.rfind("trial_index,S,", 0) == 0);
}

TEST_CASE("analyze reports zero-denominator pairs explicitly") {
  TempDir dir;
  const fs::path log = dir.path / "tiny.txt";
  REQUIRE(run_cli("simulate --trials 1 --seed 1 --out " + log.string())
              .exit_code == 0);
  const CommandResult result =
      run_cli("analyze --in " + log.string() + " --mode gill");
  REQUIRE(result.exit_code == 1);
  REQUIRE(result.output.find("no trials for setting pair") !=
          std::string::npos);
}

TEST_CASE("analyze rejects a tampered log") {
  TempDir dir;
  const fs::path log = dir.path / "tampered.txt";
  REQUIRE(run_cli("simulate --trials 50 --seed 3 --out " + log.string())
              .exit_code == 0);
  std::string text = slurp(log);
  const std::size_t pos = text.find("seed=3");
  text.replace(pos, 6, "seed=4");
  std::ofstream(log) << text;
  const CommandResult result =
      run_cli("analyze --in " + log.string() + " --mode gill");
  REQUIRE(result.exit_code == 1);
  REQUIRE(result.output.find("digest") != std::string::npos);
}

TEST_CASE("verify passes on genuine disclosures and fails on tampering") {
  TempDir dir;
  const fs::path log = dir.path / "log.txt";
  const fs::path disclose_a = dir.path / "a.txt";
  const fs::path disclose_b = dir.path / "b.txt";
  REQUIRE(run_cli("simulate --trials 200 --seed 5 --out " + log.string() +
                  " --disclose-a " + disclose_a.string() + " --disclose-b " +
                  disclose_b.string())
              .exit_code == 0);

  const std::string verify_flags = "verify --log " + log.string() +
                                   " --disclose-a " + disclose_a.string() +
                                   " --disclose-b " + disclose_b.string();
  const CommandResult pass = run_cli(verify_flags);
  REQUIRE(pass.exit_code == 0);
  REQUIRE(pass.output.find("verdict=PASS") != std::string::npos);

  // Flip one disclosed label.
  std::string text = slurp(disclose_a);
  const std::size_t pos = text.find("trial=9 label=");
  REQUIRE(pos != std::string::npos);
  text[pos + 14] = text[pos + 14] == '1' ? '2' : '1';
  std::ofstream(disclose_a) << text;

  const CommandResult fail = run_cli(verify_flags);
  REQUIRE(fail.exit_code == 3);
  REQUIRE(fail.output.find("verdict=FAIL") != std::string::npos);
  REQUIRE(fail.output.find("mismatches=1") != std::string::npos);
}

TEST_CASE("tautology quad mode reports a bound-respecting maximum") {
  const CommandResult result =
      run_cli("tautology --mode quad --length 200 --runs 500 --seed 11");
  REQUIRE(result.exit_code == 0);
  REQUIRE(parsed_value(result.output, "max_bell_statistic") <= 2.0);
  REQUIRE(result.output.find("bound_respected=yes") != std::string::npos);
}

TEST_CASE("tautology rearrange mode reports values with match fractions") {
  const CommandResult result =
      run_cli("tautology --mode rearrange --length 100 --runs 100 --seed 2");
  REQUIRE(result.exit_code == 0);
  REQUIRE(result.output.find("b_match=") != std::string::npos);
  REQUIRE(parsed_value(result.output, "exceed_2_fraction") > 0.0);
}

TEST_CASE("tautology degenerate single run still reports") {
  const CommandResult result =
      run_cli("tautology --mode rearrange --length 1 --runs 1 --seed 1");
  REQUIRE(result.exit_code == 0);
  REQUIRE(result.output.find("run=0 value=") != std::string::npos);
}

TEST_CASE("net subcommand refuses a topology-violating peer flag") {
  const CommandResult result = run_cli(
      "net --role station_x --listen 46111 --peer collector=127.0.0.1:46112 "
      "--peer station_y=127.0.0.1:46113 --trials 10");
  REQUIRE(result.exit_code == 2);
  REQUIRE(result.output.find("topology") != std::string::npos);
}
