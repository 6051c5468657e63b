// eprsim command line: simulate locality-enforced EPR-B trial logs, run
// the two rival analyses over them, drive the dichotomic-sequence lab,
// serve network roles, and verify referee disclosures.
//
// Exit codes: 0 success (and referee PASS), 1 runtime/protocol failure,
// 2 usage error, 3 referee FAIL verdict.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eprsim/analysis.hpp"
#include "eprsim/core.hpp"
#include "eprsim/io.hpp"
#include "eprsim/net.hpp"
#include "eprsim/protocol.hpp"
#include "eprsim/tautology.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitFailVerdict = 3;

using eprsim::Angle;
using eprsim::ExperimentConfig;

/// "0.785", "-0.3926991", or "22.5deg".
Angle parse_angle(const std::string& text) {
  std::string body = text;
  bool degrees = false;
  if (body.size() > 3 && body.substr(body.size() - 3) == "deg") {
    degrees = true;
    body = body.substr(0, body.size() - 3);
  }
  std::size_t used = 0;
  const double value = std::stod(body, &used);
  if (used != body.size()) {
    throw CLI::ValidationError("angle", "cannot parse angle '" + text + "'");
  }
  return degrees ? Angle::from_degrees(value) : Angle(value);
}

std::array<Angle, 2> parse_angle_pair(const std::string& text,
                                      const std::string& flag) {
  const std::size_t comma = text.find(',');
  if (comma == std::string::npos) {
    throw CLI::ValidationError(flag, "expected two comma-separated angles");
  }
  try {
    return {parse_angle(text.substr(0, comma)),
            parse_angle(text.substr(comma + 1))};
  } catch (const std::exception&) {
    throw CLI::ValidationError(flag, "cannot parse '" + text + "'");
  }
}

struct ConfigFlags {
  std::uint64_t trials = 100000;
  std::uint64_t seed = 42;
  std::string left_angles;
  std::string right_angles;
  std::string detector_rule = "strict_less";

  void attach(CLI::App& app) {
    app.add_option("--trials", trials, "number of trials T");
    app.add_option("--seed", seed, "master seed");
    app.add_option("--left-angles", left_angles,
                   "left settings for labels 1,2 (radians, or e.g. 22.5deg); "
                   "default 0,pi/4");
    app.add_option("--right-angles", right_angles,
                   "right settings for labels 1,2; default pi/8,-pi/8");
    app.add_option("--detector-rule", detector_rule,
                   "strict_less | less_or_equal")
        ->check(CLI::IsMember({"strict_less", "less_or_equal"}));
  }

  [[nodiscard]] ExperimentConfig build() const {
    ExperimentConfig config = ExperimentConfig::defaults(trials, seed);
    if (!left_angles.empty()) {
      config.left_angles = parse_angle_pair(left_angles, "--left-angles");
    }
    if (!right_angles.empty()) {
      config.right_angles = parse_angle_pair(right_angles, "--right-angles");
    }
    config.detector_rule = *eprsim::io::parse_rule(detector_rule);
    eprsim::validate_config(config);
    return config;
  }
};

void print_exposure_table(const eprsim::analysis::SidePair& sides) {
  for (const auto* side : {&sides.left, &sides.right}) {
    const char* name = side->side == eprsim::Side::Left ? "left" : "right";
    for (std::size_t label = 0; label < 2; ++label) {
      for (std::size_t axis = 0; axis < 2; ++axis) {
        const auto& cell = side->cells[label][axis];
        std::cout << "side=" << name << " label=" << label + 1
                  << " axis=" << (axis == 0 ? "0" : "pi/2")
                  << " exposures=" << cell.exposures
                  << " detections=" << cell.detections << '\n';
      }
    }
  }
}

int cmd_simulate(const ConfigFlags& flags, const std::string& out_path,
                 const std::string& disclose_a, const std::string& disclose_b) {
  const ExperimentConfig config = flags.build();
  const eprsim::protocol::ExperimentRun run =
      eprsim::protocol::run_experiment_full(config);

  eprsim::io::write_log_file(out_path, config, run.records);
  if (!disclose_a.empty()) {
    eprsim::io::write_disclosure_file(disclose_a, config, eprsim::Side::Left,
                                      run.disclosed_a);
  }
  if (!disclose_b.empty()) {
    eprsim::io::write_disclosure_file(disclose_b, config, eprsim::Side::Right,
                                      run.disclosed_b);
  }

  std::cout << "trials=" << config.trials << '\n'
            << "seed=" << config.master_seed << '\n'
            << "log=" << out_path << '\n'
            << "digest="
            << eprsim::io::detail::hex16(eprsim::io::config_digest(config))
            << '\n';
  print_exposure_table(eprsim::analysis::tally_sides(run.records));
  return kExitOk;
}

int cmd_analyze(const std::string& in_path, const std::string& mode_name,
                std::uint64_t stride, const std::string& curve_out) {
  const eprsim::io::ParsedLog parsed = eprsim::io::read_log_file(in_path);
  const auto mode = mode_name == "gill"
                        ? eprsim::analysis::AnalysisMode::Gill
                        : eprsim::analysis::AnalysisMode::Malus;

  eprsim::analysis::CorrelationReport report;
  if (curve_out.empty()) {
    report = eprsim::analysis::analyze(parsed.records, parsed.config, mode);
  } else {
    report = eprsim::analysis::running_report(parsed.records, parsed.config,
                                              mode, stride);
    eprsim::io::write_curve_file(curve_out, report.running_curve);
  }

  std::cout << "mode=" << mode_name << '\n'
            << "trials=" << parsed.records.size() << '\n';
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) {
      std::cout << "kappa_" << a + 1 << b + 1 << '='
                << eprsim::io::format_fixed(report.kappa[a][b], 6) << '\n';
    }
  }
  std::cout << "S=" << eprsim::io::format_fixed(report.contrast_s, 6) << '\n';
  if (!curve_out.empty()) {
    std::cout << "curve=" << curve_out << '\n'
              << "curve_points=" << report.running_curve.size() << '\n';
  }
  return kExitOk;
}

int cmd_tautology(const std::string& mode, std::uint64_t length,
                  std::uint64_t runs, std::uint64_t seed) {
  namespace taut = eprsim::tautology;
  eprsim::RandomStream stream(seed, eprsim::StreamRole::Tautology);

  if (mode == "quad") {
    double max_stat = 0.0;
    for (std::uint64_t r = 0; r < runs; ++r) {
      auto a = taut::DichotomicSeq::random(length, stream);
      auto ap = taut::DichotomicSeq::random(length, stream);
      auto b = taut::DichotomicSeq::random(length, stream);
      auto bp = taut::DichotomicSeq::random(length, stream);
      const taut::DichotomicQuad quad(std::move(a), std::move(ap),
                                      std::move(b), std::move(bp));
      max_stat = std::max(max_stat, taut::bell_statistic(quad));
    }
    std::cout << "mode=quad\nlength=" << length << "\nruns=" << runs
              << "\nmax_bell_statistic="
              << eprsim::io::format_fixed(max_stat, 6) << '\n'
              << "bound_respected=" << (max_stat <= 2.0 ? "yes" : "no")
              << '\n';
    return kExitOk;
  }

  std::uint64_t exceed = 0;
  double max_value = 0.0;
  for (std::uint64_t r = 0; r < runs; ++r) {
    const auto data = taut::FourRunData::random(length, stream);
    const taut::RearrangedStatistic stat = taut::rearranged_statistic(data);
    if (stat.value > 2.0) ++exceed;
    max_value = std::max(max_value, stat.value);
    std::cout << "run=" << r << " value="
              << eprsim::io::format_fixed(stat.value, 6) << " b_match="
              << eprsim::io::format_fixed(stat.b_match_fraction, 6) << '\n';
  }
  std::cout << "mode=rearrange\nlength=" << length << "\nruns=" << runs
            << "\nmax_value=" << eprsim::io::format_fixed(max_value, 6)
            << '\n'
            << "exceed_2_fraction="
            << eprsim::io::format_fixed(
                   runs == 0 ? 0.0
                             : static_cast<double>(exceed) /
                                   static_cast<double>(runs),
                   6)
            << '\n';
  return kExitOk;
}

int cmd_verify(const std::string& log_path, const std::string& disclose_a,
               const std::string& disclose_b) {
  const eprsim::io::ParsedLog parsed = eprsim::io::read_log_file(log_path);
  const auto a = eprsim::io::read_disclosure_file(disclose_a);
  const auto b = eprsim::io::read_disclosure_file(disclose_b);

  const std::uint64_t digest = eprsim::io::config_digest(parsed.config);
  if (a.digest != digest || b.digest != digest) {
    throw std::runtime_error(
        "disclosure digest does not match the log's config digest");
  }
  if (a.side != eprsim::Side::Left || b.side != eprsim::Side::Right) {
    throw std::runtime_error("disclosure sides are swapped or duplicated");
  }

  const eprsim::protocol::RefereeReport report =
      eprsim::protocol::referee_verify(a.labels, b.labels, parsed.records);
  const bool pass = report.verdict == eprsim::protocol::Verdict::Pass;
  std::cout << "trials_checked=" << report.trials_checked << '\n'
            << "mismatches=" << report.mismatches << '\n'
            << "verdict=" << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? kExitOk : kExitFailVerdict;
}

int cmd_net(const ConfigFlags& flags, const std::string& role_name,
            std::uint16_t listen_port,
            const std::vector<std::string>& peer_flags,
            const std::string& out_path, std::uint64_t timeout_ms) {
  const auto role = eprsim::net::parse_role(role_name);
  if (!role) {
    throw CLI::ValidationError("--role", "unknown role '" + role_name + "'");
  }

  eprsim::net::Endpoints endpoints;
  if (listen_port != 0) endpoints.listen_port = listen_port;
  for (const std::string& flag : peer_flags) {
    const std::size_t eq = flag.find('=');
    if (eq == std::string::npos) {
      throw CLI::ValidationError("--peer", "expected role=host:port");
    }
    const auto peer = eprsim::net::parse_role(flag.substr(0, eq));
    if (!peer) {
      throw CLI::ValidationError("--peer",
                                 "unknown role '" + flag.substr(0, eq) + "'");
    }
    endpoints.peers[*peer] = flag.substr(eq + 1);
  }
  // Environment fallback for peers not given as flags: EPRSIM_PEER_<ROLE>.
  for (const eprsim::net::NetRole peer :
       eprsim::net::outbound_peers(*role)) {
    if (endpoints.peers.find(peer) != endpoints.peers.end()) continue;
    std::string var = "EPRSIM_PEER_" +
                      std::string(eprsim::net::role_name(peer));
    for (auto& c : var) c = static_cast<char>(std::toupper(c));
    if (const char* value = std::getenv(var.c_str())) {
      endpoints.peers[peer] = value;
    }
  }

  eprsim::net::ServeOptions options;
  options.timeout = std::chrono::milliseconds(timeout_ms);
  options.collector_out = out_path;
  options.report_out = &std::cout;

  const ExperimentConfig config = flags.build();
  try {
    return eprsim::net::serve_role(*role, config, endpoints, options);
  } catch (const std::invalid_argument& error) {
    // Topology/endpoint misconfiguration is a usage error.
    std::cerr << "error: " << error.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"locality-enforced EPR-B simulation and analysis"};
  app.require_subcommand(1);

  // simulate ----------------------------------------------------------
  auto* simulate = app.add_subcommand(
      "simulate", "run the five-role trial loop and write a log");
  ConfigFlags sim_flags;
  sim_flags.attach(*simulate);
  std::string sim_out = "eprsim_log.txt";
  std::string sim_disclose_a;
  std::string sim_disclose_b;
  simulate->add_option("--out", sim_out, "log destination");
  simulate->add_option("--disclose-a", sim_disclose_a,
                       "write randomizer A's label disclosure file");
  simulate->add_option("--disclose-b", sim_disclose_b,
                       "write randomizer B's label disclosure file");

  // analyze -----------------------------------------------------------
  auto* analyze =
      app.add_subcommand("analyze", "compute correlations from a log");
  std::string an_in;
  std::string an_mode;
  std::uint64_t an_stride = 100;
  std::string an_curve;
  analyze->add_option("--in", an_in, "trial log path")->required();
  analyze->add_option("--mode", an_mode, "gill | malus")
      ->required()
      ->check(CLI::IsMember({"gill", "malus"}));
  analyze->add_option("--stride", an_stride,
                      "running-curve stride (with --curve-out)");
  analyze->add_option("--curve-out", an_curve, "write running-curve CSV");

  // tautology ---------------------------------------------------------
  auto* tautology = app.add_subcommand(
      "tautology", "dichotomic-sequence experiments");
  std::string taut_mode = "quad";
  std::uint64_t taut_length = 1000;
  std::uint64_t taut_runs = 10000;
  std::uint64_t taut_seed = 42;
  tautology->add_option("--mode", taut_mode, "quad | rearrange")
      ->check(CLI::IsMember({"quad", "rearrange"}));
  tautology->add_option("--length", taut_length, "sequence length N")
      ->check(CLI::PositiveNumber);
  tautology->add_option("--runs", taut_runs, "number of random draws")
      ->check(CLI::PositiveNumber);
  tautology->add_option("--seed", taut_seed, "master seed");

  // net ----------------------------------------------------------------
  auto* net = app.add_subcommand("net", "serve one role of the "
                                        "multi-process session");
  ConfigFlags net_flags;
  net_flags.attach(*net);
  std::string net_role;
  std::uint16_t net_listen = 0;
  std::vector<std::string> net_peers;
  std::string net_out;
  std::uint64_t net_timeout = 30000;
  net->add_option("--role", net_role,
                  "source | rand_a | rand_b | station_x | station_y | "
                  "collector | referee")
      ->required();
  net->add_option("--listen", net_listen, "listen port (inbound roles)");
  net->add_option("--peer", net_peers,
                  "outbound endpoint as role=host:port (repeatable; "
                  "EPRSIM_PEER_<ROLE> as fallback)");
  net->add_option("--out", net_out, "collector: log destination");
  net->add_option("--timeout-ms", net_timeout, "session timeout");

  // verify --------------------------------------------------------------
  auto* verify = app.add_subcommand(
      "verify", "referee check of disclosed labels against a log");
  std::string ver_log;
  std::string ver_a;
  std::string ver_b;
  verify->add_option("--log", ver_log, "trial log path")->required();
  verify->add_option("--disclose-a", ver_a, "randomizer A disclosure file")
      ->required();
  verify->add_option("--disclose-b", ver_b, "randomizer B disclosure file")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& error) {
    const int rc = app.exit(error);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (simulate->parsed()) {
      if (sim_flags.trials < 1) {
        std::cerr << "error: --trials must be >= 1\n";
        return kExitUsage;
      }
      return cmd_simulate(sim_flags, sim_out, sim_disclose_a, sim_disclose_b);
    }
    if (analyze->parsed()) {
      if (an_stride < 1) {
        std::cerr << "error: --stride must be >= 1\n";
        return kExitUsage;
      }
      return cmd_analyze(an_in, an_mode, an_stride, an_curve);
    }
    if (tautology->parsed()) {
      return cmd_tautology(taut_mode, taut_length, taut_runs, taut_seed);
    }
    if (net->parsed()) {
      return cmd_net(net_flags, net_role, net_listen, net_peers, net_out,
                     net_timeout);
    }
    if (verify->parsed()) {
      return cmd_verify(ver_log, ver_a, ver_b);
    }
  } catch (const CLI::ValidationError& error) {
    std::cerr << "error: " << error.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& error) {
    std::cerr << "error: " << error.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& error) {
    std::cerr << "error: " << error.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
