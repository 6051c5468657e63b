#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <string>
#include <vector>

#include "eprsim/analysis.hpp"
#include "eprsim/core.hpp"
#include "eprsim/io.hpp"
#include "eprsim/protocol.hpp"

using namespace eprsim;
using namespace eprsim::io;

namespace {

std::string serialize(const ExperimentConfig& config,
                      const std::vector<TrialRecord>& records) {
  std::ostringstream out;
  write_log(out, config, records);
  return out.str();
}

ParsedLog parse(const std::string& text) {
  std::istringstream in(text);
  return read_log(in);
}

std::size_t count_lines(const std::string& text) {
  std::size_t lines = 0;
  for (const char c : text) lines += c == '\n';
  return lines;
}

}  // namespace

TEST_CASE("empty log writes the header only") {
  const ExperimentConfig config = ExperimentConfig::defaults(5, 1);
  const std::string text = serialize(config, {});
  REQUIRE(count_lines(text) == 1);
  REQUIRE(text.rfind("eprsim-log v1 digest=", 0) == 0);
}

TEST_CASE("a single record takes exactly two lines") {
  const ExperimentConfig config = ExperimentConfig::defaults(1, 1);
  const std::vector<TrialRecord> records = {
      TrialRecord{0, SourceMode::HV, SettingLabel::Two, SettingLabel::One,
                  true, false}};
  const std::string text = serialize(config, records);
  REQUIRE(count_lines(text) == 2);
  REQUIRE(text.find("trial=0 mode=HV a=2 b=1 x=1 y=0\n") != std::string::npos);
}

TEST_CASE("round trip of a simulated log is fieldwise exact") {
  const ExperimentConfig config = ExperimentConfig::defaults(1000, 17);
  const auto records = protocol::run_experiment(config);
  const ParsedLog parsed = parse(serialize(config, records));
  REQUIRE(parsed.records == records);
  REQUIRE(parsed.config.trials == config.trials);
  REQUIRE(parsed.config.master_seed == config.master_seed);
  REQUIRE(parsed.config.detector_rule == config.detector_rule);
  for (int i = 0; i < 2; ++i) {
    REQUIRE(parsed.config.left_angles[i] == config.left_angles[i]);
    REQUIRE(parsed.config.right_angles[i] == config.right_angles[i]);
  }
}

TEST_CASE("re-serializing a parsed log is byte-identical") {
  // Angles with no short decimal form exercise the canonical formatting.
  ExperimentConfig config = ExperimentConfig::defaults(200, 99);
  config.left_angles = {Angle(0.1234567890123456), Angle(kPi / 3.0)};
  config.right_angles = {Angle(-kPi / 7.0), Angle(1e-3)};
  config.detector_rule = DetectorRule::LessOrEqual;
  const auto records = protocol::run_experiment(config);
  const std::string first = serialize(config, records);
  const ParsedLog parsed = parse(first);
  const std::string second = serialize(parsed.config, parsed.records);
  REQUIRE(first == second);
}

TEST_CASE("round trip property over random configs and logs") {
  RandomStream stream(23, StreamRole::Tautology);
  for (int i = 0; i < 20; ++i) {
    ExperimentConfig config;
    config.trials = 1 + stream.next_u64() % 50;
    config.master_seed = stream.next_u64();
    config.detector_rule = stream.next_coin() ? DetectorRule::StrictLess
                                              : DetectorRule::LessOrEqual;
    config.left_angles = {Angle(stream.next_uniform() * 4.0 - 2.0),
                          Angle(stream.next_uniform() * 4.0 - 2.0)};
    config.right_angles = {Angle(stream.next_uniform() * 4.0 - 2.0),
                           Angle(stream.next_uniform() * 4.0 - 2.0)};
    std::vector<TrialRecord> records;
    for (std::uint64_t n = 0; n < config.trials; ++n) {
      records.push_back(TrialRecord{
          n, stream.next_coin() ? SourceMode::VH : SourceMode::HV,
          stream.next_coin() ? SettingLabel::One : SettingLabel::Two,
          stream.next_coin() ? SettingLabel::One : SettingLabel::Two,
          stream.next_coin(), stream.next_coin()});
    }
    const std::string text = serialize(config, records);
    const ParsedLog parsed = parse(text);
    REQUIRE(parsed.records == records);
    REQUIRE(serialize(parsed.config, parsed.records) == text);
  }
}

TEST_CASE("domain errors name the offending line") {
  const ExperimentConfig config = ExperimentConfig::defaults(2, 1);
  const auto records = protocol::run_experiment(config);
  std::string text = serialize(config, records);

  SECTION("x outside {0,1}") {
    const std::size_t pos = text.find("x=");
    text[pos + 2] = '2';
    try {
      parse(text);
      FAIL("expected ParseError");
    } catch (const ParseError& error) {
      REQUIRE(error.line() == 2);
      REQUIRE(std::string(error.what()).find("line 2") != std::string::npos);
    }
  }

  SECTION("truncated final line returns nothing") {
    text.resize(text.size() - 5);  // chop inside the last record
    REQUIRE_THROWS_AS(parse(text), ParseError);
  }

  SECTION("unknown version is a distinct error") {
    text.replace(text.find(" v1 "), 4, " v9 ");
    try {
      parse(text);
      FAIL("expected ParseError");
    } catch (const ParseError& error) {
      REQUIRE(std::string(error.what()).find("version") != std::string::npos);
    }
  }

  SECTION("non-monotone trial index") {
    // Duplicate the first record line at the end.
    const std::size_t start = text.find('\n') + 1;
    const std::size_t end = text.find('\n', start) + 1;
    text += text.substr(start, end - start);
    try {
      parse(text);
      FAIL("expected ParseError");
    } catch (const ParseError& error) {
      REQUIRE(std::string(error.what()).find("strictly increasing") !=
              std::string::npos);
    }
  }

  SECTION("digest tamper is rejected") {
    const std::size_t pos = text.find("seed=");
    text[pos + 5] = text[pos + 5] == '1' ? '2' : '1';
    try {
      parse(text);
      FAIL("expected ParseError");
    } catch (const ParseError& error) {
      REQUIRE(std::string(error.what()).find("digest") != std::string::npos);
    }
  }

  SECTION("not a log file") {
    REQUIRE_THROWS_AS(parse("something else entirely\n"), ParseError);
  }
}

TEST_CASE("curve files use the fixed column set and fixed decimals") {
  std::vector<analysis::CurvePoint> curve;
  for (int i = 1; i <= 7; ++i) {
    analysis::CurvePoint point;
    point.trial_index = static_cast<std::uint64_t>(100 * i);
    point.s = 2.8284271;
    point.kappa = {{{0.7071067, 0.7071067}, {0.7071067, -0.7071067}}};
    curve.push_back(point);
  }
  std::ostringstream out;
  write_curve(out, curve);
  const std::string text = out.str();
  REQUIRE(count_lines(text) == 8);  // header + 7 rows
  REQUIRE(text.rfind("trial_index,S,kappa_11,kappa_12,kappa_21,kappa_22\n",
                     0) == 0);
  REQUIRE(text.find("100,2.828427,0.707107,0.707107,0.707107,-0.707107\n") !=
          std::string::npos);
  // No exponent notation anywhere below the header.
  const std::string body = text.substr(text.find('\n') + 1);
  REQUIRE(body.find('e') == std::string::npos);
  REQUIRE(body.find('E') == std::string::npos);
}

TEST_CASE("disclosure files round trip and carry the binding digest") {
  const ExperimentConfig config = ExperimentConfig::defaults(50, 31);
  const auto run = protocol::run_experiment_full(config);
  std::ostringstream out;
  write_disclosures(out, config, Side::Left, run.disclosed_a);
  std::istringstream in(out.str());
  const ParsedDisclosure parsed = read_disclosures(in);
  REQUIRE(parsed.labels == run.disclosed_a);
  REQUIRE(parsed.side == Side::Left);
  REQUIRE(parsed.digest == config_digest(config));
}

TEST_CASE("config digest distinguishes configs") {
  const ExperimentConfig a = ExperimentConfig::defaults(100, 1);
  ExperimentConfig b = a;
  b.master_seed = 2;
  ExperimentConfig c = a;
  c.right_angles[1] = Angle(0.5);
  REQUIRE(config_digest(a) != config_digest(b));
  REQUIRE(config_digest(a) != config_digest(c));
  REQUIRE(config_digest(a) == config_digest(ExperimentConfig::defaults(100, 1)));
}

TEST_CASE("format_double round trips through parse") {
  for (const double value : {0.0, 1.0, kPi / 8.0, -kPi / 8.0, 0.1, 1e-3,
                             0.7853981633974483, -2.356194490192345}) {
    const std::string text = format_double(value);
    double back = 0.0;
    const auto result =
        std::from_chars(text.data(), text.data() + text.size(), back);
    REQUIRE(result.ec == std::errc{});
    REQUIRE(back == value);
  }
}
