// Bit-exact persistence for trial logs, disclosure lists, and running
// curve CSVs. All files are line-delimited text with canonical field
// order and canonical number formatting, so re-serializing a parsed file
// reproduces it byte for byte and everything stays auditable with
// ordinary text tools.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "eprsim/analysis.hpp"
#include "eprsim/core.hpp"

namespace eprsim::io {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}

  [[nodiscard]] std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Shortest round-trip decimal form of a double (never locale-dependent).
inline std::string format_double(double value) {
  char buffer[64];
  const auto result = std::to_chars(buffer, buffer + sizeof buffer, value);
  return std::string(buffer, result.ptr);
}

/// Fixed decimal notation (no exponent), for curve CSVs.
inline std::string format_fixed(double value, int precision) {
  char buffer[512];
  const auto result = std::to_chars(buffer, buffer + sizeof buffer, value,
                                    std::chars_format::fixed, precision);
  return std::string(buffer, result.ptr);
}

inline std::string_view mode_name(SourceMode mode) {
  return mode == SourceMode::VH ? "VH" : "HV";
}

inline std::string_view rule_name(DetectorRule rule) {
  return rule == DetectorRule::StrictLess ? "strict_less" : "less_or_equal";
}

inline std::optional<SourceMode> parse_mode(std::string_view text) {
  if (text == "VH") return SourceMode::VH;
  if (text == "HV") return SourceMode::HV;
  return std::nullopt;
}

inline std::optional<DetectorRule> parse_rule(std::string_view text) {
  if (text == "strict_less") return DetectorRule::StrictLess;
  if (text == "less_or_equal") return DetectorRule::LessOrEqual;
  return std::nullopt;
}

namespace detail {

struct Field {
  std::string_view key;
  std::string_view value;
};

// Tokenizes "k1=v1 k2=v2 ..." (single spaces, no escaping; values never
// contain spaces in any eprsim format).
inline std::vector<Field> split_fields(std::string_view text,
                                       std::size_t line_no) {
  std::vector<Field> fields;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find(' ', pos);
    const std::string_view token =
        text.substr(pos, end == std::string_view::npos ? end : end - pos);
    if (token.empty()) {
      throw ParseError(line_no, "empty token (double space?)");
    }
    const std::size_t eq = token.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw ParseError(line_no,
                       "malformed token '" + std::string(token) + "'");
    }
    fields.push_back(Field{token.substr(0, eq), token.substr(eq + 1)});
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  return fields;
}

inline std::string_view require_field(const std::vector<Field>& fields,
                                      std::string_view key,
                                      std::size_t line_no) {
  for (const Field& field : fields) {
    if (field.key == key) return field.value;
  }
  throw ParseError(line_no, "missing field '" + std::string(key) + "'");
}

inline std::uint64_t parse_u64(std::string_view text, std::string_view key,
                               std::size_t line_no) {
  std::uint64_t value = 0;
  const auto result =
      std::from_chars(text.data(), text.data() + text.size(), value);
  if (result.ec != std::errc{} || result.ptr != text.data() + text.size()) {
    throw ParseError(line_no, "field '" + std::string(key) +
                                  "' is not an unsigned integer: '" +
                                  std::string(text) + "'");
  }
  return value;
}

inline double parse_f64(std::string_view text, std::string_view key,
                        std::size_t line_no) {
  double value = 0.0;
  const auto result =
      std::from_chars(text.data(), text.data() + text.size(), value);
  if (result.ec != std::errc{} || result.ptr != text.data() + text.size()) {
    throw ParseError(line_no, "field '" + std::string(key) +
                                  "' is not a number: '" + std::string(text) +
                                  "'");
  }
  return value;
}

inline bool parse_bit(std::string_view text, std::string_view key,
                      std::size_t line_no) {
  if (text == "0") return false;
  if (text == "1") return true;
  throw ParseError(line_no, "field '" + std::string(key) +
                                "' must be 0 or 1, got '" + std::string(text) +
                                "'");
}

inline std::string hex16(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (const char c : text) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

}  // namespace detail

/// Canonical flat encoding of a config; also the digest preimage.
inline std::string config_payload(const ExperimentConfig& config) {
  std::string out;
  out += "trials=" + std::to_string(config.trials);
  out += " seed=" + std::to_string(config.master_seed);
  out += " rule=" + std::string(rule_name(config.detector_rule));
  out += " left1=" + format_double(config.left_angles[0].radians());
  out += " left2=" + format_double(config.left_angles[1].radians());
  out += " right1=" + format_double(config.right_angles[0].radians());
  out += " right2=" + format_double(config.right_angles[1].radians());
  return out;
}

/// Binds a log to the configuration that generated it.
inline std::uint64_t config_digest(const ExperimentConfig& config) {
  return detail::fnv1a(config_payload(config));
}

inline constexpr std::string_view kLogMagic = "eprsim-log";
inline constexpr std::string_view kDisclosureMagic = "eprsim-disclosure";
inline constexpr std::string_view kFormatVersion = "v1";

inline std::string format_record(const TrialRecord& record) {
  std::string out;
  out += "trial=" + std::to_string(record.index);
  out += " mode=" + std::string(mode_name(record.mode));
  out += " a=" + std::to_string(label_index(record.a_label) + 1);
  out += " b=" + std::to_string(label_index(record.b_label) + 1);
  out += " x=" + std::string(record.x_detected ? "1" : "0");
  out += " y=" + std::string(record.y_detected ? "1" : "0");
  return out;
}

inline TrialRecord parse_record(std::string_view line, std::size_t line_no) {
  const auto fields = detail::split_fields(line, line_no);
  for (const auto& field : fields) {
    if (field.key != "trial" && field.key != "mode" && field.key != "a" &&
        field.key != "b" && field.key != "x" && field.key != "y") {
      throw ParseError(line_no,
                       "unknown field '" + std::string(field.key) + "'");
    }
  }
  TrialRecord record;
  record.index =
      detail::parse_u64(detail::require_field(fields, "trial", line_no),
                        "trial", line_no);
  const auto mode = parse_mode(detail::require_field(fields, "mode", line_no));
  if (!mode) throw ParseError(line_no, "mode must be VH or HV");
  record.mode = *mode;
  const std::uint64_t a = detail::parse_u64(
      detail::require_field(fields, "a", line_no), "a", line_no);
  const std::uint64_t b = detail::parse_u64(
      detail::require_field(fields, "b", line_no), "b", line_no);
  if (a != 1 && a != 2) throw ParseError(line_no, "a must be 1 or 2");
  if (b != 1 && b != 2) throw ParseError(line_no, "b must be 1 or 2");
  record.a_label = label_from_index(a - 1);
  record.b_label = label_from_index(b - 1);
  record.x_detected = detail::parse_bit(
      detail::require_field(fields, "x", line_no), "x", line_no);
  record.y_detected = detail::parse_bit(
      detail::require_field(fields, "y", line_no), "y", line_no);
  return record;
}

/// Header line, then one record per line. Line n+2 encodes trial n.
inline void write_log(std::ostream& out, const ExperimentConfig& config,
                      std::span<const TrialRecord> log) {
  out << kLogMagic << ' ' << kFormatVersion
      << " digest=" << detail::hex16(config_digest(config)) << ' '
      << config_payload(config) << '\n';
  for (const TrialRecord& record : log) {
    out << format_record(record) << '\n';
  }
  if (!out) {
    throw std::runtime_error("log write failed");
  }
}

struct ParsedLog {
  ExperimentConfig config;
  std::vector<TrialRecord> records;
};

inline ParsedLog read_log(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError(1, "empty input, expected log header");
  }

  // Header: "<magic> <version> digest=... <config payload>".
  std::size_t space = line.find(' ');
  if (line.substr(0, space) != kLogMagic) {
    throw ParseError(1, "not an eprsim log file");
  }
  std::size_t rest = space == std::string::npos ? line.size() : space + 1;
  space = line.find(' ', rest);
  const std::string_view version =
      std::string_view(line).substr(rest, space - rest);
  if (version != kFormatVersion) {
    throw ParseError(1, "unsupported log format version '" +
                            std::string(version) + "'");
  }
  const auto header_fields = detail::split_fields(
      std::string_view(line).substr(space == std::string::npos ? line.size()
                                                               : space + 1),
      1);

  ParsedLog parsed;
  parsed.config.trials = detail::parse_u64(
      detail::require_field(header_fields, "trials", 1), "trials", 1);
  parsed.config.master_seed = detail::parse_u64(
      detail::require_field(header_fields, "seed", 1), "seed", 1);
  const auto rule = parse_rule(detail::require_field(header_fields, "rule", 1));
  if (!rule) throw ParseError(1, "rule must be strict_less or less_or_equal");
  parsed.config.detector_rule = *rule;
  parsed.config.left_angles = {
      Angle(detail::parse_f64(detail::require_field(header_fields, "left1", 1),
                              "left1", 1)),
      Angle(detail::parse_f64(detail::require_field(header_fields, "left2", 1),
                              "left2", 1))};
  parsed.config.right_angles = {
      Angle(detail::parse_f64(
          detail::require_field(header_fields, "right1", 1), "right1", 1)),
      Angle(detail::parse_f64(
          detail::require_field(header_fields, "right2", 1), "right2", 1))};

  {
    const std::string_view digest_text =
        detail::require_field(header_fields, "digest", 1);
    std::uint64_t digest_value = 0;
    const auto result = std::from_chars(
        digest_text.data(), digest_text.data() + digest_text.size(),
        digest_value, 16);
    if (result.ec != std::errc{} ||
        result.ptr != digest_text.data() + digest_text.size()) {
      throw ParseError(1, "digest is not hexadecimal");
    }
    if (digest_value != config_digest(parsed.config)) {
      throw ParseError(1, "config digest mismatch: header corrupt or edited");
    }
  }

  std::size_t line_no = 1;
  std::optional<std::uint64_t> previous_index;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      throw ParseError(line_no, "empty record line");
    }
    const TrialRecord record = parse_record(line, line_no);
    if (previous_index && record.index <= *previous_index) {
      throw ParseError(line_no, "trial index not strictly increasing");
    }
    previous_index = record.index;
    parsed.records.push_back(record);
  }
  return parsed;
}

inline void write_log_file(const std::filesystem::path& path,
                           const ExperimentConfig& config,
                           std::span<const TrialRecord> log) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  write_log(out, config, log);
}

inline ParsedLog read_log_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open for reading: " + path.string());
  }
  return read_log(in);
}

/// CSV with columns trial_index, S, kappa_11, kappa_12, kappa_21,
/// kappa_22. Fixed decimal notation, six digits after the point.
inline void write_curve(std::ostream& out,
                        std::span<const analysis::CurvePoint> curve) {
  out << "trial_index,S,kappa_11,kappa_12,kappa_21,kappa_22\n";
  for (const analysis::CurvePoint& point : curve) {
    out << point.trial_index << ',' << format_fixed(point.s, 6) << ','
        << format_fixed(point.kappa[0][0], 6) << ','
        << format_fixed(point.kappa[0][1], 6) << ','
        << format_fixed(point.kappa[1][0], 6) << ','
        << format_fixed(point.kappa[1][1], 6) << '\n';
  }
  if (!out) {
    throw std::runtime_error("curve write failed");
  }
}

inline void write_curve_file(const std::filesystem::path& path,
                             std::span<const analysis::CurvePoint> curve) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  write_curve(out, curve);
}

/// Randomizer disclosure list for the referee audit, bound to the same
/// config digest as the log it accompanies.
inline void write_disclosures(std::ostream& out,
                              const ExperimentConfig& config, Side side,
                              std::span<const SettingLabel> labels) {
  out << kDisclosureMagic << ' ' << kFormatVersion
      << " digest=" << detail::hex16(config_digest(config))
      << " side=" << (side == Side::Left ? 'A' : 'B')
      << " trials=" << labels.size() << '\n';
  for (std::size_t n = 0; n < labels.size(); ++n) {
    out << "trial=" << n << " label=" << (label_index(labels[n]) + 1) << '\n';
  }
  if (!out) {
    throw std::runtime_error("disclosure write failed");
  }
}

struct ParsedDisclosure {
  std::uint64_t digest = 0;
  Side side = Side::Left;
  std::vector<SettingLabel> labels;
};

inline ParsedDisclosure read_disclosures(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError(1, "empty input, expected disclosure header");
  }
  std::size_t space = line.find(' ');
  if (line.substr(0, space) != kDisclosureMagic) {
    throw ParseError(1, "not an eprsim disclosure file");
  }
  std::size_t rest = space == std::string::npos ? line.size() : space + 1;
  space = line.find(' ', rest);
  const std::string_view version =
      std::string_view(line).substr(rest, space - rest);
  if (version != kFormatVersion) {
    throw ParseError(1, "unsupported disclosure format version '" +
                            std::string(version) + "'");
  }
  const auto header_fields = detail::split_fields(
      std::string_view(line).substr(space == std::string::npos ? line.size()
                                                               : space + 1),
      1);

  ParsedDisclosure parsed;
  {
    const std::string_view digest_text =
        detail::require_field(header_fields, "digest", 1);
    const auto result = std::from_chars(
        digest_text.data(), digest_text.data() + digest_text.size(),
        parsed.digest, 16);
    if (result.ec != std::errc{} ||
        result.ptr != digest_text.data() + digest_text.size()) {
      throw ParseError(1, "digest is not hexadecimal");
    }
  }
  const std::string_view side_text =
      detail::require_field(header_fields, "side", 1);
  if (side_text == "A") {
    parsed.side = Side::Left;
  } else if (side_text == "B") {
    parsed.side = Side::Right;
  } else {
    throw ParseError(1, "side must be A or B");
  }

  std::size_t line_no = 1;
  std::uint64_t expected_trial = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = detail::split_fields(line, line_no);
    const std::uint64_t trial = detail::parse_u64(
        detail::require_field(fields, "trial", line_no), "trial", line_no);
    if (trial != expected_trial) {
      throw ParseError(line_no, "trial index out of order");
    }
    ++expected_trial;
    const std::uint64_t label = detail::parse_u64(
        detail::require_field(fields, "label", line_no), "label", line_no);
    if (label != 1 && label != 2) {
      throw ParseError(line_no, "label must be 1 or 2");
    }
    parsed.labels.push_back(label_from_index(label - 1));
  }
  return parsed;
}

inline void write_disclosure_file(const std::filesystem::path& path,
                                  const ExperimentConfig& config, Side side,
                                  std::span<const SettingLabel> labels) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  write_disclosures(out, config, side, labels);
}

inline ParsedDisclosure read_disclosure_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open for reading: " + path.string());
  }
  return read_disclosures(in);
}

}  // namespace eprsim::io
