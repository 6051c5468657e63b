// Domain types, angle arithmetic, and the per-role deterministic random
// stream contract shared by every other eprsim header.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

namespace eprsim {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kHalfPi = std::numbers::pi / 2.0;

/// Plane polarization / polarizer angle in radians. Stored as given;
/// canonical() maps onto the representative in [0, 2*pi).
class Angle {
 public:
  constexpr Angle() = default;
  explicit Angle(double radians) : radians_(radians) {
    if (!std::isfinite(radians)) {
      throw std::invalid_argument("Angle: non-finite value");
    }
  }

  [[nodiscard]] constexpr double radians() const { return radians_; }

  [[nodiscard]] Angle canonical() const {
    double r = std::fmod(radians_, kTwoPi);
    if (r < 0.0) r += kTwoPi;
    if (r >= kTwoPi) r = 0.0;  // fmod rounding can land exactly on 2*pi
    return Angle(r);
  }

  static Angle from_degrees(double degrees) {
    return Angle(degrees * kPi / 180.0);
  }

  friend constexpr bool operator==(Angle a, Angle b) {
    return a.radians_ == b.radians_;
  }

 private:
  double radians_ = 0.0;
};

/// Which of the two orthogonal pulse pairs the source emitted.
/// VH: vertical (0 rad) pulse to the left station, horizontal (pi/2) to
/// the right. HV exchanges them.
enum class SourceMode : std::uint8_t { VH, HV };

[[nodiscard]] inline Angle left_pulse_axis(SourceMode mode) {
  return Angle(mode == SourceMode::VH ? 0.0 : kHalfPi);
}

[[nodiscard]] inline Angle right_pulse_axis(SourceMode mode) {
  return Angle(mode == SourceMode::VH ? kHalfPi : 0.0);
}

/// Binary measurement-setting label a randomizer sends to its station.
enum class SettingLabel : std::uint8_t { One = 1, Two = 2 };

[[nodiscard]] constexpr std::size_t label_index(SettingLabel label) {
  return label == SettingLabel::One ? 0 : 1;
}

[[nodiscard]] constexpr SettingLabel label_from_index(std::size_t index) {
  return index == 0 ? SettingLabel::One : SettingLabel::Two;
}

enum class Side : std::uint8_t { Left, Right };

/// Detection comparison between the uniform draw and the Malus intensity.
/// StrictLess keeps intensity 0 undetectable and intensity 1 certain.
enum class DetectorRule : std::uint8_t { StrictLess, LessOrEqual };

struct ExperimentConfig {
  std::array<Angle, 2> left_angles{};   // settings for labels 1, 2
  std::array<Angle, 2> right_angles{};
  std::uint64_t trials = 0;
  std::uint64_t master_seed = 0;
  DetectorRule detector_rule = DetectorRule::StrictLess;

  [[nodiscard]] Angle left_angle(SettingLabel label) const {
    return left_angles[label_index(label)];
  }
  [[nodiscard]] Angle right_angle(SettingLabel label) const {
    return right_angles[label_index(label)];
  }
  [[nodiscard]] Angle side_angle(Side side, SettingLabel label) const {
    return side == Side::Left ? left_angle(label) : right_angle(label);
  }

  /// Default observing angles theta_l in {0, pi/4}, theta_r in {pi/8, -pi/8}.
  static ExperimentConfig defaults(std::uint64_t trials,
                                   std::uint64_t master_seed) {
    ExperimentConfig config;
    config.left_angles = {Angle(0.0), Angle(kPi / 4.0)};
    config.right_angles = {Angle(kPi / 8.0), Angle(-kPi / 8.0)};
    config.trials = trials;
    config.master_seed = master_seed;
    return config;
  }
};

inline void validate_config(const ExperimentConfig& config) {
  if (config.trials < 1) {
    throw std::invalid_argument("config: trials must be >= 1");
  }
  if (config.left_angles[0].canonical() == config.left_angles[1].canonical()) {
    throw std::invalid_argument("config: left settings must be distinct");
  }
  if (config.right_angles[0].canonical() ==
      config.right_angles[1].canonical()) {
    throw std::invalid_argument("config: right settings must be distinct");
  }
}

/// One protocol round as logged by the collector. No missing-data states:
/// every field is populated for every trial.
struct TrialRecord {
  std::uint64_t index = 0;
  SourceMode mode = SourceMode::VH;
  SettingLabel a_label = SettingLabel::One;
  SettingLabel b_label = SettingLabel::One;
  bool x_detected = false;
  bool y_detected = false;

  friend bool operator==(const TrialRecord&, const TrialRecord&) = default;
};

/// Stream owners. Distinct roles seeded from one master seed yield
/// statistically independent sequences; equal (seed, role) reproduce the
/// identical sequence.
enum class StreamRole : std::uint8_t {
  Source,
  RandA,
  RandB,
  StationX,
  StationY,
  Tautology,
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_seed(std::uint64_t master_seed,
                                    StreamRole role) {
  const auto role_tag = splitmix64(static_cast<std::uint64_t>(role) + 1);
  return splitmix64(master_seed ^ role_tag);
}

}  // namespace detail

/// Deterministic per-role generator. mt19937_64 is fully specified by the
/// standard, so a (master_seed, role) pair reproduces the same sequence on
/// any conforming implementation; uniforms use the 53-bit mapping for the
/// same reason.
class RandomStream {
 public:
  RandomStream(std::uint64_t master_seed, StreamRole role)
      : engine_(detail::stream_seed(master_seed, role)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53-bit resolution.
  double next_uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Fair coin from the top bit.
  bool next_coin() { return (engine_() >> 63) != 0; }

 private:
  std::mt19937_64 engine_;
};

inline RandomStream derive_stream(std::uint64_t master_seed, StreamRole role) {
  return RandomStream(master_seed, role);
}

/// Malus transmission factor cos^2(setting - pulse_axis).
[[nodiscard]] inline double malus_intensity(Angle setting, Angle pulse_axis) {
  const double c = std::cos(setting.radians() - pulse_axis.radians());
  return c * c;
}

}  // namespace eprsim
