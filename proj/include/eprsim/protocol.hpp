// The five trial-loop roles (source O, randomizers A/B, stations X/Y)
// plus the independent referee, as isolated state machines with one-way
// message flow, and the in-process orchestrator.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "eprsim/core.hpp"

namespace eprsim::protocol {

struct SourcePulseMsg {
  std::uint64_t trial = 0;
  Angle pulse_axis;  // the polarization of the pulse destined for THIS station
};

struct SettingMsg {
  std::uint64_t trial = 0;
  SettingLabel label = SettingLabel::One;
};

struct OutcomeMsg {
  std::uint64_t trial = 0;
  bool detected = false;
};

enum class Verdict : std::uint8_t { Pass, Fail };

struct RefereeReport {
  std::uint64_t trials_checked = 0;
  std::uint64_t mismatches = 0;
  Verdict verdict = Verdict::Fail;
};

/// Setting labels of trials strictly before the current one. May be fed
/// to station strategies between trials; the shipped strategies ignore it.
struct PastLabels {
  std::span<const SettingLabel> left;
  std::span<const SettingLabel> right;
};

/// A station decides detection from its own setting angle, its own inbound
/// pulse axis, its private noise stream, and (optionally) past labels.
/// There is no parameter through which the other side's current-trial data
/// could arrive.
using StationStrategy = std::function<bool(
    Angle setting, Angle pulse_axis, RandomStream& noise,
    const PastLabels& history)>;

/// Poisson-window photodetector behind a polarizer: detect iff the uniform
/// draw compares below cos^2(setting - pulse_axis) under `rule`.
inline StationStrategy malus_poisson_strategy(DetectorRule rule) {
  return [rule](Angle setting, Angle pulse_axis, RandomStream& noise,
                const PastLabels&) {
    const double intensity = malus_intensity(setting, pulse_axis);
    const double u = noise.next_uniform();
    return rule == DetectorRule::StrictLess ? u < intensity : u <= intensity;
  };
}

/// Deterministic local-hidden-variable baseline: detect iff the Malus
/// intensity exceeds 1/2. Consumes no randomness.
inline StationStrategy threshold_strategy() {
  return [](Angle setting, Angle pulse_axis, RandomStream&,
            const PastLabels&) {
    return malus_intensity(setting, pulse_axis) > 0.5;
  };
}

struct SourceEmission {
  SourcePulseMsg to_x;
  SourcePulseMsg to_y;
  SourceMode mode = SourceMode::VH;
};

/// Flat random choice between the two orthogonal pulse pairs.
inline SourceEmission source_step(RandomStream& stream, std::uint64_t trial) {
  const SourceMode mode = stream.next_coin() ? SourceMode::VH : SourceMode::HV;
  return SourceEmission{
      SourcePulseMsg{trial, left_pulse_axis(mode)},
      SourcePulseMsg{trial, right_pulse_axis(mode)},
      mode,
  };
}

/// Fair coin toss over the two setting labels.
inline SettingMsg randomizer_step(RandomStream& stream, std::uint64_t trial) {
  const SettingLabel label =
      stream.next_coin() ? SettingLabel::One : SettingLabel::Two;
  return SettingMsg{trial, label};
}

inline bool station_step(const StationStrategy& strategy, Angle setting,
                         Angle pulse_axis, RandomStream& stream,
                         const PastLabels& history = {}) {
  return strategy(setting, pulse_axis, stream, history);
}

/// Randomizer state machine. Retains a private copy of every label it sent
/// so it can disclose them to the referee afterwards.
class Randomizer {
 public:
  explicit Randomizer(RandomStream stream) : stream_(std::move(stream)) {}

  SettingMsg step(std::uint64_t trial) {
    const SettingMsg msg = randomizer_step(stream_, trial);
    sent_.push_back(msg.label);
    return msg;
  }

  [[nodiscard]] const std::vector<SettingLabel>& disclosed_labels() const {
    return sent_;
  }

 private:
  RandomStream stream_;
  std::vector<SettingLabel> sent_;
};

/// Measurement station state machine. Its only inputs are its own pulse
/// message, its own setting message, and (between trials) past labels; the
/// type has no channel from the other station or the other randomizer.
class Station {
 public:
  Station(std::array<Angle, 2> own_angles, StationStrategy strategy,
          RandomStream stream)
      : angles_(own_angles),
        strategy_(std::move(strategy)),
        stream_(std::move(stream)) {}

  void receive_pulse(const SourcePulseMsg& msg) { pulse_ = msg; }
  void receive_setting(const SettingMsg& msg) { setting_ = msg; }

  [[nodiscard]] bool ready(std::uint64_t trial) const {
    return pulse_ && pulse_->trial == trial && setting_ &&
           setting_->trial == trial;
  }

  /// Between-trial feedback channel. Stored for the strategy; never
  /// consulted within the same trial.
  void observe_past_labels(std::span<const SettingLabel> left,
                           std::span<const SettingLabel> right) {
    past_left_.assign(left.begin(), left.end());
    past_right_.assign(right.begin(), right.end());
  }

  OutcomeMsg step(std::uint64_t trial) {
    if (!ready(trial)) {
      throw std::logic_error("station: stepped before both inputs arrived");
    }
    const Angle setting = angles_[label_index(setting_->label)];
    const PastLabels history{past_left_, past_right_};
    const bool detected =
        strategy_(setting, pulse_->pulse_axis, stream_, history);
    pulse_.reset();
    setting_.reset();
    return OutcomeMsg{trial, detected};
  }

 private:
  std::array<Angle, 2> angles_;
  StationStrategy strategy_;
  RandomStream stream_;
  std::optional<SourcePulseMsg> pulse_;
  std::optional<SettingMsg> setting_;
  std::vector<SettingLabel> past_left_;
  std::vector<SettingLabel> past_right_;
};

struct ExperimentRun {
  std::vector<TrialRecord> records;
  std::vector<SettingLabel> disclosed_a;  // A's private copies for the referee
  std::vector<SettingLabel> disclosed_b;
};

/// Runs T trials with the Malus-Poisson stations. Roles execute in the
/// fixed order O, A, B, X, Y; the only same-trial flows are O->X, O->Y,
/// A->X, B->Y. Output is a pure function of the config.
inline ExperimentRun run_experiment_full(const ExperimentConfig& config) {
  validate_config(config);

  RandomStream source_stream(config.master_seed, StreamRole::Source);
  Randomizer rand_a(RandomStream(config.master_seed, StreamRole::RandA));
  Randomizer rand_b(RandomStream(config.master_seed, StreamRole::RandB));
  Station station_x(config.left_angles,
                    malus_poisson_strategy(config.detector_rule),
                    RandomStream(config.master_seed, StreamRole::StationX));
  Station station_y(config.right_angles,
                    malus_poisson_strategy(config.detector_rule),
                    RandomStream(config.master_seed, StreamRole::StationY));

  ExperimentRun run;
  run.records.reserve(config.trials);
  for (std::uint64_t trial = 0; trial < config.trials; ++trial) {
    // Labels of trials < `trial` are fed back before the trial runs.
    station_x.observe_past_labels(run.disclosed_a, run.disclosed_b);
    station_y.observe_past_labels(run.disclosed_a, run.disclosed_b);

    const SourceEmission emission = source_step(source_stream, trial);
    const SettingMsg setting_a = rand_a.step(trial);
    const SettingMsg setting_b = rand_b.step(trial);

    station_x.receive_pulse(emission.to_x);
    station_x.receive_setting(setting_a);
    station_y.receive_pulse(emission.to_y);
    station_y.receive_setting(setting_b);

    const OutcomeMsg outcome_x = station_x.step(trial);
    const OutcomeMsg outcome_y = station_y.step(trial);

    run.records.push_back(TrialRecord{trial, emission.mode, setting_a.label,
                                      setting_b.label, outcome_x.detected,
                                      outcome_y.detected});
    run.disclosed_a.push_back(setting_a.label);
    run.disclosed_b.push_back(setting_b.label);
  }
  return run;
}

inline std::vector<TrialRecord> run_experiment(const ExperimentConfig& config) {
  return run_experiment_full(config).records;
}

/// Referee audit: confirm the disclosed labels equal the logged ones
/// positionwise on both sides. Length mismatch yields FAIL with
/// trials_checked set to the comparable prefix.
inline RefereeReport referee_verify(std::span<const SettingLabel> disclosed_a,
                                    std::span<const SettingLabel> disclosed_b,
                                    std::span<const TrialRecord> log) {
  const std::uint64_t trials = log.size();
  const std::uint64_t prefix =
      std::min({disclosed_a.size(), disclosed_b.size(), log.size()});

  std::uint64_t mismatches = 0;
  for (std::uint64_t n = 0; n < prefix; ++n) {
    if (disclosed_a[n] != log[n].a_label) ++mismatches;
    if (disclosed_b[n] != log[n].b_label) ++mismatches;
  }

  const bool lengths_match =
      disclosed_a.size() == trials && disclosed_b.size() == trials;
  RefereeReport report;
  report.trials_checked = prefix;
  report.mismatches = mismatches;
  report.verdict = (lengths_match && mismatches == 0) ? Verdict::Pass
                                                      : Verdict::Fail;
  return report;
}

}  // namespace eprsim::protocol
