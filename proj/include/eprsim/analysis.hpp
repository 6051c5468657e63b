// Count tables over trial logs and the two rival statistics computed from
// them: the dichotomic correlation kappa with its CHSH contrast, and the
// Malus-law intensity estimator kappa* assembled from per-side
// square-root count ratios. Both run over the same logs.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eprsim/core.hpp"

namespace eprsim::analysis {

/// A correlation was requested for a setting pair with no trials.
/// Deliberately distinct from returning 0, which would contaminate S.
class UndefinedCorrelationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A factor estimate was requested from a cell with zero exposures.
class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per setting-pair tallies of equal/unequal outcomes, where "equal" means
/// x_detected == y_detected under the detected -> +1 mapping.
struct PairCounts {
  struct Cell {
    std::uint64_t n_equal = 0;
    std::uint64_t n_unequal = 0;
    [[nodiscard]] std::uint64_t n_total() const { return n_equal + n_unequal; }
  };

  std::array<std::array<Cell, 2>, 2> cells{};  // [a_label][b_label]

  [[nodiscard]] Cell& at(SettingLabel a, SettingLabel b) {
    return cells[label_index(a)][label_index(b)];
  }
  [[nodiscard]] const Cell& at(SettingLabel a, SettingLabel b) const {
    return cells[label_index(a)][label_index(b)];
  }

  void add(const TrialRecord& record) {
    Cell& cell = at(record.a_label, record.b_label);
    if (record.x_detected == record.y_detected) {
      ++cell.n_equal;
    } else {
      ++cell.n_unequal;
    }
  }
};

inline PairCounts tally_pairs(std::span<const TrialRecord> log) {
  PairCounts counts;
  for (const TrialRecord& record : log) counts.add(record);
  return counts;
}

/// kappa_ab = (N= - N!=) / N for one setting pair.
inline double kappa_gill(const PairCounts& counts, SettingLabel a,
                         SettingLabel b) {
  const PairCounts::Cell& cell = counts.at(a, b);
  const std::uint64_t total = cell.n_total();
  if (total == 0) {
    throw UndefinedCorrelationError(
        "kappa undefined: no trials for setting pair (" +
        std::to_string(label_index(a) + 1) + "," +
        std::to_string(label_index(b) + 1) + ")");
  }
  const auto equal = static_cast<double>(cell.n_equal);
  const auto unequal = static_cast<double>(cell.n_unequal);
  return (equal - unequal) / static_cast<double>(total);
}

using KappaTable = std::array<std::array<double, 2>, 2>;  // [a_label][b_label]

/// CHSH contrast S = k12 + k11 + k21 - k22.
inline double chsh(const KappaTable& kappa) {
  return kappa[0][1] + kappa[0][0] + kappa[1][0] - kappa[1][1];
}

/// Per-station tallies indexed by (setting label, pulse axis). Exposures
/// count every trial in which the cell's regime occurred at that side;
/// detections the subset with detected = true. Cells use only data local
/// to the side.
struct SideCounts {
  struct Cell {
    std::uint64_t detections = 0;
    std::uint64_t exposures = 0;
  };

  Side side = Side::Left;
  std::array<std::array<Cell, 2>, 2> cells{};  // [label][axis: 0, pi/2]

  [[nodiscard]] Cell& at(SettingLabel label, std::size_t axis_index) {
    return cells[label_index(label)][axis_index];
  }
  [[nodiscard]] const Cell& at(SettingLabel label,
                               std::size_t axis_index) const {
    return cells[label_index(label)][axis_index];
  }

  void add(const TrialRecord& record) {
    const bool left = side == Side::Left;
    const Angle axis = left ? left_pulse_axis(record.mode)
                            : right_pulse_axis(record.mode);
    const std::size_t axis_index = axis.radians() == 0.0 ? 0 : 1;
    const SettingLabel label = left ? record.a_label : record.b_label;
    Cell& cell = at(label, axis_index);
    ++cell.exposures;
    if (left ? record.x_detected : record.y_detected) ++cell.detections;
  }
};

struct SidePair {
  SideCounts left{Side::Left};
  SideCounts right{Side::Right};

  void add(const TrialRecord& record) {
    left.add(record);
    right.add(record);
  }
};

inline SidePair tally_sides(std::span<const TrialRecord> log) {
  SidePair sides;
  for (const TrialRecord& record : log) sides.add(record);
  return sides;
}

/// Signed cosine/sine factors for one (side, label), recovered from count
/// ratios via the square-root law.
struct FactorEstimate {
  double cos_est = 0.0;
  double sin_est = 0.0;
  std::uint64_t exposures_used = 0;
};

namespace detail {
inline double sign_of(double x) { return x < 0.0 ? -1.0 : 1.0; }
}  // namespace detail

/// Assemble factor estimates from the two cell ratios of one label:
/// |cos| = sqrt(axis-0 ratio), |sin| = sqrt(axis-pi/2 ratio). Signs come
/// from the nominal setting angle, the on-the-spot local information that
/// resolves the square root's sign ambiguity.
inline FactorEstimate factors_from_ratios(double axis0_ratio,
                                          double axis90_ratio, Angle nominal,
                                          std::uint64_t exposures_used = 0) {
  FactorEstimate estimate;
  estimate.cos_est =
      detail::sign_of(std::cos(nominal.radians())) * std::sqrt(axis0_ratio);
  estimate.sin_est =
      detail::sign_of(std::sin(nominal.radians())) * std::sqrt(axis90_ratio);
  estimate.exposures_used = exposures_used;
  return estimate;
}

inline FactorEstimate estimate_factors(const SideCounts& counts,
                                       SettingLabel label, Angle nominal) {
  const SideCounts::Cell& cell0 = counts.at(label, 0);
  const SideCounts::Cell& cell90 = counts.at(label, 1);
  if (cell0.exposures == 0 || cell90.exposures == 0) {
    throw InsufficientDataError(
        std::string("factor estimate: zero exposures in a ") +
        (counts.side == Side::Left ? "left" : "right") +
        "-side cell for label " + std::to_string(label_index(label) + 1));
  }
  const double ratio0 = static_cast<double>(cell0.detections) /
                        static_cast<double>(cell0.exposures);
  const double ratio90 = static_cast<double>(cell90.detections) /
                         static_cast<double>(cell90.exposures);
  return factors_from_ratios(ratio0, ratio90, nominal,
                             cell0.exposures + cell90.exposures);
}

/// kappa* = cos^2(delta) - sin^2(delta) with delta = theta_r - theta_l,
/// assembled purely from per-side factors:
///   cos(delta) = cos_r*cos_l + sin_r*sin_l
///   sin(delta) = sin_r*cos_l - cos_r*sin_l
inline double kappa_malus(const FactorEstimate& left,
                          const FactorEstimate& right) {
  const double cos_delta =
      right.cos_est * left.cos_est + right.sin_est * left.sin_est;
  const double sin_delta =
      right.sin_est * left.cos_est - right.cos_est * left.sin_est;
  return cos_delta * cos_delta - sin_delta * sin_delta;
}

enum class AnalysisMode : std::uint8_t { Gill, Malus };

/// All four kappa_ab from pair counts. Throws if any pair is empty.
inline KappaTable gill_kappa_table(const PairCounts& counts) {
  KappaTable table;
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) {
      table[a][b] =
          kappa_gill(counts, label_from_index(a), label_from_index(b));
    }
  }
  return table;
}

/// All four kappa* from per-side factor estimates. Throws if any cell has
/// zero exposures.
inline KappaTable malus_kappa_table(const SidePair& sides,
                                    const ExperimentConfig& config) {
  std::array<FactorEstimate, 2> left_factors;
  std::array<FactorEstimate, 2> right_factors;
  for (std::size_t i = 0; i < 2; ++i) {
    const SettingLabel label = label_from_index(i);
    left_factors[i] =
        estimate_factors(sides.left, label, config.left_angle(label));
    right_factors[i] =
        estimate_factors(sides.right, label, config.right_angle(label));
  }
  KappaTable table;
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) {
      table[a][b] = kappa_malus(left_factors[a], right_factors[b]);
    }
  }
  return table;
}

struct CurvePoint {
  std::uint64_t trial_index = 0;  // prefix length the point was computed on
  double s = 0.0;
  KappaTable kappa{};
};

struct CorrelationReport {
  AnalysisMode mode = AnalysisMode::Gill;
  KappaTable kappa{};
  double contrast_s = 0.0;
  std::vector<CurvePoint> running_curve;
};

namespace detail {

// Incremental tallies; point computation is O(1) per emitted prefix.
struct RunningState {
  PairCounts pairs;
  SidePair sides;

  void add(const TrialRecord& record, AnalysisMode mode) {
    if (mode == AnalysisMode::Gill) {
      pairs.add(record);
    } else {
      sides.add(record);
    }
  }

  [[nodiscard]] KappaTable table(AnalysisMode mode,
                                 const ExperimentConfig& config) const {
    return mode == AnalysisMode::Gill ? gill_kappa_table(pairs)
                                      : malus_kappa_table(sides, config);
  }

  [[nodiscard]] bool defined(AnalysisMode mode) const {
    if (mode == AnalysisMode::Gill) {
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t b = 0; b < 2; ++b) {
          if (pairs.cells[a][b].n_total() == 0) return false;
        }
      }
      return true;
    }
    for (const SideCounts* side : {&sides.left, &sides.right}) {
      for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t m = 0; m < 2; ++m) {
          if (side->cells[l][m].exposures == 0) return false;
        }
      }
    }
    return true;
  }
};

}  // namespace detail

/// Full-log statistics, no running curve.
inline CorrelationReport analyze(std::span<const TrialRecord> log,
                                 const ExperimentConfig& config,
                                 AnalysisMode mode) {
  detail::RunningState state;
  for (const TrialRecord& record : log) state.add(record, mode);
  CorrelationReport report;
  report.mode = mode;
  report.kappa = state.table(mode, config);
  report.contrast_s = chsh(report.kappa);
  return report;
}

/// Full-log statistics plus the running-convergence curve: all four kappa
/// and S recomputed on every prefix whose length is a multiple of stride.
/// Prefixes where any required denominator is zero are skipped, not
/// emitted, so the curve stays numeric.
inline CorrelationReport running_report(std::span<const TrialRecord> log,
                                        const ExperimentConfig& config,
                                        AnalysisMode mode,
                                        std::uint64_t stride) {
  if (stride < 1) {
    throw std::invalid_argument("running_report: stride must be >= 1");
  }

  detail::RunningState state;
  CorrelationReport report;
  report.mode = mode;
  for (std::uint64_t n = 0; n < log.size(); ++n) {
    state.add(log[n], mode);
    const std::uint64_t prefix = n + 1;
    if (prefix % stride == 0 && state.defined(mode)) {
      CurvePoint point;
      point.trial_index = prefix;
      point.kappa = state.table(mode, config);
      point.s = chsh(point.kappa);
      report.running_curve.push_back(point);
    }
  }
  report.kappa = state.table(mode, config);
  report.contrast_s = chsh(report.kappa);
  return report;
}

}  // namespace eprsim::analysis
