#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>

#include "dtmamba/tape.hpp"
#include "dtmamba/tensor.hpp"

namespace dtmamba::hazard {

inline constexpr std::size_t kHorizons = 5;
inline constexpr double kMonthsPerYear = 12.0;

/// Event at `time` months after the reference exam, or censored at `time`.
struct Outcome {
  bool event = false;
  double time = 0.0;

  static Outcome event_at(double months) { return {true, months}; }
  static Outcome censored_at(double months) { return {false, months}; }
  void validate() const;
};

/// Label for "event within `year` years"; nullopt when censoring hides it.
std::optional<bool> horizon_label(const Outcome& outcome, std::size_t year);

struct RiskOutput {
  double baseline_logit = 0.0;
  std::array<double, kHorizons> hazards{};        // H_1..H_5 >= 0
  std::array<double, kHorizons> logits{};         // B_r + sum_{i<=k} H_i
  std::array<double, kHorizons> probabilities{};  // sigmoid(logits)
};

/// Linear heads: row 0 is the baseline, rows 1..5 the hazard pre-activations.
struct HeadParams {
  Tensor weight;  // [1 + kHorizons, d]
  Tensor bias;    // [1 + kHorizons]
};

RiskOutput risk_head(std::span<const double> z, const HeadParams& params);

/// Cumulative logits from an embedding z [d] on a tape; returns [kHorizons].
Var cumulative_logits(Var z, Var weight, Var bias);
/// Fills a RiskOutput from the [1 + kHorizons] head output (pre-activation).
RiskOutput risk_from_head(std::span<const double> head);

struct ClassWeights {
  double positive = 1.0;
  double negative = 1.0;
};

/// positive = negatives / positives over every determinable (sample, horizon)
/// label of a training split; negative = 1.
ClassWeights class_weights(std::span<const Outcome> outcomes);

/// Weighted BCE summed over determinable horizons; nullopt when none is
/// determinable.
std::optional<double> loss(const RiskOutput& risk, const Outcome& outcome,
                           const ClassWeights& weights);

/// Tape version on cumulative logits [kHorizons].
std::optional<Var> loss(Var logits, const Outcome& outcome,
                        const ClassWeights& weights);

}  // namespace dtmamba::hazard
