#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "dtmamba/hazard.hpp"

namespace dtmamba::metrics {

struct ScoredOutcome {
  double score = 0.0;
  hazard::Outcome outcome;
};

/// Harrell's C. A pair (i, j) is comparable when i has an event at t_i and
/// t_i < t_j (j's event or censoring time); it is concordant when
/// score_i > score_j, and a score tie counts one half. O(n log n).
double c_index(std::span<const ScoredOutcome> samples);

/// Mann-Whitney AUC for "event within `year` years" among samples whose label
/// is determinable at that horizon. Ties count one half.
double auc_at(std::span<const ScoredOutcome> samples, std::size_t year);

struct HorizonAuc {
  std::size_t year = 0;
  double auc = 0.0;
  bool defined = false;
  std::size_t determinable = 0;
  std::size_t positives = 0;
};

/// Scores are the per-horizon predicted cumulative risks P(k); the c-index
/// uses P(5y).
struct Report {
  double c_index = 0.0;
  bool c_index_defined = false;
  std::array<HorizonAuc, hazard::kHorizons> auc{};
};

Report evaluate(std::span<const hazard::RiskOutput> risks,
                std::span<const hazard::Outcome> outcomes);

}  // namespace dtmamba::metrics
