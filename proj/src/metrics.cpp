#include "dtmamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

#include "dtmamba/errors.hpp"

namespace dtmamba::metrics {
namespace {

void check_scores(std::span<const ScoredOutcome> samples) {
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw DataError("non-finite risk score");
  }
}

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Count of inserted ranks < i.
  std::uint64_t prefix(std::size_t i) const {
    std::uint64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::uint64_t> tree_;
};

}  // namespace

double c_index(std::span<const ScoredOutcome> samples) {
  check_scores(samples);
  const std::size_t n = samples.size();
  std::vector<double> distinct(n);
  for (std::size_t i = 0; i < n; ++i) distinct[i] = samples[i].score;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  auto rank_of = [&](double s) {
    return static_cast<std::size_t>(
        std::lower_bound(distinct.begin(), distinct.end(), s) - distinct.begin());
  };

  std::vector<std::size_t> by_time(n);
  std::iota(by_time.begin(), by_time.end(), 0);
  std::sort(by_time.begin(), by_time.end(), [&](std::size_t a, std::size_t b) {
    return samples[a].outcome.time > samples[b].outcome.time;
  });

  // Sweep from the latest time down; everything already inserted has a
  // strictly later time than the current group.
  Fenwick tree(distinct.size());
  std::uint64_t inserted = 0, comparable = 0, twice_concordant = 0;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    const double t = samples[by_time[g]].outcome.time;
    while (end < n && samples[by_time[end]].outcome.time == t) ++end;
    for (std::size_t j = g; j < end; ++j) {
      const ScoredOutcome& s = samples[by_time[j]];
      if (!s.outcome.event) continue;
      const std::size_t r = rank_of(s.score);
      const std::uint64_t below = tree.prefix(r);
      const std::uint64_t tied = tree.prefix(r + 1) - below;
      comparable += inserted;
      twice_concordant += 2 * below + tied;
    }
    for (std::size_t j = g; j < end; ++j) {
      tree.add(rank_of(samples[by_time[j]].score));
      ++inserted;
    }
    g = end;
  }
  if (comparable == 0) throw UndefinedMetricError("c-index: no comparable pairs");
  return static_cast<double>(twice_concordant) /
         (2.0 * static_cast<double>(comparable));
}

double auc_at(std::span<const ScoredOutcome> samples, std::size_t year) {
  check_scores(samples);
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  for (const auto& s : samples) {
    if (auto label = hazard::horizon_label(s.outcome, year)) {
      items.push_back({s.score, *label});
    }
  }
  const auto pos = static_cast<std::size_t>(std::count_if(
      items.begin(), items.end(), [](const Item& i) { return i.positive; }));
  const std::size_t neg = items.size() - pos;
  if (pos == 0 || neg == 0) {
    throw UndefinedMetricError("AUC at " + std::to_string(year) +
                               "y: only one class among determinable samples");
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score < b.score; });
  // Sum of 2 * (average rank) over positives keeps everything integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    const std::uint64_t twice_avg_rank = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (items[k].positive) twice_rank_sum += twice_avg_rank;
    }
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - pos * (pos + 1);
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

Report evaluate(std::span<const hazard::RiskOutput> risks,
                std::span<const hazard::Outcome> outcomes) {
  if (risks.size() != outcomes.size()) {
    throw DimensionError("evaluate: risks and outcomes differ in length");
  }
  Report report;
  std::vector<ScoredOutcome> samples(risks.size());
  for (std::size_t i = 0; i < risks.size(); ++i) {
    samples[i] = {risks[i].probabilities[hazard::kHorizons - 1], outcomes[i]};
  }
  try {
    report.c_index = c_index(samples);
    report.c_index_defined = true;
  } catch (const UndefinedMetricError&) {
  }
  for (std::size_t k = 1; k <= hazard::kHorizons; ++k) {
    HorizonAuc& h = report.auc[k - 1];
    h.year = k;
    for (std::size_t i = 0; i < risks.size(); ++i) {
      samples[i].score = risks[i].probabilities[k - 1];
      if (auto label = hazard::horizon_label(outcomes[i], k)) {
        ++h.determinable;
        if (*label) ++h.positives;
      }
    }
    try {
      h.auc = auc_at(samples, k);
      h.defined = true;
    } catch (const UndefinedMetricError&) {
    }
  }
  return report;
}

}  // namespace dtmamba::metrics
