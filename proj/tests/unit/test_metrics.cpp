#include <doctest.h>

#include <cmath>
#include <random>

#include "dtmamba/errors.hpp"
#include "dtmamba/metrics.hpp"

using namespace dtmamba;
using hazard::Outcome;
using metrics::ScoredOutcome;

namespace {

double brute_c_index(const std::vector<ScoredOutcome>& s) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s[i].outcome.event) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j == i || !(s[i].outcome.time < s[j].outcome.time)) continue;
      den += 1.0;
      if (s[i].score > s[j].score) num += 1.0;
      else if (s[i].score == s[j].score) num += 0.5;
    }
  }
  return num / den;
}

double brute_auc(const std::vector<ScoredOutcome>& s, std::size_t year) {
  double num = 0.0, den = 0.0;
  for (const auto& p : s) {
    if (hazard::horizon_label(p.outcome, year) != true) continue;
    for (const auto& n : s) {
      if (hazard::horizon_label(n.outcome, year) != false) continue;
      den += 1.0;
      if (p.score > n.score) num += 1.0;
      else if (p.score == n.score) num += 0.5;
    }
  }
  return num / den;
}

// Coarse scores and whole-month times so that ties of both kinds occur.
std::vector<ScoredOutcome> random_cohort(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> score(0, 6), month(1, 72);
  std::bernoulli_distribution event(0.5);
  std::vector<ScoredOutcome> out(n);
  for (auto& s : out) {
    s.score = score(rng) * 0.125;
    s.outcome = {event(rng), double(month(rng))};
  }
  return out;
}

}  // namespace

TEST_CASE("c-index") {
  std::vector<ScoredOutcome> perfect = {
      {0.9, Outcome::event_at(10)}, {0.5, Outcome::event_at(20)}, {0.1, Outcome::event_at(30)}};
  CHECK(metrics::c_index(perfect) == 1.0);
  for (auto& s : perfect) s.score = 0.3;
  CHECK(metrics::c_index(perfect) == 0.5);

  std::vector<ScoredOutcome> censored = {{0.2, Outcome::censored_at(10)},
                                         {0.4, Outcome::censored_at(20)}};
  CHECK_THROWS_AS(metrics::c_index(censored), UndefinedMetricError);
  // An event tied in time with the other sample is not comparable.
  std::vector<ScoredOutcome> tied_time = {{0.2, Outcome::event_at(10)},
                                          {0.4, Outcome::censored_at(10)}};
  CHECK_THROWS_AS(metrics::c_index(tied_time), UndefinedMetricError);
  std::vector<ScoredOutcome> bad = {{std::nan(""), Outcome::event_at(10)}};
  CHECK_THROWS_AS(metrics::c_index(bad), DataError);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_cohort(20 + trial % 11, rng);
    const double expected = brute_c_index(s);
    if (std::isnan(expected)) {
      CHECK_THROWS_AS(metrics::c_index(s), UndefinedMetricError);
      continue;
    }
    CHECK(metrics::c_index(s) == expected);
  }
}

TEST_CASE("c-index under score transforms") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> month(1.0, 70.0);
  std::bernoulli_distribution event(0.6);
  std::vector<ScoredOutcome> s(40);
  for (auto& x : s) x = {normal(rng), {event(rng), month(rng)}};
  const double c = metrics::c_index(s);
  auto mapped = s;
  for (auto& x : mapped) x.score = std::exp(3.0 * x.score) + 1.0;
  CHECK(metrics::c_index(mapped) == c);
  for (auto& x : mapped) x.score = -x.score;
  CHECK(std::abs(metrics::c_index(mapped) - (1.0 - c)) <= 1e-15);
}

TEST_CASE("AUC") {
  std::vector<ScoredOutcome> separated = {{0.9, Outcome::event_at(5)},
                                          {0.8, Outcome::event_at(11)},
                                          {0.2, Outcome::censored_at(40)},
                                          {0.1, Outcome::event_at(50)}};
  CHECK(metrics::auc_at(separated, 1) == 1.0);
  // Censored at 6 months: not determinable at one year, so ignored.
  separated.push_back({0.95, Outcome::censored_at(6)});
  CHECK(metrics::auc_at(separated, 1) == 1.0);
  CHECK_THROWS_AS(metrics::auc_at(separated, 5), UndefinedMetricError);

  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_cohort(30, rng);
    for (std::size_t year = 1; year <= 5; ++year) {
      std::size_t pos = 0, neg = 0;
      for (const auto& x : s) {
        auto l = hazard::horizon_label(x.outcome, year);
        if (l) ++(*l ? pos : neg);
      }
      if (!pos || !neg) {
        CHECK_THROWS_AS(metrics::auc_at(s, year), UndefinedMetricError);
        continue;
      }
      CHECK(metrics::auc_at(s, year) == brute_auc(s, year));
    }
  }

  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<ScoredOutcome> null(20000);
  for (auto& x : null) {
    x.score = uniform(rng);
    x.outcome = uniform(rng) < 0.3 ? Outcome::event_at(6) : Outcome::censored_at(80);
  }
  // sd of the null AUC is about 0.0045 here
  CHECK(std::abs(metrics::auc_at(null, 1) - 0.5) < 0.02);
}

TEST_CASE("evaluate") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<hazard::RiskOutput> risks(50);
  std::vector<Outcome> outcomes(50);
  for (std::size_t i = 0; i < 50; ++i) {
    double p = 0.0;
    for (auto& q : risks[i].probabilities) q = p += 0.2 * uniform(rng);
    outcomes[i] = uniform(rng) < 0.4 ? Outcome::event_at(1 + 70 * uniform(rng))
                                     : Outcome::censored_at(1 + 70 * uniform(rng));
  }
  outcomes[0] = Outcome::event_at(3);
  outcomes[1] = Outcome::censored_at(65);
  auto report = metrics::evaluate(risks, outcomes);
  std::vector<ScoredOutcome> s(50);
  for (std::size_t i = 0; i < 50; ++i) s[i] = {risks[i].probabilities[4], outcomes[i]};
  CHECK(report.c_index_defined);
  CHECK(report.c_index == metrics::c_index(s));
  for (std::size_t k = 1; k <= 5; ++k) {
    CAPTURE(k);
    std::size_t det = 0, pos = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      s[i].score = risks[i].probabilities[k - 1];
      if (auto l = hazard::horizon_label(outcomes[i], k)) {
        ++det;
        pos += *l;
      }
    }
    CHECK(report.auc[k - 1].year == k);
    CHECK(report.auc[k - 1].determinable == det);
    CHECK(report.auc[k - 1].positives == pos);
    REQUIRE(report.auc[k - 1].defined);
    CHECK(report.auc[k - 1].auc == metrics::auc_at(s, k));
  }

  std::vector<Outcome> all_censored(50, Outcome::censored_at(80));
  auto empty = metrics::evaluate(risks, all_censored);
  CHECK_FALSE(empty.c_index_defined);
  for (const auto& h : empty.auc) CHECK_FALSE(h.defined);
  CHECK_THROWS_AS(metrics::evaluate(risks, std::span<const Outcome>(outcomes).first(3)),
                  DimensionError);
}
