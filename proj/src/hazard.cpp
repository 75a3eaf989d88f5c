#include "dtmamba/hazard.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "dtmamba/errors.hpp"
#include "dtmamba/ops.hpp"

namespace dtmamba::hazard {

void Outcome::validate() const {
  if (!std::isfinite(time) || !(time > 0.0)) {
    throw DataError("outcome time must be positive, got " + std::to_string(time));
  }
}

std::optional<bool> horizon_label(const Outcome& outcome, std::size_t year) {
  const double horizon = kMonthsPerYear * static_cast<double>(year);
  if (outcome.event) return outcome.time <= horizon;
  if (outcome.time >= horizon) return false;
  return std::nullopt;
}

RiskOutput risk_from_head(std::span<const double> head) {
  if (head.size() != 1 + kHorizons) {
    throw DimensionError("hazard head output must have " +
                         std::to_string(1 + kHorizons) + " entries");
  }
  RiskOutput r;
  r.baseline_logit = head[0];
  double acc = head[0];
  for (std::size_t k = 0; k < kHorizons; ++k) {
    r.hazards[k] = ops::softplus(head[1 + k]);
    acc += r.hazards[k];
    r.logits[k] = acc;
    r.probabilities[k] = ops::sigmoid(acc);
  }
  return r;
}

RiskOutput risk_head(std::span<const double> z, const HeadParams& params) {
  const std::size_t d = z.size();
  if (params.weight.shape() != Shape{1 + kHorizons, d} ||
      params.bias.size() != 1 + kHorizons) {
    throw DimensionError("hazard head parameters do not match embedding width " +
                         std::to_string(d));
  }
  std::vector<double> head(1 + kHorizons);
  for (std::size_t r = 0; r < head.size(); ++r) {
    double acc = params.bias[r];
    for (std::size_t j = 0; j < d; ++j) acc += params.weight[r * d + j] * z[j];
    head[r] = acc;
  }
  return risk_from_head(head);
}

Var cumulative_logits(Var z, Var weight, Var bias) {
  const std::size_t d = z.value().size();
  Var head = ops::add_row_bias(ops::matmul(weight, ops::reshape(z, {d, 1})), bias);
  Var baseline = ops::select(head, 0);
  Var hazards = ops::softplus(ops::slice_rows(head, 1, kHorizons));
  return ops::add_scalar(ops::cumsum(ops::reshape(hazards, {kHorizons})), baseline);
}

ClassWeights class_weights(std::span<const Outcome> outcomes) {
  double pos = 0.0, neg = 0.0;
  for (const Outcome& o : outcomes) {
    for (std::size_t k = 1; k <= kHorizons; ++k) {
      if (auto label = horizon_label(o, k)) (*label ? pos : neg) += 1.0;
    }
  }
  ClassWeights w;
  if (pos > 0.0 && neg > 0.0) w.positive = neg / pos;
  return w;
}

namespace {

void check_weights(const ClassWeights& w) {
  if (!(w.positive > 0.0) || !(w.negative > 0.0)) {
    throw ConfigError("class weights must be positive");
  }
}

}  // namespace

std::optional<double> loss(const RiskOutput& risk, const Outcome& outcome,
                           const ClassWeights& weights) {
  check_weights(weights);
  double total = 0.0;
  bool any = false;
  for (std::size_t k = 0; k < kHorizons; ++k) {
    const auto label = horizon_label(outcome, k + 1);
    if (!label) continue;
    any = true;
    const double l = risk.logits[k];
    // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
    total += *label ? weights.positive * ops::softplus(-l)
                    : weights.negative * ops::softplus(l);
  }
  if (!any) return std::nullopt;
  return total;
}

std::optional<Var> loss(Var logits, const Outcome& outcome,
                        const ClassWeights& weights) {
  check_weights(weights);
  if (logits.value().size() != kHorizons) {
    throw DimensionError("loss expects " + std::to_string(kHorizons) + " logits");
  }
  std::vector<double> sign(kHorizons, 0.0), weight(kHorizons, 0.0);
  bool any = false;
  for (std::size_t k = 0; k < kHorizons; ++k) {
    const auto label = horizon_label(outcome, k + 1);
    if (!label) continue;
    any = true;
    sign[k] = *label ? -1.0 : 1.0;
    weight[k] = *label ? weights.positive : weights.negative;
  }
  if (!any) return std::nullopt;
  const Tensor& lv = logits.value();
  double total = 0.0;
  for (std::size_t k = 0; k < kHorizons; ++k) {
    if (weight[k] != 0.0) total += weight[k] * ops::softplus(sign[k] * lv[k]);
  }
  return logits.tape().record(
      Tensor::scalar(total), {logits},
      [logits, sign, weight](GradTape& t, const Tensor& g) {
        Tensor* gl = t.sink(logits);
        if (!gl) return;
        const Tensor& lv = logits.value();
        for (std::size_t k = 0; k < kHorizons; ++k) {
          if (weight[k] == 0.0) continue;
          (*gl)[k] += g[0] * weight[k] * sign[k] * ops::sigmoid(sign[k] * lv[k]);
        }
      });
}

}  // namespace dtmamba::hazard
