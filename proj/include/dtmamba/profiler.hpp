#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dtmamba/block.hpp"
#include "dtmamba/model.hpp"

namespace dtmamba::profiler {

/// Closed-form parameter counts for one block.
struct BlockParams {
  std::size_t projection = 0;  // d*(d+2N) + (d+2N)
  std::size_t a_log = 0;       // d*N
  std::size_t skip = 0;        // d
  std::size_t gamma = 0;       // 1
  std::size_t fusion = 0;      // sum_s c*kt*kh*kw + |K|, c = d (or d*N in state mode)
  std::size_t gate = 0;        // d*d + d when gated

  std::size_t total() const { return projection + a_log + skip + gamma + fusion + gate; }
};

struct ParamCounts {
  BlockParams block;
  std::size_t layers = 0;
  std::size_t stack = 0;    // layers * block.total()
  std::size_t encoder = 0;  // patch projection, when images are encoded
  std::size_t head = 0;     // (1 + 5) * d + 6
  std::size_t total = 0;
};

BlockParams count_block_params(const BlockConfig& config);
ParamCounts count_params(const ModelConfig& config);

/// Per-token fused multiply-add coefficients of one block. Every term is
/// linear in the token count and there is no constant term.
struct FlopCoefficients {
  double projection = 0;  // d*(d+2N)
  double step = 0;        // d: delta * (1 + gamma * gap / tau)
  double recurrence = 0;  // 2*d*N: a_bar*h + b_bar*u
  double readout = 0;     // d*N: C . h
  double fusion = 0;      // sum_s c*kt*kh*kw
  double mixing = 0;      // |K| * c
  double skip = 0;        // d
  double gate = 0;        // d*d + d when gated

  double per_token() const {
    return projection + step + recurrence + readout + fusion + mixing + skip + gate;
  }
  double intercept() const { return 0.0; }
};

FlopCoefficients flop_coefficients(const BlockConfig& config);

/// FMAs of `layers` blocks over `tokens` tokens.
double count_flops(const BlockConfig& config, std::size_t tokens);

struct BenchRow {
  std::size_t tokens = 0;
  std::size_t visits = 0;
  double median_seconds = 0.0;
  double tokens_per_second = 0.0;
  double coefficient_of_variation = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double slope = 0.0;  // least squares of log(time) on log(tokens)
  std::size_t repeats = 0;
  double median_cv = 0.0;
};

/// Times one block forward on an 8x8 grid with T = L / 64 visits. Throws
/// MeasurementError when a median is too close to the clock resolution.
BenchReport bench_throughput(const BlockConfig& config, std::span<const std::size_t> tokens,
                             std::size_t repeats, std::size_t warmup = 2);

/// Least-squares slope of log(y) against log(x).
double log_log_slope(std::span<const double> x, std::span<const double> y);

}  // namespace dtmamba::profiler
