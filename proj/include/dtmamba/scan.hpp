#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dtmamba/tape.hpp"
#include "dtmamba/tensor.hpp"

// Time-aware selective scan over a flattened visit-major token sequence.
//
// Each channel c carries an N-dimensional diagonal state with eigenvalues
// lambda[c,k] = -exp(a_log[c,k]) < 0. Per token i the projection of u_i yields
// a content step delta_i (per channel) and shared input/output vectors
// B_i, C_i. The content step is stretched by the calendar gap:
//
//   delta_ta = delta * (1 + gamma * gap / tau_min)
//
// and the state advances with the exact zero-order-hold update
//
//   x[c,k,i] = exp(lambda*delta_ta) x[c,k,i-1]
//              + (exp(lambda*delta_ta) - 1) / lambda * B[k,i] * u[c,i]
//
// followed by the readout y[c,i] = sum_k C[k,i] x[c,k,i]. Tokens flagged
// invalid keep the state and emit zero.
namespace dtmamba::scan {

inline constexpr double kTauMinMonths = 12.0;

/// Below this |lambda * step| the ZOH gain uses its Taylor series.
inline constexpr double kSeriesThreshold = 1e-6;

struct ScanParams {
  Tensor a_log;   // [d, N]
  Tensor w_proj;  // [d + 2N, d]
  Tensor b_proj;  // [d + 2N]
  Tensor skip;    // [d]
  double gamma_logit = 0.0;
  double tau_min = kTauMinMonths;

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state_size() const { return a_log.dim(1); }
  double gamma() const;
  double lambda(std::size_t channel, std::size_t state) const;

  /// Zero projection, a_log = 0 (lambda = -1), D = 0, gamma = 0.5.
  static ScanParams zeros(std::size_t channels, std::size_t state_size);
  void validate() const;
};

/// Tokens in scan order with their calendar gaps and validity.
struct TokenSequence {
  Tensor tokens;                    // [d, L]; column i is u_i
  std::vector<double> gaps;         // months, one per token
  std::vector<std::uint8_t> valid;  // one per token

  std::size_t length() const { return tokens.dim(1); }
  void validate() const;
};

struct ProjectedParams {
  std::vector<double> delta;  // d, softplus-activated
  std::vector<double> b;      // N
  std::vector<double> c;      // N
};

ProjectedParams project_params(std::span<const double> token,
                               const ScanParams& params);

double time_aware_step(double delta, double gap, double gamma, double tau_min);

struct Discretized {
  double a_bar;
  double b_bar;
};

/// Exact ZOH pair for one diagonal coordinate.
Discretized discretize(double lambda, double step);

/// (exp(z) - 1) / z and its derivative, series-guarded near zero.
double zoh_phi(double z);
double zoh_phi_prime(double z);

/// Full scan (projection, time-aware step, recurrence, readout); returns
/// y as [d, L]. With time_aware = false the gap factor is dropped.
Tensor selective_scan(const TokenSequence& seq, const ScanParams& params,
                      bool time_aware = true);

/// Raw recurrence and readout on preactivated inputs. `states` (optional)
/// receives x as [d*N, L]; `readout_c` may be empty to skip the readout.
template <typename Real>
void scan_kernel(std::size_t d, std::size_t n, std::size_t length,
                 std::span<const Real> step, std::span<const Real> lambda,
                 std::span<const Real> b, std::span<const Real> readout_c,
                 std::span<const Real> u, std::span<const std::uint8_t> valid,
                 std::span<Real> y, std::span<Real> states);

// Tape operations.

/// delta * (1 + gamma * gap / tau_min) with gaps per column of delta [d, L].
/// Passing an unbound gamma disables the gap factor.
Var time_aware_step(Var delta, std::span<const double> gaps, Var gamma,
                    double tau_min);

/// Recurrence plus readout; returns y [d, L].
Var selective_scan(Var step, Var a_log, Var b, Var c, Var u,
                   std::span<const std::uint8_t> valid);

/// Recurrence only; returns states [d*N, L] (row c*N + k).
Var selective_scan_states(Var step, Var a_log, Var b, Var u,
                          std::span<const std::uint8_t> valid);

/// y[c,i] = sum_k C[k,i] * states[c*N+k, i].
Var state_readout(Var states, Var c);

}  // namespace dtmamba::scan
