#include "dtmamba/scan.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "dtmamba/errors.hpp"
#include "dtmamba/ops.hpp"

namespace dtmamba::scan {

double ScanParams::gamma() const { return ops::sigmoid(gamma_logit); }

double ScanParams::lambda(std::size_t channel, std::size_t state) const {
  return -std::exp(a_log[channel * state_size() + state]);
}

ScanParams ScanParams::zeros(std::size_t channels, std::size_t state_size) {
  const std::size_t width = channels + 2 * state_size;
  ScanParams p;
  p.a_log = Tensor(Shape{channels, state_size});
  p.w_proj = Tensor(Shape{width, channels});
  p.b_proj = Tensor(Shape{width});
  p.skip = Tensor(Shape{channels});
  return p;
}

void ScanParams::validate() const {
  if (a_log.rank() != 2) throw ConfigError("a_log must be [d, N]");
  const std::size_t d = channels(), n = state_size();
  if (w_proj.rank() != 2 || w_proj.dim(1) != d) {
    throw ConfigError("w_proj must be [d + 2N, d], got " +
                      shape_str(w_proj.shape()));
  }
  if (w_proj.dim(0) != d + 2 * n || b_proj.size() != d + 2 * n) {
    throw ConfigError("projection width " + std::to_string(w_proj.dim(0)) +
                      " != d + 2N = " + std::to_string(d + 2 * n));
  }
  if (skip.size() != d) throw ConfigError("skip must have d entries");
  if (!(tau_min > 0.0)) throw ConfigError("tau_min must be positive");
}

void TokenSequence::validate() const {
  if (tokens.rank() != 2) {
    throw DimensionError("token sequence must be [d, L], got " +
                         shape_str(tokens.shape()));
  }
  const std::size_t len = tokens.dim(1);
  if (gaps.size() != len || valid.size() != len) {
    throw DimensionError("gaps/valid length does not match token count " +
                         std::to_string(len));
  }
  bool seen_valid = false;
  for (std::size_t i = 0; i < len; ++i) {
    if (!std::isfinite(gaps[i]) || gaps[i] < 0.0) {
      throw DataError("negative or non-finite gap at token " + std::to_string(i));
    }
    if (!valid[i]) {
      if (gaps[i] != 0.0) {
        throw DataError("nonzero gap at padded token " + std::to_string(i));
      }
      continue;
    }
    if (!seen_valid && gaps[i] != 0.0) {
      throw DataError("first valid token must have gap 0, got " +
                      std::to_string(gaps[i]));
    }
    seen_valid = true;
  }
}

ProjectedParams project_params(std::span<const double> token,
                               const ScanParams& params) {
  const std::size_t d = params.a_log.dim(0), n = params.a_log.dim(1);
  const std::size_t width = params.w_proj.rank() == 2 ? params.w_proj.dim(0) : 0;
  if (width != d + 2 * n || params.b_proj.size() != width) {
    throw ConfigError("projection output width " + std::to_string(width) +
                      " != d + 2N = " + std::to_string(d + 2 * n));
  }
  if (token.size() != d || params.w_proj.dim(1) != d) {
    throw DimensionError("token width " + std::to_string(token.size()) +
                         " != d = " + std::to_string(d));
  }
  std::vector<double> z(width);
  for (std::size_t r = 0; r < width; ++r) {
    double acc = params.b_proj[r];
    for (std::size_t j = 0; j < d; ++j) acc += params.w_proj[r * d + j] * token[j];
    z[r] = acc;
  }
  ProjectedParams out;
  out.delta.resize(d);
  for (std::size_t j = 0; j < d; ++j) out.delta[j] = ops::softplus(z[j]);
  out.b.assign(z.begin() + static_cast<long>(d), z.begin() + static_cast<long>(d + n));
  out.c.assign(z.begin() + static_cast<long>(d + n), z.end());
  return out;
}

double time_aware_step(double delta, double gap, double gamma, double tau_min) {
  if (gap < 0.0) {
    throw DataError("negative visit gap " + std::to_string(gap));
  }
  return delta * (1.0 + gamma * gap / tau_min);
}

double zoh_phi(double z) {
  if (std::abs(z) < kSeriesThreshold) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

double zoh_phi_prime(double z) {
  if (std::abs(z) < 1e-3) {
    return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
  }
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

Discretized discretize(double lambda, double step) {
  if (lambda == 0.0) {
    throw NumericError("discretize: lambda = 0 makes the ZOH gain singular");
  }
  if (!(lambda < 0.0) || !std::isfinite(lambda)) {
    throw DataError("discretize: lambda must be negative, got " +
                    std::to_string(lambda));
  }
  if (!(step >= 0.0) || !std::isfinite(step)) {
    throw DataError("discretize: step must be finite and >= 0");
  }
  const double z = lambda * step;
  return {std::exp(z), step * zoh_phi(z)};
}

namespace {

template <typename Real>
inline Real zoh_gain(Real lambda, Real step, Real a_bar) {
  const Real z = lambda * step;
  if (std::abs(z) < static_cast<Real>(kSeriesThreshold)) {
    return step * (Real(1) + z / Real(2) + z * z / Real(6));
  }
  // a_bar - 1 cancels badly for small |z|
  if (std::abs(z) < static_cast<Real>(1e-2)) return std::expm1(z) / lambda;
  return (a_bar - Real(1)) / lambda;
}

}  // namespace

template <typename Real>
void scan_kernel(std::size_t d, std::size_t n, std::size_t length,
                 std::span<const Real> step, std::span<const Real> lambda,
                 std::span<const Real> b, std::span<const Real> readout_c,
                 std::span<const Real> u, std::span<const std::uint8_t> valid,
                 std::span<Real> y, std::span<Real> states) {
  const bool readout = !readout_c.empty();
  const bool keep = !states.empty();
  std::vector<Real> x(n);
  for (std::size_t c = 0; c < d; ++c) {
    std::fill(x.begin(), x.end(), Real(0));
    const Real* lam = lambda.data() + c * n;
    for (std::size_t i = 0; i < length; ++i) {
      if (valid[i]) {
        const Real s = step[c * length + i];
        const Real uci = u[c * length + i];
        Real acc = 0;
        bool finite = true;
        for (std::size_t k = 0; k < n; ++k) {
          const Real a = std::exp(lam[k] * s);
          const Real g = zoh_gain(lam[k], s, a);
          x[k] = a * x[k] + g * b[k * length + i] * uci;
          finite = finite && std::isfinite(x[k]);
          if (readout) acc += readout_c[k * length + i] * x[k];
        }
        if (!finite) {
          throw NumericError("non-finite scan state at token " +
                             std::to_string(i) + " (channel " +
                             std::to_string(c) + ")");
        }
        if (readout) y[c * length + i] = acc;
      } else if (readout) {
        y[c * length + i] = 0;
      }
      if (keep) {
        for (std::size_t k = 0; k < n; ++k) {
          states[(c * n + k) * length + i] = x[k];
        }
      }
    }
  }
}

template void scan_kernel<double>(std::size_t, std::size_t, std::size_t,
                                  std::span<const double>, std::span<const double>,
                                  std::span<const double>, std::span<const double>,
                                  std::span<const double>,
                                  std::span<const std::uint8_t>, std::span<double>,
                                  std::span<double>);
template void scan_kernel<float>(std::size_t, std::size_t, std::size_t,
                                 std::span<const float>, std::span<const float>,
                                 std::span<const float>, std::span<const float>,
                                 std::span<const float>,
                                 std::span<const std::uint8_t>, std::span<float>,
                                 std::span<float>);

Tensor selective_scan(const TokenSequence& seq, const ScanParams& params,
                      bool time_aware) {
  params.validate();
  seq.validate();
  const std::size_t d = params.channels(), n = params.state_size();
  const std::size_t len = seq.length();
  if (seq.tokens.dim(0) != d) {
    throw DimensionError("token width " + std::to_string(seq.tokens.dim(0)) +
                         " != d = " + std::to_string(d));
  }
  const double gamma = time_aware ? params.gamma() : 0.0;
  std::vector<double> step(d * len), b(n * len), c(n * len), u(d * len);
  std::vector<double> token(d);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < d; ++j) token[j] = seq.tokens[j * len + i];
    const ProjectedParams p = project_params(token, params);
    const double gap = seq.valid[i] ? seq.gaps[i] : 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      step[j * len + i] = time_aware_step(p.delta[j], gap, gamma, params.tau_min);
      u[j * len + i] = token[j];
    }
    for (std::size_t k = 0; k < n; ++k) {
      b[k * len + i] = p.b[k];
      c[k * len + i] = p.c[k];
    }
  }
  std::vector<double> lambda(d * n);
  for (std::size_t i = 0; i < lambda.size(); ++i) lambda[i] = -std::exp(params.a_log[i]);
  Tensor y(Shape{d, len});
  scan_kernel<double>(d, n, len, step, lambda, b, c, u, seq.valid, y.values(), {});
  return y;
}

Var time_aware_step(Var delta, std::span<const double> gaps, Var gamma,
                    double tau_min) {
  const Tensor& dv = delta.value();
  if (dv.rank() != 2 || dv.dim(1) != gaps.size()) {
    throw DimensionError("time_aware_step: delta " + shape_str(dv.shape()) +
                         " with " + std::to_string(gaps.size()) + " gaps");
  }
  for (double g : gaps) {
    if (g < 0.0) throw DataError("negative visit gap " + std::to_string(g));
  }
  if (!gamma.valid()) return delta;
  if (gamma.value().size() != 1) throw DimensionError("gamma must be a scalar");
  const std::size_t rows = dv.dim(0), len = dv.dim(1);
  const double gv = gamma.value()[0];
  Tensor out = dv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < len; ++i) {
      out[r * len + i] *= 1.0 + gv * gaps[i] / tau_min;
    }
  }
  std::vector<double> g(gaps.begin(), gaps.end());
  return delta.tape().record(
      std::move(out), {delta, gamma},
      [delta, gamma, g = std::move(g), tau_min, rows, len](GradTape& t,
                                                           const Tensor& go) {
        const Tensor& dv = delta.value();
        const double gv = gamma.value()[0];
        if (Tensor* gd = t.sink(delta)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < len; ++i) {
              (*gd)[r * len + i] += go[r * len + i] * (1.0 + gv * g[i] / tau_min);
            }
          }
        }
        if (Tensor* gg = t.sink(gamma)) {
          double acc = 0.0;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < len; ++i) {
              acc += go[r * len + i] * dv[r * len + i] * g[i] / tau_min;
            }
          }
          (*gg)[0] += acc;
        }
      });
}

namespace {

struct ScanShape {
  std::size_t d, n, len;
};

ScanShape check_scan_inputs(Var step, Var a_log, Var b, Var u,
                            std::span<const std::uint8_t> valid) {
  const Tensor& av = a_log.value();
  if (av.rank() != 2) throw DimensionError("a_log must be [d, N]");
  const std::size_t d = av.dim(0), n = av.dim(1);
  const Tensor& sv = step.value();
  const Tensor& uv = u.value();
  const Tensor& bv = b.value();
  if (sv.rank() != 2 || sv.dim(0) != d) {
    throw DimensionError("step must be [d, L], got " + shape_str(sv.shape()));
  }
  const std::size_t len = sv.dim(1);
  if (uv.shape() != sv.shape()) {
    throw DimensionError("u " + shape_str(uv.shape()) + " vs step " +
                         shape_str(sv.shape()));
  }
  if (bv.rank() != 2 || bv.dim(0) != n || bv.dim(1) != len) {
    throw DimensionError("B must be [N, L], got " + shape_str(bv.shape()));
  }
  if (valid.size() != len) throw DimensionError("validity mask length mismatch");
  return {d, n, len};
}

std::vector<double> lambdas_of(const Tensor& a_log) {
  std::vector<double> lam(a_log.size());
  for (std::size_t i = 0; i < lam.size(); ++i) lam[i] = -std::exp(a_log[i]);
  return lam;
}

// Reverse sweep shared by the fused and state-only scans. `inject(c, k, i)`
// returns dL/dx[c,k,i] arriving from outside the recurrence.
template <typename Inject>
void scan_backward(const ScanShape& sh, const std::vector<double>& lam,
                   const Tensor& step, const Tensor& b, const Tensor& u,
                   std::span<const std::uint8_t> valid,
                   const std::vector<double>& states, Inject&& inject,
                   Tensor* g_step, std::vector<double>& g_lambda, Tensor* g_b,
                   Tensor* g_u) {
  const std::size_t d = sh.d, n = sh.n, len = sh.len;
  std::vector<double> carry(n);
  for (std::size_t c = 0; c < d; ++c) {
    std::fill(carry.begin(), carry.end(), 0.0);
    for (std::size_t i = len; i-- > 0;) {
      for (std::size_t k = 0; k < n; ++k) carry[k] += inject(c, k, i);
      if (!valid[i]) continue;
      const double s = step[c * len + i];
      const double uci = u[c * len + i];
      double gs = 0.0, gu = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double l = lam[c * n + k];
        const double z = l * s;
        const double a = std::exp(z);
        const double gain = s * zoh_phi(z);
        const double bk = b[k * len + i];
        const double prev = i > 0 ? states[(c * n + k) * len + i - 1] : 0.0;
        const double gx = carry[k];
        const double ga = gx * prev;
        const double gg = gx * bk * uci;
        gs += ga * l * a + gg * a;
        g_lambda[c * n + k] += ga * s * a + gg * s * s * zoh_phi_prime(z);
        gu += gx * gain * bk;
        if (g_b) (*g_b)[k * len + i] += gx * gain * uci;
        carry[k] = gx * a;
      }
      if (g_step) (*g_step)[c * len + i] += gs;
      if (g_u) (*g_u)[c * len + i] += gu;
    }
  }
}

void push_a_log_grad(GradTape& t, Var a_log, const std::vector<double>& lam,
                     const std::vector<double>& g_lambda) {
  if (Tensor* ga = t.sink(a_log)) {
    // d lambda / d a_log = lambda
    for (std::size_t i = 0; i < lam.size(); ++i) (*ga)[i] += g_lambda[i] * lam[i];
  }
}

}  // namespace

Var selective_scan(Var step, Var a_log, Var b, Var c, Var u,
                   std::span<const std::uint8_t> valid) {
  const ScanShape sh = check_scan_inputs(step, a_log, b, u, valid);
  if (c.shape() != b.shape()) {
    throw DimensionError("C must match B's shape [N, L]");
  }
  auto lam = std::make_shared<const std::vector<double>>(lambdas_of(a_log.value()));
  auto states = std::make_shared<std::vector<double>>(sh.d * sh.n * sh.len);
  Tensor y(Shape{sh.d, sh.len});
  scan_kernel<double>(sh.d, sh.n, sh.len, step.value().values(), *lam,
                      b.value().values(), c.value().values(), u.value().values(),
                      valid, y.values(), *states);
  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  return step.tape().record(
      std::move(y), {step, a_log, b, c, u},
      [=, mask = std::move(mask)](GradTape& t, const Tensor& gy) {
        const Tensor& cv = c.value();
        const std::size_t len = sh.len, n = sh.n;
        const std::vector<double>& st = *states;
        if (Tensor* gc = t.sink(c)) {
          for (std::size_t ch = 0; ch < sh.d; ++ch) {
            for (std::size_t k = 0; k < n; ++k) {
              for (std::size_t i = 0; i < len; ++i) {
                if (mask[i]) {
                  (*gc)[k * len + i] += gy[ch * len + i] * st[(ch * n + k) * len + i];
                }
              }
            }
          }
        }
        std::vector<double> g_lambda(lam->size(), 0.0);
        scan_backward(
            sh, *lam, step.value(), b.value(), u.value(), mask, st,
            [&](std::size_t ch, std::size_t k, std::size_t i) {
              return mask[i] ? cv[k * len + i] * gy[ch * len + i] : 0.0;
            },
            t.sink(step), g_lambda, t.sink(b), t.sink(u));
        push_a_log_grad(t, a_log, *lam, g_lambda);
      });
}

Var selective_scan_states(Var step, Var a_log, Var b, Var u,
                          std::span<const std::uint8_t> valid) {
  const ScanShape sh = check_scan_inputs(step, a_log, b, u, valid);
  auto lam = std::make_shared<const std::vector<double>>(lambdas_of(a_log.value()));
  auto states = std::make_shared<std::vector<double>>(sh.d * sh.n * sh.len);
  scan_kernel<double>(sh.d, sh.n, sh.len, step.value().values(), *lam,
                      b.value().values(), {}, u.value().values(), valid, {},
                      *states);
  Tensor out(Shape{sh.d * sh.n, sh.len}, *states);
  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  return step.tape().record(
      std::move(out), {step, a_log, b, u},
      [=, mask = std::move(mask)](GradTape& t, const Tensor& gs) {
        std::vector<double> g_lambda(lam->size(), 0.0);
        scan_backward(
            sh, *lam, step.value(), b.value(), u.value(), mask, *states,
            [&](std::size_t ch, std::size_t k, std::size_t i) {
              return gs[(ch * sh.n + k) * sh.len + i];
            },
            t.sink(step), g_lambda, t.sink(b), t.sink(u));
        push_a_log_grad(t, a_log, *lam, g_lambda);
      });
}

Var state_readout(Var states, Var c) {
  const Tensor& sv = states.value();
  const Tensor& cv = c.value();
  if (sv.rank() != 2 || cv.rank() != 2 || sv.dim(1) != cv.dim(1) ||
      sv.dim(0) % cv.dim(0) != 0) {
    throw DimensionError("state_readout: states " + shape_str(sv.shape()) +
                         " with C " + shape_str(cv.shape()));
  }
  const std::size_t n = cv.dim(0), len = cv.dim(1), d = sv.dim(0) / n;
  Tensor y(Shape{d, len});
  for (std::size_t ch = 0; ch < d; ++ch) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < len; ++i) {
        y[ch * len + i] += cv[k * len + i] * sv[(ch * n + k) * len + i];
      }
    }
  }
  return states.tape().record(std::move(y), {states, c},
                              [=](GradTape& t, const Tensor& gy) {
    const Tensor& sv = states.value();
    const Tensor& cv = c.value();
    Tensor* gs = t.sink(states);
    Tensor* gc = t.sink(c);
    for (std::size_t ch = 0; ch < d; ++ch) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < len; ++i) {
          const double g = gy[ch * len + i];
          if (gs) (*gs)[(ch * n + k) * len + i] += g * cv[k * len + i];
          if (gc) (*gc)[k * len + i] += g * sv[(ch * n + k) * len + i];
        }
      }
    }
  });
}

}  // namespace dtmamba::scan
