#include "dtmamba/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <random>

#include "dtmamba/errors.hpp"

namespace dtmamba::profiler {
namespace {

std::size_t fused_channels(const BlockConfig& c) {
  return c.fusion == FusionMode::state ? c.channels * c.state_size : c.channels;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BlockParams count_block_params(const BlockConfig& c) {
  c.validate();
  const std::size_t d = c.channels, n = c.state_size, width = d + 2 * n;
  BlockParams p;
  p.projection = d * width + width;
  p.a_log = d * n;
  p.skip = d;
  p.gamma = 1;
  if (c.fusion != FusionMode::none) {
    const auto kernels = c.kernel_set();
    for (const auto& k : kernels) p.fusion += fused_channels(c) * k.volume();
    p.fusion += kernels.size();
  }
  if (c.gate) p.gate = d * d + d;
  return p;
}

ParamCounts count_params(const ModelConfig& config) {
  ParamCounts out;
  out.block = count_block_params(config.block);
  out.layers = config.block.layers;
  out.stack = out.layers * out.block.total();
  const std::size_t d = config.block.channels;
  if (!config.precomputed_features) out.encoder = d * config.encoder.patch_width() + d;
  out.head = (1 + hazard::kHorizons) * d + (1 + hazard::kHorizons);
  out.total = out.stack + out.encoder + out.head;
  return out;
}

FlopCoefficients flop_coefficients(const BlockConfig& c) {
  c.validate();
  const auto d = static_cast<double>(c.channels);
  const auto n = static_cast<double>(c.state_size);
  const auto fc = static_cast<double>(fused_channels(c));
  FlopCoefficients f;
  f.projection = d * (d + 2.0 * n);
  f.step = c.time_aware ? d : 0.0;
  f.recurrence = 2.0 * d * n;
  f.readout = d * n;
  if (c.fusion != FusionMode::none) {
    const auto kernels = c.kernel_set();
    for (const auto& k : kernels) f.fusion += fc * static_cast<double>(k.volume());
    f.mixing = static_cast<double>(kernels.size()) * fc;
  }
  f.skip = d;
  if (c.gate) f.gate = d * d + d;
  return f;
}

double count_flops(const BlockConfig& config, std::size_t tokens) {
  if (tokens == 0) throw ConfigError("token count must be at least 1");
  const FlopCoefficients f = flop_coefficients(config);
  return static_cast<double>(config.layers) *
         (f.intercept() + f.per_token() * static_cast<double>(tokens));
}

double log_log_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("log_log_slope needs two or more paired points");
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DimensionError("log_log_slope: all x values are equal");
  return sxy / sxx;
}

BenchReport bench_throughput(const BlockConfig& config, std::span<const std::size_t> tokens,
                             std::size_t repeats, std::size_t warmup) {
  if (repeats == 0) throw ConfigError("repeats must be positive");
  using clock = std::chrono::steady_clock;
  const double resolution =
      static_cast<double>(clock::period::num) / static_cast<double>(clock::period::den);

  struct Case {
    BlockConfig config;
    ParameterStore store;
    std::unique_ptr<Block> block;
    Tensor input;
    VisitSchedule schedule;
    std::vector<double> times;
  };
  std::vector<Case> cases(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const std::size_t len = tokens[j];
    if (len == 0 || len % 64 != 0) {
      throw ConfigError("bench token counts must be positive multiples of 64");
    }
    Case& k = cases[j];
    k.config = config;
    k.config.height = k.config.width = 8;
    k.config.visits = len / 64;
    k.config.layers = 1;
    if (config.kernels.empty()) k.config.kernels.clear();  // re-clamp for this T
    std::mt19937_64 rng(1);
    k.block = std::make_unique<Block>(k.config, k.store, "bench.", rng);
    k.input = Tensor({k.config.channels, k.config.visits, 8, 8});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : k.input.values()) v = normal(rng);
    k.schedule = {std::vector<double>(k.config.visits, 24.0),
                  std::vector<std::uint8_t>(k.config.visits, 1)};
    k.schedule.gaps[0] = 0.0;
  }

  auto once = [&](Case& k) {
    GradTape tape;
    const auto t0 = clock::now();
    Var out = k.block->forward(k.store, tape.constant(k.input), k.schedule);
    const auto t1 = clock::now();
    if (!std::isfinite(out.value()[0])) throw NumericError("bench produced non-finite output");
    return std::chrono::duration<double>(t1 - t0).count();
  };
  for (std::size_t i = 0; i < warmup; ++i)
    for (Case& k : cases) once(k);
  // Round-robin over token counts so slow drift in machine speed lands on
  // every row alike.
  for (std::size_t i = 0; i < repeats; ++i)
    for (Case& k : cases) k.times.push_back(once(k));

  BenchReport report;
  report.repeats = repeats;
  std::vector<double> xs, ys, cvs;
  for (std::size_t j = 0; j < cases.size(); ++j) {
    const std::size_t len = tokens[j];
    const auto& times = cases[j].times;
    const double med = median(times);
    if (med < 1000.0 * resolution) {
      throw MeasurementError("median time " + std::to_string(med) + " s at L=" +
                             std::to_string(len) + " is too close to the clock resolution");
    }
    double mean = 0.0, var = 0.0;
    for (double t : times) mean += t;
    mean /= static_cast<double>(times.size());
    for (double t : times) var += (t - mean) * (t - mean);
    const double cv =
        times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) / mean : 0.0;

    report.rows.push_back({len, cases[j].config.visits, med, static_cast<double>(len) / med, cv});
    xs.push_back(static_cast<double>(len));
    ys.push_back(med);
    cvs.push_back(cv);
  }
  if (xs.size() >= 2) report.slope = log_log_slope(xs, ys);
  if (!cvs.empty()) report.median_cv = median(cvs);
  return report;
}

}  // namespace dtmamba::profiler
