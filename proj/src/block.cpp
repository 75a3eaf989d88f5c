#include "dtmamba/block.hpp"

#include <cmath>

#include "dtmamba/errors.hpp"
#include "dtmamba/ops.hpp"

namespace dtmamba {

std::string to_string(ScanOrder order) {
  return order == ScanOrder::raster ? "raster" : "interslice";
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::readout: return "readout";
    case FusionMode::state: return "state";
    case FusionMode::none: return "none";
  }
  return "readout";
}

ScanOrder scan_order_from_string(const std::string& s) {
  if (s == "raster") return ScanOrder::raster;
  if (s == "interslice") return ScanOrder::interslice;
  throw ConfigError("unknown scan order '" + s + "'");
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "readout") return FusionMode::readout;
  if (s == "state") return FusionMode::state;
  if (s == "none") return FusionMode::none;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

std::vector<fusion::KernelExtent> BlockConfig::kernel_set() const {
  if (!kernels.empty()) return kernels;
  return fusion::clamp_kernels(static_cast<long>(visits));
}

void BlockConfig::validate() const {
  if (channels == 0 || state_size == 0 || visits == 0 || height == 0 ||
      width == 0) {
    throw ConfigError("block extents must all be >= 1");
  }
  if (layers == 0) throw ConfigError("a block stack needs at least one layer");
  if (!(tau_min > 0.0)) throw ConfigError("tau_min must be positive");
  if (!(dt_init_min > 0.0) || dt_init_max < dt_init_min) {
    throw ConfigError("invalid dt init range");
  }
  for (const auto& e : kernel_set()) {
    if (e.t % 2 == 0 || e.h % 2 == 0 || e.w % 2 == 0) {
      throw ConfigError("fusion kernel extents must be odd");
    }
    if (e.t > visits) {
      throw ConfigError("kernel temporal extent " + std::to_string(e.t) +
                        " exceeds visit count " + std::to_string(visits));
    }
  }
}

void VisitSchedule::validate(std::size_t visits) const {
  if (gaps.size() != visits || valid.size() != visits) {
    throw DimensionError("visit schedule covers " + std::to_string(gaps.size()) +
                         " gaps / " + std::to_string(valid.size()) +
                         " flags, grid has " + std::to_string(visits) + " visits");
  }
  bool seen = false;
  for (std::size_t t = 0; t < visits; ++t) {
    if (!std::isfinite(gaps[t]) || gaps[t] < 0.0) {
      throw DataError("negative or non-finite gap at visit " + std::to_string(t));
    }
    if (!valid[t] && gaps[t] != 0.0) {
      throw DataError("padded visit " + std::to_string(t) + " has a nonzero gap");
    }
    if (valid[t] && !seen && gaps[t] != 0.0) {
      throw DataError("first valid visit must have gap 0");
    }
    seen = seen || valid[t];
  }
}

TokenLayout make_token_layout(const BlockConfig& c, const VisitSchedule& s) {
  s.validate(c.visits);
  const std::size_t plane = c.height * c.width;
  const std::size_t len = c.tokens();
  TokenLayout out;
  out.order.resize(len);
  out.inverse.resize(len);
  out.gaps.assign(len, 0.0);
  out.valid.resize(len);
  out.raster_valid.resize(len);
  for (std::size_t r = 0; r < len; ++r) out.raster_valid[r] = s.valid[r / plane];

  std::size_t pos = 0;
  if (c.order == ScanOrder::raster) {
    for (std::size_t r = 0; r < len; ++r) {
      const std::size_t t = r / plane;
      out.order[pos] = r;
      // Only the first token of a visit crosses the calendar gap.
      out.gaps[pos] = (r % plane == 0) ? s.gaps[t] : 0.0;
      ++pos;
    }
  } else {
    for (std::size_t p = 0; p < plane; ++p) {
      for (std::size_t t = 0; t < c.visits; ++t) {
        out.order[pos] = t * plane + p;
        out.gaps[pos] = s.gaps[t];
        ++pos;
      }
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    out.inverse[out.order[i]] = i;
    out.valid[i] = out.raster_valid[out.order[i]];
  }
  return out;
}

namespace {

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

}  // namespace

Block::Block(const BlockConfig& config, ParameterStore& store,
             std::string prefix, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.channels, n = config_.state_size;
  const std::size_t width = config_.projection_width();

  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor w(Shape{width, d});
  for (double& v : w.values()) v = normal(rng);
  Tensor b(Shape{width});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double lo = std::log(config_.dt_init_min), hi = std::log(config_.dt_init_max);
  for (std::size_t j = 0; j < d; ++j) {
    b[j] = inverse_softplus(std::exp(lo + (hi - lo) * unit(rng)));
  }
  Tensor a_log(Shape{d, n});
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t k = 0; k < n; ++k) {
      a_log[c * n + k] = std::log(static_cast<double>(k + 1));
    }
  }

  w_proj_ = store.add(prefix + "w_proj", std::move(w));
  b_proj_ = store.add(prefix + "b_proj", std::move(b));
  a_log_ = store.add(prefix + "a_log", std::move(a_log));
  skip_ = store.add(prefix + "skip", Tensor(Shape{d}));
  gamma_ = store.add(prefix + "gamma_logit",
                     Tensor::scalar(config_.gamma_init_logit));
  owned_ = {w_proj_, b_proj_, a_log_, skip_, gamma_};

  if (config_.fusion != FusionMode::none) {
    const std::size_t fused_channels =
        config_.fusion == FusionMode::state ? d * n : d;
    auto fp = fusion::FusionParams::init(fused_channels, config_.kernel_set(),
                                         config_.fusion_init_noise, rng);
    for (std::size_t s = 0; s < fp.filters.size(); ++s) {
      filters_.push_back(
          store.add(prefix + "filter" + std::to_string(s), std::move(fp.filters[s])));
      owned_.push_back(filters_.back());
    }
    alpha_ = store.add(prefix + "alpha", std::move(fp.alpha));
    owned_.push_back(alpha_);
  }
  if (config_.gate) {
    Tensor wg(Shape{d, d});
    for (double& v : wg.values()) v = normal(rng);
    w_gate_ = store.add(prefix + "w_gate", std::move(wg));
    b_gate_ = store.add(prefix + "b_gate", Tensor(Shape{d}));
    owned_.push_back(w_gate_);
    owned_.push_back(b_gate_);
  }
}

std::size_t Block::parameter_count(const ParameterStore& store) const {
  std::size_t n = 0;
  for (std::size_t i : owned_) n += store.value(i).size();
  return n;
}

scan::ScanParams Block::scan_params(const ParameterStore& store) const {
  scan::ScanParams p;
  p.a_log = store.value(a_log_);
  p.w_proj = store.value(w_proj_);
  p.b_proj = store.value(b_proj_);
  p.skip = store.value(skip_);
  p.gamma_logit = store.value(gamma_).item();
  p.tau_min = config_.tau_min;
  return p;
}

fusion::FusionParams Block::fusion_params(const ParameterStore& store) const {
  if (config_.fusion == FusionMode::none) {
    return fusion::FusionParams::identity(config_.channels, config_.kernel_set());
  }
  fusion::FusionParams p;
  p.kernels = config_.kernel_set();
  for (std::size_t i : filters_) p.filters.push_back(store.value(i));
  p.alpha = store.value(alpha_);
  return p;
}

Var Block::forward(const ParameterStore& store, Var v,
                   const VisitSchedule& schedule) const {
  const BlockConfig& c = config_;
  const std::size_t d = c.channels, n = c.state_size, len = c.tokens();
  const Shape grid{d, c.visits, c.height, c.width};
  if (v.value().size() != d * len ||
      (v.value().rank() == 4 && v.shape() != grid)) {
    throw DimensionError("block input " + shape_str(v.shape()) +
                         " does not match grid " + shape_str(grid));
  }
  GradTape& tape = v.tape();
  const TokenLayout layout = make_token_layout(c, schedule);
  const bool permuted = c.order != ScanOrder::raster;

  Var u = ops::reshape(v, {d, len});
  Var u_scan = permuted ? ops::gather_columns(u, layout.order) : u;

  Var proj = ops::add_row_bias(
      ops::matmul(tape.parameter(store, w_proj_), u_scan),
      tape.parameter(store, b_proj_));
  Var delta = ops::softplus(ops::slice_rows(proj, 0, d));
  Var b = ops::slice_rows(proj, d, n);
  Var cr = ops::slice_rows(proj, d + n, n);
  Var step = delta;
  if (c.time_aware) {
    Var gamma = ops::sigmoid(tape.parameter(store, gamma_));
    step = scan::time_aware_step(delta, layout.gaps, gamma, c.tau_min);
  }
  Var a_log = tape.parameter(store, a_log_);

  auto fuse_grid = [&](Var x, std::size_t channels) {
    std::vector<Var> banks;
    for (std::size_t i : filters_) banks.push_back(tape.parameter(store, i));
    Var shaped = ops::reshape(x, {channels, c.visits, c.height, c.width});
    return ops::reshape(
        fusion::fuse(shaped, banks, tape.parameter(store, alpha_)),
        {channels, len});
  };

  Var y;
  if (c.fusion == FusionMode::state) {
    Var states = scan::selective_scan_states(step, a_log, b, u_scan, layout.valid);
    if (permuted) {
      states = ops::gather_columns(states, layout.inverse);
      cr = ops::gather_columns(cr, layout.inverse);
    }
    // Padded tokens carry the last state forward; zero them before mixing.
    states = ops::mask_columns(states, layout.raster_valid);
    y = scan::state_readout(fuse_grid(states, d * n), cr);
  } else {
    y = scan::selective_scan(step, a_log, b, cr, u_scan, layout.valid);
    if (permuted) y = ops::gather_columns(y, layout.inverse);
    if (c.fusion == FusionMode::readout) y = fuse_grid(y, d);
  }

  if (c.gate) {
    Var gate = ops::silu(ops::add_row_bias(
        ops::matmul(tape.parameter(store, w_gate_), u),
        tape.parameter(store, b_gate_)));
    y = ops::mul(y, gate);
  }
  Var z = ops::add(y, ops::mul_rows(u, tape.parameter(store, skip_)));
  z = ops::mask_columns(z, layout.raster_valid);
  return ops::reshape(z, grid);
}

BlockStack::BlockStack(const BlockConfig& config, ParameterStore& store,
                       const std::string& prefix, std::mt19937_64& rng) {
  config.validate();
  for (std::size_t i = 0; i < config.layers; ++i) {
    blocks_.emplace_back(config, store, prefix + "block" + std::to_string(i) + ".",
                         rng);
  }
}

Var BlockStack::forward(const ParameterStore& store, Var v,
                        const VisitSchedule& schedule) const {
  for (const Block& blk : blocks_) {
    const BlockConfig& c = blk.config();
    const std::size_t d = c.channels, len = c.tokens();
    Var flat = ops::reshape(v, {d, len});
    Var normed = ops::reshape(ops::rms_norm_columns(flat, c.norm_eps),
                              {d, c.visits, c.height, c.width});
    v = ops::add(ops::reshape(flat, {d, c.visits, c.height, c.width}),
                 blk.forward(store, normed, schedule));
  }
  return v;
}

std::size_t BlockStack::parameter_count(const ParameterStore& store) const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.parameter_count(store);
  return n;
}

}  // namespace dtmamba
