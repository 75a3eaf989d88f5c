#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dtmamba/fusion.hpp"
#include "dtmamba/scan.hpp"
#include "dtmamba/tape.hpp"

namespace dtmamba {

enum class ScanOrder {
  raster,      // visit-major: t, then h, then w
  interslice,  // position-major: h, then w, then t
};

enum class FusionMode {
  readout,  // fuse the d-channel readout
  state,    // fuse the d*N state channels, then read out
  none,     // identity fusion
};

std::string to_string(ScanOrder order);
std::string to_string(FusionMode mode);
ScanOrder scan_order_from_string(const std::string& s);
FusionMode fusion_mode_from_string(const std::string& s);

struct BlockConfig {
  std::size_t channels = 8;     // d
  std::size_t state_size = 16;  // N
  std::size_t visits = 8;       // T
  std::size_t height = 8;       // H
  std::size_t width = 8;        // W
  std::vector<fusion::KernelExtent> kernels;  // empty: clamp_kernels(visits)
  double gamma_init_logit = 0.0;              // sigmoid(0) = 0.5
  double tau_min = scan::kTauMinMonths;
  bool gate = false;
  bool time_aware = true;
  ScanOrder order = ScanOrder::raster;
  FusionMode fusion = FusionMode::readout;
  double fusion_init_noise = 1e-2;
  double dt_init_min = 1e-2;
  double dt_init_max = 1e-1;
  double norm_eps = 1e-6;
  std::size_t layers = 2;

  std::size_t tokens() const { return visits * height * width; }
  std::size_t projection_width() const { return channels + 2 * state_size; }
  std::vector<fusion::KernelExtent> kernel_set() const;
  void validate() const;
};

/// Per-visit calendar gaps (months) and validity for a padded grid.
struct VisitSchedule {
  std::vector<double> gaps;
  std::vector<std::uint8_t> valid;

  void validate(std::size_t visits) const;
};

/// Token order and per-token gaps/validity for a grid and schedule.
struct TokenLayout {
  std::vector<std::size_t> order;    // scan position -> raster index
  std::vector<std::size_t> inverse;  // raster index -> scan position
  std::vector<double> gaps;          // in scan order
  std::vector<std::uint8_t> valid;   // in scan order
  std::vector<std::uint8_t> raster_valid;
};

TokenLayout make_token_layout(const BlockConfig& config,
                              const VisitSchedule& schedule);

/// One time-aware scan + fusion block. Parameters live in an external store
/// under `prefix`.
class Block {
 public:
  Block(const BlockConfig& config, ParameterStore& store, std::string prefix,
        std::mt19937_64& rng);

  /// V [d, T, H, W] -> Z [d, T, H, W]; invalid visits come out as zero.
  Var forward(const ParameterStore& store, Var v,
              const VisitSchedule& schedule) const;

  const BlockConfig& config() const { return config_; }
  std::size_t parameter_count(const ParameterStore& store) const;

  /// Extract this block's scan/fusion parameters as plain values.
  scan::ScanParams scan_params(const ParameterStore& store) const;
  fusion::FusionParams fusion_params(const ParameterStore& store) const;

 private:
  BlockConfig config_;
  std::size_t w_proj_, b_proj_, a_log_, skip_, gamma_;
  std::vector<std::size_t> filters_;
  std::size_t alpha_ = 0;
  std::size_t w_gate_ = 0, b_gate_ = 0;
  std::vector<std::size_t> owned_;
};

/// Residual hierarchy: v <- mask(v + block(rms_norm(v))) per block.
class BlockStack {
 public:
  /// Builds config.layers blocks named prefix + "block<i>.".
  BlockStack(const BlockConfig& config, ParameterStore& store,
             const std::string& prefix, std::mt19937_64& rng);

  Var forward(const ParameterStore& store, Var v,
              const VisitSchedule& schedule) const;

  std::size_t depth() const { return blocks_.size(); }
  const Block& block(std::size_t i) const { return blocks_.at(i); }
  std::size_t parameter_count(const ParameterStore& store) const;

 private:
  std::vector<Block> blocks_;
};

}  // namespace dtmamba
