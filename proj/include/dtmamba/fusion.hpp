#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "dtmamba/tape.hpp"
#include "dtmamba/tensor.hpp"

namespace dtmamba::fusion {

/// Depthwise kernel extent over (time, height, width).
struct KernelExtent {
  std::size_t t = 1;
  std::size_t h = 3;
  std::size_t w = 3;

  std::size_t volume() const { return t * h * w; }
  friend bool operator==(const KernelExtent&, const KernelExtent&) = default;
};

/// {(1,3,3), (min(3,T),3,3)}; an even temporal extent (T = 2) drops to 1 so
/// every kernel stays center-aligned under same padding.
std::vector<KernelExtent> clamp_kernels(long visits);

/// Single-channel-per-group filter banks mixed by softmax(alpha).
struct FusionParams {
  std::vector<KernelExtent> kernels;
  std::vector<Tensor> filters;  // one [d, kt, kh, kw] bank per kernel
  Tensor alpha;                 // [|K|]

  /// One-hot center filters and alpha = 0; fuse() is then the identity.
  static FusionParams identity(std::size_t channels,
                               std::vector<KernelExtent> kernels);
  /// Identity plus N(0, noise) on every filter entry.
  static FusionParams init(std::size_t channels,
                           std::vector<KernelExtent> kernels, double noise,
                           std::mt19937_64& rng);

  std::size_t channels() const { return filters.empty() ? 0 : filters[0].dim(0); }
  std::size_t parameter_count() const;
  void validate() const;
};

Tensor center_kernel(std::size_t channels, const KernelExtent& extent);

/// h = sum_s softmax(alpha)_s * DWConv3D_s(x) for x of shape [d, T, H, W].
Tensor fuse(const Tensor& x, const FusionParams& params);

/// Tape version; `filters` holds one bank per kernel.
Var fuse(Var x, std::span<const Var> filters, Var alpha);

}  // namespace dtmamba::fusion
