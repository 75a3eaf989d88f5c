#include "dtmamba/fusion.hpp"

#include <algorithm>
#include <string>

#include "dtmamba/errors.hpp"
#include "dtmamba/ops.hpp"

namespace dtmamba::fusion {

std::vector<KernelExtent> clamp_kernels(long visits) {
  if (visits <= 0) {
    throw DataError("kernel clamp needs at least one visit, got " +
                    std::to_string(visits));
  }
  std::size_t temporal = static_cast<std::size_t>(std::min(3L, visits));
  if (temporal % 2 == 0) temporal = 1;
  return {KernelExtent{1, 3, 3}, KernelExtent{temporal, 3, 3}};
}

Tensor center_kernel(std::size_t channels, const KernelExtent& e) {
  Tensor k(Shape{channels, e.t, e.h, e.w});
  const std::size_t center = (e.t / 2 * e.h + e.h / 2) * e.w + e.w / 2;
  for (std::size_t c = 0; c < channels; ++c) k[c * e.volume() + center] = 1.0;
  return k;
}

FusionParams FusionParams::identity(std::size_t channels,
                                    std::vector<KernelExtent> kernels) {
  FusionParams p;
  for (const auto& e : kernels) p.filters.push_back(center_kernel(channels, e));
  p.alpha = Tensor(Shape{kernels.size()});
  p.kernels = std::move(kernels);
  return p;
}

FusionParams FusionParams::init(std::size_t channels,
                                std::vector<KernelExtent> kernels, double noise,
                                std::mt19937_64& rng) {
  FusionParams p = identity(channels, std::move(kernels));
  std::normal_distribution<double> dist(0.0, noise);
  for (auto& f : p.filters) {
    for (double& v : f.values()) v += dist(rng);
  }
  return p;
}

std::size_t FusionParams::parameter_count() const {
  std::size_t n = alpha.size();
  for (const auto& f : filters) n += f.size();
  return n;
}

void FusionParams::validate() const {
  if (kernels.empty()) throw ConfigError("fusion needs at least one kernel");
  if (filters.size() != kernels.size() || alpha.size() != kernels.size()) {
    throw ConfigError("fusion: " + std::to_string(kernels.size()) +
                      " kernels but " + std::to_string(filters.size()) +
                      " filter banks and " + std::to_string(alpha.size()) +
                      " logits");
  }
  for (std::size_t s = 0; s < kernels.size(); ++s) {
    const auto& e = kernels[s];
    if (e.t % 2 == 0 || e.h % 2 == 0 || e.w % 2 == 0) {
      throw ConfigError("fusion kernel extents must be odd");
    }
    const Shape want{channels(), e.t, e.h, e.w};
    if (filters[s].shape() != want) {
      throw ConfigError("filter bank " + std::to_string(s) + " has shape " +
                        shape_str(filters[s].shape()) + ", expected " +
                        shape_str(want));
    }
  }
}

namespace {

void check_temporal_extent(const Shape& x, const Shape& filter) {
  if (x.size() != 4 || filter.size() != 4) {
    throw DimensionError("fuse expects [d, T, H, W] input, got " + shape_str(x));
  }
  if (filter[1] > x[1]) {
    throw ConfigError("kernel temporal extent " + std::to_string(filter[1]) +
                      " exceeds visit count " + std::to_string(x[1]));
  }
}

}  // namespace

Tensor fuse(const Tensor& x, const FusionParams& params) {
  params.validate();
  if (!all_finite(x.values())) throw DataError("fuse: non-finite input");
  const std::vector<double> beta = ops::softmax(params.alpha.values());
  Tensor h(x.shape());
  for (std::size_t s = 0; s < params.filters.size(); ++s) {
    check_temporal_extent(x.shape(), params.filters[s].shape());
    const Tensor branch = ops::conv3d_depthwise(x, params.filters[s]);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += beta[s] * branch[i];
  }
  return h;
}

Var fuse(Var x, std::span<const Var> filters, Var alpha) {
  if (filters.empty() || filters.size() != alpha.value().size()) {
    throw ConfigError("fuse: filter bank count must match mixture logits");
  }
  Var beta = ops::softmax(alpha);
  Var h;
  for (std::size_t s = 0; s < filters.size(); ++s) {
    check_temporal_extent(x.shape(), filters[s].shape());
    Var branch =
        ops::scale_by(ops::conv3d_depthwise(x, filters[s]), ops::select(beta, s));
    h = h.valid() ? ops::add(h, branch) : branch;
  }
  return h;
}

}  // namespace dtmamba::fusion
