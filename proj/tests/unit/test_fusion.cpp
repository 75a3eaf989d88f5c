#include <doctest.h>

#include <random>

#include "dtmamba/errors.hpp"
#include "dtmamba/fusion.hpp"
#include "dtmamba/ops.hpp"
#include "test_util.hpp"

using namespace dtmamba;
using fusion::KernelExtent;
using test::random_tensor;

namespace {

fusion::FusionParams random_fusion(std::size_t d, std::size_t T, std::mt19937_64& rng) {
  fusion::FusionParams p;
  p.kernels = fusion::clamp_kernels(long(T));
  for (const auto& k : p.kernels) p.filters.push_back(random_tensor({d, k.t, k.h, k.w}, rng));
  p.alpha = random_tensor({p.kernels.size()}, rng);
  return p;
}

}  // namespace

TEST_CASE("clamp_kernels") {
  using V = std::vector<KernelExtent>;
  CHECK(fusion::clamp_kernels(8) == V{{1, 3, 3}, {3, 3, 3}});
  CHECK(fusion::clamp_kernels(3) == V{{1, 3, 3}, {3, 3, 3}});
  CHECK(fusion::clamp_kernels(1) == V{{1, 3, 3}, {1, 3, 3}});
  CHECK(fusion::clamp_kernels(2) == V{{1, 3, 3}, {1, 3, 3}});
  CHECK_THROWS_AS(fusion::clamp_kernels(0), DataError);
}

TEST_CASE("fuse") {
  std::mt19937_64 rng(31);
  SUBCASE("center kernels give the identity for any mixing") {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    auto p = fusion::FusionParams::identity(2, fusion::clamp_kernels(3));
    p.alpha = Tensor::vector({3.0, -1.5});
    CHECK(max_abs_diff(fusion::fuse(x, p), x) <= 1e-15);
  }
  SUBCASE("equal logits average the branches") {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    auto p = random_fusion(2, 3, rng);
    p.alpha = Tensor::vector({0.8, 0.8});
    Tensor a = ops::conv3d_depthwise(x, p.filters[0]);
    Tensor b = ops::conv3d_depthwise(x, p.filters[1]);
    Tensor h = fusion::fuse(x, p);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(std::abs(h[i] - 0.5 * (a[i] + b[i])) <= 1e-12);
  }
  SUBCASE("neighbor-sum oracle") {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    auto p = random_fusion(2, 3, rng);
    CHECK(max_abs_diff(fusion::fuse(x, p), test::neighbor_sum(x, p.filters, p.alpha.values())) <=
          1e-12);
  }
  SUBCASE("locality and channel isolation") {
    Tensor x = random_tensor({2, 4, 5, 5}, rng);
    auto p = random_fusion(2, 4, rng);
    Tensor base = fusion::fuse(x, p);
    Tensor moved = x;
    const std::size_t t0 = 1, h0 = 2, w0 = 0;
    moved[((1 * 4 + t0) * 5 + h0) * 5 + w0] += 1.0;
    Tensor h = fusion::fuse(moved, p);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t y = 0; y < 5; ++y)
          for (std::size_t w = 0; w < 5; ++w) {
            const std::size_t i = ((c * 4 + t) * 5 + y) * 5 + w;
            const bool inside = c == 1 && std::abs(long(t) - long(t0)) <= 1 &&
                                std::abs(long(y) - long(h0)) <= 1 &&
                                std::abs(long(w) - long(w0)) <= 1;
            if (!inside) CHECK(h[i] == base[i]);
          }
  }
  SUBCASE("the temporal kernel sees other visits") {
    Tensor x = random_tensor({1, 4, 3, 3}, rng);
    Tensor swapped = x;
    for (std::size_t i = 0; i < 9; ++i) std::swap(swapped[0 * 9 + i], swapped[2 * 9 + i]);
    auto spatial = random_fusion(1, 1, rng);
    Tensor a = fusion::fuse(x, spatial), b = fusion::fuse(swapped, spatial);
    for (std::size_t i = 0; i < 9; ++i) CHECK(a[9 + i] == b[9 + i]);  // visit 1 untouched
    auto temporal = random_fusion(1, 4, rng);
    a = fusion::fuse(x, temporal);
    b = fusion::fuse(swapped, temporal);
    double diff = 0.0;
    for (std::size_t i = 0; i < 9; ++i) diff = std::max(diff, std::abs(a[9 + i] - b[9 + i]));
    CHECK(diff > 0.0);
  }
  SUBCASE("temporal extent beyond the grid") {
    Tensor x = random_tensor({1, 2, 3, 3}, rng);
    fusion::FusionParams p;
    p.kernels = {{1, 3, 3}, {3, 3, 3}};
    p.filters = {random_tensor({1, 1, 3, 3}, rng), random_tensor({1, 3, 3, 3}, rng)};
    p.alpha = Tensor({2});
    CHECK_THROWS_AS(fusion::fuse(x, p), ConfigError);
  }
}

TEST_CASE("fusion gradients") {
  std::mt19937_64 rng(5);
  auto init = random_fusion(2, 3, rng);
  ParameterStore store;
  store.add("x", random_tensor({2, 3, 3, 4}, rng));
  store.add("f0", init.filters[0]);
  store.add("f1", init.filters[1]);
  store.add("alpha", init.alpha);
  auto loss = [](GradTape& t, const ParameterStore& s) {
    std::vector<Var> banks = {t.parameter(s, 1), t.parameter(s, 2)};
    Var h = fusion::fuse(t.parameter(s, 0), banks, t.parameter(s, 3));
    return ops::sum(ops::mul(h, ops::sigmoid(h)));
  };
  CHECK(grad_check(loss, store).max_rel_error <= 1e-6);
}
