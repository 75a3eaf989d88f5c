#include <doctest.h>

#include <cmath>
#include <random>

#include "dtmamba/errors.hpp"
#include "dtmamba/ops.hpp"
#include "dtmamba/tape.hpp"
#include "test_util.hpp"

using namespace dtmamba;
using test::random_tensor;

namespace {

Tensor matmul_loops(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      out[i * n + j] = s;
    }
  return out;
}

// Direct depthwise correlation with zero padding.
Tensor conv_loops(const Tensor& x, const Tensor& k) {
  const std::size_t d = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t kt = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  Tensor out(x.shape());
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          double s = 0.0;
          for (std::size_t a = 0; a < kt; ++a)
            for (std::size_t b = 0; b < kh; ++b)
              for (std::size_t e = 0; e < kw; ++e) {
                const long tt = long(t + a) - long(kt / 2);
                const long hh = long(h + b) - long(kh / 2);
                const long ww = long(w + e) - long(kw / 2);
                if (tt < 0 || hh < 0 || ww < 0 || tt >= long(T) || hh >= long(H) ||
                    ww >= long(W))
                  continue;
                s += k[((c * kt + a) * kh + b) * kw + e] *
                     x[((c * T + tt) * H + hh) * W + ww];
              }
          out[((c * T + t) * H + h) * W + w] = s;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  Tensor m = Tensor::matrix(2, 3, {0, 1, 2, 3, 4, 5});
  CHECK(m[1 * 3 + 2] == 5.0);  // last axis has stride 1
}

TEST_CASE("matmul") {
  GradTape tape;
  SUBCASE("identity") {
    Var i = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    Tensor b = Tensor::matrix(2, 3, {1, -2, 3, 4, 5, -6});
    CHECK(max_abs_diff(ops::matmul(i, tape.constant(b)).value(), b) == 0.0);
  }
  SUBCASE("hand arithmetic") {
    Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var b = tape.constant(Tensor::matrix(2, 1, {1, 1}));
    const Tensor& r = ops::matmul(a, b).value();
    CHECK(r.shape() == Shape{2, 1});
    CHECK(r[0] == 3.0);
    CHECK(r[1] == 7.0);
  }
  SUBCASE("triple loop") {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
    Tensor r = ops::matmul(tape.constant(a), tape.constant(b)).value();
    CHECK(max_abs_diff(r, matmul_loops(a, b)) <= 1e-12);
  }
  SUBCASE("mismatch") {
    CHECK_THROWS_AS(ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))),
                    DimensionError);
  }
}

TEST_CASE("softplus") {
  CHECK(ops::softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::abs(ops::softplus(100.0) - 100.0) / 100.0 <= 1e-12);
  const double tiny = ops::softplus(-100.0);
  CHECK(tiny > 0.0);
  CHECK(tiny <= 1e-40);
}

TEST_CASE("softmax") {
  for (double c : {-3.0, 0.0, 7.5}) {
    const double logits[] = {c, c};
    auto p = ops::softmax(logits);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
  }
  {
    const double logits[] = {0.0, std::log(3.0)};
    auto p = ops::softmax(logits);
    CHECK(std::abs(p[0] - 0.25) <= 1e-12);
    CHECK(std::abs(p[1] - 0.75) <= 1e-12);
  }
  {
    const double logits[] = {1000.0, 0.0};
    auto p = ops::softmax(logits);
    CHECK(std::isfinite(p[0]));
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] < 1e-300);
  }
  {
    std::mt19937_64 rng(5);
    std::vector<double> x(6), y(6);
    std::normal_distribution<double> n(0.0, 3.0);
    for (std::size_t i = 0; i < 6; ++i) {
      x[i] = n(rng);
      y[i] = x[i] + 12.25;
    }
    auto p = ops::softmax(x), q = ops::softmax(y);
    double sum = 0.0, diff = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      sum += p[i];
      diff = std::max(diff, std::abs(p[i] - q[i]));
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    CHECK(diff <= 1e-12);
  }
  CHECK_THROWS_AS(ops::softmax(std::span<const double>{}), DimensionError);
}

TEST_CASE("conv3d_depthwise") {
  std::mt19937_64 rng(11);
  SUBCASE("center kernel is the identity") {
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Tensor k({2, 3, 3, 3});
    k[13] = 1.0;
    k[27 + 13] = 1.0;
    CHECK(max_abs_diff(ops::conv3d_depthwise(x, k), x) == 0.0);
  }
  SUBCASE("counting with ones") {
    Tensor x({1, 1, 4, 4}, 1.0);
    Tensor k({1, 1, 3, 3}, 1.0);
    Tensor y = ops::conv3d_depthwise(x, k);
    CHECK(y[1 * 4 + 1] == 9.0);  // interior
    CHECK(y[0 * 4 + 1] == 6.0);  // edge
    CHECK(y[0] == 4.0);          // corner
  }
  SUBCASE("nested loop oracle") {
    Tensor x = random_tensor({3, 4, 5, 5}, rng);
    Tensor k = random_tensor({3, 3, 3, 3}, rng);
    CHECK(max_abs_diff(ops::conv3d_depthwise(x, k), conv_loops(x, k)) <= 1e-12);
    Tensor k2 = random_tensor({3, 1, 3, 5}, rng);
    CHECK(max_abs_diff(ops::conv3d_depthwise(x, k2), conv_loops(x, k2)) <= 1e-12);
  }
  SUBCASE("channel isolation") {
    Tensor x = random_tensor({3, 3, 4, 4}, rng);
    Tensor k = random_tensor({3, 3, 3, 3}, rng);
    Tensor base = ops::conv3d_depthwise(x, k);
    Tensor x2 = x;
    for (std::size_t i = 0; i < 48; ++i) x2[48 + i] += 1.0;  // channel 1
    Tensor moved = ops::conv3d_depthwise(x2, k);
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (i / 48 != 1) CHECK(moved[i] == base[i]);
    }
  }
  SUBCASE("even extent") {
    CHECK_THROWS_AS(ops::conv3d_depthwise(Tensor({1, 2, 3, 3}), Tensor({1, 2, 3, 3})),
                    ConfigError);
  }
}

TEST_CASE("masked_mean") {
  GradTape tape;
  Var x = tape.constant(Tensor::vector({1.0, 2.0, 99.0}));
  const std::uint8_t all[] = {1, 1, 1}, some[] = {1, 1, 0}, none[] = {0, 0, 0};
  CHECK(ops::masked_mean(x, 0, all).value().item() == doctest::Approx(34.0));
  CHECK(ops::masked_mean(x, 0, some).value().item() == 1.5);
  CHECK_THROWS_AS(ops::masked_mean(x, 0, none), EmptyReductionError);

  // Padding extra masked rows leaves the mean untouched.
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({3, 2}, rng);
  Tensor padded({5, 2});
  for (std::size_t i = 0; i < 6; ++i) padded[4 + i] = a[i];
  padded[0] = 1e6;
  const std::uint8_t m3[] = {1, 1, 1}, m5[] = {0, 0, 1, 1, 1};
  Tensor r1 = ops::masked_mean(tape.constant(a), 0, m3).value();
  Tensor r2 = ops::masked_mean(tape.constant(padded), 0, m5).value();
  CHECK(max_abs_diff(r1, r2) == 0.0);
}

TEST_CASE("tape contract") {
  ParameterStore store;
  store.add("w", Tensor::vector({1.0, 2.0}));
  GradTape tape;
  Var w = tape.parameter(store, 0);
  Var l = ops::sum(ops::mul(w, w));
  tape.backward(l);
  auto g = tape.parameter_grads(store);
  REQUIRE(g.size() == 1);
  CHECK(g[0].shape() == store.value(0).shape());
  CHECK(g[0][1] == 4.0);
  CHECK_THROWS_AS(tape.backward(l), Error);
}

TEST_CASE("grad_check") {
  SUBCASE("square") {
    ParameterStore store;
    store.add("x", Tensor::scalar(3.0));
    auto r = grad_check(
        [](GradTape& t, const ParameterStore& s) {
          Var x = t.parameter(s, 0);
          return ops::sum(ops::mul(x, x));
        },
        store);
    CHECK(r.max_rel_error <= 1e-8);
  }
  SUBCASE("softplus derivative is the sigmoid") {
    for (double x0 : {-4.0, -0.5, 0.0, 1.3, 8.0}) {
      GradTape tape;
      ParameterStore store;
      store.add("x", Tensor::scalar(x0));
      Var x = tape.parameter(store, 0);
      tape.backward(ops::sum(ops::softplus(x)));
      const double g = tape.parameter_grads(store)[0][0];
      CHECK(std::abs(g - ops::sigmoid(x0)) / ops::sigmoid(x0) <= 1e-7);
    }
  }
  SUBCASE("each op in isolation") {
    std::mt19937_64 rng(9);
    ParameterStore store;
    store.add("a", random_tensor({3, 4}, rng));
    store.add("b", random_tensor({4, 2}, rng));
    store.add("v", random_tensor({3}, rng));
    store.add("k", random_tensor({2, 3, 3, 3}, rng));
    store.add("x", random_tensor({2, 3, 3, 4}, rng));
    store.add("s", Tensor::scalar(0.7));
    const std::uint8_t keep[] = {1, 0, 1, 1};
    const std::size_t cols[] = {3, 0, 0};
    using Fn = std::function<Var(GradTape&, const ParameterStore&)>;
    auto p = [](GradTape& t, const ParameterStore& s, const char* n) {
      return t.parameter(s, *s.find(n));
    };
    // Weighted sum so every output entry carries a distinct adjoint.
    auto reduce = [](Var y) {
      Tensor w(y.shape());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.37 * double(i));
      return ops::sum(ops::mul(y, y.tape().constant(w)));
    };
    std::vector<std::pair<const char*, Fn>> cases = {
        {"matmul", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::matmul(p(t, s, "a"), p(t, s, "b")));
         }},
        {"softplus", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::softplus(p(t, s, "a")));
         }},
        {"sigmoid", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::sigmoid(p(t, s, "a")));
         }},
        {"silu", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::silu(p(t, s, "a")));
         }},
        {"softmax", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::softmax(p(t, s, "v")));
         }},
        {"cumsum", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::cumsum(p(t, s, "v")));
         }},
        {"scale_by", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::add_scalar(ops::scale_by(p(t, s, "a"), p(t, s, "s")), p(t, s, "s")));
         }},
        {"row ops", [&](GradTape& t, const ParameterStore& s) {
           Var a = p(t, s, "a");
           return reduce(ops::mul_rows(ops::add_row_bias(a, p(t, s, "v")), p(t, s, "v")));
         }},
        {"columns", [&](GradTape& t, const ParameterStore& s) {
           Var a = ops::mask_columns(p(t, s, "a"), keep);
           return reduce(ops::gather_columns(ops::slice_rows(a, 1, 2), cols));
         }},
        {"rms_norm", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::rms_norm_columns(p(t, s, "a"), 1e-6));
         }},
        {"conv3d", [&](GradTape& t, const ParameterStore& s) {
           return reduce(ops::conv3d_depthwise(p(t, s, "x"), p(t, s, "k")));
         }},
        {"means", [&](GradTape& t, const ParameterStore& s) {
           const std::uint8_t m[] = {1, 0, 1};
           Var x = p(t, s, "x");
           return reduce(ops::masked_mean(ops::mean_axis(x, 3), 1, m));
         }},
    };
    for (auto& [name, fn] : cases) {
      CAPTURE(name);
      CHECK(grad_check(fn, store).max_rel_error <= 1e-7);
    }
  }
}
