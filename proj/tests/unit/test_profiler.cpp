#include <doctest.h>

#include <cmath>
#include <random>

#include "dtmamba/block.hpp"
#include "dtmamba/errors.hpp"
#include "dtmamba/model.hpp"
#include "dtmamba/profiler.hpp"

using namespace dtmamba;

namespace {

BlockConfig tiny() {
  BlockConfig c;
  c.channels = 2;
  c.state_size = 2;
  c.visits = 3;
  c.height = c.width = 3;
  c.layers = 1;
  return c;
}

}  // namespace

TEST_CASE("parameter counts") {
  auto p = profiler::count_block_params(tiny());
  CHECK(p.projection == 18);
  CHECK(p.a_log == 4);
  CHECK(p.skip == 2);
  CHECK(p.gamma == 1);
  CHECK(p.fusion == 74);
  CHECK(p.total() == 99);

  ModelConfig m;
  m.block = tiny();
  const auto one = profiler::count_params(m);
  m.block.layers = 2;
  const auto two = profiler::count_params(m);
  CHECK(two.stack == 2 * one.stack);
  CHECK(two.head == one.head);
  CHECK(one.head == 6 * 2 + 6);
  CHECK(one.encoder == 2 * 64 + 2);
  m.precomputed_features = true;
  CHECK(profiler::count_params(m).encoder == 0);
}

TEST_CASE("parameter counts match the registry") {
  std::mt19937_64 rng(1);
  for (FusionMode mode : {FusionMode::readout, FusionMode::state, FusionMode::none}) {
    for (bool gate : {false, true}) {
      for (std::size_t T : {1u, 2u, 4u}) {
        BlockConfig c = tiny();
        c.channels = 3;
        c.visits = T;
        c.fusion = mode;
        c.gate = gate;
        c.layers = 2;
        CAPTURE(to_string(mode));
        CAPTURE(gate);
        CAPTURE(T);
        ParameterStore s;
        BlockStack stack(c, s, "stack.", rng);
        CHECK(s.entry_count() == c.layers * profiler::count_block_params(c).total());
      }
    }
  }
  ModelConfig m;
  m.block = tiny();
  m.block.height = m.block.width = 2;
  m.encoder.image_size = 8;
  m.encoder.patch = 4;
  RiskModel model(m);
  CHECK(model.parameters().entry_count() == profiler::count_params(m).total);
}

TEST_CASE("FMA counts") {
  BlockConfig c = tiny();
  const auto f = profiler::flop_coefficients(c);
  CHECK(f.projection == 2 * 6);
  CHECK(f.recurrence == 2 * 2 * 2);
  CHECK(f.readout == 2 * 2);
  CHECK(f.fusion == 2 * 9 + 2 * 27);
  CHECK(f.intercept() == 0.0);
  CHECK(profiler::count_flops(c, 1) == f.per_token());
  for (std::size_t L : {1u, 7u, 512u, 4096u}) {
    CHECK(profiler::count_flops(c, 2 * L) == 2.0 * profiler::count_flops(c, L));
  }
  c.layers = 3;
  CHECK(profiler::count_flops(c, 10) == 30.0 * f.per_token());
  c.time_aware = false;
  CHECK(profiler::flop_coefficients(c).step == 0.0);
  CHECK_THROWS_AS(profiler::count_flops(c, 0), ConfigError);
}

TEST_CASE("log-log slope") {
  const std::vector<double> x = {1, 2, 4, 8};
  std::vector<double> y;
  for (double v : x) y.push_back(3.0 * std::pow(v, 1.5));
  CHECK(profiler::log_log_slope(x, y) == doctest::Approx(1.5).epsilon(1e-12));
  const std::vector<double> same = {2, 2};
  CHECK_THROWS_AS(profiler::log_log_slope(same, same), DimensionError);
  CHECK_THROWS_AS(profiler::log_log_slope(std::span<const double>(x).first(1),
                                          std::span<const double>(y).first(1)),
                  DimensionError);
}

TEST_CASE("bench") {
  BlockConfig c = tiny();
  c.channels = 4;
  c.state_size = 4;
  const std::vector<std::size_t> L = {64, 256};
  auto r = profiler::bench_throughput(c, L, 3, 1);
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[1].visits == 4);
  CHECK(r.repeats == 3);
  for (const auto& row : r.rows) {
    CHECK(row.median_seconds > 0.0);
    CHECK(row.tokens_per_second == doctest::Approx(row.tokens / row.median_seconds));
  }
  CHECK(std::isfinite(r.slope));
  const std::vector<std::size_t> odd = {100};
  CHECK_THROWS_AS(profiler::bench_throughput(c, odd, 1), ConfigError);
  CHECK_THROWS_AS(profiler::bench_throughput(c, L, 0), ConfigError);
}
