#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "dtmamba/errors.hpp"
#include "dtmamba/synthdata.hpp"

using namespace dtmamba;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("dtmamba_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::pair<std::string, std::string>> snapshot(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::directory_iterator(dir))
    out.emplace_back(e.path().filename().string(), slurp(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

data::CohortSpec small_spec() {
  data::CohortSpec s;
  s.patients = 150;  // spans two payload shards
  s.image_size = 16;
  s.patch = 8;
  s.view_drop_prob = 0.2;
  return s;
}

}  // namespace

TEST_CASE("spec validation") {
  data::CohortSpec s;
  CHECK_NOTHROW(s.validate());
  s.gap_choices = {6, 12};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.min_visits = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.visit_step_min = 5.0;
  s.visit_step_max = 6.0;  // needs a rate above growth_rate_max
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(data::CohortSpec::from_json(R"({"seed": 1, "colour": 3})"), ConfigError);
  auto parsed = data::CohortSpec::from_json(data::CohortSpec{}.to_json());
  CHECK(parsed.to_json() == data::CohortSpec{}.to_json());
}

TEST_CASE("generated cohort properties") {
  data::CohortSpec spec = small_spec();
  auto cohort = data::generate_cohort(spec);
  REQUIRE(cohort.dataset.patients.size() == 150);
  std::set<std::string> ids;
  for (const auto& p : cohort.dataset.patients) {
    ids.insert(p.id);
    CHECK(p.fold == data::fold_of(p.id, spec.folds));
    CHECK(p.visits.size() >= 2);
    CHECK(p.visits.size() <= 8);
    const auto gaps = p.gaps();
    CHECK(gaps[0] == 0.0);
    for (std::size_t v = 1; v < gaps.size(); ++v) {
      CHECK(std::find(spec.gap_choices.begin(), spec.gap_choices.end(), gaps[v]) !=
            spec.gap_choices.end());
    }
    for (const auto& v : p.visits) {
      const auto present = std::count(v.view_present.begin(), v.view_present.end(), 1);
      CHECK(present >= 1);
      CHECK(v.views.size() == std::size_t(present));
    }
  }
  CHECK(ids.size() == 150);
  CHECK(data::audit_gap_signal(spec));

  spec.case_fraction = 0.0;
  for (const auto& p : data::generate_cohort(spec).dataset.patients) CHECK_FALSE(p.outcome.event);
}

TEST_CASE("event times cover every horizon") {
  data::CohortSpec spec;
  spec.case_fraction = 1.0;
  spec.kind = data::PayloadKind::features;
  auto cohort = data::generate_cohort(spec);
  auto hist = data::event_histogram(cohort.dataset.patients);
  std::size_t total = 0;
  for (std::size_t k = 0; k < hazard::kHorizons; ++k) {
    CAPTURE(k);
    CHECK(hist[k] > 0);
    total += hist[k];
  }
  CHECK(total + hist[hazard::kHorizons] == 1000);
}

TEST_CASE("feature payloads") {
  data::CohortSpec spec = small_spec();
  spec.kind = data::PayloadKind::features;
  spec.feature_channels = 5;
  auto cohort = data::generate_cohort(spec);
  CHECK(cohort.dataset.channels == 5);
  CHECK(cohort.dataset.height == 2);
  for (const auto& v : cohort.dataset.patients[0].visits) {
    CHECK(v.features.shape() == Shape{5, 2, 2});
    CHECK(v.views.empty());
  }
}

TEST_CASE("write and read") {
  TempDir a("a"), b("b"), c("c");
  const data::CohortSpec spec = small_spec();
  auto cohort = data::generate(spec, a.path);
  data::generate(spec, b.path);
  SUBCASE("fixed seed gives identical files") { CHECK(snapshot(a.path) == snapshot(b.path)); }
  SUBCASE("round trip") {
    data::Dataset back = data::read_dataset(a.path);
    REQUIRE(back.patients.size() == cohort.dataset.patients.size());
    const auto& p0 = cohort.dataset.patients[3];
    const auto& q0 = back.patients[3];
    CHECK(p0.id == q0.id);
    CHECK(p0.outcome.time == q0.outcome.time);
    REQUIRE(p0.visits.size() == q0.visits.size());
    for (std::size_t v = 0; v < p0.visits.size(); ++v) {
      CHECK(p0.visits[v].view_present == q0.visits[v].view_present);
      for (std::size_t k = 0; k < p0.visits[v].views.size(); ++k)
        CHECK(max_abs_diff(p0.visits[v].views[k], q0.visits[v].views[k]) == 0.0);
    }
    data::write_dataset(back, c.path);
    CHECK(snapshot(a.path) == snapshot(c.path));
  }
  SUBCASE("split audit") {
    data::DatasetReader reader(a.path);
    std::vector<std::set<std::string>> folds(spec.folds);
    for (std::size_t i = 0; i < reader.size(); ++i) {
      auto p = reader.read(i);
      folds.at(p.fold).insert(p.id);
    }
    std::size_t total = 0;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      total += folds[f].size();
      for (std::size_t g = f + 1; g < folds.size(); ++g)
        for (const auto& id : folds[f]) CHECK(folds[g].count(id) == 0);
    }
    CHECK(total == 150);
  }
  SUBCASE("truncated payload") {
    const fs::path shard = a.path / "payload_001.f32";
    fs::resize_file(shard, fs::file_size(shard) - 4);
    CHECK_THROWS_AS(data::read_dataset(a.path), DataError);
    try {
      data::read_dataset(a.path);
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("patient P") != std::string::npos);
    }
  }
  SUBCASE("corrupted payload") {
    const fs::path shard = a.path / "payload_000.f32";
    std::fstream f(shard, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    const char junk[4] = {1, 2, 3, 4};
    f.write(junk, 4);
    f.close();
    data::DatasetReader reader(a.path);
    CHECK_THROWS_AS(reader.read(0), DataError);
  }
  SUBCASE("bad manifest") {
    std::ofstream(a.path / "manifest.json") << R"({"format_version": 99})";
    CHECK_THROWS_AS(data::DatasetReader{a.path}, DataError);
  }
}

TEST_CASE("fold hashing") {
  CHECK(data::fold_of("P000001", 5) == data::fold_of("P000001", 5));
  const unsigned char empty[] = {0};
  CHECK(data::fnv1a64(std::span<const unsigned char>(empty, 0)) == 0xcbf29ce484222325ULL);
  const unsigned char a[] = {'a'};
  CHECK(data::fnv1a64(a) == 0xaf63dc4c8601ec8cULL);
}
