#include "dtmamba/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dtmamba/errors.hpp"

namespace dtmamba::data {

static_assert(std::endian::native == std::endian::little,
              "payload I/O assumes a little-endian host");

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::size_t kPatientsPerShard = 128;

PayloadKind kind_from_string(const std::string& s) {
  if (s == "images") return PayloadKind::images;
  if (s == "features") return PayloadKind::features;
  throw ConfigError("unknown payload kind '" + s + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string shard_name(std::size_t shard) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "payload_%03zu.f32", shard);
  return buf;
}

// Crossing time (months after the last exam) implied by the last amplitude.
double months_to_threshold(double threshold, double last_amplitude, double rate) {
  return std::max(0.5, (threshold - last_amplitude) / rate);
}

// Mean per-month growth implied by an amplitude sequence and its gaps.
double implied_rate(std::span<const double> amplitudes, std::span<const double> gaps) {
  double span_months = 0.0;
  for (std::size_t i = 1; i < gaps.size(); ++i) span_months += gaps[i];
  return (amplitudes.back() - amplitudes.front()) / span_months;
}

void render_blob(std::mt19937_64& rng, const CohortSpec& spec, double amplitude,
                 double cy, double cx, Tensor& image) {
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  const std::size_t n = spec.image_size;
  const double inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - cy;
      const double dx = static_cast<double>(x) - cx;
      const double v = noise(rng) + amplitude * std::exp(-(dy * dy + dx * dx) * inv);
      image[y * n + x] = static_cast<double>(static_cast<float>(v));
    }
  }
}

// Patch-mean features of the summed present views, one linear map per channel.
Tensor feature_volume(const std::vector<Tensor>& views, const CohortSpec& spec,
                      std::span<const double> channel_weights) {
  const std::size_t n = spec.image_size, p = spec.patch, g = n / p;
  Tensor out({spec.feature_channels, g, g});
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      double acc = 0.0;
      for (const Tensor& v : views) {
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) acc += v[(gy * p + y) * n + gx * p + x];
        }
      }
      acc /= static_cast<double>(p * p);
      for (std::size_t c = 0; c < spec.feature_channels; ++c) {
        out[(c * g + gy) * g + gx] =
            static_cast<double>(static_cast<float>(channel_weights[c] * acc));
      }
    }
  }
  return out;
}

Shape payload_shape(const Dataset& ds, const PatientRecord& p) {
  if (ds.kind == PayloadKind::features) {
    return {p.visits.size(), ds.channels, ds.height, ds.width};
  }
  std::size_t images = 0;
  for (const auto& v : p.visits) {
    images += static_cast<std::size_t>(
        std::count(v.view_present.begin(), v.view_present.end(), 1));
  }
  return {images, ds.channels, ds.height, ds.width};
}

std::vector<float> payload_of(const Dataset& ds, const PatientRecord& p) {
  std::vector<float> out;
  const std::size_t per = ds.channels * ds.height * ds.width;
  auto append = [&](const Tensor& t) {
    if (t.size() != per) {
      throw DimensionError("patient " + p.id + ": payload tensor has shape " +
                           shape_str(t.shape()));
    }
    for (double v : t.values()) out.push_back(static_cast<float>(v));
  };
  for (const auto& v : p.visits) {
    if (ds.kind == PayloadKind::features) {
      append(v.features);
    } else {
      const auto present = static_cast<std::size_t>(
          std::count(v.view_present.begin(), v.view_present.end(), 1));
      if (v.views.size() != present) {
        throw DataError("patient " + p.id + ": view flags and view tensors disagree");
      }
      for (const auto& t : v.views) append(t);
    }
  }
  return out;
}

std::uint64_t checksum_floats(std::span<const float> values) {
  return fnv1a64({reinterpret_cast<const unsigned char*>(values.data()),
                  values.size() * sizeof(float)});
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

template <typename T>
T require(const ordered_json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": bad field '" + key + "': " + e.what());
  }
}

}  // namespace

std::vector<double> PatientRecord::gaps() const {
  std::vector<double> g(visits.size(), 0.0);
  for (std::size_t i = 1; i < visits.size(); ++i) {
    g[i] = visits[i].time - visits[i - 1].time;
  }
  return g;
}

std::string to_string(PayloadKind kind) {
  return kind == PayloadKind::images ? "images" : "features";
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t fold_of(const std::string& id, std::size_t folds) {
  if (folds == 0) throw ConfigError("fold count must be positive");
  return static_cast<std::size_t>(
      fnv1a64({reinterpret_cast<const unsigned char*>(id.data()), id.size()}) % folds);
}

// ---------------------------------------------------------------- spec

void CohortSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("cohort spec: " + m); };
  if (patients == 0) fail("patients must be positive");
  if (min_visits < 2) fail("min_visits must be at least 2");
  if (max_visits < min_visits) fail("max_visits < min_visits");
  if (gap_choices.empty()) fail("gap_choices is empty");
  for (double g : gap_choices) {
    if (!(g >= 12.0 && g <= 36.0)) fail("gap choices must lie in [12, 36] months");
  }
  if (!(case_fraction >= 0.0 && case_fraction <= 1.0)) fail("case_fraction outside [0, 1]");
  if (folds == 0) fail("folds must be positive");
  if (image_size == 0) fail("image_size must be positive");
  if (kind == PayloadKind::features) {
    if (patch == 0 || image_size % patch != 0) fail("patch must divide image_size");
    if (feature_channels == 0) fail("feature_channels must be positive");
  }
  if (!(view_drop_prob >= 0.0 && view_drop_prob < 1.0)) fail("view_drop_prob outside [0, 1)");
  if (!(growth_rate_min > 0.0 && growth_rate_max >= growth_rate_min)) {
    fail("growth rate range must be positive and ordered");
  }
  if (!(crossing_min > 0.0 && crossing_max >= crossing_min)) fail("bad crossing range");
  if (!(last_amplitude_min >= 0.0 && last_amplitude_max >= last_amplitude_min &&
        last_amplitude_max < threshold)) {
    fail("last amplitude range must lie in [0, threshold)");
  }
  {
    // Some (crossing, last amplitude) pair must give a rate inside the range.
    const double r_lo = (threshold - last_amplitude_max) / crossing_max;
    const double r_hi = (threshold - last_amplitude_min) / crossing_min;
    if (r_hi < growth_rate_min || r_lo > growth_rate_max) {
      fail("growth rate range unreachable from the crossing and amplitude ranges");
    }
    if (!(visit_step_min >= 0.0 && visit_step_max >= visit_step_min)) fail("bad visit step range");
    if (visit_step_max > 0.0) {
      for (double gap : gap_choices) {
        const double lo = std::max({r_lo, growth_rate_min, visit_step_min / gap});
        const double hi = std::min({r_hi, growth_rate_max, visit_step_max / gap});
        if (lo > hi) fail("visit step range unreachable for a " + std::to_string(gap) + " month gap");
      }
    }
  }
  if (!(gap_regularity >= 0.0 && gap_regularity <= 1.0)) fail("gap_regularity outside [0, 1]");
  if (!(position_jitter >= 0.0)) fail("position_jitter must be non-negative");
  if (!(lead_max >= 0.0)) fail("lead_max must be non-negative");
  if (!(latent_sigma >= 0.0 && noise_sigma >= 0.0)) fail("noise levels must be non-negative");
  if (!(blob_sigma > 0.0)) fail("blob_sigma must be positive");
  if (!(control_amplitude_max >= control_amplitude_min)) fail("bad control amplitude range");
  if (!(followup_min > 0.0 && followup_max >= followup_min)) fail("bad follow-up range");
}

std::string CohortSpec::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["patients"] = patients;
  j["min_visits"] = min_visits;
  j["max_visits"] = max_visits;
  j["gap_choices"] = gap_choices;
  j["gap_regularity"] = gap_regularity;
  j["case_fraction"] = case_fraction;
  j["folds"] = folds;
  j["kind"] = to_string(kind);
  j["image_size"] = image_size;
  j["feature_channels"] = feature_channels;
  j["patch"] = patch;
  j["view_drop_prob"] = view_drop_prob;
  j["threshold"] = threshold;
  j["growth_rate_min"] = growth_rate_min;
  j["growth_rate_max"] = growth_rate_max;
  j["crossing_min"] = crossing_min;
  j["crossing_max"] = crossing_max;
  j["last_amplitude_min"] = last_amplitude_min;
  j["last_amplitude_max"] = last_amplitude_max;
  j["lead_max"] = lead_max;
  j["latent_sigma"] = latent_sigma;
  j["control_amplitude_min"] = control_amplitude_min;
  j["control_amplitude_max"] = control_amplitude_max;
  j["followup_min"] = followup_min;
  j["followup_max"] = followup_max;
  j["noise_sigma"] = noise_sigma;
  j["blob_sigma"] = blob_sigma;
  j["position_jitter"] = position_jitter;
  j["visit_step_min"] = visit_step_min;
  j["visit_step_max"] = visit_step_max;
  return j.dump(2);
}

CohortSpec CohortSpec::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cohort spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("cohort spec must be a JSON object");
  CohortSpec s;
  const ordered_json defaults = ordered_json::parse(s.to_json());
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("cohort spec: unknown field '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("seed", s.seed);
    get("patients", s.patients);
    get("min_visits", s.min_visits);
    get("max_visits", s.max_visits);
    get("gap_choices", s.gap_choices);
    get("gap_regularity", s.gap_regularity);
    get("case_fraction", s.case_fraction);
    get("folds", s.folds);
    if (j.contains("kind")) s.kind = kind_from_string(j.at("kind").get<std::string>());
    get("image_size", s.image_size);
    get("feature_channels", s.feature_channels);
    get("patch", s.patch);
    get("view_drop_prob", s.view_drop_prob);
    get("threshold", s.threshold);
    get("growth_rate_min", s.growth_rate_min);
    get("growth_rate_max", s.growth_rate_max);
    get("crossing_min", s.crossing_min);
    get("crossing_max", s.crossing_max);
    get("last_amplitude_min", s.last_amplitude_min);
    get("last_amplitude_max", s.last_amplitude_max);
    get("lead_max", s.lead_max);
    get("latent_sigma", s.latent_sigma);
    get("control_amplitude_min", s.control_amplitude_min);
    get("control_amplitude_max", s.control_amplitude_max);
    get("followup_min", s.followup_min);
    get("followup_max", s.followup_max);
    get("noise_sigma", s.noise_sigma);
    get("blob_sigma", s.blob_sigma);
    get("position_jitter", s.position_jitter);
    get("visit_step_min", s.visit_step_min);
    get("visit_step_max", s.visit_step_max);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cohort spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------- generation

bool audit_gap_signal(const CohortSpec& spec) {
  const std::vector<double> amplitudes{0.2, 0.4, 0.6};
  const std::vector<double> short_gaps{0.0, spec.gap_choices.front(), spec.gap_choices.front()};
  const std::vector<double> long_gaps{0.0, spec.gap_choices.back(), spec.gap_choices.back()};
  const double r_short = implied_rate(amplitudes, short_gaps);
  const double r_long = implied_rate(amplitudes, long_gaps);
  const double t_short = months_to_threshold(spec.threshold, amplitudes.back(), r_short);
  const double t_long = months_to_threshold(spec.threshold, amplitudes.back(), r_long);
  return r_short != r_long && t_short != t_long;
}

GeneratedCohort generate_cohort(const CohortSpec& spec) {
  spec.validate();
  if (spec.gap_choices.size() > 1 && !audit_gap_signal(spec)) {
    throw DataError("generator audit: gaps do not change growth rate and event time");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::normal_distribution<double> latent(0.0, 1.0);

  GeneratedCohort out;
  Dataset& ds = out.dataset;
  ds.kind = spec.kind;
  ds.folds = spec.folds;
  ds.cohort_spec = ordered_json::parse(spec.to_json()).dump();
  if (spec.kind == PayloadKind::images) {
    ds.channels = 1;
    ds.height = ds.width = spec.image_size;
  } else {
    ds.channels = spec.feature_channels;
    ds.height = ds.width = spec.image_size / spec.patch;
  }

  std::vector<double> channel_weights(spec.feature_channels);
  for (double& w : channel_weights) w = latent(rng);

  const std::size_t width = std::max<std::size_t>(1, std::to_string(spec.patients - 1).size());
  for (std::size_t i = 0; i < spec.patients; ++i) {
    PatientRecord p;
    std::string num = std::to_string(i);
    p.id = "P" + std::string(std::max<std::size_t>(6, width) - num.size(), '0') + num;
    p.fold = fold_of(p.id, spec.folds);

    const bool is_case = unit(rng) < spec.case_fraction;
    const auto visits = static_cast<std::size_t>(
        std::uniform_int_distribution<std::size_t>(spec.min_visits, spec.max_visits)(rng));
    auto pick_gap = [&] {
      return spec.gap_choices[std::uniform_int_distribution<std::size_t>(
          0, spec.gap_choices.size() - 1)(rng)];
    };
    const double usual_gap = pick_gap();
    std::vector<double> gaps(visits, 0.0);
    double t_last = 0.0;
    for (std::size_t v = 1; v < visits; ++v) {
      gaps[v] = unit(rng) < spec.gap_regularity ? usual_gap : pick_gap();
      t_last += gaps[v];
    }
    const double lo = spec.image_size / 4.0, hi = 3.0 * spec.image_size / 4.0;
    const double cy = uniform(lo, hi), cx = uniform(lo, hi);

    PatientTruth truth;
    std::vector<double> g(visits);
    if (is_case) {
      double r = 0.0, crossing = 0.0, last = 0.0;
      do {
        crossing = uniform(spec.crossing_min, spec.crossing_max);
        last = uniform(spec.last_amplitude_min, spec.last_amplitude_max);
        r = (spec.threshold - last) / crossing;
      } while (r < spec.growth_rate_min || r > spec.growth_rate_max ||
               (spec.visit_step_max > 0.0 &&
                (r * usual_gap < spec.visit_step_min || r * usual_gap > spec.visit_step_max)));
      g[0] = last - r * t_last;
      for (std::size_t v = 1; v < visits; ++v) {
        g[v] = g[v - 1] + r * gaps[v] + spec.latent_sigma * latent(rng);
      }
      truth.crossing = months_to_threshold(spec.threshold, g.back(), r);
      const double lead = spec.lead_max * unit(rng);
      p.outcome = hazard::Outcome::event_at(truth.crossing + lead);
      truth.growth_rate = r;
    } else {
      g[0] = uniform(spec.control_amplitude_min, spec.control_amplitude_max);
      for (std::size_t v = 1; v < visits; ++v) {
        g[v] = g[v - 1] + spec.latent_sigma * latent(rng);
      }
      p.outcome = hazard::Outcome::censored_at(uniform(spec.followup_min, spec.followup_max));
    }
    truth.amplitudes = g;

    double time = 0.0;
    for (std::size_t v = 0; v < visits; ++v) {
      time += gaps[v];
      VisitRecord rec;
      rec.time = time;
      for (std::size_t k = 0; k < kViews; ++k) {
        rec.view_present[k] = unit(rng) >= spec.view_drop_prob ? 1 : 0;
      }
      if (std::count(rec.view_present.begin(), rec.view_present.end(), 1) == 0) {
        rec.view_present[0] = 1;
      }
      const double jy = spec.position_jitter * (2.0 * unit(rng) - 1.0);
      const double jx = spec.position_jitter * (2.0 * unit(rng) - 1.0);
      std::vector<Tensor> views;
      for (std::size_t k = 0; k < kViews; ++k) {
        if (!rec.view_present[k]) continue;
        Tensor img({1, spec.image_size, spec.image_size});
        render_blob(rng, spec, std::max(g[v], 0.0), cy + jy, cx + jx, img);
        views.push_back(std::move(img));
      }
      if (spec.kind == PayloadKind::features) {
        rec.features = feature_volume(views, spec, channel_weights);
      } else {
        rec.views = std::move(views);
      }
      p.visits.push_back(std::move(rec));
    }
    ds.patients.push_back(std::move(p));
    out.truth.push_back(std::move(truth));
  }
  return out;
}

GeneratedCohort generate(const CohortSpec& spec, const std::filesystem::path& dir) {
  GeneratedCohort cohort = generate_cohort(spec);
  write_dataset(cohort.dataset, dir);
  return cohort;
}

std::array<std::size_t, hazard::kHorizons + 1> event_histogram(
    std::span<const PatientRecord> patients) {
  std::array<std::size_t, hazard::kHorizons + 1> bins{};
  for (const auto& p : patients) {
    if (!p.outcome.event) continue;
    std::size_t k = 0;
    while (k < hazard::kHorizons &&
           p.outcome.time > hazard::kMonthsPerYear * static_cast<double>(k + 1)) {
      ++k;
    }
    ++bins[k];
  }
  return bins;
}

// ---------------------------------------------------------------- writing

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create dataset directory " + dir.string());
  }

  ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = to_string(ds.kind);
  manifest["tensor"] = {{"channels", ds.channels}, {"height", ds.height}, {"width", ds.width}};
  manifest["views"] = kViews;
  manifest["folds"] = ds.folds;
  manifest["generator"] =
      ds.cohort_spec.empty() ? ordered_json(nullptr) : ordered_json::parse(ds.cohort_spec);
  ordered_json files = ordered_json::array();
  ordered_json entries = ordered_json::array();

  std::ofstream shard;
  std::string current;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ds.patients.size(); ++i) {
    const PatientRecord& p = ds.patients[i];
    const std::string name = shard_name(i / kPatientsPerShard);
    if (name != current) {
      if (shard.is_open()) {
        shard.close();
        if (!shard) throw IoError("write failed: " + current);
      }
      shard.open(dir / name, std::ios::binary | std::ios::trunc);
      if (!shard) throw IoError("cannot write " + (dir / name).string());
      current = name;
      offset = 0;
      files.push_back(name);
    }
    const std::vector<float> payload = payload_of(ds, p);
    const std::size_t bytes = payload.size() * sizeof(float);
    shard.write(reinterpret_cast<const char*>(payload.data()),
                static_cast<std::streamsize>(bytes));
    if (!shard) throw IoError("write failed: " + (dir / name).string());

    ordered_json visits = ordered_json::array();
    for (const auto& v : p.visits) {
      visits.push_back({{"time", v.time},
                        {"views", std::vector<int>(v.view_present.begin(),
                                                   v.view_present.end())}});
    }
    ordered_json e;
    e["id"] = p.id;
    e["fold"] = p.fold;
    e["visits"] = visits;
    e["tensor"] = {{"file", name},
                   {"offset", offset},
                   {"bytes", bytes},
                   {"shape", payload_shape(ds, p)},
                   {"dtype", "float32"},
                   {"checksum", "fnv1a64:" + hex64(checksum_floats(payload))}};
    e["outcome"] = {{"event", p.outcome.event}, {"time", p.outcome.time}};
    entries.push_back(std::move(e));
    offset += bytes;
  }
  if (shard.is_open()) {
    shard.close();
    if (!shard) throw IoError("write failed: " + current);
  }
  manifest["payload_files"] = files;
  manifest["patients"] = entries;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------- reading

std::size_t DatasetReader::size() const { return entries_.size(); }

DatasetReader::DatasetReader(const std::filesystem::path& dir) : dir_(dir) {
  const auto path = dir / "manifest.json";
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  ordered_json m;
  try {
    m = ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest is not valid JSON: " + std::string(e.what()));
  }
  const std::string where = "manifest";
  if (!m.contains("format_version")) throw DataError("manifest: missing format_version");
  if (require<int>(m, "format_version", where) != kFormatVersion) {
    throw DataError("manifest: unsupported format_version " + m["format_version"].dump());
  }
  try {
    header_.kind = kind_from_string(require<std::string>(m, "kind", where));
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  const auto& t = m.at("tensor");
  header_.channels = require<std::size_t>(t, "channels", where);
  header_.height = require<std::size_t>(t, "height", where);
  header_.width = require<std::size_t>(t, "width", where);
  header_.folds = require<std::size_t>(m, "folds", where);
  if (require<std::size_t>(m, "views", where) != kViews) {
    throw DataError("manifest: expected " + std::to_string(kViews) + " views");
  }
  if (m.contains("generator") && !m["generator"].is_null()) {
    header_.cohort_spec = m["generator"].dump();
  }

  std::vector<std::string> seen;
  for (const auto& e : m.at("patients")) {
    Entry en;
    en.id = require<std::string>(e, "id", where);
    const std::string who = "patient " + en.id;
    en.fold = require<std::size_t>(e, "fold", who);
    for (const auto& v : e.at("visits")) {
      en.times.push_back(require<double>(v, "time", who));
      const auto flags = require<std::vector<int>>(v, "views", who);
      if (flags.size() != kViews) throw DataError(who + ": view flags must have 4 entries");
      std::array<std::uint8_t, kViews> a{};
      for (std::size_t k = 0; k < kViews; ++k) {
        if (flags[k] != 0 && flags[k] != 1) throw DataError(who + ": view flag not 0/1");
        a[k] = static_cast<std::uint8_t>(flags[k]);
      }
      en.views.push_back(a);
    }
    const auto& ten = e.at("tensor");
    en.file = require<std::string>(ten, "file", who);
    en.offset = require<std::size_t>(ten, "offset", who);
    en.bytes = require<std::size_t>(ten, "bytes", who);
    en.shape = require<Shape>(ten, "shape", who);
    if (require<std::string>(ten, "dtype", who) != "float32") {
      throw DataError(who + ": dtype must be float32");
    }
    en.checksum = require<std::string>(ten, "checksum", who);
    const auto& o = e.at("outcome");
    en.outcome = {require<bool>(o, "event", who), require<double>(o, "time", who)};

    if (en.file.find('/') != std::string::npos || en.file.find('\\') != std::string::npos) {
      throw DataError(who + ": payload file must be a plain name");
    }
    if (shape_size(en.shape) * sizeof(float) != en.bytes) {
      throw DataError(who + ": tensor shape " + shape_str(en.shape) +
                      " disagrees with byte count");
    }
    std::error_code ec;
    const auto size = std::filesystem::file_size(dir / en.file, ec);
    if (ec) throw DataError(who + ": missing payload file " + en.file);
    if (en.offset + en.bytes > size) {
      throw DataError(who + ": byte range past end of " + en.file + " (truncated?)");
    }
    seen.push_back(en.id);
    entries_.push_back(std::move(en));
  }
  std::sort(seen.begin(), seen.end());
  if (auto it = std::adjacent_find(seen.begin(), seen.end()); it != seen.end()) {
    throw DataError("manifest: duplicate patient id " + *it);
  }
}

PatientRecord DatasetReader::read(std::size_t index) const {
  const Entry& en = entries_.at(index);
  const std::string who = "patient " + en.id;
  PatientRecord p;
  p.id = en.id;
  p.fold = en.fold;
  p.outcome = en.outcome;
  try {
    p.outcome.validate();
  } catch (const DataError& e) {
    throw DataError(who + ": " + e.what());
  }
  if (en.fold >= header_.folds) throw DataError(who + ": fold out of range");
  if (en.times.empty()) throw DataError(who + ": no visits");
  for (std::size_t i = 0; i < en.times.size(); ++i) {
    if (!std::isfinite(en.times[i]) || (i == 0 ? en.times[i] < 0.0
                                               : !(en.times[i] > en.times[i - 1]))) {
      throw DataError(who + ": visit times must be finite and strictly increasing");
    }
  }

  std::size_t images = 0;
  for (const auto& v : en.views) {
    const auto n = static_cast<std::size_t>(std::count(v.begin(), v.end(), 1));
    if (n == 0) throw DataError(who + ": visit with no present view");
    images += n;
  }
  const std::size_t leading =
      header_.kind == PayloadKind::features ? en.times.size() : images;
  const Shape expected{leading, header_.channels, header_.height, header_.width};
  if (en.shape != expected) {
    throw DataError(who + ": tensor shape " + shape_str(en.shape) + ", expected " +
                    shape_str(expected));
  }

  std::vector<float> buf(en.bytes / sizeof(float));
  std::ifstream f(dir_ / en.file, std::ios::binary);
  if (!f) throw DataError(who + ": cannot open " + en.file);
  f.seekg(static_cast<std::streamoff>(en.offset));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(en.bytes));
  if (!f || static_cast<std::size_t>(f.gcount()) != en.bytes) {
    throw DataError(who + ": payload truncated in " + en.file);
  }
  if ("fnv1a64:" + hex64(checksum_floats(buf)) != en.checksum) {
    throw DataError(who + ": payload checksum mismatch");
  }
  for (float v : buf) {
    if (!std::isfinite(v)) throw DataError(who + ": non-finite payload value");
  }

  const std::size_t per = header_.channels * header_.height * header_.width;
  const Shape item{header_.channels, header_.height, header_.width};
  std::size_t cursor = 0;
  auto take = [&]() {
    std::vector<double> values(buf.begin() + static_cast<std::ptrdiff_t>(cursor),
                               buf.begin() + static_cast<std::ptrdiff_t>(cursor + per));
    cursor += per;
    return Tensor(item, std::move(values));
  };
  for (std::size_t i = 0; i < en.times.size(); ++i) {
    VisitRecord v;
    v.time = en.times[i];
    v.view_present = en.views[i];
    if (header_.kind == PayloadKind::features) {
      v.features = take();
    } else {
      for (std::size_t k = 0; k < kViews; ++k) {
        if (v.view_present[k]) v.views.push_back(take());
      }
    }
    p.visits.push_back(std::move(v));
  }
  return p;
}

Dataset read_dataset(const std::filesystem::path& dir) {
  DatasetReader reader(dir);
  Dataset ds = reader.header();
  ds.patients.reserve(reader.size());
  for (std::size_t i = 0; i < reader.size(); ++i) ds.patients.push_back(reader.read(i));
  return ds;
}

}  // namespace dtmamba::data
