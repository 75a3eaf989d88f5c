#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dtmamba/hazard.hpp"
#include "dtmamba/tensor.hpp"

// Synthetic longitudinal cohort and its on-disk format.
//
// A dataset directory holds `manifest.json` plus `payload_###.f32` shards of
// raw little-endian float32 values. Each patient entry in the manifest points
// at a byte range in one shard; see docs/dataset_format.md.
namespace dtmamba::data {

inline constexpr int kFormatVersion = 1;
inline constexpr std::size_t kViews = 4;

enum class PayloadKind { images, features };

struct VisitRecord {
  double time = 0.0;  // months since the first exam
  std::array<std::uint8_t, kViews> view_present{};
  std::vector<Tensor> views;  // present views only, in view order; [C, H, W]
  Tensor features;            // [d, H0, W0] for feature payloads
};

struct PatientRecord {
  std::string id;
  std::size_t fold = 0;
  std::vector<VisitRecord> visits;
  hazard::Outcome outcome;

  /// Calendar gaps; the first entry is 0.
  std::vector<double> gaps() const;
};

struct Dataset {
  PayloadKind kind = PayloadKind::images;
  std::size_t channels = 1;  // image or feature channels
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t folds = 5;
  std::string cohort_spec;  // JSON text of the generating spec, if any
  std::vector<PatientRecord> patients;
};

struct CohortSpec {
  std::uint64_t seed = 7;
  std::size_t patients = 1000;
  std::size_t min_visits = 2;
  std::size_t max_visits = 8;
  std::vector<double> gap_choices{12, 18, 24, 30, 36};
  double gap_regularity = 0.0;  // chance an interval repeats the patient's usual gap
  double case_fraction = 0.5;
  std::size_t folds = 5;

  PayloadKind kind = PayloadKind::images;
  std::size_t image_size = 32;
  std::size_t feature_channels = 8;  // feature payloads only
  std::size_t patch = 8;             // feature payloads only
  double view_drop_prob = 0.0;

  // Latent growth g_t = g_{t-1} + r * gap + N(0, latent_sigma). Cases draw
  // the crossing time after the last exam and the last amplitude
  // independently; r follows and must land in the growth rate range.
  double threshold = 1.0;
  double growth_rate_min = 0.005;  // per month, cases
  double growth_rate_max = 0.2;
  double crossing_min = 6.0;  // months after the last exam
  double crossing_max = 54.0;
  double last_amplitude_min = 0.3;
  double last_amplitude_max = 0.8;
  double lead_max = 12.0;      // uniform [0, lead_max) added to the crossing
  double latent_sigma = 0.02;
  double control_amplitude_min = 0.0;
  double control_amplitude_max = 0.8;
  double followup_min = 12.0;
  double followup_max = 72.0;

  // Rendering.
  double noise_sigma = 0.1;
  double blob_sigma = 3.0;       // pixels
  double position_jitter = 0.0;  // per-visit blob offset, pixels (uniform +-)
  // When visit_step_max > 0, cases keep r * usual gap inside this band, so the
  // per-visit growth looks alike and only the gaps separate the rates.
  double visit_step_min = 0.0;
  double visit_step_max = 0.0;

  void validate() const;
  std::string to_json() const;
  static CohortSpec from_json(const std::string& text);
};

/// Ground truth kept alongside each generated patient (not serialized).
struct PatientTruth {
  double growth_rate = 0.0;
  double crossing = 0.0;  // months after the last exam; cases only
  std::vector<double> amplitudes;  // latent, before flooring at zero
};

struct GeneratedCohort {
  Dataset dataset;
  std::vector<PatientTruth> truth;
};

GeneratedCohort generate_cohort(const CohortSpec& spec);

/// Generates and writes; returns the in-memory copy.
GeneratedCohort generate(const CohortSpec& spec, const std::filesystem::path& dir);

/// Two noise-free patients with identical amplitude sequences but different
/// gaps: returns true when their growth rates and event times both differ.
bool audit_gap_signal(const CohortSpec& spec);

/// Event counts in yearly bins (0,12], (12,24], ..., (48,60], and beyond.
std::array<std::size_t, hazard::kHorizons + 1> event_histogram(
    std::span<const PatientRecord> patients);

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::size_t fold_of(const std::string& id, std::size_t folds);

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Random access to a dataset directory; records are decoded on demand and
/// validated against the manifest.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& dir);

  std::size_t size() const;
  PatientRecord read(std::size_t index) const;
  const Dataset& header() const { return header_; }

 private:
  struct Entry {
    std::string id;
    std::size_t fold = 0;
    std::vector<double> times;
    std::vector<std::array<std::uint8_t, kViews>> views;
    std::string file;
    std::size_t offset = 0;
    std::size_t bytes = 0;
    Shape shape;
    std::string checksum;
    hazard::Outcome outcome;
  };
  std::filesystem::path dir_;
  Dataset header_;  // metadata only; patients left empty
  std::vector<Entry> entries_;
};

Dataset read_dataset(const std::filesystem::path& dir);

std::string to_string(PayloadKind kind);

}  // namespace dtmamba::data
