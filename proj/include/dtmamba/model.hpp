#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dtmamba/block.hpp"
#include "dtmamba/hazard.hpp"
#include "dtmamba/synthdata.hpp"
#include "dtmamba/tape.hpp"

namespace dtmamba {

struct EncoderConfig {
  std::size_t image_channels = 1;
  std::size_t image_size = 64;
  std::size_t patch = 8;

  std::size_t grid() const { return patch ? image_size / patch : 0; }
  std::size_t patch_width() const { return image_channels * patch * patch; }
  void validate() const;
};

struct ModelConfig {
  BlockConfig block;
  EncoderConfig encoder;
  /// Inputs are precomputed [d, H0, W0] feature volumes; no encoder.
  bool precomputed_features = false;
  std::uint64_t init_seed = 1;
  double head_init_std = 1e-2;

  void validate() const;
};

/// Non-overlapping patches of a [C, S, S] image as columns: [C*p*p, G*G].
Tensor patchify(const Tensor& image, std::size_t patch);

/// Patchify + linear projection: [C, S, S] -> [d, G, G].
Tensor encode_view(const Tensor& image, const Tensor& weight, const Tensor& bias,
                   std::size_t patch);

/// Elementwise sum of the present views' feature maps.
Tensor fuse_views(std::span<const Tensor> features);

/// Spatial mean, then mean over valid visits: [d, T, H, W] -> [d].
Tensor embed_patient(const Tensor& z, std::span<const std::uint8_t> valid);

/// One patient, left-padded to the configured visit count.
struct PatientInput {
  VisitSchedule schedule;
  /// Images: summed patch columns [C*p*p, T*G*G]. Features: [d, T*G*G].
  Tensor payload;
  /// Present-view count per token column (images only).
  Tensor view_counts;
  std::size_t dropped_visits = 0;  // oldest visits beyond the visit limit
};

/// Keeps the most recent `visits` exams; the first kept exam gets gap 0.
PatientInput make_patient_input(const data::PatientRecord& record,
                                const ModelConfig& config);

class RiskModel {
 public:
  explicit RiskModel(const ModelConfig& config);
  RiskModel(const RiskModel&) = delete;
  RiskModel& operator=(const RiskModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const BlockStack& stack() const { return stack_; }

  /// Per-visit feature volume V [d, T, H0, W0] (zero at padded visits).
  Var features(GradTape& tape, const PatientInput& input) const;
  /// Block stack output Z [d, T, H0, W0].
  Var blocks(GradTape& tape, const PatientInput& input) const;
  /// Patient embedding z [d].
  Var embed(GradTape& tape, const PatientInput& input) const;
  /// Cumulative logits [5].
  Var logits(GradTape& tape, const PatientInput& input) const;

  hazard::RiskOutput predict(const PatientInput& input) const;

  std::size_t encoder_parameter_count() const;
  std::size_t head_parameter_count() const;

 private:
  ModelConfig config_;
  ParameterStore store_;
  std::mt19937_64 init_rng_;
  BlockStack stack_;
  std::size_t enc_w_ = 0, enc_b_ = 0;
  std::size_t head_w_ = 0, head_b_ = 0;
};

}  // namespace dtmamba
