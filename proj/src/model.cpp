#include "dtmamba/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dtmamba/errors.hpp"
#include "dtmamba/ops.hpp"

namespace dtmamba {
namespace {

constexpr double kHazardBiasInit = -2.0;  // softplus(-2) ~ 0.13 per year

std::size_t present_views(const data::VisitRecord& v) {
  return static_cast<std::size_t>(std::count(v.view_present.begin(), v.view_present.end(), 1));
}

}  // namespace

void EncoderConfig::validate() const {
  if (image_channels == 0 || image_size == 0 || patch == 0) {
    throw ConfigError("encoder extents must be positive");
  }
  if (image_size % patch != 0) {
    throw ConfigError("image size " + std::to_string(image_size) +
                      " is not divisible by patch " + std::to_string(patch));
  }
}

void ModelConfig::validate() const {
  block.validate();
  if (!precomputed_features) {
    encoder.validate();
    if (encoder.grid() != block.height || encoder.grid() != block.width) {
      throw ConfigError("encoder grid " + std::to_string(encoder.grid()) +
                        " does not match block grid " + std::to_string(block.height) +
                        "x" + std::to_string(block.width));
    }
  }
  if (!(head_init_std >= 0.0)) throw ConfigError("head_init_std must be non-negative");
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) {
    throw DimensionError("patchify expects [C, S, S], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("image " + shape_str(image.shape()) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, rows = c * patch * patch;
  Tensor out({rows, gh * gw});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t row = (ch * patch + y % patch) * patch + x % patch;
        const std::size_t col = (y / patch) * gw + x / patch;
        out[row * gh * gw + col] = image[(ch * h + y) * w + x];
      }
    }
  }
  return out;
}

Tensor encode_view(const Tensor& image, const Tensor& weight, const Tensor& bias,
                   std::size_t patch) {
  const Tensor cols = patchify(image, patch);
  const std::size_t rows = cols.dim(0), n = cols.dim(1);
  if (weight.rank() != 2 || weight.dim(1) != rows || bias.size() != weight.dim(0)) {
    throw DimensionError("encoder weight " + shape_str(weight.shape()) +
                         " does not match patch width " + std::to_string(rows));
  }
  const std::size_t d = weight.dim(0);
  const std::size_t gh = image.dim(1) / patch, gw = image.dim(2) / patch;
  Tensor out({d, gh, gw});
  for (std::size_t o = 0; o < d; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = bias[o];
      for (std::size_t r = 0; r < rows; ++r) acc += weight[o * rows + r] * cols[r * n + j];
      out[o * n + j] = acc;
    }
  }
  return out;
}

Tensor fuse_views(std::span<const Tensor> features) {
  if (features.empty()) throw DataError("fuse_views: no present view");
  Tensor out = features.front();
  for (std::size_t i = 1; i < features.size(); ++i) {
    if (features[i].shape() != out.shape()) {
      throw DimensionError("fuse_views: view shapes differ");
    }
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += features[i][k];
  }
  return out;
}

Tensor embed_patient(const Tensor& z, std::span<const std::uint8_t> valid) {
  if (z.rank() != 4) throw DimensionError("embed_patient expects [d, T, H, W]");
  const std::size_t d = z.dim(0), t = z.dim(1), hw = z.dim(2) * z.dim(3);
  if (valid.size() != t) throw DimensionError("embed_patient: mask length mismatch");
  const auto count = static_cast<std::size_t>(
      std::count_if(valid.begin(), valid.end(), [](auto m) { return m != 0; }));
  if (count == 0) throw EmptyReductionError("embed_patient: no valid visit");
  Tensor out({d});
  for (std::size_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (std::size_t v = 0; v < t; ++v) {
      if (!valid[v]) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += z[(c * t + v) * hw + i];
      acc += s / static_cast<double>(hw);
    }
    out[c] = acc / static_cast<double>(count);
  }
  return out;
}

PatientInput make_patient_input(const data::PatientRecord& record,
                                const ModelConfig& config) {
  const BlockConfig& b = config.block;
  const std::size_t t_max = b.visits, hw = b.height * b.width;
  if (record.visits.empty()) throw DataError("patient " + record.id + ": no visits");
  const std::size_t keep = std::min(record.visits.size(), t_max);
  const std::size_t first = record.visits.size() - keep;
  const std::size_t pad = t_max - keep;

  PatientInput in;
  in.dropped_visits = first;
  in.schedule.gaps.assign(t_max, 0.0);
  in.schedule.valid.assign(t_max, 0);
  const std::size_t rows =
      config.precomputed_features ? b.channels : config.encoder.patch_width();
  in.payload = Tensor({rows, t_max * hw});
  in.view_counts = Tensor({1, t_max * hw});

  for (std::size_t k = 0; k < keep; ++k) {
    const data::VisitRecord& v = record.visits[first + k];
    const std::size_t slot = pad + k;
    in.schedule.valid[slot] = 1;
    if (k > 0) in.schedule.gaps[slot] = v.time - record.visits[first + k - 1].time;

    Tensor cols;
    if (config.precomputed_features) {
      if (v.features.shape() != Shape{b.channels, b.height, b.width}) {
        throw DimensionError("patient " + record.id + ": feature volume " +
                             shape_str(v.features.shape()) + " does not match the grid");
      }
      cols = v.features.reshaped({b.channels, hw});
    } else {
      if (v.views.empty() || v.views.size() != present_views(v)) {
        throw DataError("patient " + record.id + ": visit without present views");
      }
      std::vector<Tensor> patches;
      for (const Tensor& img : v.views) {
        if (img.shape() != Shape{config.encoder.image_channels, config.encoder.image_size,
                                 config.encoder.image_size}) {
          throw DimensionError("patient " + record.id + ": image " +
                               shape_str(img.shape()) + " does not match the encoder");
        }
        patches.push_back(patchify(img, config.encoder.patch));
      }
      cols = fuse_views(patches);
      for (std::size_t j = 0; j < hw; ++j) {
        in.view_counts[slot * hw + j] = static_cast<double>(v.views.size());
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(cols.data() + r * hw, hw, in.payload.data() + r * t_max * hw + slot * hw);
    }
  }
  in.schedule.validate(t_max);
  return in;
}

RiskModel::RiskModel(const ModelConfig& config)
    : config_((config.validate(), config)),
      init_rng_(config.init_seed),
      stack_(config_.block, store_, "stack.", init_rng_) {
  const std::size_t d = config_.block.channels;
  if (!config_.precomputed_features) {
    const std::size_t width = config_.encoder.patch_width();
    std::normal_distribution<double> w(0.0, 1.0 / std::sqrt(static_cast<double>(width)));
    Tensor weight({d, width});
    for (double& x : weight.values()) x = w(init_rng_);
    enc_w_ = store_.add("encoder.weight", std::move(weight));
    enc_b_ = store_.add("encoder.bias", Tensor({d}));
  }
  std::normal_distribution<double> h(0.0, config_.head_init_std);
  Tensor head({1 + hazard::kHorizons, d});
  for (double& x : head.values()) x = h(init_rng_);
  Tensor bias({1 + hazard::kHorizons}, kHazardBiasInit);
  bias[0] = 0.0;
  head_w_ = store_.add("head.weight", std::move(head));
  head_b_ = store_.add("head.bias", std::move(bias));
}

Var RiskModel::features(GradTape& tape, const PatientInput& input) const {
  const BlockConfig& b = config_.block;
  const Shape grid{b.channels, b.visits, b.height, b.width};
  const std::size_t len = b.tokens();
  if (input.payload.rank() != 2 || input.payload.dim(1) != len) {
    throw DimensionError("patient input " + shape_str(input.payload.shape()) +
                         " does not match " + std::to_string(len) + " tokens");
  }
  if (config_.precomputed_features) {
    return tape.constant(input.payload.reshaped(grid));
  }
  // Linear encoder: W * (sum of patches) + (view count) * bias.
  Var e = ops::matmul(tape.parameter(store_, enc_w_), tape.constant(input.payload));
  Var bias = ops::matmul(ops::reshape(tape.parameter(store_, enc_b_), {b.channels, 1}),
                         tape.constant(input.view_counts));
  return ops::reshape(ops::add(e, bias), grid);
}

Var RiskModel::blocks(GradTape& tape, const PatientInput& input) const {
  return stack_.forward(store_, features(tape, input), input.schedule);
}

Var RiskModel::embed(GradTape& tape, const PatientInput& input) const {
  const BlockConfig& b = config_.block;
  Var z = ops::reshape(blocks(tape, input), {b.channels, b.visits, b.height * b.width});
  return ops::masked_mean(ops::mean_axis(z, 2), 1, input.schedule.valid);
}

Var RiskModel::logits(GradTape& tape, const PatientInput& input) const {
  return hazard::cumulative_logits(embed(tape, input), tape.parameter(store_, head_w_),
                                   tape.parameter(store_, head_b_));
}

hazard::RiskOutput RiskModel::predict(const PatientInput& input) const {
  GradTape tape;
  Var z = embed(tape, input);
  return hazard::risk_head(z.value().values(),
                           {store_.value(head_w_), store_.value(head_b_)});
}

std::size_t RiskModel::encoder_parameter_count() const {
  if (config_.precomputed_features) return 0;
  return store_.value(enc_w_).size() + store_.value(enc_b_).size();
}

std::size_t RiskModel::head_parameter_count() const {
  return store_.value(head_w_).size() + store_.value(head_b_).size();
}

}  // namespace dtmamba
