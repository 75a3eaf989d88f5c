#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dtmamba/hazard.hpp"
#include "dtmamba/metrics.hpp"
#include "dtmamba/model.hpp"
#include "dtmamba/synthdata.hpp"

namespace dtmamba::train {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::vector<double> learning_rates{5e-5, 1e-5};
  AdamConfig adam;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::size_t folds = 5;

  void validate() const;
};

enum class Ablation { none, dt, fusion, interslice };
Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);
void apply_ablation(TrainConfig& config, Ablation a);

/// Sets payload mode and grid extents from a dataset header.
void adapt_to_dataset(ModelConfig& config, const data::Dataset& header);

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterStore& store, AdamConfig config);

  /// One update with learning rate `lr`; returns the pre-clip gradient norm.
  double step(ParameterStore& store, const Gradients& grads, double lr);

  std::size_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }
  void restore(std::size_t steps, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamConfig config_;
  std::size_t steps_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Prepared patient: model input plus outcome.
struct Sample {
  std::string id;
  std::size_t fold = 0;
  PatientInput input;
  hazard::Outcome outcome;
};

std::vector<Sample> prepare_samples(const data::Dataset& dataset, const ModelConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::size_t skipped = 0;  // samples with no determinable horizon
  std::optional<metrics::Report> validation;
};

struct Checkpoint {
  TrainConfig config;
  double learning_rate = 0.0;
  std::size_t epoch = 0;  // completed epochs
  std::vector<std::string> train_ids;
  hazard::ClassWeights weights;
  std::vector<std::string> names;
  std::vector<Tensor> parameters;
  std::size_t adam_steps = 0;
  std::vector<Tensor> adam_m, adam_v;
  std::vector<EpochRecord> history;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint parameters into a freshly built model.
void load_parameters(RiskModel& model, const Checkpoint& ckpt);

/// Per-sample loss and parameter gradients summed in sample order.
struct BatchResult {
  double loss_sum = 0.0;
  std::size_t counted = 0;
  Gradients grads;
};

BatchResult batch_gradients(const RiskModel& model, std::span<const Sample* const> batch,
                            const hazard::ClassWeights& weights, std::size_t threads);

std::vector<hazard::RiskOutput> predict_all(const RiskModel& model,
                                            std::span<const Sample* const> samples,
                                            std::size_t threads);

metrics::Report evaluate(const RiskModel& model, std::span<const Sample* const> samples,
                         std::size_t threads);

struct RunOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  // one file per epoch
  std::optional<Checkpoint> resume;
  std::size_t stop_after_epoch = 0;  // 0: run all epochs
  std::function<void(const EpochRecord&)> on_epoch;
};

struct RunResult {
  Checkpoint final_state;
  std::vector<EpochRecord> history;
};

/// Trains one model at a fixed learning rate; evaluates `validation` after
/// every epoch when it is non-empty.
RunResult run(const TrainConfig& config, double learning_rate,
              std::span<const Sample* const> train, std::span<const Sample* const> validation,
              const RunOptions& options = {});

struct FoldResult {
  std::size_t fold = 0;
  double learning_rate = 0.0;
  std::vector<double> tuning_c_index;  // per grid entry; empty with one rate
  metrics::Report validation;
  std::vector<EpochRecord> history;
  Checkpoint final_state;
};

/// Learning-rate choice uses an inner holdout of the training split when the
/// grid has more than one rate.
FoldResult train_fold(const TrainConfig& config, std::span<const Sample> samples,
                      std::size_t fold, const RunOptions& options = {});

/// Entries with `id` in the training split of fold `fold`.
bool in_training_split(const Sample& s, std::size_t fold);

}  // namespace dtmamba::train
