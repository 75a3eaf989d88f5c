#include "dtmamba/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "dtmamba/config.hpp"
#include "dtmamba/errors.hpp"
#include "dtmamba/json_io.hpp"

namespace dtmamba::train {

using json_io::json;

void TrainConfig::validate() const {
  model.validate();
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (learning_rates.empty()) throw ConfigError("learning_rates is empty");
  for (double lr : learning_rates) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be positive");
  }
  if (threads == 0) throw ConfigError("threads must be positive");
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (!(adam.grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "dt") return Ablation::dt;
  if (s == "fusion") return Ablation::fusion;
  if (s == "interslice") return Ablation::interslice;
  throw ConfigError("unknown ablation '" + s + "' (expected dt, fusion or interslice)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::dt: return "dt";
    case Ablation::fusion: return "fusion";
    case Ablation::interslice: return "interslice";
    default: return "none";
  }
}

void apply_ablation(TrainConfig& config, Ablation a) {
  BlockConfig& b = config.model.block;
  switch (a) {
    case Ablation::dt: b.time_aware = false; break;  // gap factor 1 + 0 * gap
    case Ablation::fusion: b.fusion = FusionMode::none; break;
    case Ablation::interslice: b.order = ScanOrder::interslice; break;
    case Ablation::none: break;
  }
}

void adapt_to_dataset(ModelConfig& config, const data::Dataset& header) {
  if (header.kind == data::PayloadKind::features) {
    if (header.channels != config.block.channels) {
      throw ConfigError("feature volumes have " + std::to_string(header.channels) +
                        " channels but the model uses " +
                        std::to_string(config.block.channels));
    }
    config.precomputed_features = true;
    config.block.height = header.height;
    config.block.width = header.width;
  } else {
    if (header.height != header.width) throw ConfigError("images must be square");
    config.precomputed_features = false;
    config.encoder.image_channels = header.channels;
    config.encoder.image_size = header.height;
    config.encoder.validate();
    config.block.height = config.block.width = config.encoder.grid();
  }
  config.validate();
}

// ---------------------------------------------------------------- Adam

Adam::Adam(const ParameterStore& store, AdamConfig config)
    : config_(config), m_(zero_gradients(store)), v_(zero_gradients(store)) {}

double Adam::step(ParameterStore& store, const Gradients& grads, double lr) {
  if (grads.size() != store.size() || m_.size() != store.size()) {
    throw DimensionError("Adam: gradient list does not match the parameter store");
  }
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double x : g.values()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip =
      config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& w = store.value(p);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[p][i] * clip;
      m_[p][i] = config_.beta1 * m_[p][i] + (1.0 - config_.beta1) * g;
      v_[p][i] = config_.beta2 * v_[p][i] + (1.0 - config_.beta2) * g * g;
      w[i] -= lr * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + config_.eps);
    }
  }
  return norm;
}

void Adam::restore(std::size_t steps, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw DataError("Adam state does not match the parameter store");
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
      throw DataError("Adam state shape mismatch");
    }
  }
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---------------------------------------------------------------- samples

std::vector<Sample> prepare_samples(const data::Dataset& dataset, const ModelConfig& config) {
  std::vector<Sample> out;
  out.reserve(dataset.patients.size());
  for (const auto& p : dataset.patients) {
    p.outcome.validate();
    out.push_back({p.id, p.fold, make_patient_input(p, config), p.outcome});
  }
  return out;
}

bool in_training_split(const Sample& s, std::size_t fold) { return s.fold != fold; }

namespace {

// Runs fn(i) for i in [0, n) over up to `threads` workers with a static split.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

BatchResult batch_gradients(const RiskModel& model, std::span<const Sample* const> batch,
                            const hazard::ClassWeights& weights, std::size_t threads) {
  const ParameterStore& store = model.parameters();
  std::vector<std::optional<double>> losses(batch.size());
  std::vector<Gradients> grads(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    GradTape tape;
    Var logits = model.logits(tape, batch[i]->input);
    auto loss = hazard::loss(logits, batch[i]->outcome, weights);
    if (!loss) return;
    const double value = loss->value().item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss for patient " + batch[i]->id);
    }
    tape.backward(*loss);
    losses[i] = value;
    grads[i] = tape.parameter_grads(store);
  });
  BatchResult r;
  r.grads = zero_gradients(store);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!losses[i]) continue;
    r.loss_sum += *losses[i];
    ++r.counted;
    add_into(r.grads, grads[i]);
  }
  return r;
}

std::vector<hazard::RiskOutput> predict_all(const RiskModel& model,
                                            std::span<const Sample* const> samples,
                                            std::size_t threads) {
  std::vector<hazard::RiskOutput> out(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i) { out[i] = model.predict(samples[i]->input); });
  return out;
}

metrics::Report evaluate(const RiskModel& model, std::span<const Sample* const> samples,
                         std::size_t threads) {
  const auto risks = predict_all(model, samples, threads);
  std::vector<hazard::Outcome> outcomes;
  outcomes.reserve(samples.size());
  for (const Sample* s : samples) outcomes.push_back(s->outcome);
  return metrics::evaluate(risks, outcomes);
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  json j;
  j["format"] = "dtmamba-checkpoint";
  j["version"] = 1;
  j["config"] = json::parse(config::to_json(c.config));
  j["learning_rate"] = c.learning_rate;
  j["epoch"] = c.epoch;
  j["train_ids"] = c.train_ids;
  j["class_weights"] = {{"positive", c.weights.positive}, {"negative", c.weights.negative}};
  json params = json::array();
  for (std::size_t i = 0; i < c.parameters.size(); ++i) {
    json p = json_io::to_json(c.parameters[i]);
    p["name"] = c.names.at(i);
    params.push_back(std::move(p));
  }
  j["parameters"] = params;
  json m = json::array(), v = json::array();
  for (const auto& t : c.adam_m) m.push_back(json_io::to_json(t));
  for (const auto& t : c.adam_v) v.push_back(json_io::to_json(t));
  j["adam"] = {{"steps", c.adam_steps}, {"m", m}, {"v", v}};
  json hist = json::array();
  for (const auto& e : c.history) hist.push_back(json_io::to_json(e));
  j["history"] = hist;

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + path.string());
    f << j.dump() << "\n";
    if (!f) throw IoError("write failed: " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint is not valid JSON: " + std::string(e.what()));
  }
  Checkpoint c;
  try {
    if (j.at("format") != "dtmamba-checkpoint" || j.at("version") != 1) {
      throw DataError("not a version-1 checkpoint: " + path.string());
    }
    c.config = config::parse(j.at("config").dump());
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epoch = j.at("epoch").get<std::size_t>();
    c.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    c.weights.positive = j.at("class_weights").at("positive").get<double>();
    c.weights.negative = j.at("class_weights").at("negative").get<double>();
    for (const auto& p : j.at("parameters")) {
      c.names.push_back(p.at("name").get<std::string>());
      c.parameters.push_back(json_io::tensor_from_json(p));
    }
    c.adam_steps = j.at("adam").at("steps").get<std::size_t>();
    for (const auto& t : j["adam"].at("m")) c.adam_m.push_back(json_io::tensor_from_json(t));
    for (const auto& t : j["adam"].at("v")) c.adam_v.push_back(json_io::tensor_from_json(t));
    for (const auto& e : j.at("history")) c.history.push_back(json_io::epoch_from_json(e));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint " + path.string() + ": " + e.what());
  }
  return c;
}

void load_parameters(RiskModel& model, const Checkpoint& ckpt) {
  ParameterStore& store = model.parameters();
  if (ckpt.parameters.size() != store.size()) {
    throw DataError("checkpoint has " + std::to_string(ckpt.parameters.size()) +
                    " parameters, model has " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (ckpt.names[i] != store.name(i) || ckpt.parameters[i].shape() != store.value(i).shape()) {
      throw DataError("checkpoint parameter '" + ckpt.names[i] +
                      "' does not match model parameter '" + store.name(i) + "'");
    }
    store.value(i) = ckpt.parameters[i];
  }
}

// ---------------------------------------------------------------- loops

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Checkpoint snapshot(const TrainConfig& config, double lr, std::size_t epoch,
                    const std::vector<std::string>& ids, const hazard::ClassWeights& w,
                    const RiskModel& model, const Adam& adam,
                    const std::vector<EpochRecord>& history) {
  Checkpoint c;
  c.config = config;
  c.learning_rate = lr;
  c.epoch = epoch;
  c.train_ids = ids;
  c.weights = w;
  const ParameterStore& store = model.parameters();
  for (std::size_t i = 0; i < store.size(); ++i) {
    c.names.push_back(store.name(i));
    c.parameters.push_back(store.value(i));
  }
  c.adam_steps = adam.steps();
  c.adam_m = adam.first_moment();
  c.adam_v = adam.second_moment();
  c.history = history;
  return c;
}

}  // namespace

RunResult run(const TrainConfig& config, double lr, std::span<const Sample* const> train,
              std::span<const Sample* const> validation, const RunOptions& options) {
  config.validate();
  if (train.empty()) throw DataError("empty training split");
  RiskModel model(config.model);
  Adam adam(model.parameters(), config.adam);

  std::vector<std::string> ids;
  std::vector<hazard::Outcome> outcomes;
  for (const Sample* s : train) {
    ids.push_back(s->id);
    outcomes.push_back(s->outcome);
  }
  hazard::ClassWeights weights = hazard::class_weights(outcomes);

  RunResult result;
  std::size_t start = 0;
  if (options.resume) {
    const Checkpoint& c = *options.resume;
    if (c.train_ids != ids) throw DataError("resume checkpoint was trained on another split");
    load_parameters(model, c);
    adam.restore(c.adam_steps, c.adam_m, c.adam_v);
    weights = c.weights;
    lr = c.learning_rate;
    start = c.epoch;
    result.history = c.history;
  }
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);

  const std::size_t last =
      options.stop_after_epoch ? std::min(options.stop_after_epoch, config.epochs) : config.epochs;
  for (std::size_t epoch = start + 1; epoch <= last; ++epoch) {
    const auto order = epoch_order(train.size(), config.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t counted = 0;
    std::vector<const Sample*> batch;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) {
        batch.push_back(train[order[i]]);
      }
      BatchResult br = batch_gradients(model, batch, weights, config.threads);
      rec.skipped += batch.size() - br.counted;
      if (br.counted == 0) continue;
      loss_sum += br.loss_sum;
      counted += br.counted;
      for (auto& g : br.grads) {
        for (double& x : g.values()) x /= static_cast<double>(br.counted);
      }
      adam.step(model.parameters(), br.grads, lr);
    }
    rec.train_loss = counted ? loss_sum / static_cast<double>(counted) : 0.0;
    if (!std::isfinite(rec.train_loss)) {
      throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
    }
    if (!validation.empty()) rec.validation = evaluate(model, validation, config.threads);
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (options.checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.json", epoch);
      save_checkpoint(snapshot(config, lr, epoch, ids, weights, model, adam, result.history),
                      *options.checkpoint_dir / name);
    }
  }
  result.final_state =
      snapshot(config, lr, std::max(start, last), ids, weights, model, adam, result.history);
  return result;
}

FoldResult train_fold(const TrainConfig& config, std::span<const Sample> samples,
                      std::size_t fold, const RunOptions& options) {
  std::vector<const Sample*> train, val;
  for (const Sample& s : samples) (in_training_split(s, fold) ? train : val).push_back(&s);
  if (train.empty() || val.empty()) {
    throw DataError("fold " + std::to_string(fold) + " has an empty split");
  }
  FoldResult out;
  out.fold = fold;
  out.learning_rate = config.learning_rates.front();
  if (config.learning_rates.size() > 1) {
    // Inner holdout keyed on a second hash so it is independent of the folds.
    std::vector<const Sample*> inner, tune;
    for (const Sample* s : train) {
      const std::string key = s->id + "/tune";
      (data::fold_of(key, 5) == 0 ? tune : inner).push_back(s);
    }
    double best = -1.0;
    for (double lr : config.learning_rates) {
      const RunResult r = run(config, lr, inner, tune);
      const auto& rep = r.history.back().validation;
      const double c = rep && rep->c_index_defined ? rep->c_index : 0.0;
      out.tuning_c_index.push_back(c);
      if (c > best) {
        best = c;
        out.learning_rate = lr;
      }
    }
  }
  RunResult r = run(config, out.learning_rate, train, val, options);
  out.history = r.history;
  out.validation = *r.history.back().validation;
  out.final_state = std::move(r.final_state);
  return out;
}

}  // namespace dtmamba::train
