// dtmamba: generate, train, eval, profile and gradcheck entry point.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "dtmamba/config.hpp"
#include "dtmamba/errors.hpp"
#include "dtmamba/json_io.hpp"
#include "dtmamba/profiler.hpp"
#include "dtmamba/synthdata.hpp"
#include "dtmamba/train.hpp"

namespace fs = std::filesystem;
using dtmamba::json_io::json;
using namespace dtmamba;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path.string());
}

std::size_t default_threads() {
  if (const char* env = std::getenv("DTMAMBA_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

json mean_std(const std::vector<double>& v) {
  if (v.empty()) return nullptr;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}, {"n", v.size()}};
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a) {
  data::CohortSpec spec = data::CohortSpec::from_json(read_file(a.spec));
  if (a.seed) spec.seed = *a.seed;
  const auto cohort = data::generate(spec, a.out);
  const auto& ps = cohort.dataset.patients;
  std::size_t cases = 0, visits = 0;
  std::vector<std::size_t> per_fold(spec.folds, 0);
  for (const auto& p : ps) {
    cases += p.outcome.event ? 1 : 0;
    visits += p.visits.size();
    ++per_fold[p.fold];
  }
  const auto hist = data::event_histogram(ps);
  json summary;
  summary["out"] = a.out;
  summary["patients"] = ps.size();
  summary["cases"] = cases;
  summary["censored"] = ps.size() - cases;
  summary["mean_visits"] = static_cast<double>(visits) / static_cast<double>(ps.size());
  summary["event_years"] = hist;
  summary["fold_sizes"] = per_fold;
  summary["gap_signal_audit"] = data::audit_gap_signal(spec);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config, out, ablate = "none";
  std::optional<std::size_t> folds, fold, threads, epochs;
  std::optional<std::uint64_t> seed;
  std::string resume;
};

train::TrainConfig load_config(const std::string& path) {
  return config::parse(read_file(path));
}

int cmd_train(const TrainArgs& a) {
  train::TrainConfig cfg = load_config(a.config);
  train::apply_ablation(cfg, train::ablation_from_string(a.ablate));
  if (a.seed) cfg.seed = cfg.model.init_seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  cfg.threads = a.threads.value_or(default_threads());
  const std::size_t folds = a.folds.value_or(cfg.folds);
  if (folds == 0) throw UsageError("--folds must be positive");
  if (folds > 1) cfg.folds = folds;

  data::Dataset ds = data::read_dataset(a.data);
  train::adapt_to_dataset(cfg.model, ds);
  if (folds > 1 && folds != ds.folds) {
    for (auto& p : ds.patients) p.fold = data::fold_of(p.id, folds);
  }
  const auto samples = train::prepare_samples(ds, cfg.model);
  fs::create_directories(a.out);

  train::RunOptions base;
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw UsageError("checkpoint not found: " + a.resume);
    base.resume = train::load_checkpoint(a.resume);
  }

  json summary;
  summary["config"] = json::parse(config::to_json(cfg));
  summary["ablation"] = a.ablate;

  if (folds == 1) {
    // Whole dataset, no validation split.
    std::vector<const train::Sample*> all;
    for (const auto& s : samples) all.push_back(&s);
    train::RunOptions opt = base;
    opt.checkpoint_dir = fs::path(a.out) / "all";
    opt.on_epoch = [](const train::EpochRecord& e) {
      std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << "\n";
    };
    const double lr = base.resume ? base.resume->learning_rate : cfg.learning_rates.front();
    auto r = train::run(cfg, lr, all, {}, opt);
    json hist = json::array();
    for (const auto& e : r.history) hist.push_back(json_io::to_json(e));
    write_json(fs::path(a.out) / "all" / "metrics.json", {{"history", hist}});
    train::save_checkpoint(r.final_state, fs::path(a.out) / "all" / "final.json");
    summary["folds"] = 1;
    summary["learning_rate"] = lr;
    summary["final_train_loss"] = r.history.empty() ? json(nullptr)
                                                    : json(r.history.back().train_loss);
    write_json(fs::path(a.out) / "summary.json", summary);
    std::cout << summary.dump(2) << "\n";
    return 0;
  }

  std::vector<std::size_t> which;
  if (a.fold) {
    if (*a.fold >= folds) throw UsageError("--fold must be below --folds");
    which.push_back(*a.fold);
  } else {
    if (base.resume) throw UsageError("--resume needs --fold");
    for (std::size_t k = 0; k < folds; ++k) which.push_back(k);
  }

  std::vector<double> cidx;
  std::array<std::vector<double>, hazard::kHorizons> aucs;
  json fold_reports = json::array();
  for (std::size_t k : which) {
    const fs::path dir = fs::path(a.out) / ("fold_" + std::to_string(k));
    train::RunOptions opt = base;
    opt.checkpoint_dir = dir;
    opt.on_epoch = [k](const train::EpochRecord& e) {
      std::cerr << "fold " << k << " epoch " << e.epoch << " loss " << e.train_loss;
      if (e.validation && e.validation->c_index_defined) {
        std::cerr << " val c-index " << e.validation->c_index;
      }
      std::cerr << "\n";
    };
    train::TrainConfig fold_cfg = cfg;
    if (base.resume) fold_cfg.learning_rates = {base.resume->learning_rate};
    const auto r = train::train_fold(fold_cfg, samples, k, opt);
    json hist = json::array();
    for (const auto& e : r.history) hist.push_back(json_io::to_json(e));
    write_json(dir / "metrics.json",
               {{"fold", k}, {"learning_rate", r.learning_rate},
                {"tuning_c_index", r.tuning_c_index}, {"history", hist}});
    train::save_checkpoint(r.final_state, dir / "final.json");
    if (r.validation.c_index_defined) cidx.push_back(r.validation.c_index);
    for (std::size_t h = 0; h < hazard::kHorizons; ++h) {
      if (r.validation.auc[h].defined) aucs[h].push_back(r.validation.auc[h].auc);
    }
    fold_reports.push_back({{"fold", k},
                            {"learning_rate", r.learning_rate},
                            {"validation", json_io::to_json(r.validation)}});
  }
  summary["folds"] = folds;
  summary["per_fold"] = fold_reports;
  summary["c_index"] = mean_std(cidx);
  json auc_summary = json::array();
  for (std::size_t h = 0; h < hazard::kHorizons; ++h) {
    auc_summary.push_back({{"year", h + 1}, {"auc", mean_std(aucs[h])}});
  }
  summary["auc"] = auc_summary;
  write_json(fs::path(a.out) / "summary.json", summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string data, ckpt, split = "all";
  std::optional<std::size_t> threads;
};

int cmd_eval(const EvalArgs& a) {
  if (!fs::exists(a.ckpt)) throw UsageError("checkpoint not found: " + a.ckpt);
  const train::Checkpoint ckpt = train::load_checkpoint(a.ckpt);
  train::TrainConfig cfg = ckpt.config;
  const data::Dataset ds = data::read_dataset(a.data);
  train::adapt_to_dataset(cfg.model, ds);
  RiskModel model(cfg.model);
  train::load_parameters(model, ckpt);
  const auto samples = train::prepare_samples(ds, cfg.model);
  const std::set<std::string> train_ids(ckpt.train_ids.begin(), ckpt.train_ids.end());
  std::vector<const train::Sample*> chosen;
  for (const auto& s : samples) {
    const bool in_train = train_ids.count(s.id) > 0;
    if (a.split == "all" || (a.split == "train" && in_train) ||
        (a.split == "val" && !in_train)) {
      chosen.push_back(&s);
    }
  }
  if (chosen.empty()) throw DataError("no patients in split '" + a.split + "'");
  const auto report = train::evaluate(model, chosen, a.threads.value_or(default_threads()));
  json out = json_io::to_json(report);
  out["split"] = a.split;
  out["patients"] = chosen.size();
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- profile

struct ProfileArgs {
  std::string config, json_out;
  std::optional<std::size_t> tokens;
  bool bench = false;
  std::size_t repeats = 7;
};

int cmd_profile(const ProfileArgs& a) {
  const train::TrainConfig cfg = load_config(a.config);
  const BlockConfig& b = cfg.model.block;
  const std::size_t len = a.tokens.value_or(b.tokens());
  const auto params = profiler::count_params(cfg.model);
  const auto coef = profiler::flop_coefficients(b);
  const double flops = profiler::count_flops(b, len);

  json out;
  out["tokens"] = len;
  out["layers"] = b.layers;
  out["params"] = {{"projection", params.block.projection},
                   {"a_log", params.block.a_log},
                   {"skip", params.block.skip},
                   {"gamma", params.block.gamma},
                   {"fusion", params.block.fusion},
                   {"gate", params.block.gate},
                   {"block", params.block.total()},
                   {"stack", params.stack},
                   {"encoder", params.encoder},
                   {"head", params.head},
                   {"total", params.total}};
  out["flops_per_token"] = {{"projection", coef.projection}, {"step", coef.step},
                            {"recurrence", coef.recurrence}, {"readout", coef.readout},
                            {"fusion", coef.fusion},         {"mixing", coef.mixing},
                            {"skip", coef.skip},             {"gate", coef.gate},
                            {"total", coef.per_token()}};
  out["flops"] = flops;

  std::printf("%-22s %12s %12s\n", "model", "Params (M)", "FLOPs (G)");
  std::printf("%-22s %12.3f %12.3f\n", "dt-mamba3d stack",
              static_cast<double>(params.stack) / 1e6, flops / 1e9);

  if (a.bench) {
    const std::vector<std::size_t> lens{256, 512, 1024, 2048, 4096};
    BlockConfig bc = b;
    bc.kernels.clear();
    const auto rep = profiler::bench_throughput(bc, lens, a.repeats);
    json rows = json::array();
    std::printf("\n%8s %8s %14s %14s %8s\n", "tokens", "visits", "median (s)", "tokens/s", "cv");
    for (const auto& r : rep.rows) {
      std::printf("%8zu %8zu %14.6f %14.0f %8.3f\n", r.tokens, r.visits, r.median_seconds,
                  r.tokens_per_second, r.coefficient_of_variation);
      rows.push_back({{"tokens", r.tokens},
                      {"visits", r.visits},
                      {"median_seconds", r.median_seconds},
                      {"tokens_per_second", r.tokens_per_second},
                      {"cv", r.coefficient_of_variation}});
    }
    std::printf("log-log slope %.3f\n", rep.slope);
    out["bench"] = {{"rows", rows}, {"slope", rep.slope}, {"median_cv", rep.median_cv},
                    {"repeats", rep.repeats}};
  }
  if (!a.json_out.empty()) write_json(a.json_out, out);
  return 0;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::string config;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  train::TrainConfig cfg = load_config(a.config);
  cfg.model.init_seed = a.seed;
  RiskModel model(cfg.model);
  const BlockConfig& b = cfg.model.block;

  // One synthetic patient with every visit valid and a mid-range event.
  std::mt19937_64 rng(a.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  data::PatientRecord rec;
  rec.id = "gradcheck";
  rec.outcome = hazard::Outcome::event_at(30.0);
  double time = 0.0;
  for (std::size_t t = 0; t < b.visits; ++t) {
    data::VisitRecord v;
    v.time = time;
    time += 12.0 + 6.0 * static_cast<double>(t % 4);
    v.view_present = {1, 1, 0, 1};
    if (cfg.model.precomputed_features) {
      v.features = Tensor({b.channels, b.height, b.width});
      for (double& x : v.features.values()) x = normal(rng);
    } else {
      const auto& e = cfg.model.encoder;
      for (int k = 0; k < 3; ++k) {
        Tensor img({e.image_channels, e.image_size, e.image_size});
        for (double& x : img.values()) x = normal(rng);
        v.views.push_back(std::move(img));
      }
    }
    rec.visits.push_back(std::move(v));
  }
  const PatientInput input = make_patient_input(rec, cfg.model);
  const hazard::ClassWeights weights{2.0, 1.0};
  auto loss = [&](GradTape& tape, const ParameterStore&) {
    return *hazard::loss(model.logits(tape, input), rec.outcome, weights);
  };
  const auto r = grad_check(loss, model.parameters());
  json out = {{"max_rel_error", r.max_rel_error},
              {"worst_parameter", r.worst_parameter},
              {"worst_entry", r.worst_entry},
              {"entries_checked", r.entries_checked},
              {"tolerance", a.tolerance},
              {"pass", r.max_rel_error <= a.tolerance}};
  std::cout << out.dump(2) << "\n";
  return r.max_rel_error <= a.tolerance ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-aware selective-scan risk model: data, training and profiling"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic cohort dataset");
  g->add_option("--spec", gen.spec, "Cohort spec JSON")->required()->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--seed", gen.seed, "Override the spec seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train with patient-level cross-validation");
  t->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--config", tr.config, "Config JSON")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--ablate", tr.ablate, "dt | fusion | interslice")
      ->check(CLI::IsMember({"none", "dt", "fusion", "interslice"}));
  t->add_option("--folds", tr.folds, "Fold count (1 trains on everything)");
  t->add_option("--fold", tr.fold, "Run a single fold");
  t->add_option("--threads", tr.threads, "Worker threads (default $DTMAMBA_THREADS or 1)");
  t->add_option("--epochs", tr.epochs, "Override the configured epoch count");
  t->add_option("--seed", tr.seed, "Override shuffle and init seeds");
  t->add_option("--resume", tr.resume, "Resume from a checkpoint (needs --fold)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--ckpt", ev.ckpt, "Checkpoint JSON")->required();
  e->add_option("--split", ev.split, "all | train | val")
      ->check(CLI::IsMember({"all", "train", "val"}));
  e->add_option("--threads", ev.threads, "Worker threads");

  ProfileArgs pr;
  auto* p = app.add_subcommand("profile", "Parameter and FLOP accounting");
  p->add_option("--config", pr.config, "Config JSON")->required()->check(CLI::ExistingFile);
  p->add_option("--tokens", pr.tokens, "Token count (default T*H*W)");
  p->add_flag("--bench", pr.bench, "Measure throughput over L = 256..4096");
  p->add_option("--repeats", pr.repeats, "Timed repeats per L")->check(CLI::PositiveNumber);
  p->add_option("--json", pr.json_out, "Write a JSON report here");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Central-difference gradient check");
  c->add_option("--config", gc.config, "Config JSON")->required()->check(CLI::ExistingFile);
  c->add_option("--seed", gc.seed, "Init and input seed");
  c->add_option("--tolerance", gc.tolerance, "Max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_profile(pr);
    if (*c) return cmd_gradcheck(gc);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
