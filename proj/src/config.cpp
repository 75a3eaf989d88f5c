#include "dtmamba/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

#include "dtmamba/errors.hpp"

namespace dtmamba::config {
namespace {

using json = nlohmann::ordered_json;

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json kernels_to_json(const std::vector<fusion::KernelExtent>& kernels) {
  json out = json::array();
  for (const auto& k : kernels) out.push_back({k.t, k.h, k.w});
  return out;
}

}  // namespace

train::TrainConfig parse(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(root, {"model", "train", "optimizer"}, "config");
  train::TrainConfig c;
  try {
    if (root.contains("model")) {
      const json& m = root["model"];
      reject_unknown(m,
                     {"channels", "state_size", "visits", "height", "width", "layers",
                      "kernels", "gamma_init_logit", "tau_min", "gate", "time_aware",
                      "order", "fusion", "fusion_init_noise", "dt_init_min", "dt_init_max",
                      "norm_eps", "encoder", "precomputed_features", "init_seed",
                      "head_init_std"},
                     "model");
      BlockConfig& b = c.model.block;
      read(m, "channels", b.channels);
      read(m, "state_size", b.state_size);
      read(m, "visits", b.visits);
      read(m, "height", b.height);
      read(m, "width", b.width);
      read(m, "layers", b.layers);
      if (m.contains("kernels")) {
        b.kernels.clear();
        for (const auto& k : m["kernels"]) {
          const auto e = k.get<std::vector<std::size_t>>();
          if (e.size() != 3) throw ConfigError("model.kernels entries must be [t, h, w]");
          b.kernels.push_back({e[0], e[1], e[2]});
        }
      }
      read(m, "gamma_init_logit", b.gamma_init_logit);
      read(m, "tau_min", b.tau_min);
      read(m, "gate", b.gate);
      read(m, "time_aware", b.time_aware);
      if (m.contains("order")) b.order = scan_order_from_string(m["order"].get<std::string>());
      if (m.contains("fusion")) {
        b.fusion = fusion_mode_from_string(m["fusion"].get<std::string>());
      }
      read(m, "fusion_init_noise", b.fusion_init_noise);
      read(m, "dt_init_min", b.dt_init_min);
      read(m, "dt_init_max", b.dt_init_max);
      read(m, "norm_eps", b.norm_eps);
      if (m.contains("encoder")) {
        const json& e = m["encoder"];
        reject_unknown(e, {"image_channels", "image_size", "patch"}, "model.encoder");
        read(e, "image_channels", c.model.encoder.image_channels);
        read(e, "image_size", c.model.encoder.image_size);
        read(e, "patch", c.model.encoder.patch);
      }
      read(m, "precomputed_features", c.model.precomputed_features);
      read(m, "init_seed", c.model.init_seed);
      read(m, "head_init_std", c.model.head_init_std);
    }
    if (root.contains("train")) {
      const json& t = root["train"];
      reject_unknown(t,
                     {"epochs", "batch_size", "learning_rates", "seed", "threads", "folds",
                      "horizons"},
                     "train");
      read(t, "epochs", c.epochs);
      read(t, "batch_size", c.batch_size);
      read(t, "learning_rates", c.learning_rates);
      read(t, "seed", c.seed);
      read(t, "threads", c.threads);
      read(t, "folds", c.folds);
      if (t.contains("horizons") && t["horizons"].get<std::size_t>() != hazard::kHorizons) {
        throw ConfigError("train.horizons must be " + std::to_string(hazard::kHorizons));
      }
    }
    if (root.contains("optimizer")) {
      const json& o = root["optimizer"];
      reject_unknown(o, {"beta1", "beta2", "eps", "grad_clip"}, "optimizer");
      read(o, "beta1", c.adam.beta1);
      read(o, "beta2", c.adam.beta2);
      read(o, "eps", c.adam.eps);
      read(o, "grad_clip", c.adam.grad_clip);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

train::TrainConfig load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string to_json(const train::TrainConfig& c) {
  const BlockConfig& b = c.model.block;
  json m;
  m["channels"] = b.channels;
  m["state_size"] = b.state_size;
  m["visits"] = b.visits;
  m["height"] = b.height;
  m["width"] = b.width;
  m["layers"] = b.layers;
  m["kernels"] = kernels_to_json(b.kernels);
  m["gamma_init_logit"] = b.gamma_init_logit;
  m["tau_min"] = b.tau_min;
  m["gate"] = b.gate;
  m["time_aware"] = b.time_aware;
  m["order"] = to_string(b.order);
  m["fusion"] = to_string(b.fusion);
  m["fusion_init_noise"] = b.fusion_init_noise;
  m["dt_init_min"] = b.dt_init_min;
  m["dt_init_max"] = b.dt_init_max;
  m["norm_eps"] = b.norm_eps;
  m["encoder"] = {{"image_channels", c.model.encoder.image_channels},
                  {"image_size", c.model.encoder.image_size},
                  {"patch", c.model.encoder.patch}};
  m["precomputed_features"] = c.model.precomputed_features;
  m["init_seed"] = c.model.init_seed;
  m["head_init_std"] = c.model.head_init_std;
  json root;
  root["model"] = m;
  root["train"] = {{"epochs", c.epochs},   {"batch_size", c.batch_size},
                   {"learning_rates", c.learning_rates},
                   {"seed", c.seed},       {"threads", c.threads},
                   {"folds", c.folds},     {"horizons", hazard::kHorizons}};
  root["optimizer"] = {{"beta1", c.adam.beta1},
                       {"beta2", c.adam.beta2},
                       {"eps", c.adam.eps},
                       {"grad_clip", c.adam.grad_clip}};
  return root.dump(2);
}

}  // namespace dtmamba::config
