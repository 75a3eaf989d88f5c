#include "dtmamba/json_io.hpp"

#include "dtmamba/errors.hpp"

namespace dtmamba::json_io {

json to_json(const Tensor& t) {
  return {{"shape", t.shape()},
          {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const json& j) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad tensor record: ") + e.what());
  } catch (const DimensionError& e) {
    throw DataError(std::string("bad tensor record: ") + e.what());
  }
}

json to_json(const metrics::Report& r) {
  json out;
  out["c_index"] = r.c_index_defined ? json(r.c_index) : json(nullptr);
  json aucs = json::array();
  for (const auto& h : r.auc) {
    aucs.push_back({{"year", h.year},
                    {"auc", h.defined ? json(h.auc) : json(nullptr)},
                    {"determinable", h.determinable},
                    {"positives", h.positives}});
  }
  out["auc"] = aucs;
  return out;
}

metrics::Report report_from_json(const json& j) {
  metrics::Report r;
  try {
    if (!j.at("c_index").is_null()) {
      r.c_index = j["c_index"].get<double>();
      r.c_index_defined = true;
    }
    const json& aucs = j.at("auc");
    if (aucs.size() != hazard::kHorizons) throw DataError("report needs 5 AUC entries");
    for (std::size_t k = 0; k < hazard::kHorizons; ++k) {
      auto& h = r.auc[k];
      h.year = aucs[k].at("year").get<std::size_t>();
      if (!aucs[k].at("auc").is_null()) {
        h.auc = aucs[k]["auc"].get<double>();
        h.defined = true;
      }
      h.determinable = aucs[k].at("determinable").get<std::size_t>();
      h.positives = aucs[k].at("positives").get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad metrics report: ") + e.what());
  }
  return r;
}

json to_json(const train::EpochRecord& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"skipped", e.skipped},
          {"validation", e.validation ? to_json(*e.validation) : json(nullptr)}};
}

train::EpochRecord epoch_from_json(const json& j) {
  train::EpochRecord e;
  try {
    e.epoch = j.at("epoch").get<std::size_t>();
    e.train_loss = j.at("train_loss").get<double>();
    e.skipped = j.at("skipped").get<std::size_t>();
    if (!j.at("validation").is_null()) e.validation = report_from_json(j["validation"]);
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("bad epoch record: ") + ex.what());
  }
  return e;
}

}  // namespace dtmamba::json_io
