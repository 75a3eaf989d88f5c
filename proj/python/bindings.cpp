// Python bindings for the core operations. Arrays cross as float64 numpy
// arrays; configs and cohort specs cross as JSON strings.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "dtmamba/config.hpp"
#include "dtmamba/errors.hpp"
#include "dtmamba/fusion.hpp"
#include "dtmamba/hazard.hpp"
#include "dtmamba/metrics.hpp"
#include "dtmamba/profiler.hpp"
#include "dtmamba/scan.hpp"
#include "dtmamba/synthdata.hpp"

namespace py = pybind11;
using namespace dtmamba;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

std::vector<metrics::ScoredOutcome> scored(const std::vector<double>& scores,
                                           const std::vector<bool>& events,
                                           const std::vector<double>& times) {
  if (scores.size() != events.size() || scores.size() != times.size()) {
    throw DimensionError("scores, events and times differ in length");
  }
  std::vector<metrics::ScoredOutcome> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {scores[i], {events[i], times[i]}};
  return out;
}

py::dict risk_dict(const hazard::RiskOutput& r) {
  py::dict d;
  d["baseline_logit"] = r.baseline_logit;
  d["hazards"] = std::vector<double>(r.hazards.begin(), r.hazards.end());
  d["logits"] = std::vector<double>(r.logits.begin(), r.logits.end());
  d["probabilities"] = std::vector<double>(r.probabilities.begin(), r.probabilities.end());
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Time-aware selective scan with 3D neighborhood fusion";

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  static py::exception<DataError> data_error(m, "DataError", base.ptr());
  static py::exception<DimensionError> dim_error(m, "DimensionError", base.ptr());
  static py::exception<UndefinedMetricError> metric_error(m, "UndefinedMetricError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const DataError& e) {
      data_error(e.what());
    } catch (const DimensionError& e) {
      dim_error(e.what());
    } catch (const UndefinedMetricError& e) {
      metric_error(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.attr("TAU_MIN_MONTHS") = scan::kTauMinMonths;
  m.attr("HORIZONS") = hazard::kHorizons;

  m.def("discretize", [](double lambda, double step) {
    const auto z = scan::discretize(lambda, step);
    return py::make_tuple(z.a_bar, z.b_bar);
  }, py::arg("lam"), py::arg("step"), "Exact ZOH pair (a_bar, b_bar).");

  m.def("time_aware_step",
        py::overload_cast<double, double, double, double>(&scan::time_aware_step),
        py::arg("delta"), py::arg("gap"), py::arg("gamma"),
        py::arg("tau_min") = scan::kTauMinMonths);

  m.def("selective_scan",
        [](const Array& tokens, std::vector<double> gaps, std::vector<std::uint8_t> valid,
           const Array& a_log, const Array& w_proj, const Array& b_proj, double gamma_logit,
           double tau_min, bool time_aware) {
          scan::TokenSequence seq{to_tensor(tokens), std::move(gaps), std::move(valid)};
          scan::ScanParams p;
          p.a_log = to_tensor(a_log);
          p.w_proj = to_tensor(w_proj);
          p.b_proj = to_tensor(b_proj);
          p.skip = Tensor({p.a_log.dim(0)});
          p.gamma_logit = gamma_logit;
          p.tau_min = tau_min;
          return to_array(scan::selective_scan(seq, p, time_aware));
        },
        py::arg("tokens"), py::arg("gaps"), py::arg("valid"), py::arg("a_log"),
        py::arg("w_proj"), py::arg("b_proj"), py::arg("gamma_logit") = 0.0,
        py::arg("tau_min") = scan::kTauMinMonths, py::arg("time_aware") = true,
        "Scan tokens [d, L]; returns the readout [d, L].");

  m.def("clamp_kernels", [](long visits) {
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> out;
    for (const auto& k : fusion::clamp_kernels(visits)) out.emplace_back(k.t, k.h, k.w);
    return out;
  }, py::arg("visits"));

  m.def("fuse",
        [](const Array& x, const std::vector<Array>& filters, const Array& alpha) {
          fusion::FusionParams p;
          for (const auto& f : filters) {
            Tensor t = to_tensor(f);
            if (t.rank() != 4) throw DimensionError("filters must be [d, kt, kh, kw]");
            p.kernels.push_back({t.dim(1), t.dim(2), t.dim(3)});
            p.filters.push_back(std::move(t));
          }
          p.alpha = to_tensor(alpha);
          return to_array(fusion::fuse(to_tensor(x), p));
        },
        py::arg("x"), py::arg("filters"), py::arg("alpha"),
        "Softmax-weighted sum of depthwise 3D convolutions of x [d, T, H, W].");

  m.def("risk_head",
        [](const std::vector<double>& z, const Array& weight, const Array& bias) {
          return risk_dict(hazard::risk_head(z, {to_tensor(weight), to_tensor(bias)}));
        },
        py::arg("z"), py::arg("weight"), py::arg("bias"));

  m.def("horizon_label", [](bool event, double time, std::size_t year) {
    return hazard::horizon_label({event, time}, year);
  }, py::arg("event"), py::arg("time"), py::arg("year"));

  m.def("hazard_loss",
        [](const std::vector<double>& z, const Array& weight, const Array& bias, bool event,
           double time, double positive_weight, double negative_weight) {
          const auto r = hazard::risk_head(z, {to_tensor(weight), to_tensor(bias)});
          return hazard::loss(r, {event, time}, {positive_weight, negative_weight});
        },
        py::arg("z"), py::arg("weight"), py::arg("bias"), py::arg("event"), py::arg("time"),
        py::arg("positive_weight") = 1.0, py::arg("negative_weight") = 1.0,
        "Weighted BCE over determinable horizons; None when none is determinable.");

  m.def("c_index",
        [](const std::vector<double>& s, const std::vector<bool>& e, const std::vector<double>& t) {
          return metrics::c_index(scored(s, e, t));
        },
        py::arg("scores"), py::arg("events"), py::arg("times"));

  m.def("auc_at",
        [](const std::vector<double>& s, const std::vector<bool>& e, const std::vector<double>& t,
           std::size_t year) { return metrics::auc_at(scored(s, e, t), year); },
        py::arg("scores"), py::arg("events"), py::arg("times"), py::arg("year"));

  m.def("generate",
        [](const std::string& spec_json, const std::string& out) {
          const auto c = data::generate(data::CohortSpec::from_json(spec_json), out);
          std::size_t cases = 0;
          for (const auto& p : c.dataset.patients) cases += p.outcome.event;
          py::dict d;
          d["patients"] = c.dataset.patients.size();
          d["cases"] = cases;
          return d;
        },
        py::arg("spec_json"), py::arg("out"), "Write a synthetic cohort to a directory.");

  m.def("default_spec", [] { return data::CohortSpec{}.to_json(); });

  m.def("count_params", [](const std::string& config_json) {
    const auto c = profiler::count_params(config::parse(config_json).model);
    py::dict d;
    d["block"] = c.block.total();
    d["stack"] = c.stack;
    d["encoder"] = c.encoder;
    d["head"] = c.head;
    d["total"] = c.total;
    return d;
  }, py::arg("config_json") = "{}");

  m.def("count_flops", [](const std::string& config_json, std::size_t tokens) {
    return profiler::count_flops(config::parse(config_json).model.block, tokens);
  }, py::arg("config_json"), py::arg("tokens"));
}
