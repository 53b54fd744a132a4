#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "viscop/errors.hpp"
#include "viscop/experiment.hpp"

namespace py = pybind11;
using namespace viscop;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor::matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict command_result(const CommandResult& r) {
  py::dict d;
  std::vector<std::string> files;
  for (const auto& f : r.files) files.push_back(f.string());
  d["files"] = files;
  d["summary"] = r.summary;
  return d;
}

using PyLog = std::optional<py::function>;

// The callback object outlives the call, so the C++ side only keeps a pointer
// and never touches Python reference counts without the GIL.
LogFn logger(const PyLog& fn) {
  if (!fn) return {};
  const py::function* f = &*fn;
  return [f](const std::string& msg) {
    py::gil_scoped_acquire gil;
    (*f)(msg);
  };
}

template <class Fn>
py::dict without_gil(Fn&& fn) {
  CommandResult r;
  {
    py::gil_scoped_release release;
    r = fn();
  }
  return command_result(r);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Visual probing for domain adaptation of small video-language models";

  auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<DegenerateBatchError>(m, "DegenerateBatchError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<NumericAbort>(m, "NumericAbort", PyExc_ArithmeticError);
  (void)base;

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_static("defaults", &ExperimentConfig::defaults)
      .def_static("parse", &ExperimentConfig::parse, py::arg("text"), py::arg("origin") = "config")
      .def_static("load", [](const std::string& path) { return ExperimentConfig::load(path); })
      .def("to_text", &ExperimentConfig::to_text)
      .def("hash", &ExperimentConfig::hash)
      .def("output_dir", [](const ExperimentConfig& c) { return c.output_dir().string(); })
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_property(
          "task", [](const ExperimentConfig& c) { return std::string(to_string(c.task)); },
          [](ExperimentConfig& c, const std::string& s) { c.task = domain_shift_from_string(s); })
      .def_property(
          "output", [](const ExperimentConfig& c) { return c.output.string(); },
          [](ExperimentConfig& c, const std::string& s) { c.output = s; })
      .def("__repr__", [](const ExperimentConfig& c) {
        return "<ExperimentConfig seed=" + std::to_string(c.seed) + " task=" + to_string(c.task) + " hash=" + c.hash() +
               ">";
      });

  m.def("strategy_names", &strategy_names);

  m.def("pretrain", [](const ExperimentConfig& c, const PyLog& log) {
    return without_gil([&] { return cmd_pretrain(c, logger(log)); });
  }, py::arg("config"), py::arg("log") = py::none());
  m.def("adapt", [](const ExperimentConfig& c, const std::string& s,
                    const PyLog& log) {
    return without_gil([&] { return cmd_adapt(c, s, logger(log)); });
  }, py::arg("config"), py::arg("strategy"), py::arg("log") = py::none());
  m.def("ablate", [](const ExperimentConfig& c, const std::string& axis,
                     const PyLog& log) {
    return without_gil([&] { return cmd_ablate(c, axis, logger(log)); });
  }, py::arg("config"), py::arg("axis"), py::arg("log") = py::none());
  m.def("export_embeddings", [](const ExperimentConfig& c, const std::string& model, const std::string& source) {
    return without_gil([&] { return cmd_export_embeddings(c, model, embedding_source_from_string(source)); });
  }, py::arg("config"), py::arg("model") = "base", py::arg("source") = "visual");
  m.def("report", [](const ExperimentConfig& c) { return command_result(cmd_report(c)); });

  m.def("delta_metrics", [](const std::map<std::string, double>& b, const std::map<std::string, double>& e,
                            const std::vector<std::string>& target, const std::vector<std::string>& source) {
    const auto r = delta_metrics(b, e, target, source);
    py::dict d;
    d["acc_target_base"] = r.acc_target_base;
    d["acc_target_expert"] = r.acc_target_expert;
    d["acc_source_base"] = r.acc_source_base;
    d["acc_source_expert"] = r.acc_source_expert;
    d["delta_target"] = r.delta_target;
    d["delta_source"] = r.delta_source;
    return d;
  }, py::arg("base"), py::arg("expert"), py::arg("target"), py::arg("source"));

  m.def("attention_rollout", [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& ls) {
    std::vector<Tensor> t;
    for (const auto& a : ls) t.push_back(to_tensor(a));
    return to_array(attention_rollout(t));
  });
  m.def("bhattacharyya", [](const std::vector<double>& mu1, const py::array_t<double, py::array::c_style | py::array::forcecast>& c1,
                            const std::vector<double>& mu2, const py::array_t<double, py::array::c_style | py::array::forcecast>& c2) {
    return bhattacharyya(GaussianSummary{mu1, to_tensor(c1)}, GaussianSummary{mu2, to_tensor(c2)});
  });
  m.def("fit_bhattacharyya", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                                const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
    return bhattacharyya(fit_gaussian(to_tensor(a)), fit_gaussian(to_tensor(b)));
  }, "Bhattacharyya distance between Gaussians fitted to the rows of two matrices");

  m.def("render", [](std::uint64_t seed, const std::string& shift) {
    const Video v = render(generate_scene(seed), domain_shift_from_string(shift));
    py::array_t<double> out({v.frames, v.channels, v.height, v.width});
    std::copy(v.pixels.begin(), v.pixels.end(), out.mutable_data());
    return out;
  }, py::arg("seed"), py::arg("shift") = "source", "Video [T x C x H x W] of one synthetic scene");
  m.def("question_answer", [](std::uint64_t seed, const std::string& family) {
    return question_answer(generate_scene(seed), question_family_from_string(family));
  });
}
