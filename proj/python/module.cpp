#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>
#include <sstream>

#include "fdtr/commands.hpp"
#include "fdtr/eval.hpp"
#include "fdtr/matching.hpp"

namespace py = pybind11;
using namespace fdtr;

namespace {

// Command logs go to Python's stdout only when asked for.
struct LogSink {
  std::ostringstream buf;
  bool echo;
  explicit LogSink(bool e) : echo(e) {}
  ~LogSink() {
    if (echo) py::print(buf.str(), py::arg("end") = "");
  }
};

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["ap"] = r.ap;
  d["ap50"] = r.ap50;
  d["ap75"] = r.ap75;
  d["aps"] = r.aps;
  d["apm"] = r.apm;
  d["apl"] = r.apl;
  d["loc"] = r.loc;
  d["cls"] = r.cls;
  d["bg"] = r.bg;
  d["fn"] = r.fn;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Frozen-foundation detector core";
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<Box>(m, "Box")
      .def(py::init<double, double, double, double>(), py::arg("cx"), py::arg("cy"), py::arg("w"), py::arg("h"))
      .def_static("from_corners", &Box::from_corners)
      .def_readwrite("cx", &Box::cx)
      .def_readwrite("cy", &Box::cy)
      .def_readwrite("w", &Box::w)
      .def_readwrite("h", &Box::h)
      .def_property_readonly("area", &Box::area)
      .def("__eq__", [](const Box& a, const Box& b) { return a == b; })
      .def("__repr__", [](const Box& b) {
        std::ostringstream s;
        s << "Box(cx=" << b.cx << ", cy=" << b.cy << ", w=" << b.w << ", h=" << b.h << ")";
        return s.str();
      });
  m.def("box_iou", &box_iou);

  py::class_<GroundTruth>(m, "GroundTruth")
      .def(py::init<>())
      .def(py::init([](std::vector<Box> boxes, std::vector<int> labels) {
             if (boxes.size() != labels.size()) throw ContractError("boxes and labels differ in length");
             return GroundTruth{std::move(boxes), std::move(labels)};
           }),
           py::arg("boxes"), py::arg("labels"))
      .def_readwrite("boxes", &GroundTruth::boxes)
      .def_readwrite("labels", &GroundTruth::labels);

  py::class_<Detection>(m, "Detection")
      .def(py::init([](Box b, int label, double score) { return Detection{b, label, score}; }), py::arg("box"),
           py::arg("label"), py::arg("score"))
      .def_readwrite("box", &Detection::box)
      .def_readwrite("label", &Detection::label)
      .def_readwrite("score", &Detection::score);

  py::class_<EvalReport>(m, "EvalReport")
      .def(py::init<>())
      .def_readonly("ap", &EvalReport::ap)
      .def_readonly("ap50", &EvalReport::ap50)
      .def_readonly("ap75", &EvalReport::ap75)
      .def_readonly("aps", &EvalReport::aps)
      .def_readonly("apm", &EvalReport::apm)
      .def_readonly("apl", &EvalReport::apl)
      .def_readonly("loc", &EvalReport::loc)
      .def_readonly("cls", &EvalReport::cls)
      .def_readonly("bg", &EvalReport::bg)
      .def_readonly("fn", &EvalReport::fn)
      .def_property_readonly_static("csv_header", [](py::object) { return std::string(EvalReport::csv_header()); })
      .def("csv_row", &EvalReport::csv_row)
      .def("as_dict", &report_dict)
      .def("__str__", &EvalReport::table);

  m.def(
      "compute_ap",
      [](const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts, int canvas) {
        EvalReport r;
        ApOptions o;
        o.canvas = canvas;
        compute_ap(dets, gts, o, r);
        return r;
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("canvas") = 128);
  m.def(
      "error_analysis",
      [](const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts, double threshold) {
        EvalReport r;
        error_analysis(dets, gts, ErrorOptions{threshold}, r);
        return report_dict(r);
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("score_threshold") = 0.3);

  m.def(
      "hungarian_match",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> cost) {
        if (cost.ndim() != 2) throw ContractError("cost matrix must be 2-D");
        CostMatrix c;
        c.rows = static_cast<int>(cost.shape(0));
        c.cols = static_cast<int>(cost.shape(1));
        c.data.assign(cost.data(), cost.data() + cost.size());
        const auto res = hungarian_match(c);
        return py::make_tuple(res.pairs, res.total);
      },
      py::arg("cost"), "Minimum-cost assignment as ([(row, col), ...], total).");

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def("set", py::overload_cast<const std::string&>(&RunConfig::set), py::arg("assignment"))
      .def("resolve", &RunConfig::resolve)
      .def("to_ini", &RunConfig::to_ini)
      .def_property(
          "seed", [](const RunConfig& c) { return c.seed; },
          [](RunConfig& c, std::optional<std::uint64_t> s) { c.seed = s; })
      .def_readwrite("data_dir", &RunConfig::data_dir)
      .def_readwrite("val_dir", &RunConfig::val_dir)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("checkpoint", &RunConfig::checkpoint)
      .def_readwrite("foundations", &RunConfig::foundations)
      .def_readwrite("n_images", &RunConfig::n_images)
      .def_readwrite("enhancers", &RunConfig::enhancers);
  m.def("load_config", [](const std::string& path) { return load_config(path); }, py::arg("path"));

  m.def(
      "gen",
      [](const RunConfig& cfg, const std::string& out, bool val, bool force, bool verbose) {
        LogSink log(verbose);
        cmd_gen(cfg, GenOptions{out, val ? 1 : 0, force}, log.buf);
      },
      py::arg("config"), py::arg("out"), py::arg("val") = false, py::arg("force") = false,
      py::arg("verbose") = false);
  m.def(
      "pretrain",
      [](const RunConfig& cfg, const std::string& out, bool verbose) {
        LogSink log(verbose);
        const auto r = cmd_pretrain(cfg, PretrainCmdOptions{out}, log.buf);
        py::dict d;
        d["steps"] = r.steps;
        d["heldout_accuracy"] = r.heldout_accuracy;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("verbose") = false);
  m.def(
      "train",
      [](const RunConfig& cfg, bool verbose) {
        LogSink log(verbose);
        const auto r = cmd_train(cfg, log.buf);
        py::dict d;
        d["step_losses"] = r.log.step_losses;
        d["report"] = r.final_report;
        d["evaluated"] = r.evaluated;
        d["foundation_hash_before"] = r.foundation_hash_before;
        d["foundation_hash_after"] = r.foundation_hash_after;
        return d;
      },
      py::arg("config"), py::arg("verbose") = false);
  m.def(
      "evaluate",
      [](const RunConfig& cfg, bool verbose) {
        LogSink log(verbose);
        return cmd_eval(cfg, log.buf);
      },
      py::arg("config"), py::arg("verbose") = false);
}
