// Python face of the library: numpy in, numpy out, no Python types below
// this file.  Heavy entry points drop the GIL.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uncattack/attacks.hpp"
#include "uncattack/common.hpp"
#include "uncattack/data.hpp"
#include "uncattack/harness.hpp"
#include "uncattack/model.hpp"
#include "uncattack/surface.hpp"
#include "uncattack/tensor.hpp"
#include "uncattack/uncertainty.hpp"

namespace py = pybind11;
using namespace uncattack;

namespace {

Tensor tensor_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t d = 0; d < arr.ndim(); ++d) {
    shape[static_cast<std::size_t>(d)] = arr.shape(d);
  }
  Tensor t(shape);
  std::memcpy(t.data(), arr.data(),
              sizeof(double) * static_cast<std::size_t>(arr.size()));
  return t;
}

py::array_t<double> array_from(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> arr(shape);
  std::memcpy(arr.mutable_data(), t.data(),
              sizeof(double) * static_cast<std::size_t>(t.numel()));
  return arr;
}

Mode mode_from(const std::string& name) {
  if (name == "eval") return Mode::Eval;
  if (name == "train") return Mode::Train;
  throw InvalidArgument("unknown mode '" + name + "' (valid: eval, train)");
}

AttackConfig config_from(const std::string& kind, double eps, double alpha,
                         int iters, int mc_samples, uint64_t seed) {
  AttackConfig cfg;
  cfg.kind = attack_kind_from_name(kind);
  cfg.eps = eps;
  cfg.alpha = alpha;
  cfg.iters = iters;
  cfg.mc_samples = mc_samples;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "CNN training, MC-dropout uncertainty, and l-inf adversarial "
            "attacks on MNIST-style data";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<InvalidArgument>(m, "InvalidArgumentError",
                                          PyExc_ValueError);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("source_id", &Dataset::source_id)
      .def_readonly("split", &Dataset::split)
      .def("__len__", [](const Dataset& d) { return d.size(); })
      .def("image",
           [](const Dataset& d, int64_t i) {
             return array_from(d.items.at(static_cast<std::size_t>(i)).pixels);
           })
      .def("label",
           [](const Dataset& d, int64_t i) {
             return d.items.at(static_cast<std::size_t>(i)).label;
           })
      .def("index", [](const Dataset& d, int64_t i) {
        return d.items.at(static_cast<std::size_t>(i)).index;
      });

  m.def("load_dataset", &load_split, py::arg("root"), py::arg("dataset"),
        py::arg("split"),
        "Read <root>/<dataset>/<split>-images-idx3-ubyte and the matching "
        "labels file; split is 'train' or 't10k'.");

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& arch, uint64_t seed) {
             return Model(arch_from_name(arch), seed);
           }),
           py::arg("arch"), py::arg("seed") = 42)
      .def_static(
          "load",
          [](const std::string& path, std::optional<std::string> arch) {
            std::optional<Arch> expected;
            if (arch) expected = arch_from_name(*arch);
            return load_checkpoint(path, expected);
          },
          py::arg("path"), py::arg("arch") = std::nullopt)
      .def("save",
           [](const Model& model, const std::string& path) {
             save_checkpoint(model, path);
           },
           py::arg("path"))
      .def_property_readonly(
          "arch", [](const Model& model) { return arch_name(model.arch()); })
      .def("set_dropout", &Model::set_dropout, py::arg("p"))
      .def("predict",
           [](Model& model, const py::array_t<double>& x,
              const std::string& mode, std::optional<uint64_t> mask_seed) {
             Tensor t = tensor_from(x);
             Mode md = mode_from(mode);
             Tensor scores = mask_seed ? model.predict(t, md, *mask_seed)
                                       : model.predict(t, md);
             return array_from(scores);
           },
           py::arg("x"), py::arg("mode") = "eval",
           py::arg("mask_seed") = std::nullopt)
      .def("predict_class",
           [](Model& model, const py::array_t<double>& x) {
             return model.predict_class(tensor_from(x));
           },
           py::arg("x"))
      .def("loss",
           [](Model& model, const py::array_t<double>& x, int label) {
             return model.loss(tensor_from(x), label);
           },
           py::arg("x"), py::arg("label"))
      .def("loss_and_gradient",
           [](Model& model, const py::array_t<double>& x, int label) {
             auto [l, g] = model.loss_and_gradient(tensor_from(x), label);
             return py::make_tuple(l, array_from(g));
           },
           py::arg("x"), py::arg("label"))
      .def("accuracy",
           [](Model& model, const Dataset& data) {
             py::gil_scoped_release release;
             return model.accuracy(data);
           },
           py::arg("dataset"));

  m.def(
      "select_correct",
      [](Model& model, const Dataset& data, int limit, uint64_t seed) {
        py::gil_scoped_release release;
        return select_correct(model, data, limit, seed);
      },
      py::arg("model"), py::arg("dataset"), py::arg("limit"),
      py::arg("seed") = 42,
      "Seeded shuffle, then keep up to `limit` correctly classified samples.");

  m.def(
      "train",
      [](Model& model, const Dataset& train_set, const Dataset& test_set,
         std::optional<std::string> optimizer, std::optional<double> lr,
         std::optional<int> batch, std::optional<int> epochs, uint64_t seed,
         int limit, bool verbose) {
        TrainConfig cfg = default_train_config(model.arch());
        if (optimizer) cfg.optimizer = *optimizer;
        if (lr) cfg.lr = *lr;
        if (batch) cfg.batch = *batch;
        if (epochs) cfg.epochs = *epochs;
        cfg.seed = seed;
        cfg.limit = limit;
        cfg.verbose = verbose;
        TrainReport report;
        {
          py::gil_scoped_release release;
          report = train(model, train_set, test_set, cfg);
        }
        py::dict out;
        out["epoch_loss"] = report.epoch_loss;
        out["test_accuracy"] = report.test_accuracy;
        out["train_seconds"] = report.train_seconds;
        return out;
      },
      py::arg("model"), py::arg("train_set"), py::arg("test_set"),
      py::arg("optimizer") = std::nullopt, py::arg("lr") = std::nullopt,
      py::arg("batch") = std::nullopt, py::arg("epochs") = std::nullopt,
      py::arg("seed") = 42, py::arg("limit") = 0, py::arg("verbose") = false);

  m.def(
      "mc_scores",
      [](Model& model, const py::array_t<double>& x, int T, uint64_t seed) {
        Tensor t = tensor_from(x);
        McSampleSet samples;
        {
          py::gil_scoped_release release;
          samples = mc_samples(model, t, T, seed);
        }
        const Tensor& first = samples.scores.front();
        py::array_t<double> out(
            {static_cast<py::ssize_t>(samples.count()),
             static_cast<py::ssize_t>(first.numel())});
        for (int i = 0; i < samples.count(); ++i) {
          const Tensor& row = samples.scores[static_cast<std::size_t>(i)];
          std::memcpy(out.mutable_data(i, 0), row.data(),
                      sizeof(double) * static_cast<std::size_t>(row.numel()));
        }
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("T"), py::arg("seed") = 42,
      "T training-mode softmax score vectors; sample t uses masks seeded by "
      "mix_seed(seed, t).");

  m.def(
      "uncertainty",
      [](Model& model, const py::array_t<double>& x, int T, uint64_t seed) {
        Tensor t = tensor_from(x);
        UncertaintyEstimate est;
        {
          py::gil_scoped_release release;
          est = uncertainty_estimate(model, t, T, seed);
        }
        py::dict out;
        out["value"] = est.value;
        out["predictive_mean"] = array_from(est.predictive_mean);
        out["class_variance"] = array_from(est.class_variance);
        out["predicted_label"] = est.predicted_label();
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("T"), py::arg("seed") = 42);

  m.def(
      "uncertainty_gradient",
      [](Model& model, const py::array_t<double>& x, int T, uint64_t seed) {
        Tensor t = tensor_from(x);
        Tensor g;
        {
          py::gil_scoped_release release;
          g = uncertainty_gradient(model, t, T, seed);
        }
        return array_from(g);
      },
      py::arg("model"), py::arg("x"), py::arg("T"), py::arg("seed") = 42);

  py::class_<UncertaintyEvaluator>(m, "UncertaintyEvaluator")
      .def(py::init<const Model&, int>(), py::arg("model"), py::arg("T"))
      .def_property_readonly("T", &UncertaintyEvaluator::mc_count)
      .def("value",
           [](UncertaintyEvaluator& unc, const py::array_t<double>& x,
              uint64_t seed) {
             Tensor t = tensor_from(x);
             py::gil_scoped_release release;
             return unc.value(t, seed);
           },
           py::arg("x"), py::arg("seed"))
      .def("value_and_gradient",
           [](UncertaintyEvaluator& unc, const py::array_t<double>& x,
              uint64_t seed) {
             Tensor t = tensor_from(x);
             std::pair<double, Tensor> vg;
             {
               py::gil_scoped_release release;
               vg = unc.value_and_gradient(t, seed);
             }
             return py::make_tuple(vg.first, array_from(vg.second));
           },
           py::arg("x"), py::arg("seed"));

  m.def(
      "clip_to_ball",
      [](const py::array_t<double>& cand, const py::array_t<double>& orig,
         double eps) {
        return array_from(clip_to_ball(tensor_from(cand), tensor_from(orig), eps));
      },
      py::arg("cand"), py::arg("orig"), py::arg("eps"));

  m.def("attack_kinds", [] {
    std::vector<std::string> names;
    for (AttackKind k : all_attack_kinds()) names.push_back(attack_kind_name(k));
    return names;
  });

  py::class_<AttackResult>(m, "AttackResult")
      .def_property_readonly(
          "adversarial",
          [](const AttackResult& r) { return array_from(r.adversarial); })
      .def_readonly("success", &AttackResult::success)
      .def_readonly("iterations_used", &AttackResult::iterations_used)
      .def_readonly("initial_prediction", &AttackResult::initial_prediction)
      .def_readonly("final_prediction", &AttackResult::final_prediction)
      .def_readonly("linf_distance", &AttackResult::linf_distance)
      .def_readonly("initial_loss", &AttackResult::initial_loss)
      .def_readonly("final_loss", &AttackResult::final_loss)
      .def_readonly("has_loss", &AttackResult::has_loss)
      .def_readonly("crossing_iteration", &AttackResult::crossing_iteration)
      .def_readonly("u_at_crossing", &AttackResult::u_at_crossing)
      .def_readonly("u_final", &AttackResult::u_final)
      .def_readonly("has_crossing_u", &AttackResult::has_crossing_u);

  m.def(
      "run_attack",
      [](Model& model, const py::array_t<double>& x, int y_true,
         const std::string& kind, double eps, double alpha, int iters,
         int mc_samples, uint64_t seed) {
        AttackConfig cfg = config_from(kind, eps, alpha, iters, mc_samples, seed);
        Tensor t = tensor_from(x);
        py::gil_scoped_release release;
        if (attack_uses_uncertainty(cfg.kind)) {
          UncertaintyEvaluator unc(model, cfg.mc_samples);
          return run_attack(model, &unc, t, y_true, cfg);
        }
        return run_attack(model, nullptr, t, y_true, cfg);
      },
      py::arg("model"), py::arg("x"), py::arg("y_true"), py::arg("kind"),
      py::arg("eps") = 0.15, py::arg("alpha") = 0.03, py::arg("iters") = 10,
      py::arg("mc_samples") = 50, py::arg("seed") = 42,
      "y_true may be -1 for bim-a-unc / bim-b-unc, whose success is judged "
      "against the initial prediction.");

  m.def(
      "direction_agreement",
      [](Model& model, const py::array_t<double>& x, int y_true, int T,
         uint64_t seed) {
        Tensor t = tensor_from(x);
        AgreementCount c;
        {
          py::gil_scoped_release release;
          c = direction_agreement(model, t, y_true, T, seed);
        }
        return py::make_tuple(c.agree, c.disagree, c.total);
      },
      py::arg("model"), py::arg("x"), py::arg("y_true"), py::arg("T"),
      py::arg("seed") = 42);

  m.def(
      "make_direction",
      [](Model& model, const py::array_t<double>& x, int y_true,
         const std::string& kind, int mc_samples, uint64_t seed) {
        Tensor t = tensor_from(x);
        DirectionKind k = direction_from_name(kind);
        Tensor d;
        {
          py::gil_scoped_release release;
          d = make_direction(model, t, y_true, k, mc_samples, seed);
        }
        return array_from(d);
      },
      py::arg("model"), py::arg("x"), py::arg("y_true"), py::arg("kind"),
      py::arg("mc_samples") = 50, py::arg("seed") = 42);

  m.def(
      "loss_surface",
      [](Model& model, const py::array_t<double>& x, int y_true,
         const py::array_t<double>& d1, const py::array_t<double>& d2,
         double eps, int resolution) {
        DirectionPair pair;
        pair.d1 = tensor_from(d1);
        pair.d2 = tensor_from(d2);
        Tensor t = tensor_from(x);
        SurfaceGrid grid;
        {
          py::gil_scoped_release release;
          grid = loss_surface(model, t, y_true, pair, eps, resolution);
        }
        py::ssize_t r = grid.resolution;
        py::array_t<double> loss({r, r});
        py::array_t<int> predicted({r, r});
        std::memcpy(loss.mutable_data(), grid.loss.data(),
                    sizeof(double) * grid.loss.size());
        std::memcpy(predicted.mutable_data(), grid.predicted.data(),
                    sizeof(int) * grid.predicted.size());
        py::dict out;
        out["offsets"] = py::array_t<double>(
            static_cast<py::ssize_t>(grid.offsets.size()), grid.offsets.data());
        out["loss"] = loss;
        out["predicted"] = predicted;
        out["center_loss"] = grid.center_loss;
        out["max_loss"] = grid.max_loss;
        out["max_a"] = grid.max_a;
        out["max_b"] = grid.max_b;
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("y_true"), py::arg("d1"),
      py::arg("d2"), py::arg("eps"), py::arg("resolution") = 41);
}
