#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>

#include "dddr/checkpoint.hpp"
#include "dddr/orchestrator.hpp"

namespace py = pybind11;
using namespace dddr;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

ExperimentConfig load(const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
  return path ? parse_config(*path, overrides) : parse_config_text("", overrides);
}

void echo(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  std::ofstream(RunLayout{out}.effective_config(), std::ios::binary | std::ios::trunc) << config_to_json(cfg);
}

py::tuple corpus_arrays(const Corpus& c) {
  py::array_t<float> images({static_cast<py::ssize_t>(c.size()), static_cast<py::ssize_t>(c.image.height),
                             static_cast<py::ssize_t>(c.image.width)});
  py::array_t<std::uint32_t> labels(static_cast<py::ssize_t>(c.size()));
  const std::size_t d = c.image.numel();
  for (std::size_t i = 0; i < c.size(); ++i) {
    std::copy(c.items[i].pixels.values().begin(), c.items[i].pixels.values().end(), images.mutable_data() + i * d);
    labels.mutable_data()[i] = c.items[i].label;
  }
  return py::make_tuple(images, labels);
}

AccuracyMatrix to_matrix(const std::vector<std::vector<std::uint32_t>>& task_classes,
                         const std::vector<std::map<std::uint32_t, double>>& rows) {
  AccuracyMatrix m{task_classes, rows};
  m.validate();
  return m;
}

py::dict report_dict(const RunResult& r) {
  py::dict d;
  d["metrics_json"] = metrics_json(r.report);
  d["average_accuracy"] = r.report.average_accuracy;
  d["forgetting"] = r.report.forgetting;
  d["guard_reads"] = r.guard_reads;
  d["guard_past_reads"] = r.guard_past_reads;
  d["denoiser_checksum"] = r.denoiser_checksum;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Desk-scale federated class-incremental learning with diffusion-based replay";

  static py::exception<Error> base(m, "DddrError", PyExc_RuntimeError);
  static py::exception<Error> usage(m, "UsageError", base.ptr());
  static py::exception<Error> data(m, "DataError", base.ptr());
  static py::exception<Error> numeric(m, "NumericError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      switch (e.kind()) {
        case ErrorKind::Usage: usage(e.what()); return;
        case ErrorKind::Data: data(e.what()); return;
        case ErrorKind::Numeric: numeric(e.what()); return;
      }
    }
  });

  // Configuration
  m.def("config_keys", &config_keys);
  m.def(
      "effective_config",
      [](std::optional<std::string> path, std::vector<std::string> overrides) {
        return config_to_json(load(path, overrides));
      },
      py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Effective configuration as JSON text.");

  // Data
  m.def(
      "shapeworld",
      [](std::size_t samples_per_class, std::uint64_t seed, bool pretraining, std::size_t image_size) {
        CorpusSpec spec = pretraining ? desk_pretraining_spec(seed, samples_per_class) : desk_client_spec(seed, samples_per_class);
        spec.height = spec.width = image_size;
        return corpus_arrays(generate_shapeworld(spec));
      },
      py::arg("samples_per_class"), py::arg("seed"), py::arg("pretraining") = false, py::arg("image_size") = 16,
      "Procedural 8-class shape corpus as (images[n,h,w], labels[n]).");

  // Diffusion primitives
  m.def(
      "alphas_bar",
      [](std::size_t steps, double beta_min, double beta_max) { return build_schedule(steps, beta_min, beta_max).alphas_bar; },
      py::arg("steps"), py::arg("beta_min"), py::arg("beta_max"));
  m.def(
      "forward_diffuse",
      [](const FloatArray& z0, std::size_t t, const FloatArray& eps, std::size_t steps, double beta_min, double beta_max) {
        return to_array(forward_diffuse(to_tensor(z0), t, to_tensor(eps), build_schedule(steps, beta_min, beta_max)));
      },
      py::arg("z0"), py::arg("t"), py::arg("eps"), py::arg("steps") = 100, py::arg("beta_min") = 1e-3,
      py::arg("beta_max") = 0.2);

  py::class_<DiffusionModel>(m, "DiffusionModel")
      .def_static(
          "load", [](const std::filesystem::path& p) { return DiffusionModel::from_checkpoint(load_checkpoint(p)); },
          py::arg("path"))
      .def_property_readonly("embed_dim", [](const DiffusionModel& d) { return d.config.embed_dim; })
      .def_property_readonly("pretrain_classes", [](const DiffusionModel& d) { return d.class_table.rows(); })
      .def("frozen_checksum", &DiffusionModel::frozen_checksum)
      .def("class_embedding", [](const DiffusionModel& d, std::uint32_t c) { return to_array(d.pretrain_class_embedding(c)); })
      .def(
          "sample",
          [](const DiffusionModel& d, const FloatArray& class_part, std::size_t n, std::uint64_t seed) {
            Rng rng(seed);
            return to_array(sample(d, to_tensor(class_part), n, rng));
          },
          py::arg("class_part"), py::arg("n"), py::arg("seed"));

  // Federation
  m.def(
      "aggregate_embeddings",
      [](const std::vector<FloatArray>& uploads) {
        std::vector<ClassEmbedding> ups;
        for (const auto& u : uploads) {
          Tensor v = to_tensor(u);
          ups.push_back({0, v.reshaped({1, v.size()}), 0, EmbeddingOrigin::Local});
        }
        return to_array(aggregate_embeddings(ups).v);
      },
      py::arg("uploads"));
  m.def(
      "weighted_average",
      [](const std::vector<FloatArray>& params, const std::vector<double>& weights) {
        std::vector<ParamSet> sets;
        for (const auto& p : params) {
          ParamSet s;
          s.set("p", to_tensor(p));
          sets.push_back(std::move(s));
        }
        return to_array(weighted_average(sets, weights).at("p"));
      },
      py::arg("params"), py::arg("weights"));

  // Metrics
  m.def(
      "average_accuracy",
      [](const std::vector<std::vector<std::uint32_t>>& tc, const std::vector<std::map<std::uint32_t, double>>& rows) {
        return average_accuracy(to_matrix(tc, rows));
      },
      py::arg("task_classes"), py::arg("rows"));
  m.def(
      "forgetting_measure",
      [](const std::vector<std::vector<std::uint32_t>>& tc, const std::vector<std::map<std::uint32_t, double>>& rows) {
        return forgetting_measure(to_matrix(tc, rows));
      },
      py::arg("task_classes"), py::arg("rows"));
  m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(to_tensor(a), to_tensor(b)); });
  m.def("ssim", [](const FloatArray& a, const FloatArray& b) { return ssim_global(to_tensor(a), to_tensor(b)); });

  // Pipeline
  using Progress = std::optional<std::function<void(const std::string&)>>;
  auto progress_fn = [](const Progress& p) -> ProgressFn {
    if (!p) return {};
    return [f = *p](const std::string& s) {
      py::gil_scoped_acquire gil;
      f(s);
    };
  };
  m.def(
      "run",
      [progress_fn](std::optional<std::string> config, std::vector<std::string> overrides, std::filesystem::path out,
                    Progress progress) {
        const ExperimentConfig cfg = load(config, overrides);
        return report_dict(run_fccl(cfg, out, progress_fn(progress)));
      },
      py::arg("config"), py::arg("overrides"), py::arg("out"), py::arg("progress") = py::none());
  m.def(
      "stage",
      [progress_fn](const std::string& name, std::optional<std::string> config, std::vector<std::string> overrides,
                    std::filesystem::path out, Progress progress) -> py::object {
        const ExperimentConfig cfg = load(config, overrides);
        echo(cfg, out);
        const ProgressFn fn = progress_fn(progress);
        if (name == "gen-data") {
          stage_gen_data(cfg, out);
          return py::none();
        }
        if (name == "pretrain") return py::int_(stage_pretrain(cfg, out, fn).frozen_checksum());
        if (name == "invert") return py::int_(stage_invert(cfg, out, fn).size());
        if (name == "train") return report_dict(stage_train(cfg, out, fn));
        throw ConfigError("unknown stage '" + name + "'");
      },
      py::arg("name"), py::arg("config"), py::arg("overrides"), py::arg("out"), py::arg("progress") = py::none());
  m.def(
      "evaluate",
      [](std::optional<std::string> config, std::vector<std::string> overrides, std::filesystem::path out) {
        return metrics_json(evaluate_run(load(config, overrides), out));
      },
      py::arg("config"), py::arg("overrides"), py::arg("out"));
  m.def(
      "audit",
      [](std::optional<std::string> config, std::vector<std::string> overrides, std::filesystem::path out) {
        py::list rows;
        for (const auto& a : audit_run(load(config, overrides), out)) {
          py::dict d;
          d["class"] = a.cls;
          d["best_psnr"] = a.best_psnr.value;
          d["best_ssim"] = a.best_ssim.value;
          rows.append(d);
        }
        return rows;
      },
      py::arg("config"), py::arg("overrides"), py::arg("out"));
}
