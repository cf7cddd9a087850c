#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "soap/harness.hpp"
#include "soap/ops.hpp"

namespace py = pybind11;
using namespace soap;

namespace {

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const NpArray& arr) {
    py::buffer_info info = arr.request();
    Shape shape(info.ndim);
    for (py::ssize_t i = 0; i < info.ndim; ++i) shape[i] = static_cast<std::size_t>(info.shape[i]);
    const double* src = static_cast<const double*>(info.ptr);
    return Tensor(shape, std::vector<double>(src, src + shape_numel(shape)));
}

py::array to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), static_cast<double*>(out.request().ptr));
    return out;
}

std::vector<std::vector<Tensor>> support_from(const std::vector<std::vector<NpArray>>& clips) {
    std::vector<std::vector<Tensor>> out(clips.size());
    for (std::size_t c = 0; c < clips.size(); ++c) {
        for (const auto& a : clips[c]) out[c].push_back(tensor_from(a));
    }
    return out;
}

std::vector<Tensor> clips_from(const std::vector<NpArray>& clips) {
    std::vector<Tensor> out;
    out.reserve(clips.size());
    for (const auto& a : clips) out.push_back(tensor_from(a));
    return out;
}

// python-facing wrapper owning the model and its config
struct PyModel {
    RunConfig config;
    std::unique_ptr<SoapNet> net;

    explicit PyModel(const std::string& config_json)
        : config(RunConfig::from_json_string(config_json)) {
        config.validate();
        net = std::make_unique<SoapNet>(model_config_from(config));
    }
    PyModel(RunConfig cfg, std::unique_ptr<SoapNet> model)
        : config(std::move(cfg)), net(std::move(model)) {}
};

}  // namespace

PYBIND11_MODULE(_soap, m) {
    m.doc() = "SOAP few-shot action recognition core";

    py::class_<PyModel>(m, "SoapNet")
        .def(py::init<const std::string&>(), py::arg("config_json"))
        .def_static("load",
                    [](const std::string& checkpoint) {
                        LoadedModel lm = load_checkpoint(checkpoint);
                        return PyModel(std::move(lm.config), std::move(lm.model));
                    },
                    py::arg("checkpoint"))
        .def("save",
             [](const PyModel& self, const std::string& dir) {
                 save_checkpoint(dir, *self.net, self.config);
             },
             py::arg("dir"))
        .def_property_readonly("config_json",
                               [](const PyModel& self) { return self.config.to_json_string(); })
        .def("enhance",
             [](const PyModel& self, const NpArray& clip) {
                 PriorBundle b = self.net->enhance(tensor_from(clip));
                 py::dict out;
                 out["p3d"] = to_numpy(b.p3d);
                 out["pcw"] = to_numpy(b.pcw);
                 out["pmotion"] = to_numpy(b.pmotion);
                 out["fused"] = to_numpy(b.fused);
                 return out;
             },
             py::arg("clip"))
        .def("fused",
             [](const PyModel& self, const NpArray& clip) {
                 return to_numpy(self.net->fused(tensor_from(clip)));
             },
             py::arg("clip"))
        .def("features",
             [](const PyModel& self, const NpArray& clip) {
                 return to_numpy(self.net->features(tensor_from(clip)));
             },
             py::arg("clip"))
        .def("predict",
             [](const PyModel& self, const std::vector<std::vector<NpArray>>& support,
                const std::vector<NpArray>& queries) {
                 return self.net->predict(support_from(support), clips_from(queries));
             },
             py::arg("support"), py::arg("queries"))
        .def("episode_loss",
             [](const PyModel& self, const std::vector<std::vector<NpArray>>& support,
                const std::vector<NpArray>& queries, const std::vector<std::size_t>& labels) {
                 return self.net->episode_loss(support_from(support), clips_from(queries), labels)
                     .item();
             },
             py::arg("support"), py::arg("queries"), py::arg("labels"))
        .def("param_names",
             [](const PyModel& self) {
                 std::vector<std::string> names;
                 for (const auto& item : self.net->params().items()) names.push_back(item.name);
                 return names;
             })
        .def("get_param",
             [](PyModel& self, const std::string& name) {
                 Tensor* t = self.net->params().find(name);
                 if (!t) throw py::key_error(name);
                 return to_numpy(*t);
             },
             py::arg("name"));

    m.def("sliding_windows",
          [](const NpArray& clip, std::size_t t) {
              py::list out;
              for (const Tensor& w : sliding_windows(tensor_from(clip), t)) out.append(to_numpy(w));
              return out;
          },
          py::arg("clip"), py::arg("tuple_size"));

    m.def("reverse_order",
          [](const NpArray& clip) { return to_numpy(reverse_order(tensor_from(clip))); },
          py::arg("clip"));

    m.def("position_embedding",
          [](std::size_t t, const std::string& kind, std::size_t dim, std::size_t frames) {
              const PeKind k = kind == "learnable" ? PeKind::Learnable : PeKind::Sinusoidal;
              if (k == PeKind::Learnable) {
                  throw std::invalid_argument("learnable embeddings live on a model instance");
              }
              return to_numpy(position_embedding(t, k, dim, frames));
          },
          py::arg("t"), py::arg("kind"), py::arg("dim"), py::arg("frames"));

    m.def("loss_ce",
          [](const std::vector<double>& distances, std::size_t true_class) {
              std::vector<Tensor> d;
              d.reserve(distances.size());
              for (double v : distances) d.push_back(Tensor::scalar(v));
              return loss_ce(d, true_class).item();
          },
          py::arg("distances"), py::arg("true_class"));

    m.def("classify", [](const std::vector<double>& d) { return classify(d); }, py::arg("distances"));

    m.def("gradcheck",
          [](std::uint64_t seed, std::size_t samples) {
              GradCheckReport r = run_pipeline_gradcheck(seed, samples);
              py::dict out;
              out["pass"] = r.pass;
              out["max_rel_err"] = r.max_rel_err;
              out["worst_param"] = r.worst_param;
              out["coordinates"] = r.records.size();
              return out;
          },
          py::arg("seed") = 1, py::arg("samples") = 8);

    m.def("generate_dataset",
          [](const std::string& spec_path, const std::string& out_dir) {
              generate_synthetic_dataset(SyntheticSpec::from_json_file(spec_path), out_dir);
          },
          py::arg("spec_path"), py::arg("out_dir"));

    m.def("train",
          [](const std::string& config_json, const std::string& out_dir) {
              RunConfig cfg = RunConfig::from_json_string(config_json);
              TrainResult r = run_train(cfg, out_dir);
              py::dict out;
              out["episodes"] = r.episodes;
              out["final_loss"] = r.final_loss;
              out["checkpoint_dir"] = r.checkpoint_dir.string();
              return out;
          },
          py::arg("config_json"), py::arg("out_dir"));

    m.def("evaluate",
          [](const std::string& config_json, const std::string& checkpoint) {
              RunConfig cfg = RunConfig::from_json_string(config_json);
              LoadedModel lm = load_checkpoint(checkpoint);
              check_model_compat(lm.config, cfg);
              Dataset data = Dataset::load(cfg.dataset);
              EvalSummary s = run_eval(*lm.model, data, cfg);
              py::dict out;
              out["episodes"] = s.episodes;
              out["accuracy"] = s.accuracy;
              out["ci95"] = s.ci95;
              return out;
          },
          py::arg("config_json"), py::arg("checkpoint"));
}
