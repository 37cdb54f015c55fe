#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "brainmt/attribution.hpp"
#include "brainmt/bench.hpp"
#include "brainmt/train.hpp"

namespace py = pybind11;
using namespace brainmt;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const Arr& a, bool requires_grad = false) {
  Shape shape(a.ndim());
  for (int i = 0; i < a.ndim(); ++i) shape[i] = a.shape(i);
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

py::array array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Volume4D volume_from_array(const Arr& a, py::object mask) {
  if (a.ndim() != 4) throw DimError("volume array must be 4-D [T,H,W,D]");
  Volume4D v;
  v.T = static_cast<int>(a.shape(0));
  v.H = static_cast<int>(a.shape(1));
  v.W = static_cast<int>(a.shape(2));
  v.D = static_cast<int>(a.shape(3));
  v.data.assign(a.data(), a.data() + a.size());
  if (!mask.is_none()) {
    auto m = py::array_t<bool, py::array::c_style | py::array::forcecast>::ensure(mask);
    if (!m || m.ndim() != 3 || m.shape(0) != v.H || m.shape(1) != v.W || m.shape(2) != v.D)
      throw DimError("mask must be [H,W,D] bool");
    v.mask.resize(v.spatial());
    for (int64_t i = 0; i < v.spatial(); ++i) v.mask[i] = m.data()[i] ? 1 : 0;
  }
  v.validate();
  return v;
}

py::array array_from_volume(const Volume4D& v) {
  py::array_t<double> out({v.T, v.H, v.W, v.D});
  std::copy(v.data.begin(), v.data.end(), out.mutable_data());
  return out;
}

class PyModel {
 public:
  explicit PyModel(const std::string& preset, py::kwargs overrides) {
    ModelConfig cfg = ModelConfig::preset(preset);
    for (auto item : overrides) {
      std::string key = py::str(item.first);
      if (key == "frames" || key == "T")
        cfg.T = item.second.cast<int>();
      else if (key == "dims")
        cfg.H = cfg.W = cfg.D = item.second.cast<int>();
      else if (key == "channels" || key == "C")
        cfg.C = item.second.cast<int>();
      else if (key == "mamba_layers")
        cfg.mamba_layers = item.second.cast<int>();
      else if (key == "transformer_layers")
        cfg.transformer_layers = item.second.cast<int>();
      else if (key == "heads")
        cfg.heads = item.second.cast<int>();
      else if (key == "seed")
        cfg.seed = item.second.cast<uint64_t>();
      else if (key == "scan_order")
        cfg.scan_order = scan_order_from_string(item.second.cast<std::string>());
      else if (key == "task")
        cfg.task = task_from_string(item.second.cast<std::string>());
      else
        throw ConfigError("unknown model override: " + key);
    }
    cfg.validate();
    model_ = std::make_unique<BrainMT>(cfg);
  }

  explicit PyModel(const Checkpoint& ck)
      : model_(std::make_unique<BrainMT>(model_from_checkpoint(ck))) {}

  double forward(const Arr& volume) const {
    Graph g(false);
    return model_->forward(g, tensor_from_array(volume)).value();
  }

  py::array integrated_gradients_py(const Arr& volume, py::object mask, int m) const {
    Volume4D v = volume_from_array(volume, mask);
    AttributionMap map =
        brainmt::integrated_gradients(*model_, v, min_intensity(v), m);
    return array_from_volume(map.values);
  }

  int64_t parameter_count(bool include_temporal_embedding) const {
    return model_->parameter_count(include_temporal_embedding);
  }

  int64_t token_count() const { return model_->config().L(); }

  std::string config_json() const { return model_->config().to_json().dump(); }

  void save(const std::string& path) const {
    save_checkpoint(path, model_->config(), model_->params());
  }

  static PyModel load(const std::string& path) {
    return PyModel(load_checkpoint(path));
  }

 private:
  std::unique_ptr<BrainMT> model_;
};

}  // namespace

PYBIND11_MODULE(_brainmt, m) {
  m.doc() = "BrainMT core operations: selective scan, ZOH discretization, scan "
            "reordering, normalization, and the full model";

  py::register_exception<DimError>(m, "DimError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  m.def(
      "selective_scan",
      [](const Arr& u, const Arr& delta, const Arr& B, const Arr& C, const Arr& A) {
        Graph g(false);
        return array_from_tensor(g.selective_scan(tensor_from_array(u),
                                                  tensor_from_array(delta),
                                                  tensor_from_array(B),
                                                  tensor_from_array(C),
                                                  tensor_from_array(A)));
      },
      py::arg("u"), py::arg("delta"), py::arg("B"), py::arg("C"), py::arg("A"),
      "Input-dependent diagonal SSM scan: u/delta [L,d], B/C [L,N], A [d,N] -> y [L,d]");

  m.def(
      "zoh_discretize",
      [](const Arr& a, const Arr& b, double delta) {
        if (a.ndim() != 1 || b.ndim() != 1 || a.shape(0) != b.shape(0))
          throw DimError("zoh_discretize expects equal-length 1-D a and b");
        int n = static_cast<int>(a.shape(0));
        py::array_t<double> abar(n), bbar(n);
        zoh_discretize(a.data(), b.data(), delta, n, abar.mutable_data(),
                       bbar.mutable_data());
        return py::make_tuple(abar, bbar);
      },
      py::arg("a"), py::arg("b"), py::arg("delta"),
      "Zero-order-hold discretization of a diagonal system");

  m.def(
      "reorder",
      [](const Arr& tokens, int64_t T, int64_t K, const std::string& from,
         const std::string& to) {
        Graph g(false);
        return array_from_tensor(reorder(g, tensor_from_array(tokens),
                                         scan_order_from_string(from),
                                         scan_order_from_string(to), T, K));
      },
      py::arg("tokens"), py::arg("T"), py::arg("K"), py::arg("from_order"),
      py::arg("to_order"),
      "Reorder a [T*K, Z] token body between temporal_first and spatial_first");

  m.def(
      "zscore_normalize",
      [](const Arr& volume, py::object mask) {
        return array_from_volume(zscore_normalize(volume_from_array(volume, mask)));
      },
      py::arg("volume"), py::arg("mask"),
      "Global foreground z-score; background filled with the minimum z value");

  m.def(
      "save_volume",
      [](const std::string& path, const Arr& volume, py::object mask) {
        save_volume(volume_from_array(volume, mask), path);
      },
      py::arg("path"), py::arg("volume"), py::arg("mask") = py::none());
  m.def("load_volume", [](const std::string& path) {
    return array_from_volume(load_volume(path));
  });

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, py::kwargs>(), py::arg("preset") = "desk")
      .def("forward", &PyModel::forward, py::arg("volume"),
           "Scalar prediction (regression) or logit (classification) for a "
           "[T,H,W,D] volume")
      .def("integrated_gradients", &PyModel::integrated_gradients_py, py::arg("volume"),
           py::arg("mask") = py::none(), py::arg("m") = 256)
      .def("parameter_count", &PyModel::parameter_count,
           py::arg("include_temporal_embedding") = true)
      .def("token_count", &PyModel::token_count)
      .def("config_json", &PyModel::config_json)
      .def("save", &PyModel::save, py::arg("path"))
      .def_static("load", &PyModel::load, py::arg("path"));

#ifdef BRAINMT_VERSION
  m.attr("__version__") = BRAINMT_VERSION;
#else
  m.attr("__version__") = "dev";
#endif
}
