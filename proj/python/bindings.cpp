#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "taft/checkpoint.hpp"
#include "taft/config.hpp"
#include "taft/metrics.hpp"
#include "taft/pipeline.hpp"
#include "taft/trainer.hpp"

namespace py = pybind11;

namespace {

py::array_t<double> image_array(const taft::Instance& inst) {
  py::array_t<double> out({3, inst.h, inst.w});
  std::copy(inst.image.begin(), inst.image.end(), out.mutable_data());
  return out;
}

py::array_t<uint8_t> mask_array(const std::vector<uint8_t>& mask, int h, int w) {
  py::array_t<uint8_t> out({h, w});
  std::copy(mask.begin(), mask.end(), out.mutable_data());
  return out;
}

taft::Instance instance_from(const py::array_t<double>& image, const py::array_t<uint8_t>& mask) {
  if (image.ndim() != 3 || image.shape(0) != 3) {
    throw py::value_error("image must have shape (3, h, w)");
  }
  const int h = static_cast<int>(image.shape(1));
  const int w = static_cast<int>(image.shape(2));
  if (mask.size() != 0 && (mask.ndim() != 2 || mask.shape(0) != h || mask.shape(1) != w)) {
    throw py::value_error("mask must have shape (h, w) matching the image");
  }
  taft::Instance inst;
  inst.h = h;
  inst.w = w;
  auto img = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(image);
  inst.image.assign(img.data(), img.data() + img.size());
  if (mask.size() != 0) {
    auto m = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>::ensure(mask);
    inst.mask.resize(static_cast<size_t>(m.size()));
    for (py::ssize_t i = 0; i < m.size(); ++i) inst.mask[static_cast<size_t>(i)] = m.data()[i] ? 1 : 0;
  }
  return inst;
}

py::dict instance_dict(const taft::Instance& inst) {
  py::dict d;
  d["image"] = image_array(inst);
  d["mask"] = mask_array(inst.mask, inst.h, inst.w);
  return d;
}

class Model {
 public:
  Model(int canvas, uint64_t seed)
      : canvas_(canvas), net_(taft::ModelConfig::for_canvas(canvas), seed) {}

  static Model load(const std::string& path, int canvas) {
    Model m(canvas, 0);
    const auto meta = taft::load_checkpoint(path, m.net_.params());
    m.episode_index_ = meta.episode_index;
    return m;
  }

  void save(const std::string& path) const {
    taft::save_checkpoint(path, net_.params(), taft::CheckpointMeta{0, episode_index_});
  }

  py::array_t<uint8_t> segment(const std::vector<py::array_t<double>>& support_images,
                               const std::vector<py::array_t<uint8_t>>& support_masks,
                               const py::array_t<double>& query_image, double ridge,
                               const std::vector<double>& scales) const {
    if (support_images.empty() || support_images.size() != support_masks.size()) {
      throw py::value_error("need one mask per support image");
    }
    taft::Episode ep;
    ep.canvas = canvas_;
    for (size_t i = 0; i < support_images.size(); ++i) {
      ep.support.push_back(instance_from(support_images[i], support_masks[i]));
    }
    const taft::Instance query = instance_from(query_image, py::array_t<uint8_t>(0));
    taft::NoGradGuard guard;
    const auto p = taft::fit_episode_transform(net_, ep, ridge);
    const auto pred = taft::multi_scale_predict(net_, p, query, scales);
    return mask_array(pred, query.h, query.w);
  }

  std::string evaluate_json(int split, int shots, int queries, int episodes_per_class,
                            const std::vector<double>& scales, uint64_t seed, double ridge,
                            int workers) const {
    taft::EvalConfig cfg;
    cfg.split = split;
    cfg.shots = shots;
    cfg.queries = queries;
    cfg.episodes_per_class = episodes_per_class;
    cfg.scales = scales;
    cfg.seed = seed;
    cfg.ridge = ridge;
    cfg.workers = workers;
    return taft::evaluate(net_, cfg, canvas_).dump();
  }

  int canvas() const { return canvas_; }
  uint64_t episode_index() const { return episode_index_; }
  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& p : net_.params().items()) n += static_cast<size_t>(p.value.numel());
    return n;
  }

 private:
  int canvas_;
  taft::SegNet<float> net_;
  uint64_t episode_index_ = 0;
};

py::dict sample_episode_py(int split, const std::string& phase, int shots, int queries,
                           uint64_t seed, int canvas) {
  const auto split_cfg = taft::SplitConfig::make(split);
  if (phase != "train" && phase != "test") throw py::value_error("phase must be train or test");
  const auto ph = phase == "train" ? taft::Phase::train : taft::Phase::test;
  const auto ep = taft::sample_episode(split_cfg, ph, shots, queries, seed, canvas);
  py::dict d;
  d["class_id"] = ep.class_id;
  d["seed"] = ep.seed;
  d["canvas"] = ep.canvas;
  py::list support, query;
  for (const auto& inst : ep.support) support.append(instance_dict(inst));
  for (const auto& inst : ep.query) query.append(instance_dict(inst));
  d["support"] = support;
  d["query"] = query;
  return d;
}

std::string train_json(const std::string& config_text, const std::string& out_dir) {
  const auto cfg = taft::parse_run_config(nlohmann::json::parse(config_text));
  if (cfg.train.precision == 64) {
    taft::Trainer<double> trainer(cfg.train);
    trainer.train(out_dir);
  } else {
    taft::Trainer<float> trainer(cfg.train);
    trainer.train(out_dir);
  }
  return out_dir + "/ckpt_final.taft";
}

py::dict gradient_check_py(uint64_t seed, int64_t coords) {
  taft::SegNet<double> net(taft::ModelConfig::tiny(), seed);
  taft::Rng jitter(taft::mix64(seed, 0xB1A5));
  for (auto& p : net.params().items())
    for (auto& v : p.value.data()) v += jitter.uniform(-0.05, 0.05);
  const auto split = taft::SplitConfig::make(0);
  const auto ep = taft::sample_episode(split, taft::Phase::train, 1, 1,
                                       taft::mix64(seed, 0x6C05), 32);
  taft::Rng rng(taft::mix64(seed, 0xFD));
  const auto checks = taft::episode_gradient_check(net, ep, 1e-6, 1e-5, coords, rng);
  py::dict out;
  for (const auto& check : checks) {
    out[taft::group_name(check.group)] = check.report.max_rel_err;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot shape segmentation core";
  py::register_exception<taft::Error>(m, "TaftError");

  py::class_<Model>(m, "Model")
      .def(py::init<int, uint64_t>(), py::arg("canvas") = 64, py::arg("seed") = 0)
      .def_static("load", &Model::load, py::arg("path"), py::arg("canvas") = 64)
      .def("save", &Model::save, py::arg("path"))
      .def("segment", &Model::segment, py::arg("support_images"), py::arg("support_masks"),
           py::arg("query_image"), py::arg("ridge") = 1e-6,
           py::arg("scales") = std::vector<double>{1.0})
      .def("_evaluate_json", &Model::evaluate_json)
      .def_property_readonly("canvas", &Model::canvas)
      .def_property_readonly("episode_index", &Model::episode_index)
      .def_property_readonly("parameter_count", &Model::parameter_count);

  m.def("sample_episode", &sample_episode_py, py::arg("split") = 0, py::arg("phase") = "train",
        py::arg("shots") = 1, py::arg("queries") = 1, py::arg("seed") = 0,
        py::arg("canvas") = 64);
  m.def("train_json", &train_json, py::arg("config_json"), py::arg("out_dir"));
  m.def("gradient_check", &gradient_check_py, py::arg("seed") = 1, py::arg("coords") = 4);
}
