#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "skinlab/balance.hpp"
#include "skinlab/data.hpp"
#include "skinlab/error.hpp"
#include "skinlab/gan.hpp"
#include "skinlab/metrics.hpp"
#include "skinlab/pipeline.hpp"
#include "skinlab/xai.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;
using namespace skinlab;

namespace {

// JSON crosses the boundary as plain Python objects.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json from_py(const py::handle& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// H x W x 3 floats in [0, 1].
PixelArray image_from_numpy(const FloatArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw Error(ErrorCode::ShapeMismatch, "expected an H x W x 3 array");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  PixelArray img(h, w, RangeTag::Unit);
  auto v = a.unchecked<3>();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = v(y, x, c);
  return img;
}

FloatArray image_to_numpy(const PixelArray& img) {
  FloatArray out({img.height(), img.width(), 3});
  auto v = out.mutable_unchecked<3>();
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) v(y, x, c) = img.at(c, y, x);
  return out;
}

xai::SuperpixelMap segments_from_numpy(const py::array_t<int, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw Error(ErrorCode::ShapeMismatch, "expected an H x W label array");
  xai::SuperpixelMap seg;
  seg.height = static_cast<int>(a.shape(0));
  seg.width = static_cast<int>(a.shape(1));
  seg.labels.assign(a.data(), a.data() + a.size());
  seg.count = seg.labels.empty() ? 0 : *std::max_element(seg.labels.begin(), seg.labels.end()) + 1;
  return seg;
}

// Python callable: (M x S uint8 masks) -> M values.
xai::MaskModel mask_model(py::function fn) {
  return [fn](const std::vector<std::vector<std::uint8_t>>& masks) {
    const py::ssize_t m = static_cast<py::ssize_t>(masks.size());
    const py::ssize_t s = masks.empty() ? 0 : static_cast<py::ssize_t>(masks.front().size());
    py::array_t<std::uint8_t> arr({m, s});
    auto v = arr.mutable_unchecked<2>();
    for (py::ssize_t i = 0; i < m; ++i)
      for (py::ssize_t j = 0; j < s; ++j) v(i, j) = masks[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    auto out = py::array_t<double, py::array::c_style | py::array::forcecast>(fn(arr));
    if (out.size() != m) throw Error(ErrorCode::ModelCallFailure, "mask model returned the wrong number of values");
    return std::vector<double>(out.data(), out.data() + out.size());
  };
}

json lime_json(const xai::LimeExplanation& e) {
  return {{"class_index", e.class_index}, {"weights", e.weights},       {"intercept", e.intercept},
          {"fit_r2", e.fit_r2},           {"lambda_used", e.lambda_used}, {"top_segments", e.top_segments},
          {"warnings", e.warnings}};
}

json shap_json(const xai::ShapExplanation& e) {
  return {{"class_index", e.class_index},       {"attributions", e.attributions}, {"baseline_value", e.baseline_value},
          {"prediction_value", e.prediction_value}, {"exact", e.exact},              {"permutations", e.permutations}};
}

py::dict outcome(const pipeline::StageOutcome& o) {
  py::dict d;
  d["stage"] = std::string(pipeline::to_string(o.stage));
  d["skipped"] = o.skipped;
  d["artifacts"] = o.artifacts;
  d["warnings"] = o.warnings;
  return d;
}

// Runs a stage without the GIL; errors propagate as SkinlabError.
template <typename F>
py::dict stage_call(F&& f) {
  pipeline::StageOutcome o{};
  {
    py::gil_scoped_release release;
    o = f();
  }
  return outcome(o);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "GAN-balanced skin lesion classification: data, metrics, explanations and the run pipeline";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object cls = py::module_::import("skinlab").attr("SkinlabError");
      py::object inst = cls(std::string(to_string(e.code())), e.detail());
      PyErr_SetObject(cls.ptr(), inst.ptr());
    }
  });

  // data
  m.def(
      "generate_toy_dataset",
      [](const fs::path& out, int classes, const std::vector<long>& counts, std::uint64_t seed) {
        return to_py(data::to_json(data::generate_toy_dataset(out, classes, counts, seed)));
      },
      py::arg("out_root"), py::arg("classes"), py::arg("per_class_counts"), py::arg("seed") = 0);
  m.def(
      "ingest_metadata",
      [](const fs::path& csv, const fs::path& root, std::uint64_t seed) {
        const auto r = data::ingest_metadata(csv, root, seed);
        json skipped = json::array();
        for (const auto& s : r.skipped) skipped.push_back({{"line", s.line}, {"image_id", s.image_id}, {"reason", s.reason}});
        return to_py({{"manifest", data::to_json(r.manifest)}, {"skipped", skipped}});
      },
      py::arg("csv_path"), py::arg("image_root"), py::arg("seed") = 0);
  m.def(
      "stratified_split",
      [](const py::object& manifest, const std::array<double, 3>& ratios, std::uint64_t seed) {
        return to_py(data::to_json(data::stratified_split(data::manifest_from_json(from_py(manifest)), ratios, seed)));
      },
      py::arg("manifest"), py::arg("ratios") = std::array<double, 3>{0.70, 0.15, 0.15}, py::arg("seed") = 0);
  m.def(
      "compute_distribution",
      [](const py::object& manifest, const py::object& split, const std::string& which) {
        const auto mf = data::manifest_from_json(from_py(manifest));
        if (split.is_none()) return to_py(data::to_json(data::compute_distribution(mf)));
        return to_py(data::to_json(data::compute_distribution(mf, data::split_from_json(from_py(split)),
                                                              data::split_from_string(which))));
      },
      py::arg("manifest"), py::arg("split") = py::none(), py::arg("which") = "train");
  m.def("apportion", &data::apportion, py::arg("count"), py::arg("ratios"));

  // balance
  m.def(
      "plan_synthesis",
      [](const py::object& manifest, const py::object& split) {
        const auto dist = data::compute_distribution(data::manifest_from_json(from_py(manifest)),
                                                     data::split_from_json(from_py(split)), data::Split::Train);
        return to_py(balance::to_json(balance::plan_synthesis(dist)));
      },
      py::arg("manifest"), py::arg("split"));

  // gan
  m.def("bce_with_smoothing", &gan::bce_with_smoothing, py::arg("prediction"), py::arg("target"));

  // metrics
  m.def(
      "metrics_report",
      [](const FloatArray& probs, const std::vector<int>& labels, const std::vector<std::string>& class_names) {
        if (probs.ndim() != 2) throw Error(ErrorCode::ShapeMismatch, "probabilities must be N x K");
        nn::Tensor t({static_cast<int>(probs.shape(0)), static_cast<int>(probs.shape(1))},
                     std::vector<float>(probs.data(), probs.data() + probs.size()));
        return to_py(metrics::to_json(metrics::build_report(t, labels, class_names)));
      },
      py::arg("probabilities"), py::arg("labels"), py::arg("class_names"));
  m.def("binary_auc", &metrics::binary_auc, py::arg("scores"), py::arg("positive"));

  // xai
  m.def(
      "segment_superpixels",
      [](const FloatArray& img, int target, double compactness) {
        const auto seg = xai::segment_superpixels(image_from_numpy(img), {target, compactness});
        py::array_t<int> out({seg.height, seg.width});
        std::copy(seg.labels.begin(), seg.labels.end(), out.mutable_data());
        return out;
      },
      py::arg("image"), py::arg("target_segments") = 50, py::arg("compactness") = 10.0);
  m.def(
      "lime_from_masks",
      [](py::function fn, int segments, int n_samples, double kernel_width, double ridge_lambda, int top_k,
         bool exhaustive, std::uint64_t seed) {
        xai::LimeConfig c;
        c.n_samples = n_samples;
        c.kernel_width = kernel_width;
        c.ridge_lambda = ridge_lambda;
        c.top_k = top_k;
        c.exhaustive = exhaustive;
        c.seed = seed;
        return to_py(lime_json(xai::lime_from_masks(mask_model(std::move(fn)), segments, c)));
      },
      py::arg("model"), py::arg("segments"), py::arg("n_samples") = 1000, py::arg("kernel_width") = 0.25,
      py::arg("ridge_lambda") = 1.0, py::arg("top_k") = 5, py::arg("exhaustive") = false, py::arg("seed") = 0);
  m.def(
      "shap_from_masks",
      [](py::function fn, int segments, int n_permutations, int exact_max_segments, std::uint64_t seed) {
        xai::ShapConfig c;
        c.n_permutations = n_permutations;
        c.exact_max_segments = exact_max_segments;
        c.seed = seed;
        return to_py(shap_json(xai::shap_from_masks(mask_model(std::move(fn)), segments, c)));
      },
      py::arg("model"), py::arg("segments"), py::arg("n_permutations") = 200, py::arg("exact_max_segments") = 12,
      py::arg("seed") = 0);
  m.def(
      "lime_overlay",
      [](const FloatArray& img, const py::array_t<int, py::array::c_style | py::array::forcecast>& seg,
         const std::vector<int>& top) { return image_to_numpy(xai::lime_overlay(image_from_numpy(img), segments_from_numpy(seg), top)); },
      py::arg("image"), py::arg("segments"), py::arg("top_segments"));
  m.def(
      "shap_heatmap",
      [](const FloatArray& img, const py::array_t<int, py::array::c_style | py::array::forcecast>& seg,
         const std::vector<double>& phi) {
        return image_to_numpy(xai::shap_heatmap(image_from_numpy(img), segments_from_numpy(seg), phi));
      },
      py::arg("image"), py::arg("segments"), py::arg("attributions"));

  // pipeline
  m.def("default_config", [](bool toy) { return to_py(pipeline::to_json(pipeline::default_config(toy))); },
        py::arg("toy_mode") = false);
  m.def(
      "resolve_config",
      [](const std::optional<fs::path>& config_file, const std::vector<std::string>& sets,
         std::optional<std::uint64_t> seed, std::optional<std::string> run_dir, bool toy_mode) {
        pipeline::ConfigOverrides o;
        o.config_file = config_file;
        o.sets = sets;
        o.seed = seed;
        o.run_dir = std::move(run_dir);
        o.toy_mode = toy_mode;
        return to_py(pipeline::to_json(pipeline::resolve_config(o)));
      },
      py::arg("config_file") = py::none(), py::arg("sets") = std::vector<std::string>{}, py::arg("seed") = py::none(),
      py::arg("run_dir") = py::none(), py::arg("toy_mode") = false);

  py::class_<pipeline::Pipeline>(m, "Pipeline")
      .def(py::init([](const py::object& config) {
             return std::make_unique<pipeline::Pipeline>(pipeline::config_from_json(from_py(config)));
           }),
           py::arg("config"))
      .def_property_readonly("run_dir", &pipeline::Pipeline::run_dir)
      .def_property_readonly("config", [](const pipeline::Pipeline& p) { return to_py(pipeline::to_json(p.config())); })
      .def("ledger", [](const pipeline::Pipeline& p) { return to_py(p.ledger()); })
      .def("stage_hash",
           [](const pipeline::Pipeline& p, const std::string& name) {
             for (auto s : pipeline::kStages)
               if (pipeline::to_string(s) == name) return p.stage_hash(s);
             throw Error(ErrorCode::ConfigError, "unknown stage " + name);
           })
      .def("ingest", [](pipeline::Pipeline& p) { return stage_call([&] { return p.ingest(); }); })
      .def("split", [](pipeline::Pipeline& p) { return stage_call([&] { return p.split(); }); })
      .def(
          "train_gan",
          [](pipeline::Pipeline& p, std::optional<std::string> cls) {
            return stage_call([&] { return p.train_gan(cls); });
          },
          py::arg("class_name") = py::none())
      .def("synthesize", [](pipeline::Pipeline& p) { return stage_call([&] { return p.synthesize(); }); })
      .def("train_clf", [](pipeline::Pipeline& p) { return stage_call([&] { return p.train_clf(); }); })
      .def("evaluate", [](pipeline::Pipeline& p) { return stage_call([&] { return p.evaluate(); }); })
      .def(
          "explain",
          [](pipeline::Pipeline& p, const std::vector<std::string>& ids, const std::string& method) {
            return stage_call([&] { return p.explain(ids, method); });
          },
          py::arg("image_ids") = std::vector<std::string>{}, py::arg("method") = "")
      .def("report", [](pipeline::Pipeline& p) { return stage_call([&] { return p.report(); }); })
      .def("run_all", [](pipeline::Pipeline& p) {
        std::vector<pipeline::StageOutcome> all;
        {
          py::gil_scoped_release r;
          all = p.run_all();
        }
        py::list out;
        for (const auto& o : all) out.append(outcome(o));
        return out;
      });
}
