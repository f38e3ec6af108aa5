#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mrdetr/harness.hpp"

namespace py = pybind11;
using namespace mrdetr;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<geometry::Box> boxes_from(const Array& a, const std::string& form) {
    if (a.ndim() != 2 || a.shape(1) != 4) throw std::invalid_argument("boxes must have shape (n, 4)");
    const bool xyxy = form == "xyxy";
    if (!xyxy && form != "cxcywh") throw std::invalid_argument("unknown box form: " + form);
    auto r = a.unchecked<2>();
    std::vector<geometry::Box> out;
    for (py::ssize_t i = 0; i < a.shape(0); ++i)
        out.push_back(xyxy ? geometry::Box::xyxy(r(i, 0), r(i, 1), r(i, 2), r(i, 3))
                           : geometry::Box::cxcywh(r(i, 0), r(i, 1), r(i, 2), r(i, 3)));
    return out;
}

Matrix matrix_from(const Array& a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
    Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.begin());
    return m;
}

py::array_t<double> to_array(const Matrix& m) {
    py::array_t<double> out({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

py::list box_rows(const geometry::Box& b) {
    const auto c = geometry::to_cxcywh(b);
    return py::cast(std::vector<double>{c.a, c.b, c.c, c.d});
}

harness::RunConfig config_from(const std::string& config_json, const std::vector<std::string>& overrides) {
    return harness::resolve_config(config_json.empty() ? json::object() : json::parse(config_json), overrides);
}

std::vector<eval::Detection> detections_from(const py::list& rows) {
    std::vector<eval::Detection> out;
    for (const auto& r : rows) {
        const auto t = r.cast<py::tuple>();
        const auto b = t[3].cast<std::vector<double>>();
        out.push_back({t[0].cast<std::size_t>(), t[1].cast<int>(), t[2].cast<double>(),
                       geometry::Box::cxcywh(b.at(0), b.at(1), b.at(2), b.at(3))});
    }
    return out;
}

std::vector<eval::GroundTruth> truths_from(const py::list& rows) {
    std::vector<eval::GroundTruth> out;
    for (const auto& r : rows) {
        const auto t = r.cast<py::tuple>();
        const auto b = t[2].cast<std::vector<double>>();
        out.push_back({t[0].cast<std::size_t>(), t[1].cast<int>(), geometry::Box::cxcywh(b.at(0), b.at(1), b.at(2), b.at(3))});
    }
    return out;
}

py::dict scene_dict(const data::SceneSample& s) {
    py::array_t<double> img({s.height, s.width, std::size_t{3}});
    std::copy(s.image.begin(), s.image.end(), img.mutable_data());
    py::list boxes, labels;
    for (const auto& g : s.gts) {
        boxes.append(box_rows(g.box));
        labels.append(g.label);
    }
    py::dict d;
    d["seed"] = s.seed;
    d["image"] = img;
    d["boxes"] = boxes;
    d["labels"] = labels;
    return d;
}

}  // namespace

PYBIND11_MODULE(_mrdetr, m) {
    m.doc() = "Multi-route detection transformer core";

    py::register_exception<harness::HarnessError>(m, "HarnessError", PyExc_ValueError);
    py::register_exception<geometry::BoxError>(m, "BoxError", PyExc_ValueError);

    m.def("iou_pairwise", [](const Array& a, const Array& b, const std::string& form) {
        return to_array(geometry::iou_pairwise(boxes_from(a, form), boxes_from(b, form)));
    }, py::arg("a"), py::arg("b"), py::arg("form") = "cxcywh");
    m.def("giou_pairwise", [](const Array& a, const Array& b, const std::string& form) {
        return to_array(geometry::giou_pairwise(boxes_from(a, form), boxes_from(b, form)));
    }, py::arg("a"), py::arg("b"), py::arg("form") = "cxcywh");
    m.def("nms", [](const Array& boxes, const std::vector<double>& scores, double thresh, const std::string& form) {
        const auto b = boxes_from(boxes, form);
        if (b.size() != scores.size()) throw std::invalid_argument("boxes and scores differ in length");
        return geometry::nms(b, scores, thresh);
    }, py::arg("boxes"), py::arg("scores"), py::arg("iou_thresh"), py::arg("form") = "cxcywh");

    m.def("hungarian_match", [](const Array& cost) {
        const auto r = assign::hungarian_match(matrix_from(cost));
        return py::make_tuple(r.gt_to_pred, r.total_cost);
    }, py::arg("cost"), "Minimum-cost map from columns (ground truths) to rows (predictions).");
    m.def("o2m_assign", [](const Array& scores, const Array& ious, double alpha, std::size_t k, double tau) {
        return assign::o2m_assign(matrix_from(scores), matrix_from(ious), {alpha, k, tau}).positives;
    }, py::arg("scores"), py::arg("ious"), py::arg("alpha") = 0.3, py::arg("k") = 6, py::arg("tau") = 0.4);

    m.def("calibrate_score", &loss::calibrate_score, py::arg("s_cls"), py::arg("s_iou"), py::arg("phi"));

    m.def("compute_ap", [](const py::list& dets, const py::list& gts) -> py::object {
        const auto r = eval::compute_ap(detections_from(dets), truths_from(gts));
        if (!r) return py::none();
        py::dict d;
        d["AP"] = r->ap;
        d["AP50"] = r->ap50;
        d["AP75"] = r->ap75;
        return d;
    }, py::arg("detections"), py::arg("ground_truths"),
       "detections: (scene, label, score, [cx, cy, w, h]); ground_truths: (scene, label, [cx, cy, w, h]).");

    m.def("generate_scene", [](std::uint64_t seed) { return scene_dict(data::generate_scene(seed, {})); },
          py::arg("seed"));

    m.def("preset_names", &harness::preset_names);
    m.def("resolve_config", [](const std::string& config_json, const std::vector<std::string>& overrides) {
        return json(config_from(config_json, overrides)).dump();
    }, py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{});

    py::class_<model::Model, std::shared_ptr<model::Model>>(m, "Model")
        .def(py::init([](const std::string& preset, std::uint64_t seed) {
                 return std::make_shared<model::Model>(harness::preset_model(preset), seed);
             }),
             py::arg("preset") = "mrdetr-pp", py::arg("seed") = 0)
        .def_static("load", &harness::load_checkpoint, py::arg("path"))
        .def("save", [](const model::Model& self, const std::string& path) { harness::save_checkpoint(path, self); },
             py::arg("path"))
        .def_property_readonly("routes", [](const model::Model& self) {
            std::vector<std::string> names;
            for (const auto& r : self.config().routes) names.push_back(r.name);
            return names;
        })
        .def_property_readonly("num_params", [](const model::Model& self) {
            std::size_t n = 0;
            for (const auto& p : self.params().params()) n += p.tensor.values().size();
            return n;
        })
        .def("config_json", [](const model::Model& self) { return json(self.config()).dump(); })
        .def("detect", [](const model::Model& self, const Array& image, double phi, std::size_t top_n) {
            if (image.ndim() != 3 || image.shape(2) != 3) throw std::invalid_argument("image must have shape (h, w, 3)");
            const std::vector<double> pixels(image.data(), image.data() + image.size());
            const auto in = self.prepare(pixels, static_cast<std::size_t>(image.shape(0)),
                                         static_cast<std::size_t>(image.shape(1)));
            py::list out;
            for (const auto& d : self.inference(in, phi, top_n))
                out.append(py::make_tuple(d.query, d.label, d.score, box_rows(d.box)));
            return out;
        }, py::arg("image"), py::arg("phi") = 0.0, py::arg("top_n") = 0,
           "Primary-route detections as (query, label, score, [cx, cy, w, h]).");

    m.def("train", [](const std::string& config_json, const std::vector<std::string>& overrides,
                      const std::string& run_dir) {
        const auto cfg = config_from(config_json, overrides);
        harness::TrainResult r;
        {
            py::gil_scoped_release release;
            r = harness::run_train(cfg, run_dir);
        }
        py::dict d;
        d["model"] = r.model;
        d["epoch_loss"] = r.epoch_loss;
        d["ap"] = r.o2o_ap;
        d["best_aux_ap"] = r.best_o2m_ap ? py::cast(*r.best_o2m_ap) : py::none();
        py::list lines;
        for (const auto& row : r.rows) lines.append(harness::metrics_line(row));
        d["metrics"] = lines;
        return d;
    }, py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{}, py::arg("run_dir") = "");

    m.def("evaluate", [](const model::Model& model, const std::string& config_json,
                         const std::vector<std::string>& overrides) {
        const auto cfg = config_from(config_json, overrides);
        const auto val = harness::build_dataset(cfg.dataset, "val", cfg.dataset.n_val, model.config().strides);
        std::vector<std::string> lines;
        for (const auto& row : harness::evaluate_routes(model, val, cfg, cfg.optim.epochs))
            lines.push_back(harness::metrics_line(row));
        return lines;
    }, py::arg("model"), py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{},
       "metrics.csv lines for every route on the validation split.");

    m.def("gradcheck", [](const std::string& preset, std::uint64_t seed, std::size_t max_coords) {
        harness::GradCheckReport rep;
        {
            py::gil_scoped_release release;
            rep = harness::gradcheck_model(harness::gradcheck_config(preset), seed, max_coords);
        }
        py::dict d;
        d["max_rel_error"] = rep.result.max_rel_error;
        d["worst_param"] = rep.result.worst_param;
        d["coords_checked"] = rep.result.coords_checked;
        d["params"] = rep.params;
        d["seconds"] = rep.seconds;
        return d;
    }, py::arg("preset") = "mrdetr-pp", py::arg("seed") = 1, py::arg("max_coords") = 0);
}
