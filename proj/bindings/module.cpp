#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "flipshield/campaign.hpp"
#include "flipshield/dataset.hpp"
#include "flipshield/errors.hpp"
#include "flipshield/fault.hpp"
#include "flipshield/hash.hpp"
#include "flipshield/metrics.hpp"
#include "flipshield/mitigation.hpp"
#include "flipshield/model.hpp"
#include "flipshield/tensor.hpp"

namespace py = pybind11;
using namespace flipshield;

namespace {

Tensor np_to_tensor(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
    std::vector<std::size_t> shape(static_cast<std::size_t>(arr.ndim()));
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arr.shape(i));
    }
    std::vector<float> data(arr.data(), arr.data() + arr.size());
    return Tensor(std::move(shape), std::move(data));
}

py::array_t<float> tensor_to_np(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> arr(shape);
    std::copy(t.values().begin(), t.values().end(), arr.mutable_data());
    return arr;
}

FaultSpec make_spec(const std::string& target, int targeted_layer_id,
                    const std::vector<std::string>& eligible_kinds, std::size_t num_bit_flips,
                    const std::string& bit_policy, std::uint64_t seed) {
    FaultSpec spec;
    spec.target = fault_target_from_string(target);
    if (targeted_layer_id >= 0) {
        spec.selection = LayerSelection::Targeted;
        spec.targeted_layer_id = targeted_layer_id;
    }
    for (const auto& k : eligible_kinds) spec.eligible_kinds.insert(kind_from_string(k));
    spec.num_bit_flips = num_bit_flips;
    spec.bit_policy = bit_policy_from_string(bit_policy);
    spec.seed = seed;
    return spec;
}

} // namespace

PYBIND11_MODULE(_flipshield, m) {
    m.doc() = "bit-flip fault injection and range-restriction toolkit";

    // Base classes first so derived translators run first.
    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DimensionError>(m, "DimensionError");
    py::register_exception<RangeError>(m, "RangeError");
    py::register_exception<FormatError>(m, "FormatError");
    py::register_exception<VersionError>(m, "VersionError");
    py::register_exception<PlacementError>(m, "PlacementError");
    py::register_exception<PairingError>(m, "PairingError");
    py::register_exception<ParseError>(m, "ParseError");

    py::class_<Detection>(m, "Detection")
        .def(py::init<>())
        .def(py::init([](float x_min, float y_min, float x_max, float y_max, int class_id,
                         float score) {
                 Detection d;
                 d.x_min = x_min;
                 d.y_min = y_min;
                 d.x_max = x_max;
                 d.y_max = y_max;
                 d.class_id = class_id;
                 d.score = score;
                 return d;
             }),
             py::arg("x_min"), py::arg("y_min"), py::arg("x_max"), py::arg("y_max"),
             py::arg("class_id"), py::arg("score"))
        .def_readwrite("x_min", &Detection::x_min)
        .def_readwrite("y_min", &Detection::y_min)
        .def_readwrite("x_max", &Detection::x_max)
        .def_readwrite("y_max", &Detection::y_max)
        .def_readwrite("class_id", &Detection::class_id)
        .def_readwrite("score", &Detection::score)
        .def("finite", &Detection::finite)
        .def("__repr__", [](const Detection& d) {
            return "Detection(x_min=" + std::to_string(d.x_min) + ", y_min=" +
                   std::to_string(d.y_min) + ", x_max=" + std::to_string(d.x_max) +
                   ", y_max=" + std::to_string(d.y_max) + ", class_id=" +
                   std::to_string(d.class_id) + ", score=" + std::to_string(d.score) + ")";
        });

    py::class_<GtObject>(m, "GtObject")
        .def(py::init<>())
        .def(py::init([](float x_min, float y_min, float x_max, float y_max, int class_id) {
                 GtObject g;
                 g.x_min = x_min;
                 g.y_min = y_min;
                 g.x_max = x_max;
                 g.y_max = y_max;
                 g.class_id = class_id;
                 return g;
             }),
             py::arg("x_min"), py::arg("y_min"), py::arg("x_max"), py::arg("y_max"),
             py::arg("class_id"))
        .def_readwrite("x_min", &GtObject::x_min)
        .def_readwrite("y_min", &GtObject::y_min)
        .def_readwrite("x_max", &GtObject::x_max)
        .def_readwrite("y_max", &GtObject::y_max)
        .def_readwrite("class_id", &GtObject::class_id);

    py::class_<MatchOutcome>(m, "MatchOutcome")
        .def(py::init<>())
        .def_readonly("tp", &MatchOutcome::tp)
        .def_readonly("fp", &MatchOutcome::fp)
        .def_readonly("fn", &MatchOutcome::fn)
        .def_readonly("matches", &MatchOutcome::matches);

    py::class_<TraceEntry>(m, "TraceEntry")
        .def_readonly("layer_id", &TraceEntry::layer_id)
        .def_readonly("mean", &TraceEntry::mean)
        .def_readonly("variance", &TraceEntry::variance)
        .def_readonly("min", &TraceEntry::min)
        .def_readonly("max", &TraceEntry::max)
        .def_readonly("all_finite", &TraceEntry::all_finite);

    py::class_<FaultSite>(m, "FaultSite")
        .def_readonly("flat_index", &FaultSite::flat_index)
        .def_readonly("bit", &FaultSite::bit);

    py::class_<FaultPlan>(m, "FaultPlan")
        .def_property_readonly("target",
                               [](const FaultPlan& p) { return fault_target_to_string(p.target); })
        .def_readonly("layer_id", &FaultPlan::layer_id)
        .def_readonly("sites", &FaultPlan::sites)
        .def("empty", &FaultPlan::empty);

    py::class_<BoundsProfile>(m, "BoundsProfile")
        .def(py::init<>())
        .def("size", &BoundsProfile::size)
        .def("contains", &BoundsProfile::contains, py::arg("layer_id"))
        .def("at",
             [](const BoundsProfile& b, int layer_id) {
                 const Bounds bounds = b.at(layer_id);
                 return py::make_tuple(bounds.lower, bounds.upper);
             },
             py::arg("layer_id"))
        .def("to_json", &BoundsProfile::to_json, py::arg("indent") = 2)
        .def_static("from_json", &BoundsProfile::from_json, py::arg("text"))
        .def("content_hash", &BoundsProfile::content_hash);

    py::class_<Model>(m, "Model")
        .def_static(
            "toy_detr",
            [](std::uint64_t seed, std::size_t embed_dim, std::size_t heads, std::size_t points,
               std::size_t encoders, std::size_t decoders, std::size_t queries,
               std::size_t num_classes) {
                ToyDetrParams p;
                p.embed_dim = embed_dim;
                p.heads = heads;
                p.points = points;
                p.encoders = encoders;
                p.decoders = decoders;
                p.queries = queries;
                p.num_classes = num_classes;
                return Model::build_toy_detr(p, seed);
            },
            py::arg("seed") = 7, py::arg("embed_dim") = 32, py::arg("heads") = 2,
            py::arg("points") = 4, py::arg("encoders") = 2, py::arg("decoders") = 2,
            py::arg("queries") = 8, py::arg("num_classes") = 2)
        .def_static(
            "toy_cnn",
            [](std::uint64_t seed, std::size_t channels, std::size_t conv_layers,
               std::size_t num_classes) {
                ToyCnnParams p;
                p.channels = channels;
                p.conv_layers = conv_layers;
                p.num_classes = num_classes;
                return Model::build_toy_cnn(p, seed);
            },
            py::arg("seed") = 7, py::arg("channels") = 16, py::arg("conv_layers") = 6,
            py::arg("num_classes") = 2)
        .def_property_readonly(
            "arch", [](const Model& mod) { return architecture_to_string(mod.architecture()); })
        .def("layers_json", [](const Model& mod) { return mod.registry().to_json(); })
        .def("n_layers", [](const Model& mod) { return mod.registry().size(); })
        .def("content_hash", &Model::content_hash)
        .def("save", &Model::save_file, py::arg("path"))
        .def_static("load", &Model::load_file, py::arg("path"))
        .def(
            "forward",
            [](const Model& mod, const py::array_t<float, py::array::c_style |
                                                              py::array::forcecast>& image) {
                const ForwardResult res = mod.forward(np_to_tensor(image));
                py::dict out;
                out["detections"] = res.raw;
                out["trace"] = res.trace.entries;
                return out;
            },
            py::arg("image"));

    m.def("float_to_bits", &float_to_bits, py::arg("x"));
    m.def("bits_to_float", &bits_to_float, py::arg("pattern"));
    m.def(
        "flip_bits",
        [](float x, const std::vector<int>& bits) { return flip_bits(x, bits); },
        py::arg("x"), py::arg("bits"));
    m.def(
        "restrict_value",
        [](float x, const std::string& rule, float lower, float upper) {
            return restrict_value(x, rule_from_string(rule), Bounds{lower, upper});
        },
        py::arg("x"), py::arg("rule"), py::arg("lower"), py::arg("upper"));

    m.def(
        "iou",
        [](const std::vector<float>& a, const std::vector<float>& b) {
            if (a.size() != 4 || b.size() != 4) {
                throw DimensionError("iou boxes need 4 coordinates each");
            }
            return iou(a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]);
        },
        py::arg("box_a"), py::arg("box_b"));
    m.def("match_detections", &match_detections, py::arg("predictions"),
          py::arg("ground_truth"), py::arg("iou_threshold") = 0.5f,
          py::arg("score_threshold") = 0.5f);
    m.def(
        "ivmod",
        [](const std::vector<MatchOutcome>& golden,
           const std::vector<std::pair<MatchOutcome, bool>>& faulty) {
            const IvmodReport r = ivmod(golden, faulty);
            py::dict out;
            out["sdc_rate"] = r.sdc_rate;
            out["due_rate"] = r.due_rate;
            out["fd_rate"] = r.fd_rate;
            out["n"] = r.n;
            return out;
        },
        py::arg("golden"), py::arg("faulty"));
    m.def(
        "ap50",
        [](const std::vector<std::vector<Detection>>& preds,
           const std::vector<GroundTruth>& gts, float iou_threshold) {
            const Ap50Result r = ap50(preds, gts, iou_threshold);
            return py::make_tuple(r.value, r.no_ground_truth);
        },
        py::arg("predictions_per_image"), py::arg("ground_truth_per_image"),
        py::arg("iou_threshold") = 0.5f);

    m.def(
        "generate_dataset",
        [](const std::string& config_json) {
            const SyntheticDataset ds =
                generate_dataset(DatasetConfig::from_json(config_json));
            py::list images;
            for (const auto& img : ds.images) images.append(tensor_to_np(img));
            py::dict out;
            out["images"] = images;
            out["annotations"] = ds.annotations;
            out["profiling_indices"] = ds.profiling_indices;
            out["eval_indices"] = ds.eval_indices;
            out["content_hash"] = ds.content_hash();
            return out;
        },
        py::arg("config_json") = "{}");

    m.def(
        "profile_bounds",
        [](const Model& model, const py::list& images, const std::string& provenance) {
            std::vector<Tensor> tensors;
            for (const auto& img : images) {
                tensors.push_back(np_to_tensor(
                    img.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>()));
            }
            return profile_bounds(model, tensors, provenance);
        },
        py::arg("model"), py::arg("images"), py::arg("provenance") = "");

    m.def(
        "sample_plan",
        [](const Model& model, const std::string& target, int targeted_layer_id,
           const std::vector<std::string>& eligible_kinds, std::size_t num_bit_flips,
           const std::string& bit_policy, std::uint64_t seed) {
            return sample_plan(make_spec(target, targeted_layer_id, eligible_kinds,
                                         num_bit_flips, bit_policy, seed),
                               model);
        },
        py::arg("model"), py::arg("target") = "neurons", py::arg("targeted_layer_id") = -1,
        py::arg("eligible_kinds") = std::vector<std::string>{},
        py::arg("num_bit_flips") = std::size_t{1}, py::arg("bit_policy") = "high-order-9",
        py::arg("seed") = std::uint64_t{0});

    m.def(
        "run_inference",
        [](Model& model,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& image,
           const std::string& policy, const BoundsProfile* bounds, const FaultPlan* plan) {
            const MitigationPolicy pol =
                MitigationPolicy::named(policy_variant_from_string(policy));
            const BoundsProfile empty_bounds;
            const HookSet hooks =
                make_mitigation_hooks(pol, model.registry(), bounds ? *bounds : empty_bounds);
            const FaultPlan empty_plan;
            const FaultRunResult res =
                run_with_fault(model, np_to_tensor(image), plan ? *plan : empty_plan, hooks);
            py::dict out;
            out["detections"] = res.forward.raw;
            out["trace"] = res.forward.trace.entries;
            if (plan && !plan->empty()) {
                out["record"] = res.record.to_json();
            } else {
                out["record"] = py::none();
            }
            return out;
        },
        py::arg("model"), py::arg("image"), py::arg("policy") = "none",
        py::arg("bounds") = nullptr, py::arg("plan") = nullptr);

    m.def(
        "run_campaign",
        [](const std::string& config_json) {
            const CampaignResult r = run_campaign(CampaignConfig::from_json(config_json));
            py::dict out;
            out["csv_path"] = r.csv_path;
            out["sidecar_path"] = r.sidecar_path;
            out["records_path"] = r.records_path;
            out["n"] = r.report.n;
            out["sdc_rate"] = r.report.sdc_rate;
            out["due_rate"] = r.report.due_rate;
            out["fd_rate"] = r.report.fd_rate;
            out["ap50_golden"] = r.ap50_golden;
            out["ap50_faulty"] = r.ap50_faulty;
            out["ap50_no_ground_truth"] = r.ap50_no_ground_truth;
            return out;
        },
        py::arg("config_json"));

    m.def(
        "layerwise_sweep",
        [](const std::string& config_json) {
            const SweepResult r = layerwise_sweep(CampaignConfig::from_json(config_json));
            py::list per_layer;
            for (const auto& row : r.per_layer) {
                py::dict d;
                d["layer_id"] = row.layer_id;
                d["name"] = row.name;
                d["kind"] = row.kind;
                d["stage"] = row.stage;
                d["sdc_rate"] = row.report.sdc_rate;
                d["due_rate"] = row.report.due_rate;
                d["fd_rate"] = row.report.fd_rate;
                d["n"] = row.report.n;
                per_layer.append(std::move(d));
            }
            py::list per_stage;
            for (const auto& row : r.per_stage) {
                py::dict d;
                d["stage"] = row.stage;
                d["layers"] = row.layers;
                d["sdc_rate"] = row.sdc_rate;
                d["due_rate"] = row.due_rate;
                d["fd_rate"] = row.fd_rate;
                per_stage.append(std::move(d));
            }
            py::dict out;
            out["csv_path"] = r.csv_path;
            out["sidecar_path"] = r.sidecar_path;
            out["per_layer"] = per_layer;
            out["per_stage"] = per_stage;
            return out;
        },
        py::arg("config_json"));

    m.def(
        "placement_ablation",
        [](const std::string& config_json) {
            const AblationResult r = placement_ablation(CampaignConfig::from_json(config_json));
            py::list rows;
            for (const auto& row : r.rows) {
                py::dict d;
                d["policy"] = row.policy_name;
                d["sdc_rate"] = row.report.sdc_rate;
                d["due_rate"] = row.report.due_rate;
                d["fd_rate"] = row.report.fd_rate;
                d["n"] = row.report.n;
                rows.append(std::move(d));
            }
            py::dict out;
            out["csv_path"] = r.csv_path;
            out["sidecar_path"] = r.sidecar_path;
            out["rows"] = rows;
            return out;
        },
        py::arg("config_json"));

    m.def("report_bundle", &report_bundle, py::arg("csv_paths"),
          py::arg("trace_paths") = std::vector<std::string>{});

    m.def(
        "default_campaign_config",
        []() { return CampaignConfig{}.to_json(); });
}
