#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flipshield/campaign.hpp"
#include "flipshield/dataset.hpp"
#include "flipshield/errors.hpp"
#include "flipshield/hash.hpp"
#include "flipshield/metrics.hpp"
#include "flipshield/mitigation.hpp"
#include "flipshield/model.hpp"

using namespace flipshield;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

/// Flags shared by the experiment subcommands; each one overrides the
/// matching CampaignConfig field when passed, on top of --config.
struct CommonOpts {
    std::string config_path, arch, policy, target, bit_policy, out_dir;
    std::uint64_t model_seed = 0, dataset_seed = 0, fault_seed = 0;
    std::size_t n_images = 0, num_bit_flips = 0, injections = 0, per_layer = 0;
    double iou = 0.0, score = 0.0;
    bool dump_traces = false;

    CLI::Option *o_config = nullptr, *o_arch = nullptr, *o_policy = nullptr,
                *o_target = nullptr, *o_bit_policy = nullptr, *o_out = nullptr,
                *o_model_seed = nullptr, *o_dataset_seed = nullptr, *o_fault_seed = nullptr,
                *o_n_images = nullptr, *o_flips = nullptr, *o_injections = nullptr,
                *o_per_layer = nullptr, *o_iou = nullptr, *o_score = nullptr,
                *o_dump = nullptr;

    void attach(CLI::App* sub) {
        o_config = sub->add_option("--config", config_path, "campaign config JSON file");
        o_arch = sub->add_option("--arch", arch, "toy-detr or toy-cnn");
        o_model_seed = sub->add_option("--model-seed", model_seed, "weight init seed");
        o_dataset_seed = sub->add_option("--dataset-seed", dataset_seed, "dataset seed");
        o_n_images = sub->add_option("--n-images", n_images, "dataset size");
        o_policy = sub->add_option("--policy", policy,
                                   "none, ranger, clipper, global-ranger, global-clipper "
                                   "or global-hybrid-clipper");
        o_target = sub->add_option("--target", target, "neurons or weights");
        o_flips = sub->add_option("--num-bit-flips", num_bit_flips, "1 or 10");
        o_bit_policy = sub->add_option("--bit-policy", bit_policy, "high-order-9 or any-bit");
        o_fault_seed = sub->add_option("--fault-seed", fault_seed, "injection schedule seed");
        o_injections = sub->add_option("--injections", injections, "random campaign size");
        o_per_layer =
            sub->add_option("--per-layer-injections", per_layer, "targeted sweep size per layer");
        o_iou = sub->add_option("--iou-threshold", iou, "matching IoU threshold");
        o_score = sub->add_option("--score-threshold", score, "detection score threshold");
        o_out = sub->add_option("--out", out_dir, "output directory");
        o_dump = sub->add_flag("--dump-traces", dump_traces, "write golden/faulty trace series");
    }

    CampaignConfig build() const {
        CampaignConfig cfg;
        if (o_config->count()) cfg = CampaignConfig::from_json(read_file(config_path));
        if (o_arch->count()) {
            if (arch == "toy-detr") {
                cfg.arch = Architecture::ToyDetr;
            } else if (arch == "toy-cnn") {
                cfg.arch = Architecture::ToyCnn;
            } else {
                throw ConfigError("unknown arch: " + arch);
            }
        }
        if (o_model_seed->count()) cfg.model_seed = model_seed;
        if (o_dataset_seed->count()) cfg.dataset.seed = dataset_seed;
        if (o_n_images->count()) cfg.dataset.n_images = n_images;
        if (o_policy->count()) {
            cfg.policy = MitigationPolicy::named(policy_variant_from_string(policy));
        }
        if (o_target->count()) cfg.fault.target = fault_target_from_string(target);
        if (o_flips->count()) cfg.fault.num_bit_flips = num_bit_flips;
        if (o_bit_policy->count()) cfg.fault.bit_policy = bit_policy_from_string(bit_policy);
        if (o_fault_seed->count()) cfg.fault.seed = fault_seed;
        if (o_injections->count()) cfg.injections = injections;
        if (o_per_layer->count()) cfg.per_layer_injections = per_layer;
        if (o_iou->count()) cfg.iou_threshold = static_cast<float>(iou);
        if (o_score->count()) cfg.score_threshold = static_cast<float>(score);
        if (o_out->count()) cfg.out_dir = out_dir;
        if (o_dump->count()) cfg.dump_traces = dump_traces;
        return cfg;
    }
};

int cmd_gen_data(const CommonOpts& opts) {
    const CampaignConfig cfg = opts.build();
    const SyntheticDataset ds = generate_dataset(cfg.dataset);
    json desc;
    desc["config"] = json::parse(cfg.dataset.to_json(-1));
    desc["content_hash"] = hex_u64(ds.content_hash());
    desc["n_profiling"] = ds.profiling_indices.size();
    desc["n_eval"] = ds.eval_indices.size();
    const std::string desc_path = (fs::path(cfg.out_dir) / "dataset.json").string();
    const std::string ann_path = (fs::path(cfg.out_dir) / "annotations.json").string();
    write_file(desc_path, desc.dump(2) + "\n");
    write_file(ann_path, ds.annotations_json() + "\n");
    std::cout << "dataset " << hex_u64(ds.content_hash()) << ": " << ds.images.size()
              << " images (" << ds.profiling_indices.size() << " profiling, "
              << ds.eval_indices.size() << " eval)\n"
              << desc_path << "\n"
              << ann_path << "\n";
    return 0;
}

int cmd_profile_bounds(const CommonOpts& opts) {
    const CampaignConfig cfg = opts.build();
    const Model model = cfg.build_model();
    const SyntheticDataset ds = generate_dataset(cfg.dataset);
    const BoundsProfile bounds =
        profile_bounds(model, ds.profiling_images(),
                       "dataset " + hex_u64(ds.content_hash()) + " profiling split");
    const std::string path = (fs::path(cfg.out_dir) / "bounds.json").string();
    write_file(path, bounds.to_json() + "\n");
    std::cout << "profiled " << bounds.size() << " layers over " << bounds.sample_count()
              << " images\n"
              << path << "\n";
    return 0;
}

int cmd_golden(const CommonOpts& opts) {
    const CampaignConfig cfg = opts.build();
    const Model model = cfg.build_model();
    const SyntheticDataset ds = generate_dataset(cfg.dataset);
    BoundsProfile bounds;
    if (!resolve_placement(cfg.policy, model.registry()).empty()) {
        bounds = profile_bounds(model, ds.profiling_images(),
                                "dataset " + hex_u64(ds.content_hash()) + " profiling split");
    }
    const std::string cache_dir = (fs::path(cfg.out_dir) / "cache").string();
    const GoldenRun run = golden_run(model, ds, cfg.policy, bounds, cache_dir);
    std::vector<GroundTruth> gts;
    for (std::size_t id : run.image_ids) gts.push_back(ds.annotations[id]);
    const Ap50Result ap = ap50(run.raw, gts, cfg.iou_threshold);
    std::cout << "golden run, policy " << cfg.policy.name() << ": " << run.image_ids.size()
              << " images, ap50 " << ap.value << (run.from_cache ? " (cached)" : "") << "\n"
              << run.cache_path << "\n";
    return 0;
}

int cmd_campaign(const CommonOpts& opts) {
    const CampaignConfig cfg = opts.build();
    const CampaignResult res = run_campaign(cfg);
    std::cout << "campaign, policy " << cfg.policy.name() << ": n=" << res.report.n
              << " sdc=" << res.report.sdc_rate << " due=" << res.report.due_rate
              << " fd=" << res.report.fd_rate << "\n"
              << "ap50 golden=" << res.ap50_golden << " faulty=" << res.ap50_faulty
              << (res.ap50_no_ground_truth ? " (no ground truth)" : "") << "\n"
              << res.csv_path << "\n"
              << res.sidecar_path << "\n"
              << res.records_path << "\n";
    return 0;
}

int cmd_sweep(const CommonOpts& opts) {
    const CampaignConfig cfg = opts.build();
    const SweepResult res = layerwise_sweep(cfg);
    for (const auto& row : res.per_layer) {
        std::cout << "layer " << row.layer_id << " " << row.name << " (" << row.kind
                  << (row.stage.empty() ? "" : " " + row.stage) << "): sdc="
                  << row.report.sdc_rate << " due=" << row.report.due_rate
                  << " fd=" << row.report.fd_rate << "\n";
    }
    for (const auto& row : res.per_stage) {
        std::cout << "stage " << row.stage << " (" << row.layers << " layers): sdc="
                  << row.sdc_rate << " due=" << row.due_rate << " fd=" << row.fd_rate << "\n";
    }
    std::cout << res.csv_path << "\n" << res.sidecar_path << "\n";
    return 0;
}

int cmd_ablation(const CommonOpts& opts) {
    const CampaignConfig cfg = opts.build();
    const AblationResult res = placement_ablation(cfg);
    for (const auto& row : res.rows) {
        std::cout << "policy " << row.policy_name << ": sdc=" << row.report.sdc_rate
                  << " due=" << row.report.due_rate << " fd=" << row.report.fd_rate << "\n";
    }
    std::cout << res.csv_path << "\n" << res.sidecar_path << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& csvs, const std::vector<std::string>& traces,
               const std::string& out_path) {
    const std::string bundle = report_bundle(csvs, traces);
    if (out_path.empty()) {
        std::cout << bundle;
    } else {
        write_file(out_path, bundle);
        std::cout << out_path << "\n";
    }
    return 0;
}

Detection detection_from(const json& j) {
    Detection d;
    d.x_min = j.at("x_min").get<float>();
    d.y_min = j.at("y_min").get<float>();
    d.x_max = j.at("x_max").get<float>();
    d.y_max = j.at("y_max").get<float>();
    d.score = j.at("score").get<float>();
    d.class_id = j.at("class_id").get<int>();
    return d;
}

GtObject gt_object_from(const json& j) {
    GtObject g;
    g.x_min = j.at("x_min").get<float>();
    g.y_min = j.at("y_min").get<float>();
    g.x_max = j.at("x_max").get<float>();
    g.y_max = j.at("y_max").get<float>();
    g.class_id = j.at("class_id").get<int>();
    return g;
}

/// Standalone evaluation of stored predictions against stored ground truth,
/// paired by image_id. Schemas in docs/formats.md.
int cmd_metrics(const std::string& pred_path, const std::string& gt_path, double iou_thr,
                double score_thr, const std::string& out_path) {
    json preds_j, gts_j;
    try {
        preds_j = json::parse(read_file(pred_path));
    } catch (const json::exception& ex) {
        throw ParseError(pred_path + ": " + ex.what());
    }
    try {
        gts_j = json::parse(read_file(gt_path));
    } catch (const json::exception& ex) {
        throw ParseError(gt_path + ": " + ex.what());
    }

    std::map<std::int64_t, GroundTruth> gt_by_image;
    try {
        for (const auto& entry : gts_j) {
            GroundTruth gt;
            for (const auto& o : entry.at("objects")) gt.push_back(gt_object_from(o));
            gt_by_image[entry.at("image_id").get<std::int64_t>()] = std::move(gt);
        }
    } catch (const json::exception& ex) {
        throw ParseError(gt_path + ": " + ex.what());
    }

    std::vector<std::vector<Detection>> preds;
    std::vector<GroundTruth> gts;
    std::size_t tp = 0, fp = 0, fn = 0;
    try {
        for (const auto& entry : preds_j) {
            const std::int64_t image_id = entry.at("image_id").get<std::int64_t>();
            const auto it = gt_by_image.find(image_id);
            if (it == gt_by_image.end()) {
                throw ParseError(pred_path + ": image_id " + std::to_string(image_id) +
                                 " has no ground truth in " + gt_path);
            }
            std::vector<Detection> dets;
            for (const auto& d : entry.at("detections")) dets.push_back(detection_from(d));
            const MatchOutcome mo = match_detections(dets, it->second,
                                                     static_cast<float>(iou_thr),
                                                     static_cast<float>(score_thr));
            tp += mo.tp;
            fp += mo.fp;
            fn += mo.fn;
            preds.push_back(std::move(dets));
            gts.push_back(it->second);
        }
    } catch (const json::exception& ex) {
        throw ParseError(pred_path + ": " + ex.what());
    }

    const Ap50Result ap = ap50(preds, gts, static_cast<float>(iou_thr));
    json out;
    out["n_images"] = preds.size();
    out["iou_threshold"] = iou_thr;
    out["score_threshold"] = score_thr;
    out["ap50"] = ap.value;
    out["no_ground_truth"] = ap.no_ground_truth;
    out["tp"] = tp;
    out["fp"] = fp;
    out["fn"] = fn;
    const std::string text = out.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        write_file(out_path, text);
        std::cout << out_path << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fault-injection and range-restriction experiment runner"};
    app.require_subcommand(1);

    std::map<std::string, CommonOpts> opts;
    for (const char* name : {"gen-data", "profile-bounds", "golden", "campaign", "sweep",
                             "ablation"}) {
        opts[name]; // default-construct in place so Option pointers stay stable
    }
    CLI::App* gen_data = app.add_subcommand("gen-data", "generate the synthetic dataset");
    opts["gen-data"].attach(gen_data);
    CLI::App* profile =
        app.add_subcommand("profile-bounds", "profile per-layer bounds on the profiling split");
    opts["profile-bounds"].attach(profile);
    CLI::App* golden = app.add_subcommand("golden", "run the fault-free reference pass");
    opts["golden"].attach(golden);
    CLI::App* campaign = app.add_subcommand("campaign", "run a random fault campaign");
    opts["campaign"].attach(campaign);
    CLI::App* sweep = app.add_subcommand("sweep", "run a targeted per-layer sweep");
    opts["sweep"].attach(sweep);
    CLI::App* ablation =
        app.add_subcommand("ablation", "compare protection subsets under stage-A faults");
    opts["ablation"].attach(ablation);

    CLI::App* report = app.add_subcommand("report", "aggregate campaign CSVs into a plot bundle");
    std::vector<std::string> report_csvs, report_traces;
    std::string report_out;
    report->add_option("--csv", report_csvs, "campaign CSV path (repeatable)")->required();
    report->add_option("--traces", report_traces, "trace series JSON path (repeatable)");
    report->add_option("--out", report_out, "bundle output path (default stdout)");

    CLI::App* metrics = app.add_subcommand("metrics", "evaluate stored predictions");
    std::string pred_path, gt_path, metrics_out;
    double metrics_iou = 0.5, metrics_score = 0.5;
    metrics->add_option("--predictions", pred_path, "predictions JSON")->required();
    metrics->add_option("--ground-truth", gt_path, "ground-truth JSON")->required();
    metrics->add_option("--iou-threshold", metrics_iou, "matching IoU threshold");
    metrics->add_option("--score-threshold", metrics_score, "detection score threshold");
    metrics->add_option("--out", metrics_out, "result path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen_data->parsed()) return cmd_gen_data(opts["gen-data"]);
        if (profile->parsed()) return cmd_profile_bounds(opts["profile-bounds"]);
        if (golden->parsed()) return cmd_golden(opts["golden"]);
        if (campaign->parsed()) return cmd_campaign(opts["campaign"]);
        if (sweep->parsed()) return cmd_sweep(opts["sweep"]);
        if (ablation->parsed()) return cmd_ablation(opts["ablation"]);
        if (report->parsed()) return cmd_report(report_csvs, report_traces, report_out);
        if (metrics->parsed()) {
            return cmd_metrics(pred_path, gt_path, metrics_iou, metrics_score, metrics_out);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const PlacementError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
