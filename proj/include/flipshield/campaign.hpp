#ifndef FLIPSHIELD_CAMPAIGN_HPP
#define FLIPSHIELD_CAMPAIGN_HPP

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flipshield/dataset.hpp"
#include "flipshield/fault.hpp"
#include "flipshield/metrics.hpp"
#include "flipshield/mitigation.hpp"
#include "flipshield/model.hpp"

namespace flipshield {

/// Fully explicit experiment description; every output byte is a pure
/// function of this struct. JSON schema in docs/formats.md.
struct CampaignConfig {
    Architecture arch = Architecture::ToyDetr;
    ToyDetrParams detr;
    ToyCnnParams cnn;
    std::uint64_t model_seed = 7;

    DatasetConfig dataset;

    FaultSpec fault; // fault.seed drives the whole injection schedule

    MitigationPolicy policy;

    std::size_t injections = 1000;          // random campaign size
    std::size_t per_layer_injections = 200; // targeted sweep size per layer

    float iou_threshold = 0.5f;
    float score_threshold = 0.5f;

    std::string out_dir = "out";
    bool dump_traces = false;

    std::vector<std::set<Stage>> ablation_subsets = {{Stage::C, Stage::D},
                                                     {Stage::A, Stage::B, Stage::C, Stage::D}};

    std::string to_json(int indent = 2) const;
    static CampaignConfig from_json(const std::string& text);

    Model build_model() const;
};

/// Fault-free reference pass per evaluation image, under the campaign's
/// mitigation policy. Cached on disk, keyed by (model, dataset, policy,
/// bounds) content hashes.
struct GoldenRun {
    std::vector<std::size_t> image_ids;       // dataset indices (eval split)
    std::vector<std::vector<Detection>> raw;  // pre-threshold detections
    std::vector<LayerTrace> traces;
    bool from_cache = false;
    std::string cache_path;
};

GoldenRun golden_run(const Model& model, const SyntheticDataset& dataset,
                     const MitigationPolicy& policy, const BoundsProfile& bounds,
                     const std::string& cache_dir);

struct CampaignResult {
    std::string csv_path;
    std::string sidecar_path;
    std::string records_path;
    IvmodReport report;
    double ap50_golden = 0.0;
    double ap50_faulty = 0.0;
    bool ap50_no_ground_truth = false;
};

/// Runs the full pipeline: dataset, bounds, golden (cached), scheduled
/// injections, CSV + sidecar persistence, aggregate metrics. The schedule
/// (image, FaultPlan) is a function of (fault seed, model, dataset) only,
/// so runs under different policies are paired.
CampaignResult run_campaign(const CampaignConfig& config);

struct LayerSweepRow {
    int layer_id = 0;
    std::string name;
    std::string kind;
    std::string stage; // empty for non-attention layers
    IvmodReport report;
};

struct StageSweepRow {
    std::string stage;
    double sdc_rate = 0.0, due_rate = 0.0, fd_rate = 0.0;
    std::size_t layers = 0;
};

struct SweepResult {
    std::string csv_path;
    std::string sidecar_path;
    std::vector<LayerSweepRow> per_layer;
    std::vector<StageSweepRow> per_stage; // mean rates over attention linears per stage
};

/// Targeted campaign per eligible layer (same schedule length each), plus
/// stage-aggregated rates over the attention linears.
SweepResult layerwise_sweep(const CampaignConfig& config);

struct AblationRow {
    std::string policy_name; // "none" baseline, then one row per stage subset
    IvmodReport report;
};

struct AblationResult {
    std::string csv_path;
    std::string sidecar_path;
    std::vector<AblationRow> rows;
};

/// Stage-A injections replayed under each protection subset (paired
/// schedule); always includes the unprotected baseline row.
AblationResult placement_ablation(const CampaignConfig& config);

/// Aggregates campaign CSVs into a plot-ready JSON bundle (per-layer,
/// per-stage, per-policy series; optional trace series files are echoed).
std::string report_bundle(const std::vector<std::string>& csv_paths,
                          const std::vector<std::string>& trace_paths = {});

} // namespace flipshield

#endif // FLIPSHIELD_CAMPAIGN_HPP
