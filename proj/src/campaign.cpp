#include "flipshield/campaign.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "flipshield/errors.hpp"
#include "flipshield/hash.hpp"

namespace flipshield {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCsvHeader =
    "image_id,layer_id,layer_kind,stage,target,bits,sdc,due,fd,"
    "fp_orig,fn_orig,fp_corr,fn_corr,policy";

json policy_to_json(const MitigationPolicy& p) {
    if (p.variant != PolicyVariant::Custom) return json(policy_variant_to_string(p.variant));
    json j;
    j["variant"] = "custom";
    j["label"] = p.label;
    json rules = json::object();
    for (const auto& [id, rule] : p.custom) rules[std::to_string(id)] = rule_to_string(rule);
    j["rules"] = std::move(rules);
    return j;
}

MitigationPolicy policy_from_json(const json& j) {
    MitigationPolicy p;
    if (j.is_string()) {
        p.variant = policy_variant_from_string(j.get<std::string>());
        if (p.variant == PolicyVariant::Custom) {
            throw ConfigError("custom policy needs an object with a rules map");
        }
        return p;
    }
    if (!j.is_object()) throw ConfigError("policy must be a name or a custom-policy object");
    p.variant = policy_variant_from_string(j.value("variant", std::string("custom")));
    if (p.variant != PolicyVariant::Custom) return p;
    p.label = j.value("label", std::string{});
    if (j.contains("rules")) {
        for (const auto& [key, val] : j.at("rules").items()) {
            int id = 0;
            const auto [ptr, ec] =
                std::from_chars(key.data(), key.data() + key.size(), id);
            if (ec != std::errc{} || ptr != key.data() + key.size()) {
                throw ConfigError("custom policy rule key is not a layer_id: " + key);
            }
            p.custom[id] = rule_from_string(val.get<std::string>());
        }
    }
    return p;
}

json fault_to_json(const FaultSpec& f) {
    json j;
    j["target"] = fault_target_to_string(f.target);
    j["selection"] = f.selection == LayerSelection::Targeted ? "targeted" : "random-eligible";
    j["targeted_layer_id"] = f.targeted_layer_id;
    json kinds = json::array();
    for (Kind k : f.eligible_kinds) kinds.push_back(kind_to_string(k));
    j["eligible_kinds"] = std::move(kinds);
    j["num_bit_flips"] = f.num_bit_flips;
    j["bit_policy"] = bit_policy_to_string(f.bit_policy);
    j["seed"] = f.seed;
    return j;
}

FaultSpec fault_from_json(const json& j) {
    FaultSpec f;
    f.target = fault_target_from_string(j.value("target", std::string("neurons")));
    const std::string sel = j.value("selection", std::string("random-eligible"));
    if (sel == "targeted") {
        f.selection = LayerSelection::Targeted;
    } else if (sel == "random-eligible") {
        f.selection = LayerSelection::RandomEligible;
    } else {
        throw ConfigError("unknown layer selection: " + sel);
    }
    f.targeted_layer_id = j.value("targeted_layer_id", -1);
    if (j.contains("eligible_kinds")) {
        for (const auto& k : j.at("eligible_kinds")) {
            f.eligible_kinds.insert(kind_from_string(k.get<std::string>()));
        }
    }
    f.num_bit_flips = j.value("num_bit_flips", std::size_t{1});
    f.bit_policy = bit_policy_from_string(j.value("bit_policy", std::string("high-order-9")));
    f.seed = j.value("seed", std::uint64_t{0});
    return f;
}

json stages_to_json(const std::set<Stage>& stages) {
    json arr = json::array();
    for (Stage s : stages) arr.push_back(stage_to_string(s));
    return arr;
}

std::set<Stage> stages_from_json(const json& arr) {
    std::set<Stage> out;
    for (const auto& s : arr) out.insert(stage_from_string(s.get<std::string>()));
    return out;
}

} // namespace

std::string CampaignConfig::to_json(int indent) const {
    json j;
    json model;
    model["arch"] = architecture_to_string(arch);
    model["seed"] = model_seed;
    json params;
    if (arch == Architecture::ToyDetr) {
        params["in_channels"] = detr.in_channels;
        params["image_h"] = detr.image_h;
        params["image_w"] = detr.image_w;
        params["backbone_channels"] = detr.backbone_channels;
        params["embed_dim"] = detr.embed_dim;
        params["heads"] = detr.heads;
        params["points"] = detr.points;
        params["ffn_dim"] = detr.ffn_dim;
        params["encoders"] = detr.encoders;
        params["decoders"] = detr.decoders;
        params["queries"] = detr.queries;
        params["num_classes"] = detr.num_classes;
        params["head_gain"] = detr.head_gain;
        params["score_threshold"] = detr.score_threshold;
    } else {
        params["in_channels"] = cnn.in_channels;
        params["image_h"] = cnn.image_h;
        params["image_w"] = cnn.image_w;
        params["channels"] = cnn.channels;
        params["conv_layers"] = cnn.conv_layers;
        params["num_classes"] = cnn.num_classes;
        params["head_gain"] = cnn.head_gain;
        params["score_threshold"] = cnn.score_threshold;
    }
    model["params"] = std::move(params);
    j["model"] = std::move(model);
    j["dataset"] = json::parse(dataset.to_json(-1));
    j["fault"] = fault_to_json(fault);
    j["policy"] = policy_to_json(policy);
    j["injections"] = injections;
    j["per_layer_injections"] = per_layer_injections;
    j["iou_threshold"] = iou_threshold;
    j["score_threshold"] = score_threshold;
    j["out_dir"] = out_dir;
    j["dump_traces"] = dump_traces;
    json subsets = json::array();
    for (const auto& s : ablation_subsets) subsets.push_back(stages_to_json(s));
    j["ablation_subsets"] = std::move(subsets);
    return j.dump(indent);
}

CampaignConfig CampaignConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("unparseable campaign config: ") + ex.what());
    }
    CampaignConfig c;
    try {
        if (j.contains("model")) {
            const json& m = j.at("model");
            const std::string arch = m.value("arch", std::string("toy-detr"));
            if (arch == "toy-detr") {
                c.arch = Architecture::ToyDetr;
            } else if (arch == "toy-cnn") {
                c.arch = Architecture::ToyCnn;
            } else {
                throw ConfigError("unknown arch: " + arch);
            }
            c.model_seed = m.value("seed", c.model_seed);
            if (m.contains("params")) {
                const json& p = m.at("params");
                if (c.arch == Architecture::ToyDetr) {
                    c.detr.in_channels = p.value("in_channels", c.detr.in_channels);
                    c.detr.image_h = p.value("image_h", c.detr.image_h);
                    c.detr.image_w = p.value("image_w", c.detr.image_w);
                    c.detr.backbone_channels =
                        p.value("backbone_channels", c.detr.backbone_channels);
                    c.detr.embed_dim = p.value("embed_dim", c.detr.embed_dim);
                    c.detr.heads = p.value("heads", c.detr.heads);
                    c.detr.points = p.value("points", c.detr.points);
                    c.detr.ffn_dim = p.value("ffn_dim", c.detr.ffn_dim);
                    c.detr.encoders = p.value("encoders", c.detr.encoders);
                    c.detr.decoders = p.value("decoders", c.detr.decoders);
                    c.detr.queries = p.value("queries", c.detr.queries);
                    c.detr.num_classes = p.value("num_classes", c.detr.num_classes);
                    c.detr.head_gain = p.value("head_gain", c.detr.head_gain);
                    c.detr.score_threshold = p.value("score_threshold", c.detr.score_threshold);
                } else {
                    c.cnn.in_channels = p.value("in_channels", c.cnn.in_channels);
                    c.cnn.image_h = p.value("image_h", c.cnn.image_h);
                    c.cnn.image_w = p.value("image_w", c.cnn.image_w);
                    c.cnn.channels = p.value("channels", c.cnn.channels);
                    c.cnn.conv_layers = p.value("conv_layers", c.cnn.conv_layers);
                    c.cnn.num_classes = p.value("num_classes", c.cnn.num_classes);
                    c.cnn.head_gain = p.value("head_gain", c.cnn.head_gain);
                    c.cnn.score_threshold = p.value("score_threshold", c.cnn.score_threshold);
                }
            }
        }
        if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset").dump());
        if (j.contains("fault")) c.fault = fault_from_json(j.at("fault"));
        if (j.contains("policy")) c.policy = policy_from_json(j.at("policy"));
        c.injections = j.value("injections", c.injections);
        c.per_layer_injections = j.value("per_layer_injections", c.per_layer_injections);
        c.iou_threshold = j.value("iou_threshold", c.iou_threshold);
        c.score_threshold = j.value("score_threshold", c.score_threshold);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.dump_traces = j.value("dump_traces", c.dump_traces);
        if (j.contains("ablation_subsets")) {
            c.ablation_subsets.clear();
            for (const auto& s : j.at("ablation_subsets")) {
                c.ablation_subsets.push_back(stages_from_json(s));
            }
        }
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed campaign config: ") + ex.what());
    }
    return c;
}

Model CampaignConfig::build_model() const {
    if (arch == Architecture::ToyDetr) return Model::build_toy_detr(detr, model_seed);
    return Model::build_toy_cnn(cnn, model_seed);
}

// ---------------------------------------------------------------------------
// Golden runs.

namespace {

json detection_to_json(const Detection& d) {
    json j;
    j["x_min_hex"] = hex_u32(float_to_bits(d.x_min));
    j["y_min_hex"] = hex_u32(float_to_bits(d.y_min));
    j["x_max_hex"] = hex_u32(float_to_bits(d.x_max));
    j["y_max_hex"] = hex_u32(float_to_bits(d.y_max));
    j["score_hex"] = hex_u32(float_to_bits(d.score));
    j["class_id"] = d.class_id;
    return j;
}

Detection detection_from_json(const json& j) {
    Detection d;
    d.x_min = bits_to_float(parse_hex_u32(j.at("x_min_hex").get<std::string>()));
    d.y_min = bits_to_float(parse_hex_u32(j.at("y_min_hex").get<std::string>()));
    d.x_max = bits_to_float(parse_hex_u32(j.at("x_max_hex").get<std::string>()));
    d.y_max = bits_to_float(parse_hex_u32(j.at("y_max_hex").get<std::string>()));
    d.score = bits_to_float(parse_hex_u32(j.at("score_hex").get<std::string>()));
    d.class_id = j.at("class_id").get<int>();
    return d;
}

json trace_to_json(const LayerTrace& t) {
    json arr = json::array();
    for (const auto& e : t.entries) {
        json je;
        je["layer_id"] = e.layer_id;
        je["mean_hex"] = hex_u32(float_to_bits(e.mean));
        je["var_hex"] = hex_u32(float_to_bits(e.variance));
        je["min_hex"] = hex_u32(float_to_bits(e.min));
        je["max_hex"] = hex_u32(float_to_bits(e.max));
        je["all_finite"] = e.all_finite;
        arr.push_back(std::move(je));
    }
    return arr;
}

LayerTrace trace_from_json(const json& arr) {
    LayerTrace t;
    for (const auto& je : arr) {
        TraceEntry e;
        e.layer_id = je.at("layer_id").get<int>();
        e.mean = bits_to_float(parse_hex_u32(je.at("mean_hex").get<std::string>()));
        e.variance = bits_to_float(parse_hex_u32(je.at("var_hex").get<std::string>()));
        e.min = bits_to_float(parse_hex_u32(je.at("min_hex").get<std::string>()));
        e.max = bits_to_float(parse_hex_u32(je.at("max_hex").get<std::string>()));
        e.all_finite = je.at("all_finite").get<bool>();
        t.entries.push_back(e);
    }
    return t;
}

void write_text_file(const std::string& path, const std::string& text) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw FormatError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace

GoldenRun golden_run(const Model& model, const SyntheticDataset& dataset,
                     const MitigationPolicy& policy, const BoundsProfile& bounds,
                     const std::string& cache_dir) {
    const std::uint64_t key_words[4] = {model.content_hash(), dataset.content_hash(),
                                        policy.content_hash(), bounds.content_hash()};
    const std::uint64_t key = fnv1a64(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(key_words), sizeof(key_words)));

    GoldenRun run;
    run.cache_path = (fs::path(cache_dir) / ("golden-" + hex_u64(key) + ".json")).string();

    if (fs::exists(run.cache_path)) {
        try {
            const json j = json::parse(read_text_file(run.cache_path));
            if (j.at("model_hash") == hex_u64(key_words[0]) &&
                j.at("dataset_hash") == hex_u64(key_words[1]) &&
                j.at("policy_hash") == hex_u64(key_words[2]) &&
                j.at("bounds_hash") == hex_u64(key_words[3])) {
                for (const auto& img : j.at("images")) {
                    run.image_ids.push_back(img.at("image_id").get<std::size_t>());
                    std::vector<Detection> raw;
                    for (const auto& d : img.at("raw")) raw.push_back(detection_from_json(d));
                    run.raw.push_back(std::move(raw));
                    run.traces.push_back(trace_from_json(img.at("trace")));
                }
                run.from_cache = true;
                return run;
            }
        } catch (const std::exception&) {
            // stale or corrupt cache: fall through and recompute
        }
        run.image_ids.clear();
        run.raw.clear();
        run.traces.clear();
    }

    const HookSet hooks = make_mitigation_hooks(policy, model.registry(), bounds);
    json images = json::array();
    for (std::size_t idx : dataset.eval_indices) {
        const ForwardResult fr = model.forward(dataset.images[idx], hooks);
        run.image_ids.push_back(idx);
        run.raw.push_back(fr.raw);
        run.traces.push_back(fr.trace);
        json img;
        img["image_id"] = idx;
        json raw = json::array();
        for (const auto& d : fr.raw) raw.push_back(detection_to_json(d));
        img["raw"] = std::move(raw);
        img["trace"] = trace_to_json(fr.trace);
        images.push_back(std::move(img));
    }
    json j;
    j["model_hash"] = hex_u64(key_words[0]);
    j["dataset_hash"] = hex_u64(key_words[1]);
    j["policy_hash"] = hex_u64(key_words[2]);
    j["bounds_hash"] = hex_u64(key_words[3]);
    j["images"] = std::move(images);
    write_text_file(run.cache_path, j.dump(2) + "\n");
    return run;
}

// ---------------------------------------------------------------------------
// Shared campaign plumbing.

namespace {

struct ScheduleItem {
    std::size_t image_id = 0;
    FaultPlan plan;
};

/// Random-eligible schedule: injection i pairs eval image i mod n with a plan
/// drawn from stream mix(seed, i). Policy-independent by construction.
std::vector<ScheduleItem> make_random_schedule(const FaultSpec& spec, const Model& model,
                                               const SyntheticDataset& dataset,
                                               std::size_t injections) {
    if (dataset.eval_indices.empty()) throw ConfigError("evaluation split is empty");
    std::vector<ScheduleItem> schedule;
    schedule.reserve(injections);
    for (std::size_t i = 0; i < injections; ++i) {
        ScheduleItem item;
        item.image_id = dataset.eval_indices[i % dataset.eval_indices.size()];
        Rng rng(Rng::mix(spec.seed, i));
        item.plan = sample_plan(spec, model, rng);
        schedule.push_back(std::move(item));
    }
    return schedule;
}

/// Targeted schedule against one layer; stream mix(mix(seed, layer), i).
std::vector<ScheduleItem> make_targeted_schedule(const FaultSpec& spec, int layer_id,
                                                 const Model& model,
                                                 const SyntheticDataset& dataset,
                                                 std::size_t injections) {
    if (dataset.eval_indices.empty()) throw ConfigError("evaluation split is empty");
    FaultSpec targeted = spec;
    targeted.selection = LayerSelection::Targeted;
    targeted.targeted_layer_id = layer_id;
    std::vector<ScheduleItem> schedule;
    schedule.reserve(injections);
    for (std::size_t i = 0; i < injections; ++i) {
        ScheduleItem item;
        item.image_id = dataset.eval_indices[i % dataset.eval_indices.size()];
        Rng rng(Rng::mix(Rng::mix(spec.seed, static_cast<std::uint64_t>(layer_id)), i));
        item.plan = sample_plan(targeted, model, rng);
        schedule.push_back(std::move(item));
    }
    return schedule;
}

/// Stage-A schedule for the placement ablation: injection i first draws one
/// stage-A layer, then its sites, all from stream mix(seed, i).
std::vector<ScheduleItem> make_stage_a_schedule(const FaultSpec& spec, const Model& model,
                                                const SyntheticDataset& dataset,
                                                std::size_t injections) {
    const std::vector<int> ids = model.registry().attention_linear_ids(Stage::A);
    if (ids.empty()) throw ConfigError("model has no stage-A attention linears");
    if (dataset.eval_indices.empty()) throw ConfigError("evaluation split is empty");
    FaultSpec targeted = spec;
    targeted.selection = LayerSelection::Targeted;
    targeted.eligible_kinds = {Kind::AttentionLinear};
    std::vector<ScheduleItem> schedule;
    schedule.reserve(injections);
    for (std::size_t i = 0; i < injections; ++i) {
        ScheduleItem item;
        item.image_id = dataset.eval_indices[i % dataset.eval_indices.size()];
        Rng rng(Rng::mix(spec.seed, i));
        targeted.targeted_layer_id = ids[rng.uniform_index(ids.size())];
        item.plan = sample_plan(targeted, model, rng);
        schedule.push_back(std::move(item));
    }
    return schedule;
}

struct CsvRow {
    std::size_t image_id = 0;
    int layer_id = -1;
    std::string kind, stage, target, bits;
    bool sdc = false, due = false, fd = false;
    std::size_t fp_orig = 0, fn_orig = 0, fp_corr = 0, fn_corr = 0;
    std::string policy;
};

std::string csv_text(const std::vector<CsvRow>& rows) {
    std::string out = kCsvHeader;
    out += '\n';
    for (const auto& r : rows) {
        out += std::to_string(r.image_id);
        out += ',';
        out += std::to_string(r.layer_id);
        out += ',';
        out += r.kind;
        out += ',';
        out += r.stage;
        out += ',';
        out += r.target;
        out += ',';
        out += r.bits;
        out += ',';
        out += r.sdc ? '1' : '0';
        out += ',';
        out += r.due ? '1' : '0';
        out += ',';
        out += r.fd ? '1' : '0';
        out += ',';
        out += std::to_string(r.fp_orig);
        out += ',';
        out += std::to_string(r.fn_orig);
        out += ',';
        out += std::to_string(r.fp_corr);
        out += ',';
        out += std::to_string(r.fn_corr);
        out += ',';
        out += r.policy;
        out += '\n';
    }
    return out;
}

std::string bits_field(const FaultPlan& plan) {
    std::string out;
    for (std::size_t i = 0; i < plan.sites.size(); ++i) {
        if (i) out += ';';
        out += std::to_string(plan.sites[i].bit);
    }
    return out;
}

/// Golden matching per eval image, keyed by dataset index.
std::map<std::size_t, MatchOutcome> golden_outcomes(const GoldenRun& golden,
                                                    const SyntheticDataset& dataset,
                                                    float iou_thr, float score_thr) {
    std::map<std::size_t, MatchOutcome> out;
    for (std::size_t k = 0; k < golden.image_ids.size(); ++k) {
        const std::size_t id = golden.image_ids[k];
        out[id] = match_detections(golden.raw[k], dataset.annotations[id], iou_thr, score_thr);
    }
    return out;
}

bool any_non_finite(const std::vector<Detection>& raw) {
    for (const auto& d : raw) {
        if (!d.finite()) return true;
    }
    return false;
}

struct ExecutedSchedule {
    std::vector<CsvRow> rows;
    std::vector<MatchOutcome> golden_list;
    std::vector<std::pair<MatchOutcome, bool>> faulty_list;
    std::vector<std::vector<Detection>> faulty_raw;  // per scheduled inference
    std::vector<GroundTruth> faulty_gts;             // aligned ground truth
    std::string records_jsonl;
    LayerTrace first_faulty_trace;
    std::size_t first_image_id = 0;
};

ExecutedSchedule execute_schedule(Model& model, const SyntheticDataset& dataset,
                                  const std::vector<ScheduleItem>& schedule,
                                  const HookSet& hooks,
                                  const std::map<std::size_t, MatchOutcome>& golden_mo,
                                  const std::string& policy_name, float iou_thr,
                                  float score_thr) {
    ExecutedSchedule ex;
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        const ScheduleItem& item = schedule[i];
        FaultRunResult res;
        try {
            res = run_with_fault(model, dataset.images[item.image_id], item.plan, hooks);
        } catch (const std::exception& e) {
            throw ConfigError("injection " + std::to_string(i) + " (image " +
                              std::to_string(item.image_id) + ", layer " +
                              std::to_string(item.plan.layer_id) + ") failed: " + e.what());
        }
        const MatchOutcome faulty_mo =
            match_detections(res.forward.raw, dataset.annotations[item.image_id], iou_thr,
                             score_thr);
        const bool due = any_non_finite(res.forward.raw);
        const MatchOutcome& gold = golden_mo.at(item.image_id);
        const bool sdc = faulty_mo.fp != gold.fp || faulty_mo.fn != gold.fn;

        const LayerEntry& entry = model.registry().entry(item.plan.layer_id);
        CsvRow row;
        row.image_id = item.image_id;
        row.layer_id = item.plan.layer_id;
        row.kind = kind_to_string(entry.kind.kind);
        row.stage = entry.kind.stage ? stage_to_string(*entry.kind.stage) : "";
        row.target = fault_target_to_string(item.plan.target);
        row.bits = bits_field(item.plan);
        row.sdc = sdc;
        row.due = due;
        row.fd = sdc || due;
        row.fp_orig = gold.fp;
        row.fn_orig = gold.fn;
        row.fp_corr = faulty_mo.fp;
        row.fn_corr = faulty_mo.fn;
        row.policy = policy_name;
        ex.rows.push_back(std::move(row));

        ex.golden_list.push_back(gold);
        ex.faulty_list.emplace_back(faulty_mo, due);
        ex.faulty_raw.push_back(res.forward.raw);
        ex.faulty_gts.push_back(dataset.annotations[item.image_id]);
        ex.records_jsonl += res.record.to_json();
        ex.records_jsonl += '\n';
        if (i == 0) {
            ex.first_faulty_trace = res.forward.trace;
            ex.first_image_id = item.image_id;
        }
    }
    return ex;
}

json trace_series_json(const Model& model, const LayerTrace& trace) {
    json layers = json::array();
    json means = json::array();
    json variances = json::array();
    for (const auto& e : trace.entries) {
        layers.push_back(e.layer_id);
        means.push_back(e.mean);
        variances.push_back(e.variance);
    }
    json j;
    j["layer_ids"] = std::move(layers);
    j["names"] = json::array();
    for (const auto& e : trace.entries) j["names"].push_back(model.registry().entry(e.layer_id).name);
    j["mean"] = std::move(means);
    j["variance"] = std::move(variances);
    return j;
}

BoundsProfile campaign_bounds(const Model& model, const SyntheticDataset& dataset,
                              const MitigationPolicy& policy) {
    if (resolve_placement(policy, model.registry()).empty()) return BoundsProfile{};
    return profile_bounds(model, dataset.profiling_images(),
                          "dataset " + hex_u64(dataset.content_hash()) + " profiling split");
}

} // namespace

CampaignResult run_campaign(const CampaignConfig& config) {
    Model model = config.build_model();
    const SyntheticDataset dataset = generate_dataset(config.dataset);
    const BoundsProfile bounds = campaign_bounds(model, dataset, config.policy);
    const HookSet hooks = make_mitigation_hooks(config.policy, model.registry(), bounds);
    const std::string cache_dir = (fs::path(config.out_dir) / "cache").string();
    const GoldenRun golden = golden_run(model, dataset, config.policy, bounds, cache_dir);
    const auto golden_mo =
        golden_outcomes(golden, dataset, config.iou_threshold, config.score_threshold);

    const auto schedule =
        make_random_schedule(config.fault, model, dataset, config.injections);
    ExecutedSchedule ex =
        execute_schedule(model, dataset, schedule, hooks, golden_mo, config.policy.name(),
                         config.iou_threshold, config.score_threshold);

    CampaignResult result;
    result.report = ivmod(ex.golden_list, ex.faulty_list);

    std::vector<GroundTruth> eval_gts;
    for (std::size_t id : golden.image_ids) eval_gts.push_back(dataset.annotations[id]);
    const Ap50Result golden_ap = ap50(golden.raw, eval_gts, config.iou_threshold);
    const Ap50Result faulty_ap = ap50(ex.faulty_raw, ex.faulty_gts, config.iou_threshold);
    result.ap50_golden = golden_ap.value;
    result.ap50_faulty = faulty_ap.value;
    result.ap50_no_ground_truth = golden_ap.no_ground_truth || faulty_ap.no_ground_truth;

    const std::string stem = "campaign-" + config.policy.name();
    result.csv_path = (fs::path(config.out_dir) / (stem + ".csv")).string();
    const std::string csv = csv_text(ex.rows);
    write_text_file(result.csv_path, csv);

    result.records_path = (fs::path(config.out_dir) / (stem + ".records.jsonl")).string();
    write_text_file(result.records_path, ex.records_jsonl);

    json sidecar;
    sidecar["config"] = json::parse(config.to_json(-1));
    sidecar["model_hash"] = hex_u64(model.content_hash());
    sidecar["dataset_hash"] = hex_u64(dataset.content_hash());
    sidecar["policy_hash"] = hex_u64(config.policy.content_hash());
    sidecar["bounds_hash"] = hex_u64(bounds.content_hash());
    sidecar["csv_hash"] = hex_u64(fnv1a64(csv));
    sidecar["n"] = result.report.n;
    sidecar["sdc_rate"] = result.report.sdc_rate;
    sidecar["due_rate"] = result.report.due_rate;
    sidecar["fd_rate"] = result.report.fd_rate;
    sidecar["ap50_golden"] = result.ap50_golden;
    sidecar["ap50_faulty"] = result.ap50_faulty;
    result.sidecar_path = (fs::path(config.out_dir) / (stem + ".meta.json")).string();
    write_text_file(result.sidecar_path, sidecar.dump(2) + "\n");

    if (config.dump_traces) {
        std::size_t golden_pos = 0;
        for (std::size_t k = 0; k < golden.image_ids.size(); ++k) {
            if (golden.image_ids[k] == ex.first_image_id) golden_pos = k;
        }
        json traces;
        traces["image_id"] = ex.first_image_id;
        traces["policy"] = config.policy.name();
        traces["golden"] = trace_series_json(model, golden.traces[golden_pos]);
        traces["faulty_example"] = trace_series_json(model, ex.first_faulty_trace);
        const std::string tpath = (fs::path(config.out_dir) / (stem + ".traces.json")).string();
        write_text_file(tpath, traces.dump(2) + "\n");
    }
    return result;
}

SweepResult layerwise_sweep(const CampaignConfig& config) {
    Model model = config.build_model();
    const SyntheticDataset dataset = generate_dataset(config.dataset);
    const BoundsProfile bounds = campaign_bounds(model, dataset, config.policy);
    const HookSet hooks = make_mitigation_hooks(config.policy, model.registry(), bounds);
    const std::string cache_dir = (fs::path(config.out_dir) / "cache").string();
    const GoldenRun golden = golden_run(model, dataset, config.policy, bounds, cache_dir);
    const auto golden_mo =
        golden_outcomes(golden, dataset, config.iou_threshold, config.score_threshold);

    FaultSpec sweep_spec = config.fault;
    if (sweep_spec.eligible_kinds.empty()) {
        sweep_spec.eligible_kinds =
            config.arch == Architecture::ToyDetr
                ? std::set<Kind>{Kind::AttentionLinear, Kind::Activation}
                : std::set<Kind>{Kind::Conv, Kind::Activation};
    }
    const std::vector<int> layers = eligible_layers(sweep_spec, model);
    if (layers.empty()) throw ConfigError("no eligible layers for the sweep");

    SweepResult result;
    std::vector<CsvRow> all_rows;
    std::string records;
    for (int layer_id : layers) {
        const auto schedule = make_targeted_schedule(sweep_spec, layer_id, model, dataset,
                                                     config.per_layer_injections);
        ExecutedSchedule ex =
            execute_schedule(model, dataset, schedule, hooks, golden_mo,
                             config.policy.name(), config.iou_threshold,
                             config.score_threshold);
        const LayerEntry& entry = model.registry().entry(layer_id);
        LayerSweepRow row;
        row.layer_id = layer_id;
        row.name = entry.name;
        row.kind = kind_to_string(entry.kind.kind);
        row.stage = entry.kind.stage ? stage_to_string(*entry.kind.stage) : "";
        row.report = ivmod(ex.golden_list, ex.faulty_list);
        result.per_layer.push_back(std::move(row));
        all_rows.insert(all_rows.end(), ex.rows.begin(), ex.rows.end());
        records += ex.records_jsonl;
    }

    for (Stage s : {Stage::A, Stage::B, Stage::C, Stage::D}) {
        StageSweepRow srow;
        srow.stage = stage_to_string(s);
        for (const auto& row : result.per_layer) {
            if (row.stage != srow.stage) continue;
            srow.sdc_rate += row.report.sdc_rate;
            srow.due_rate += row.report.due_rate;
            srow.fd_rate += row.report.fd_rate;
            srow.layers += 1;
        }
        if (srow.layers > 0) {
            srow.sdc_rate /= static_cast<double>(srow.layers);
            srow.due_rate /= static_cast<double>(srow.layers);
            srow.fd_rate /= static_cast<double>(srow.layers);
        }
        result.per_stage.push_back(std::move(srow));
    }

    const std::string stem = "sweep-" + config.policy.name();
    result.csv_path = (fs::path(config.out_dir) / (stem + ".csv")).string();
    const std::string csv = csv_text(all_rows);
    write_text_file(result.csv_path, csv);
    write_text_file((fs::path(config.out_dir) / (stem + ".records.jsonl")).string(), records);

    json sidecar;
    sidecar["config"] = json::parse(config.to_json(-1));
    sidecar["model_hash"] = hex_u64(model.content_hash());
    sidecar["dataset_hash"] = hex_u64(dataset.content_hash());
    sidecar["policy_hash"] = hex_u64(config.policy.content_hash());
    sidecar["bounds_hash"] = hex_u64(bounds.content_hash());
    sidecar["csv_hash"] = hex_u64(fnv1a64(csv));
    json per_layer = json::array();
    for (const auto& row : result.per_layer) {
        json r;
        r["layer_id"] = row.layer_id;
        r["name"] = row.name;
        r["kind"] = row.kind;
        r["stage"] = row.stage;
        r["n"] = row.report.n;
        r["sdc_rate"] = row.report.sdc_rate;
        r["due_rate"] = row.report.due_rate;
        r["fd_rate"] = row.report.fd_rate;
        per_layer.push_back(std::move(r));
    }
    sidecar["per_layer"] = std::move(per_layer);
    json per_stage = json::array();
    for (const auto& row : result.per_stage) {
        json r;
        r["stage"] = row.stage;
        r["layers"] = row.layers;
        r["sdc_rate"] = row.sdc_rate;
        r["due_rate"] = row.due_rate;
        r["fd_rate"] = row.fd_rate;
        per_stage.push_back(std::move(r));
    }
    sidecar["per_stage"] = std::move(per_stage);
    result.sidecar_path = (fs::path(config.out_dir) / (stem + ".meta.json")).string();
    write_text_file(result.sidecar_path, sidecar.dump(2) + "\n");
    return result;
}

AblationResult placement_ablation(const CampaignConfig& config) {
    for (const auto& subset : config.ablation_subsets) {
        if (subset.empty()) throw ConfigError("ablation stage subsets must be nonempty");
    }
    Model model = config.build_model();
    const SyntheticDataset dataset = generate_dataset(config.dataset);
    // Bounds cover all layers, so one profile serves every placement.
    const BoundsProfile bounds =
        profile_bounds(model, dataset.profiling_images(),
                       "dataset " + hex_u64(dataset.content_hash()) + " profiling split");
    const std::string cache_dir = (fs::path(config.out_dir) / "cache").string();

    const auto schedule =
        make_stage_a_schedule(config.fault, model, dataset, config.injections);

    std::vector<MitigationPolicy> policies;
    policies.push_back(MitigationPolicy::named(PolicyVariant::None));
    for (const auto& subset : config.ablation_subsets) {
        policies.push_back(minimal_placement(subset, model.registry()));
    }

    AblationResult result;
    std::vector<CsvRow> all_rows;
    std::string records;
    for (const auto& policy : policies) {
        const HookSet hooks = make_mitigation_hooks(policy, model.registry(), bounds);
        const GoldenRun golden = golden_run(model, dataset, policy, bounds, cache_dir);
        const auto golden_mo =
            golden_outcomes(golden, dataset, config.iou_threshold, config.score_threshold);
        ExecutedSchedule ex =
            execute_schedule(model, dataset, schedule, hooks, golden_mo, policy.name(),
                             config.iou_threshold, config.score_threshold);
        AblationRow row;
        row.policy_name = policy.name();
        row.report = ivmod(ex.golden_list, ex.faulty_list);
        result.rows.push_back(std::move(row));
        all_rows.insert(all_rows.end(), ex.rows.begin(), ex.rows.end());
        records += ex.records_jsonl;
    }

    result.csv_path = (fs::path(config.out_dir) / "ablation.csv").string();
    const std::string csv = csv_text(all_rows);
    write_text_file(result.csv_path, csv);
    write_text_file((fs::path(config.out_dir) / "ablation.records.jsonl").string(), records);

    json sidecar;
    sidecar["config"] = json::parse(config.to_json(-1));
    sidecar["model_hash"] = hex_u64(model.content_hash());
    sidecar["dataset_hash"] = hex_u64(dataset.content_hash());
    sidecar["bounds_hash"] = hex_u64(bounds.content_hash());
    sidecar["csv_hash"] = hex_u64(fnv1a64(csv));
    json rows = json::array();
    for (const auto& row : result.rows) {
        json r;
        r["policy"] = row.policy_name;
        r["n"] = row.report.n;
        r["sdc_rate"] = row.report.sdc_rate;
        r["due_rate"] = row.report.due_rate;
        r["fd_rate"] = row.report.fd_rate;
        rows.push_back(std::move(r));
    }
    sidecar["rows"] = std::move(rows);
    result.sidecar_path = (fs::path(config.out_dir) / "ablation.meta.json").string();
    write_text_file(result.sidecar_path, sidecar.dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------------------
// Report bundle.

namespace {

struct ParsedRow {
    int layer_id = 0;
    std::string kind, stage, policy;
    bool sdc = false, due = false, fd = false;
};

int parse_int_field(const std::string& field, const std::string& path, std::size_t line,
                    const char* what) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw ParseError(path + ":" + std::to_string(line) + ": bad " + what + " '" + field +
                         "'");
    }
    return v;
}

bool parse_flag_field(const std::string& field, const std::string& path, std::size_t line,
                      const char* what) {
    if (field == "0") return false;
    if (field == "1") return true;
    throw ParseError(path + ":" + std::to_string(line) + ": bad " + what + " '" + field + "'");
}

std::vector<ParsedRow> parse_csv(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const FormatError& e) {
        throw ParseError(e.what());
    }
    std::vector<ParsedRow> rows;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line_no == 1) {
            if (line != kCsvHeader) {
                throw ParseError(path + ":1: bad header");
            }
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t f = 0;
        while (true) {
            const std::size_t comma = line.find(',', f);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(f));
                break;
            }
            fields.push_back(line.substr(f, comma - f));
            f = comma + 1;
        }
        if (fields.size() != 14) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected 14 fields, got " +
                             std::to_string(fields.size()));
        }
        ParsedRow r;
        parse_int_field(fields[0], path, line_no, "image_id");
        r.layer_id = parse_int_field(fields[1], path, line_no, "layer_id");
        r.kind = fields[2];
        r.stage = fields[3];
        r.sdc = parse_flag_field(fields[6], path, line_no, "sdc flag");
        r.due = parse_flag_field(fields[7], path, line_no, "due flag");
        r.fd = parse_flag_field(fields[8], path, line_no, "fd flag");
        parse_int_field(fields[9], path, line_no, "fp_orig");
        parse_int_field(fields[10], path, line_no, "fn_orig");
        parse_int_field(fields[11], path, line_no, "fp_corr");
        parse_int_field(fields[12], path, line_no, "fn_corr");
        r.policy = fields[13];
        rows.push_back(std::move(r));
    }
    return rows;
}

struct RateAcc {
    std::size_t n = 0, sdc = 0, due = 0, fd = 0;

    void add(const ParsedRow& r) {
        ++n;
        sdc += r.sdc;
        due += r.due;
        fd += r.fd;
    }

    void fill(json& j) const {
        j["n"] = n;
        j["sdc_rate"] = static_cast<double>(sdc) / static_cast<double>(n);
        j["due_rate"] = static_cast<double>(due) / static_cast<double>(n);
        j["fd_rate"] = static_cast<double>(fd) / static_cast<double>(n);
    }
};

} // namespace

std::string report_bundle(const std::vector<std::string>& csv_paths,
                          const std::vector<std::string>& trace_paths) {
    std::vector<ParsedRow> rows;
    for (const auto& path : csv_paths) {
        const auto parsed = parse_csv(path);
        rows.insert(rows.end(), parsed.begin(), parsed.end());
    }

    std::map<std::pair<std::string, int>, RateAcc> per_layer;
    std::map<std::pair<std::string, std::string>, RateAcc> per_stage;
    std::map<std::string, RateAcc> per_policy;
    std::map<std::pair<std::string, int>, std::pair<std::string, std::string>> layer_tags;
    for (const auto& r : rows) {
        per_layer[{r.policy, r.layer_id}].add(r);
        layer_tags[{r.policy, r.layer_id}] = {r.kind, r.stage};
        if (!r.stage.empty()) per_stage[{r.policy, r.stage}].add(r);
        per_policy[r.policy].add(r);
    }

    json bundle;
    json layer_series = json::array();
    for (const auto& [key, acc] : per_layer) {
        json j;
        j["policy"] = key.first;
        j["layer_id"] = key.second;
        j["kind"] = layer_tags[key].first;
        j["stage"] = layer_tags[key].second;
        acc.fill(j);
        layer_series.push_back(std::move(j));
    }
    bundle["per_layer"] = std::move(layer_series);

    json stage_series = json::array();
    for (const auto& [key, acc] : per_stage) {
        json j;
        j["policy"] = key.first;
        j["stage"] = key.second;
        acc.fill(j);
        stage_series.push_back(std::move(j));
    }
    bundle["per_stage"] = std::move(stage_series);

    json policy_series = json::array();
    for (const auto& [name, acc] : per_policy) {
        json j;
        j["policy"] = name;
        acc.fill(j);
        policy_series.push_back(std::move(j));
    }
    bundle["per_policy"] = std::move(policy_series);

    json traces = json::array();
    for (const auto& path : trace_paths) {
        std::string text;
        try {
            text = read_text_file(path);
        } catch (const FormatError& e) {
            throw ParseError(e.what());
        }
        try {
            traces.push_back(json::parse(text));
        } catch (const json::exception& ex) {
            throw ParseError(path + ": unparseable trace series: " + ex.what());
        }
    }
    bundle["traces"] = std::move(traces);
    return bundle.dump(2) + "\n";
}

} // namespace flipshield
