#include "flipshield/fault.hpp"

#include <algorithm>
#include <utility>

#include <json.hpp>

#include "flipshield/errors.hpp"
#include "flipshield/hash.hpp"

namespace flipshield {

using nlohmann::json;

std::string fault_target_to_string(FaultTarget t) {
    return t == FaultTarget::Weights ? "weights" : "neurons";
}

FaultTarget fault_target_from_string(const std::string& s) {
    if (s == "weights") return FaultTarget::Weights;
    if (s == "neurons") return FaultTarget::Neurons;
    throw ConfigError("unknown fault target: " + s);
}

std::string bit_policy_to_string(BitPolicy p) {
    return p == BitPolicy::HighOrder9 ? "high-order-9" : "any-bit";
}

BitPolicy bit_policy_from_string(const std::string& s) {
    if (s == "high-order-9") return BitPolicy::HighOrder9;
    if (s == "any-bit") return BitPolicy::AnyBit;
    throw ConfigError("unknown bit policy: " + s);
}

std::string FaultRecord::to_json() const {
    json j;
    j["layer_id"] = layer_id;
    j["target"] = fault_target_to_string(target);
    j["weight_slot"] = weight_slot;
    json sites_j = json::array();
    for (const auto& s : sites) {
        json js;
        js["flat_index"] = s.flat_index;
        js["bit"] = s.bit;
        js["orig_hex"] = hex_u32(s.orig_bits);
        js["corrupt_hex"] = hex_u32(s.corrupt_bits);
        sites_j.push_back(std::move(js));
    }
    j["sites"] = std::move(sites_j);
    return j.dump();
}

float flip_bits(float value, std::span<const int> positions) {
    std::uint32_t mask = 0;
    for (int p : positions) {
        if (p < 0 || p > 31) {
            throw RangeError("bit position " + std::to_string(p) + " outside [0,31]");
        }
        const std::uint32_t bit = 1u << p;
        if (mask & bit) throw ConfigError("duplicate bit position " + std::to_string(p));
        mask |= bit;
    }
    return bits_to_float(float_to_bits(value) ^ mask);
}

namespace {

bool layer_eligible(const LayerEntry& e, const std::set<Kind>& kinds, FaultTarget target,
                    const Model& model) {
    if (!kinds.count(e.kind.kind)) return false;
    if (target == FaultTarget::Weights) {
        const auto& w = model.weights(e.layer_id);
        return !w.empty() && w[0].size() > 0;
    }
    return shape_product(e.output_shape) > 0;
}

std::set<Kind> default_kinds(const Model& model) {
    if (model.architecture() == Architecture::ToyDetr) return {Kind::AttentionLinear};
    return {Kind::Conv};
}

int draw_bit(BitPolicy policy, Rng& rng) {
    if (policy == BitPolicy::HighOrder9) return 23 + static_cast<int>(rng.uniform_index(9));
    return static_cast<int>(rng.uniform_index(32));
}

} // namespace

std::vector<int> eligible_layers(const FaultSpec& spec, const Model& model) {
    const std::set<Kind> kinds =
        spec.eligible_kinds.empty() ? default_kinds(model) : spec.eligible_kinds;
    std::vector<int> out;
    for (const auto& e : model.registry().entries()) {
        if (layer_eligible(e, kinds, spec.target, model)) out.push_back(e.layer_id);
    }
    return out;
}

FaultPlan sample_plan(const FaultSpec& spec, const Model& model, Rng& rng) {
    if (spec.num_bit_flips != 1 && spec.num_bit_flips != 10) {
        throw ConfigError("num_bit_flips must be 1 or 10, got " +
                          std::to_string(spec.num_bit_flips));
    }
    const std::set<Kind> kinds =
        spec.eligible_kinds.empty() ? default_kinds(model) : spec.eligible_kinds;

    int layer_id = -1;
    if (spec.selection == LayerSelection::Targeted) {
        if (!model.registry().contains(spec.targeted_layer_id)) {
            throw ConfigError("targeted layer_id " + std::to_string(spec.targeted_layer_id) +
                              " does not exist");
        }
        const auto& e = model.registry().entry(spec.targeted_layer_id);
        if (!layer_eligible(e, kinds, spec.target, model)) {
            throw ConfigError("targeted layer " + e.name + " is not eligible");
        }
        layer_id = spec.targeted_layer_id;
    } else {
        const std::vector<int> eligible = eligible_layers(spec, model);
        if (eligible.empty()) throw ConfigError("no eligible layers for fault injection");
        layer_id = eligible[rng.uniform_index(eligible.size())];
    }

    std::size_t n_elements = 0;
    if (spec.target == FaultTarget::Weights) {
        n_elements = model.weights(layer_id)[0].size();
    } else {
        n_elements = shape_product(model.registry().entry(layer_id).output_shape);
    }
    const std::size_t bit_choices = spec.bit_policy == BitPolicy::HighOrder9 ? 9 : 32;
    if (n_elements * bit_choices < spec.num_bit_flips) {
        throw ConfigError("layer too small for " + std::to_string(spec.num_bit_flips) +
                          " distinct flip sites");
    }

    FaultPlan plan;
    plan.target = spec.target;
    plan.layer_id = layer_id;
    plan.weight_slot = 0;
    plan.model_hash = model.content_hash();
    std::set<std::pair<std::size_t, int>> seen;
    while (plan.sites.size() < spec.num_bit_flips) {
        FaultSite site;
        site.flat_index = rng.uniform_index(n_elements);
        site.bit = draw_bit(spec.bit_policy, rng);
        if (seen.insert({site.flat_index, site.bit}).second) plan.sites.push_back(site);
    }
    return plan;
}

FaultPlan sample_plan(const FaultSpec& spec, const Model& model) {
    Rng rng(spec.seed);
    return sample_plan(spec, model, rng);
}

namespace {

/// Applies the plan's flips to `t` in site order, recording each site.
void apply_sites(Tensor& t, const FaultPlan& plan, FaultRecord& record) {
    for (const auto& s : plan.sites) {
        if (s.flat_index >= t.size()) {
            throw ConfigError("fault site index " + std::to_string(s.flat_index) +
                              " out of range for layer " + std::to_string(plan.layer_id));
        }
        if (s.bit < 0 || s.bit > 31) {
            throw RangeError("bit position " + std::to_string(s.bit) + " outside [0,31]");
        }
        FaultSiteRecord r;
        r.flat_index = s.flat_index;
        r.bit = s.bit;
        r.orig_bits = element_bits(t, s.flat_index);
        set_element_bits(t, s.flat_index, r.orig_bits ^ (1u << s.bit));
        r.corrupt_bits = element_bits(t, s.flat_index);
        if (r.corrupt_bits != (r.orig_bits ^ (1u << s.bit))) {
            throw ConfigError("flip readback mismatch at flat_index " +
                              std::to_string(s.flat_index));
        }
        record.sites.push_back(r);
    }
}

/// Restores the original bit patterns (reverse site order undoes shared-element
/// sequences exactly).
struct WeightRestorer {
    Tensor* tensor = nullptr;
    const std::vector<FaultSiteRecord>* sites = nullptr;

    ~WeightRestorer() {
        if (!tensor || !sites) return;
        for (auto it = sites->rbegin(); it != sites->rend(); ++it) {
            set_element_bits(*tensor, it->flat_index, it->orig_bits);
        }
    }
};

} // namespace

FaultRunResult run_with_fault(Model& model, const Tensor& image, const FaultPlan& plan,
                              const HookSet& hooks) {
    if (!hooks.fault.empty()) {
        throw ConfigError("hook set passed to run_with_fault already contains fault hooks");
    }
    FaultRunResult res;
    res.record.target = plan.target;
    res.record.layer_id = plan.layer_id;
    res.record.weight_slot = plan.weight_slot;

    if (plan.empty()) {
        res.forward = model.forward(image, hooks);
        return res;
    }
    if (plan.model_hash != model.content_hash()) {
        throw ConfigError("fault plan was sampled for a different model (hash mismatch)");
    }
    if (!model.registry().contains(plan.layer_id)) {
        throw ConfigError("fault plan layer_id " + std::to_string(plan.layer_id) +
                          " does not exist");
    }

    if (plan.target == FaultTarget::Weights) {
        auto& slots = model.weights_mut(plan.layer_id);
        if (plan.weight_slot >= slots.size()) {
            throw ConfigError("fault plan weight slot " + std::to_string(plan.weight_slot) +
                              " out of range for layer " + std::to_string(plan.layer_id));
        }
        Tensor& w = slots[plan.weight_slot];
        WeightRestorer restore{&w, &res.record.sites};
        apply_sites(w, plan, res.record);
        res.forward = model.forward(image, hooks);
        return res; // restorer undoes the flips bit-exactly
    }

    HookSet with_fault = hooks;
    FaultRecord* record = &res.record;
    const FaultPlan* plan_ptr = &plan;
    with_fault.fault[plan.layer_id] = [record, plan_ptr](Tensor& t) {
        apply_sites(t, *plan_ptr, *record);
    };
    res.forward = model.forward(image, with_fault);
    return res;
}

} // namespace flipshield
