#include "flipshield/mitigation.hpp"

#include <cmath>
#include <utility>

#include <json.hpp>

#include "flipshield/errors.hpp"
#include "flipshield/hash.hpp"

namespace flipshield {

using nlohmann::json;

std::string rule_to_string(RestrictionRule r) {
    return r == RestrictionRule::ClipToZero ? "clip-to-zero" : "clamp-to-bounds";
}

RestrictionRule rule_from_string(const std::string& s) {
    if (s == "clip-to-zero") return RestrictionRule::ClipToZero;
    if (s == "clamp-to-bounds") return RestrictionRule::ClampToBounds;
    throw ConfigError("unknown restriction rule: " + s);
}

// ---------------------------------------------------------------------------

void BoundsProfile::set(int layer_id, const std::string& name, Bounds b) {
    if (!std::isfinite(b.lower) || !std::isfinite(b.upper)) {
        throw ConfigError("bounds for layer " + std::to_string(layer_id) + " are not finite");
    }
    if (b.lower > b.upper) {
        throw ConfigError("bounds for layer " + std::to_string(layer_id) + " are unordered");
    }
    entries_[layer_id] = Entry{name, b};
}

Bounds BoundsProfile::at(int layer_id) const {
    auto it = entries_.find(layer_id);
    if (it == entries_.end()) {
        throw ConfigError("bounds profile has no entry for layer_id " +
                          std::to_string(layer_id));
    }
    return it->second.bounds;
}

std::string BoundsProfile::to_json(int indent) const {
    json j;
    j["provenance"] = provenance_;
    j["sample_count"] = samples_;
    json rows = json::array();
    for (const auto& [id, e] : entries_) {
        json r;
        r["layer_id"] = id;
        r["name"] = e.name;
        r["lower"] = e.bounds.lower;
        r["upper"] = e.bounds.upper;
        r["lower_hex"] = hex_u32(float_to_bits(e.bounds.lower));
        r["upper_hex"] = hex_u32(float_to_bits(e.bounds.upper));
        rows.push_back(std::move(r));
    }
    j["bounds"] = std::move(rows);
    return j.dump(indent);
}

BoundsProfile BoundsProfile::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw FormatError(std::string("unparseable bounds profile: ") + ex.what());
    }
    BoundsProfile p;
    try {
        p.provenance_ = j.value("provenance", std::string{});
        p.samples_ = j.value("sample_count", std::size_t{0});
        for (const auto& r : j.at("bounds")) {
            const int id = r.at("layer_id").get<int>();
            Bounds b;
            // Hex bit patterns are authoritative; decimals only aid review.
            b.lower = bits_to_float(parse_hex_u32(r.at("lower_hex").get<std::string>()));
            b.upper = bits_to_float(parse_hex_u32(r.at("upper_hex").get<std::string>()));
            p.set(id, r.value("name", std::string{}), b);
        }
    } catch (const json::exception& ex) {
        throw FormatError(std::string("malformed bounds profile: ") + ex.what());
    }
    return p;
}

std::uint64_t BoundsProfile::content_hash() const {
    std::uint64_t h = fnv1a64(provenance_);
    for (const auto& [id, e] : entries_) {
        const std::uint32_t words[3] = {static_cast<std::uint32_t>(id),
                                        float_to_bits(e.bounds.lower),
                                        float_to_bits(e.bounds.upper)};
        h = fnv1a64(std::span<const std::uint8_t>(
                        reinterpret_cast<const std::uint8_t*>(words), sizeof(words)),
                    h);
    }
    return h;
}

// ---------------------------------------------------------------------------

float restrict_value(float x, RestrictionRule rule, Bounds b) {
    if (rule == RestrictionRule::ClipToZero) {
        if (x < b.lower || x > b.upper) return 0.0f;
        if (std::isnan(x) || std::isinf(x)) return 0.0f;
        return x;
    }
    if (std::isnan(x)) return 0.0f;
    if (x < b.lower) return b.lower;
    if (x > b.upper) return b.upper;
    return x;
}

MitigationPolicy MitigationPolicy::named(PolicyVariant v) {
    if (v == PolicyVariant::Custom) {
        throw ConfigError("custom policies carry their own rule map; use minimal_placement");
    }
    MitigationPolicy p;
    p.variant = v;
    return p;
}

std::string MitigationPolicy::name() const {
    if (variant == PolicyVariant::Custom && !label.empty()) return label;
    return policy_variant_to_string(variant);
}

std::uint64_t MitigationPolicy::content_hash() const {
    std::uint64_t h = fnv1a64(policy_variant_to_string(variant));
    for (const auto& [id, rule] : custom) {
        const std::uint32_t words[2] = {static_cast<std::uint32_t>(id),
                                        static_cast<std::uint32_t>(rule)};
        h = fnv1a64(std::span<const std::uint8_t>(
                        reinterpret_cast<const std::uint8_t*>(words), sizeof(words)),
                    h);
    }
    return h;
}

std::string policy_variant_to_string(PolicyVariant v) {
    switch (v) {
        case PolicyVariant::None: return "none";
        case PolicyVariant::Ranger: return "ranger";
        case PolicyVariant::Clipper: return "clipper";
        case PolicyVariant::GlobalRanger: return "global-ranger";
        case PolicyVariant::GlobalClipper: return "global-clipper";
        case PolicyVariant::GlobalHybridClipper: return "global-hybrid-clipper";
        case PolicyVariant::Custom: return "custom";
    }
    return "none";
}

PolicyVariant policy_variant_from_string(const std::string& s) {
    if (s == "none") return PolicyVariant::None;
    if (s == "ranger") return PolicyVariant::Ranger;
    if (s == "clipper") return PolicyVariant::Clipper;
    if (s == "global-ranger") return PolicyVariant::GlobalRanger;
    if (s == "global-clipper") return PolicyVariant::GlobalClipper;
    if (s == "global-hybrid-clipper") return PolicyVariant::GlobalHybridClipper;
    if (s == "custom") return PolicyVariant::Custom;
    throw ConfigError("unknown mitigation policy: " + s);
}

std::map<int, RestrictionRule> resolve_placement(const MitigationPolicy& policy,
                                                 const LayerRegistry& registry) {
    std::map<int, RestrictionRule> out;
    const auto protect = [&](Kind kind, RestrictionRule rule) {
        for (int id : registry.ids_of_kind(kind)) out[id] = rule;
    };
    switch (policy.variant) {
        case PolicyVariant::None:
            break;
        case PolicyVariant::Ranger:
            protect(Kind::Activation, RestrictionRule::ClampToBounds);
            break;
        case PolicyVariant::Clipper:
            protect(Kind::Activation, RestrictionRule::ClipToZero);
            break;
        case PolicyVariant::GlobalRanger:
            protect(Kind::Activation, RestrictionRule::ClampToBounds);
            protect(Kind::AttentionLinear, RestrictionRule::ClampToBounds);
            break;
        case PolicyVariant::GlobalClipper:
            protect(Kind::Activation, RestrictionRule::ClipToZero);
            protect(Kind::AttentionLinear, RestrictionRule::ClipToZero);
            break;
        case PolicyVariant::GlobalHybridClipper:
            protect(Kind::Activation, RestrictionRule::ClipToZero);
            protect(Kind::AttentionLinear, RestrictionRule::ClampToBounds);
            break;
        case PolicyVariant::Custom:
            for (const auto& [id, rule] : policy.custom) {
                if (!registry.contains(id)) {
                    throw PlacementError("custom policy references unknown layer_id " +
                                         std::to_string(id));
                }
                if (registry.entry(id).kind.kind == Kind::Softmax) {
                    throw PlacementError("custom policy protects softmax layer " +
                                         registry.entry(id).name);
                }
                out[id] = rule;
            }
            break;
    }
    return out;
}

MitigationPolicy minimal_placement(const std::set<Stage>& stages,
                                   const LayerRegistry& registry) {
    if (stages.empty()) throw ConfigError("minimal placement needs a nonempty stage set");
    MitigationPolicy p;
    p.variant = PolicyVariant::Custom;
    for (int id : registry.ids_of_kind(Kind::Activation)) {
        p.custom[id] = RestrictionRule::ClipToZero;
    }
    std::string letters;
    for (Stage s : stages) {
        for (int id : registry.attention_linear_ids(s)) {
            p.custom[id] = RestrictionRule::ClipToZero;
        }
        letters += stage_to_string(s);
    }
    p.label = "stages-" + letters;
    return p;
}

BoundsProfile profile_bounds(const Model& model, const std::vector<Tensor>& images,
                             std::string provenance) {
    if (images.empty()) throw ConfigError("bounds profiling needs a nonempty image set");
    std::map<int, Bounds> acc;
    for (const auto& image : images) {
        const ForwardResult fr = model.forward(image);
        for (const auto& t : fr.trace.entries) {
            auto [it, fresh] = acc.try_emplace(t.layer_id, Bounds{t.min, t.max});
            if (!fresh) {
                if (t.min < it->second.lower) it->second.lower = t.min;
                if (t.max > it->second.upper) it->second.upper = t.max;
            }
        }
    }
    BoundsProfile p;
    p.set_provenance(std::move(provenance));
    p.set_sample_count(images.size());
    for (const auto& [id, b] : acc) p.set(id, model.registry().entry(id).name, b);
    return p;
}

HookSet make_mitigation_hooks(const MitigationPolicy& policy, const LayerRegistry& registry,
                              const BoundsProfile& bounds) {
    HookSet hooks;
    for (const auto& [id, rule] : resolve_placement(policy, registry)) {
        const Bounds b = bounds.at(id);
        hooks.mitigation[id] = [rule, b](Tensor& t) {
            for (float& v : t.values()) v = restrict_value(v, rule, b);
        };
    }
    return hooks;
}

} // namespace flipshield
