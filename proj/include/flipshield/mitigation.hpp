#ifndef FLIPSHIELD_MITIGATION_HPP
#define FLIPSHIELD_MITIGATION_HPP

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "flipshield/model.hpp"

namespace flipshield {

/// The two range-restriction rules applied elementwise at a layer output.
enum class RestrictionRule { ClipToZero, ClampToBounds };

std::string rule_to_string(RestrictionRule r);
RestrictionRule rule_from_string(const std::string& s);

struct Bounds {
    float lower = 0.0f;
    float upper = 0.0f;
};

/// Per-layer [min, max] observed over fault-free profiling inferences.
/// Serialized bit patterns are authoritative; decimals are for humans.
class BoundsProfile {
public:
    void set(int layer_id, const std::string& name, Bounds b);
    bool contains(int layer_id) const { return entries_.count(layer_id) != 0; }
    Bounds at(int layer_id) const;
    std::size_t size() const { return entries_.size(); }

    void set_provenance(std::string p) { provenance_ = std::move(p); }
    const std::string& provenance() const { return provenance_; }
    void set_sample_count(std::size_t n) { samples_ = n; }
    std::size_t sample_count() const { return samples_; }

    std::string to_json(int indent = 2) const;
    static BoundsProfile from_json(const std::string& text);

    std::uint64_t content_hash() const;

private:
    struct Entry {
        std::string name;
        Bounds bounds;
    };
    std::map<int, Entry> entries_;
    std::string provenance_;
    std::size_t samples_ = 0;
};

/// Restricts one value. ClipToZero: 0 outside [lower, upper] and for NaN/Inf,
/// identity inside. ClampToBounds: saturate to the violated bound; NaN -> 0.
float restrict_value(float x, RestrictionRule rule, Bounds b);

enum class PolicyVariant {
    None,
    Ranger,
    Clipper,
    GlobalRanger,
    GlobalClipper,
    GlobalHybridClipper,
    Custom
};

/// A named placement recipe, or a Custom per-layer rule map.
struct MitigationPolicy {
    PolicyVariant variant = PolicyVariant::None;
    std::map<int, RestrictionRule> custom; // used when variant == Custom
    std::string label;                     // CSV name for Custom policies

    static MitigationPolicy named(PolicyVariant v);

    std::string name() const;
    std::uint64_t content_hash() const;
};

std::string policy_variant_to_string(PolicyVariant v);
PolicyVariant policy_variant_from_string(const std::string& s);

/// Pure placement table:
///   Ranger         Activation -> ClampToBounds
///   Clipper        Activation -> ClipToZero
///   GlobalRanger   Activation + AttentionLinear -> ClampToBounds
///   GlobalClipper  Activation + AttentionLinear -> ClipToZero
///   Hybrid         Activation -> ClipToZero, AttentionLinear -> ClampToBounds
/// Softmax layers are never protected; Custom maps are validated.
std::map<int, RestrictionRule> resolve_placement(const MitigationPolicy& policy,
                                                 const LayerRegistry& registry);

/// Custom policy protecting all Activation layers plus only the
/// AttentionLinear layers whose stage is in `stages`, with ClipToZero.
MitigationPolicy minimal_placement(const std::set<Stage>& stages,
                                   const LayerRegistry& registry);

/// Per-layer global min/max of fault-free outputs over `images` (all layers).
BoundsProfile profile_bounds(const Model& model, const std::vector<Tensor>& images,
                             std::string provenance = "");

/// Builds the mitigation hook map for a resolved policy. Every protected
/// layer must have a bounds entry.
HookSet make_mitigation_hooks(const MitigationPolicy& policy, const LayerRegistry& registry,
                              const BoundsProfile& bounds);

} // namespace flipshield

#endif // FLIPSHIELD_MITIGATION_HPP
