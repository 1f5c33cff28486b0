#ifndef FLIPSHIELD_FAULT_HPP
#define FLIPSHIELD_FAULT_HPP

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "flipshield/model.hpp"
#include "flipshield/rng.hpp"

namespace flipshield {

/// What a transient fault corrupts for one inference.
enum class FaultTarget { Weights, Neurons };

/// Which bits a flip may land on. HighOrder9 = bits 31..23 (sign + exponent).
enum class BitPolicy { HighOrder9, AnyBit };

enum class LayerSelection { RandomEligible, Targeted };

std::string fault_target_to_string(FaultTarget t);
FaultTarget fault_target_from_string(const std::string& s);
std::string bit_policy_to_string(BitPolicy p);
BitPolicy bit_policy_from_string(const std::string& s);

/// Declarative description of one fault regime.
struct FaultSpec {
    FaultTarget target = FaultTarget::Neurons;
    LayerSelection selection = LayerSelection::RandomEligible;
    int targeted_layer_id = -1; // used when selection == Targeted
    /// Layer kinds eligible for random selection. Empty means the architecture
    /// default: AttentionLinear for toy-detr, Conv for toy-cnn.
    std::set<Kind> eligible_kinds;
    std::size_t num_bit_flips = 1; // 1 or 10
    BitPolicy bit_policy = BitPolicy::HighOrder9;
    std::uint64_t seed = 0;
};

/// One (element, bit) flip site inside the selected tensor.
struct FaultSite {
    std::size_t flat_index = 0;
    int bit = 0;
};

/// Fully resolved fault for one inference: every site lives in one layer of
/// one concrete model (bound by content hash).
struct FaultPlan {
    FaultTarget target = FaultTarget::Neurons;
    int layer_id = -1;
    std::size_t weight_slot = 0; // weights target: index into the layer's tensor list
    std::vector<FaultSite> sites; // distinct (flat_index, bit) pairs
    std::uint64_t model_hash = 0;

    bool empty() const { return sites.empty(); }
};

/// Audit record: per site, the value before and after its flip, applied in
/// site order (so corrupt_bits == orig_bits XOR 1<<bit holds site-locally).
struct FaultSiteRecord {
    std::size_t flat_index = 0;
    int bit = 0;
    std::uint32_t orig_bits = 0;
    std::uint32_t corrupt_bits = 0;
};

struct FaultRecord {
    FaultTarget target = FaultTarget::Neurons;
    int layer_id = -1;
    std::size_t weight_slot = 0;
    std::vector<FaultSiteRecord> sites;

    /// One JSON object per inference.
    std::string to_json() const;
};

/// XORs the bit pattern of `value` with the mask of `positions`. Involutive.
float flip_bits(float value, std::span<const int> positions);

/// Layers a RandomEligible draw may select: kind in `spec.eligible_kinds`
/// (or the architecture default) and, for the weights target, a nonempty
/// primary weight tensor.
std::vector<int> eligible_layers(const FaultSpec& spec, const Model& model);

/// Draws the faulted layer (uniform over eligible layers, or the targeted
/// one) and num_bit_flips distinct (element, bit) sites inside it.
/// Deterministic given the rng state.
FaultPlan sample_plan(const FaultSpec& spec, const Model& model, Rng& rng);

/// Convenience: seeds a fresh stream from spec.seed.
FaultPlan sample_plan(const FaultSpec& spec, const Model& model);

struct FaultRunResult {
    ForwardResult forward;
    FaultRecord record;
};

/// Runs one faulty inference. Weights target: flips are applied then restored
/// bit-exactly, even on exception. Neurons target: flips are applied to the
/// layer's output inside the fault hook, before that layer's mitigation hook.
/// `hooks` supplies mitigation/capture entries; its fault map must be empty.
FaultRunResult run_with_fault(Model& model, const Tensor& image, const FaultPlan& plan,
                              const HookSet& hooks = HookSet{});

} // namespace flipshield

#endif // FLIPSHIELD_FAULT_HPP
