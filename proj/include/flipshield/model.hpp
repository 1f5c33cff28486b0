#ifndef FLIPSHIELD_MODEL_HPP
#define FLIPSHIELD_MODEL_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flipshield/tensor.hpp"

namespace flipshield {

// ---------------------------------------------------------------------------
// Layer taxonomy.

enum class Kind { Conv, Activation, Softmax, LayerNorm, AttentionLinear, Linear, Other };

/// The four linear layers of an attention block:
/// A = sampling offsets, B = attention weights, C = value projection,
/// D = output projection.
enum class Stage { A, B, C, D };

struct LayerKind {
    Kind kind = Kind::Other;
    std::optional<Stage> stage; // set iff kind == AttentionLinear

    bool operator==(const LayerKind&) const = default;
};

std::string kind_to_string(Kind k);
Kind kind_from_string(const std::string& s);
std::string stage_to_string(Stage s);
Stage stage_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// Registry: the ordered, hookable layer list of a model.

struct LayerEntry {
    int layer_id = 0;
    std::string name;
    LayerKind kind;
    std::vector<std::vector<std::size_t>> weight_shapes;
    /// Shape of this layer's output for the model's fixed input size.
    std::vector<std::size_t> output_shape;
};

/// Ordered layer list; ids are dense and follow forward-pass execution order.
class LayerRegistry {
public:
    int add(std::string name, LayerKind kind,
            std::vector<std::vector<std::size_t>> weight_shapes);

    bool contains(int layer_id) const;
    const LayerEntry& entry(int layer_id) const;
    LayerEntry& entry_mut(int layer_id);
    const std::vector<LayerEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::vector<int> ids_of_kind(Kind kind) const;
    std::vector<int> attention_linear_ids(std::optional<Stage> stage = std::nullopt) const;

    std::string to_json(int indent = 2) const;

private:
    std::vector<LayerEntry> entries_;
};

// ---------------------------------------------------------------------------
// Inference outputs.

/// One detector output. Coordinates are normalized to [0,1] for well-formed
/// boxes; NaN/Inf survive corruption intact and are flagged via finite().
struct Detection {
    float x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    int class_id = 0;
    float score = 0;

    bool finite() const;
};

/// Per-layer output statistics of one inference. mean/variance propagate
/// NaN/Inf; min/max skip NaN but include infinities, so an out-of-range
/// excursion always shows up in one of the fields.
struct TraceEntry {
    int layer_id = 0;
    float mean = 0;
    float variance = 0;
    float min = 0;
    float max = 0;
    bool all_finite = true;
};

struct LayerTrace {
    std::vector<TraceEntry> entries;

    const TraceEntry& for_layer(int layer_id) const;
};

/// Per-layer callbacks applied to a layer's output tensor in place.
using LayerHook = std::function<void(Tensor&)>;

/// Hooks keyed by layer_id. At each layer output the pipeline is fixed:
/// fault hook, then mitigation hook, then trace recording. `capture` lists
/// layers whose post-hook output is copied into the result.
struct HookSet {
    std::map<int, LayerHook> fault;
    std::map<int, LayerHook> mitigation;
    std::set<int> capture;

    bool empty() const { return fault.empty() && mitigation.empty() && capture.empty(); }
};

struct ForwardResult {
    std::vector<Detection> detections; // score >= model threshold
    std::vector<Detection> raw;        // every head output, pre-threshold
    LayerTrace trace;
    std::map<int, Tensor> captured;
};

std::vector<Detection> threshold_detections(const std::vector<Detection>& raw,
                                            float score_threshold);

// ---------------------------------------------------------------------------
// Architectures.

enum class Architecture { ToyCnn, ToyDetr };

std::string architecture_to_string(Architecture a);

struct ToyDetrParams {
    std::size_t in_channels = 3, image_h = 32, image_w = 32;
    std::vector<std::size_t> backbone_channels = {8, 16}; // widths before the embed conv
    std::size_t embed_dim = 32;
    std::size_t heads = 2;
    std::size_t points = 4; // sampling points per head
    std::size_t ffn_dim = 64;
    std::size_t encoders = 2;
    std::size_t decoders = 2;
    std::size_t queries = 8;
    std::size_t num_classes = 2;
    float head_gain = 4.0f;        // widens head logits so scores spread away from 0.5
    float score_threshold = 0.5f;
};

struct ToyCnnParams {
    std::size_t in_channels = 3, image_h = 32, image_w = 32;
    std::size_t channels = 16;
    std::size_t conv_layers = 6;
    std::size_t num_classes = 2;
    float head_gain = 4.0f;
    float score_threshold = 0.5f;
};

// ---------------------------------------------------------------------------
// Model: registry + weights + forward pass.

class Model {
public:
    static Model build_toy_detr(const ToyDetrParams& params, std::uint64_t seed);
    static Model build_toy_cnn(const ToyCnnParams& params, std::uint64_t seed);

    Architecture architecture() const { return arch_; }
    std::uint64_t seed() const { return seed_; }
    const LayerRegistry& registry() const { return registry_; }
    std::vector<std::size_t> input_shape() const;
    float score_threshold() const;

    const std::vector<Tensor>& weights(int layer_id) const;
    std::vector<Tensor>& weights_mut(int layer_id);

    /// Executes layers in registry order, firing hooks at each layer output.
    /// Pure in (weights, image, hooks); bit-deterministic.
    ForwardResult forward(const Tensor& image, const HookSet& hooks = HookSet{}) const;

    /// Lossless persistence; see docs/formats.md.
    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    static Model load(std::istream& in);
    static Model load_file(const std::string& path);

    /// Content hash of params + all weight bytes.
    std::uint64_t content_hash() const;

    std::string params_json() const;

    const ToyDetrParams& detr_params() const;
    const ToyCnnParams& cnn_params() const;

    /// layer_id -> output shape, filled during the shape-probe forward pass.
    using ShapeRecorder = std::map<int, std::vector<std::size_t>>;

private:
    Model() = default;

    struct AttentionBlockIds {
        int offsets, attn_weights, attn_softmax, value, output;
        int norm1, ffn1, ffn_relu, ffn2, norm2;
    };
    struct DetrLayout {
        std::vector<int> conv, conv_relu;
        int pos_embed = -1;
        std::vector<AttentionBlockIds> enc, dec;
        int queries = -1;
        int head_class = -1, head_box = -1;
    };
    struct CnnLayout {
        std::vector<int> conv, conv_relu;
        int head_dense = -1;
    };

    ForwardResult forward_impl(const Tensor& image, const HookSet& hooks,
                               ShapeRecorder* probe) const;
    ForwardResult forward_detr(const Tensor& image, const HookSet& hooks,
                               ShapeRecorder* probe) const;
    ForwardResult forward_cnn(const Tensor& image, const HookSet& hooks,
                              ShapeRecorder* probe) const;
    void record_output_shapes();

    Architecture arch_ = Architecture::ToyCnn;
    std::uint64_t seed_ = 0;
    ToyDetrParams detr_;
    ToyCnnParams cnn_;
    DetrLayout detr_layout_;
    CnnLayout cnn_layout_;
    LayerRegistry registry_;
    std::map<int, std::vector<Tensor>> weights_;
    // content_hash() memo; weights_mut() invalidates it.
    mutable std::uint64_t hash_cache_ = 0;
    mutable bool hash_valid_ = false;
};

} // namespace flipshield

#endif // FLIPSHIELD_MODEL_HPP
