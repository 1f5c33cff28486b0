#include "flipshield/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "flipshield/hash.hpp"
#include "flipshield/rng.hpp"

namespace flipshield {

using nlohmann::json;

namespace {
constexpr float kLayerNormEps = 1e-5f;
constexpr char kWeightsMagic[4] = {'F', 'S', 'W', 'T'};
constexpr std::uint32_t kWeightsVersion = 1;
} // namespace

// ---------------------------------------------------------------------------

std::string kind_to_string(Kind k) {
    switch (k) {
        case Kind::Conv: return "conv";
        case Kind::Activation: return "activation";
        case Kind::Softmax: return "softmax";
        case Kind::LayerNorm: return "layernorm";
        case Kind::AttentionLinear: return "attention-linear";
        case Kind::Linear: return "linear";
        case Kind::Other: return "other";
    }
    return "other";
}

Kind kind_from_string(const std::string& s) {
    if (s == "conv") return Kind::Conv;
    if (s == "activation") return Kind::Activation;
    if (s == "softmax") return Kind::Softmax;
    if (s == "layernorm") return Kind::LayerNorm;
    if (s == "attention-linear") return Kind::AttentionLinear;
    if (s == "linear") return Kind::Linear;
    if (s == "other") return Kind::Other;
    throw ConfigError("unknown layer kind: " + s);
}

std::string stage_to_string(Stage s) {
    switch (s) {
        case Stage::A: return "A";
        case Stage::B: return "B";
        case Stage::C: return "C";
        case Stage::D: return "D";
    }
    return "A";
}

Stage stage_from_string(const std::string& s) {
    if (s == "A") return Stage::A;
    if (s == "B") return Stage::B;
    if (s == "C") return Stage::C;
    if (s == "D") return Stage::D;
    throw ConfigError("unknown attention stage: " + s);
}

// ---------------------------------------------------------------------------

int LayerRegistry::add(std::string name, LayerKind kind,
                       std::vector<std::vector<std::size_t>> weight_shapes) {
    LayerEntry e;
    e.layer_id = static_cast<int>(entries_.size());
    e.name = std::move(name);
    e.kind = kind;
    e.weight_shapes = std::move(weight_shapes);
    entries_.push_back(std::move(e));
    return entries_.back().layer_id;
}

bool LayerRegistry::contains(int layer_id) const {
    return layer_id >= 0 && static_cast<std::size_t>(layer_id) < entries_.size();
}

const LayerEntry& LayerRegistry::entry(int layer_id) const {
    if (!contains(layer_id)) {
        throw ConfigError("unknown layer_id " + std::to_string(layer_id));
    }
    return entries_[static_cast<std::size_t>(layer_id)];
}

LayerEntry& LayerRegistry::entry_mut(int layer_id) {
    if (!contains(layer_id)) {
        throw ConfigError("unknown layer_id " + std::to_string(layer_id));
    }
    return entries_[static_cast<std::size_t>(layer_id)];
}

std::vector<int> LayerRegistry::ids_of_kind(Kind kind) const {
    std::vector<int> ids;
    for (const auto& e : entries_) {
        if (e.kind.kind == kind) ids.push_back(e.layer_id);
    }
    return ids;
}

std::vector<int> LayerRegistry::attention_linear_ids(std::optional<Stage> stage) const {
    std::vector<int> ids;
    for (const auto& e : entries_) {
        if (e.kind.kind != Kind::AttentionLinear) continue;
        if (stage && e.kind.stage != stage) continue;
        ids.push_back(e.layer_id);
    }
    return ids;
}

std::string LayerRegistry::to_json(int indent) const {
    json arr = json::array();
    for (const auto& e : entries_) {
        json je;
        je["layer_id"] = e.layer_id;
        je["name"] = e.name;
        je["kind"] = kind_to_string(e.kind.kind);
        je["stage"] = e.kind.stage ? json(stage_to_string(*e.kind.stage)) : json(nullptr);
        je["weight_shapes"] = e.weight_shapes;
        je["output_shape"] = e.output_shape;
        arr.push_back(std::move(je));
    }
    return arr.dump(indent);
}

// ---------------------------------------------------------------------------

bool Detection::finite() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && std::isfinite(score);
}

const TraceEntry& LayerTrace::for_layer(int layer_id) const {
    for (const auto& e : entries) {
        if (e.layer_id == layer_id) return e;
    }
    throw ConfigError("trace has no entry for layer_id " + std::to_string(layer_id));
}

std::vector<Detection> threshold_detections(const std::vector<Detection>& raw,
                                            float score_threshold) {
    std::vector<Detection> out;
    for (const auto& d : raw) {
        if (d.score >= score_threshold) out.push_back(d);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string architecture_to_string(Architecture a) {
    return a == Architecture::ToyDetr ? "toy-detr" : "toy-cnn";
}

namespace {

TraceEntry layer_stats(int layer_id, const Tensor& t) {
    TraceEntry e;
    e.layer_id = layer_id;
    const std::size_t n = t.size();
    double sum = 0.0;
    float mn = std::numeric_limits<float>::infinity();
    float mx = -std::numeric_limits<float>::infinity();
    bool finite = true;
    for (std::size_t i = 0; i < n; ++i) {
        const float v = t[i];
        sum += static_cast<double>(v);
        if (v < mn) mn = v;
        if (v > mx) mx = v;
        if (!std::isfinite(v)) finite = false;
    }
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(t[i]) - mean;
        var += d * d;
    }
    e.mean = static_cast<float>(mean);
    e.variance = static_cast<float>(var / static_cast<double>(n));
    e.min = mn;
    e.max = mx;
    e.all_finite = finite;
    return e;
}

/// Applies the per-layer pipeline: fault hook, mitigation hook, trace, capture.
struct HookRunner {
    const HookSet& hooks;
    LayerTrace& trace;
    std::map<int, Tensor>& captured;
    Model::ShapeRecorder* probe;

    Tensor finish(int layer_id, Tensor out) {
        if (auto it = hooks.fault.find(layer_id); it != hooks.fault.end()) it->second(out);
        if (auto it = hooks.mitigation.find(layer_id); it != hooks.mitigation.end()) {
            it->second(out);
        }
        trace.entries.push_back(layer_stats(layer_id, out));
        if (hooks.capture.count(layer_id)) captured.insert_or_assign(layer_id, out);
        if (probe) (*probe)[layer_id] = out.shape();
        return out;
    }
};

Tensor init_uniform(Rng& rng, std::vector<std::size_t> shape, float bound) {
    Tensor t(std::move(shape));
    for (float& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

std::vector<Tensor> init_linear(Rng& rng, std::size_t in, std::size_t out, float gain) {
    const float bound = gain / std::sqrt(static_cast<float>(in));
    std::vector<Tensor> w;
    w.push_back(init_uniform(rng, {in, out}, bound));
    w.push_back(init_uniform(rng, {out}, bound));
    return w;
}

std::vector<Tensor> init_conv(Rng& rng, std::size_t out_c, std::size_t in_c, std::size_t k) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in_c * k * k));
    std::vector<Tensor> w;
    w.push_back(init_uniform(rng, {out_c, in_c, k, k}, bound));
    w.push_back(init_uniform(rng, {out_c}, bound));
    return w;
}

std::vector<Tensor> init_layernorm(std::size_t d) {
    std::vector<Tensor> w;
    w.push_back(Tensor::full({d}, 1.0f));
    w.push_back(Tensor({d}));
    return w;
}

Tensor add_channel_bias(const Tensor& fm, const Tensor& bias) {
    Tensor out = fm;
    const std::size_t c = fm.dim(0), plane = fm.dim(1) * fm.dim(2);
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t i = 0; i < plane; ++i) out[ci * plane + i] += bias[ci];
    }
    return out;
}

/// Nearest valid row index for a (possibly corrupted) sampling position.
/// NaN falls back to 0; out-of-range saturates.
std::size_t sample_index(float pos, std::size_t n) {
    if (std::isnan(pos)) return 0;
    if (!(pos > 0.0f)) return 0;
    const float last = static_cast<float>(n - 1);
    if (pos >= last) return n - 1;
    return static_cast<std::size_t>(std::floor(pos + 0.5f));
}

float clamp01_keep_special(float v) {
    if (v < 0.0f) return 0.0f;
    if (v > 1.0f) return 1.0f;
    return v; // NaN and in-range values pass through
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

} // namespace

// ---------------------------------------------------------------------------
// Builders.

Model Model::build_toy_detr(const ToyDetrParams& p, std::uint64_t seed) {
    if (p.embed_dim == 0 || p.heads == 0 || p.embed_dim % p.heads != 0) {
        throw ConfigError("embed_dim must be a positive multiple of heads");
    }
    if (p.encoders < 1 || p.decoders < 1) throw ConfigError("encoders and decoders must be >= 1");
    if (p.queries < 1 || p.points < 1 || p.num_classes < 1 || p.ffn_dim < 1) {
        throw ConfigError("queries, points, num_classes and ffn_dim must be >= 1");
    }
    if (p.image_h < 4 || p.image_w < 4 || p.in_channels < 1) {
        throw ConfigError("image must be at least 4x4 with >= 1 channel");
    }
    for (std::size_t c : p.backbone_channels) {
        if (c == 0) throw ConfigError("backbone channel widths must be >= 1");
    }
    if (!(p.head_gain > 0.0f)) throw ConfigError("head_gain must be > 0");
    if (!(p.score_threshold >= 0.0f && p.score_threshold <= 1.0f)) {
        throw ConfigError("score_threshold must be in [0,1]");
    }

    Model m;
    m.arch_ = Architecture::ToyDetr;
    m.seed_ = seed;
    m.detr_ = p;
    Rng rng(seed);
    auto& reg = m.registry_;
    auto& lay = m.detr_layout_;

    std::vector<std::size_t> widths = p.backbone_channels;
    widths.push_back(p.embed_dim);
    std::size_t cin = p.in_channels;
    std::size_t h = p.image_h, w = p.image_w;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        const std::size_t stride = (i == 0) ? 1 : 2;
        const std::size_t cout = widths[i];
        const int cid = reg.add("backbone.conv" + std::to_string(i), {Kind::Conv, {}},
                                {{cout, cin, 3, 3}, {cout}});
        m.weights_[cid] = init_conv(rng, cout, cin, 3);
        lay.conv.push_back(cid);
        const int rid = reg.add("backbone.relu" + std::to_string(i), {Kind::Activation, {}}, {});
        m.weights_[rid] = {};
        lay.conv_relu.push_back(rid);
        cin = cout;
        h = conv_out_dim(h, 3, stride, 1);
        w = conv_out_dim(w, 3, stride, 1);
    }
    const std::size_t tokens = h * w;
    const std::size_t dm = p.embed_dim;

    lay.pos_embed = reg.add("pos_embed", {Kind::Other, {}}, {{tokens, dm}});
    m.weights_[lay.pos_embed] = {
        init_uniform(rng, {tokens, dm}, 1.0f / std::sqrt(static_cast<float>(dm)))};

    auto add_block = [&](const std::string& prefix) {
        AttentionBlockIds b{};
        b.offsets = reg.add(prefix + ".offsets", {Kind::AttentionLinear, Stage::A},
                            {{dm, p.heads * p.points}, {p.heads * p.points}});
        m.weights_[b.offsets] = init_linear(rng, dm, p.heads * p.points, 1.0f);
        b.attn_weights = reg.add(prefix + ".attn_weights", {Kind::AttentionLinear, Stage::B},
                                 {{dm, p.heads * p.points}, {p.heads * p.points}});
        m.weights_[b.attn_weights] = init_linear(rng, dm, p.heads * p.points, 1.0f);
        b.attn_softmax = reg.add(prefix + ".attn_softmax", {Kind::Softmax, {}}, {});
        m.weights_[b.attn_softmax] = {};
        b.value = reg.add(prefix + ".value", {Kind::AttentionLinear, Stage::C},
                          {{dm, dm}, {dm}});
        m.weights_[b.value] = init_linear(rng, dm, dm, 1.0f);
        b.output = reg.add(prefix + ".output", {Kind::AttentionLinear, Stage::D},
                           {{dm, dm}, {dm}});
        m.weights_[b.output] = init_linear(rng, dm, dm, 1.0f);
        b.norm1 = reg.add(prefix + ".norm1", {Kind::LayerNorm, {}}, {{dm}, {dm}});
        m.weights_[b.norm1] = init_layernorm(dm);
        b.ffn1 = reg.add(prefix + ".ffn1", {Kind::Linear, {}}, {{dm, p.ffn_dim}, {p.ffn_dim}});
        m.weights_[b.ffn1] = init_linear(rng, dm, p.ffn_dim, 1.0f);
        b.ffn_relu = reg.add(prefix + ".ffn_relu", {Kind::Activation, {}}, {});
        m.weights_[b.ffn_relu] = {};
        b.ffn2 = reg.add(prefix + ".ffn2", {Kind::Linear, {}}, {{p.ffn_dim, dm}, {dm}});
        m.weights_[b.ffn2] = init_linear(rng, p.ffn_dim, dm, 1.0f);
        b.norm2 = reg.add(prefix + ".norm2", {Kind::LayerNorm, {}}, {{dm}, {dm}});
        m.weights_[b.norm2] = init_layernorm(dm);
        return b;
    };

    for (std::size_t e = 0; e < p.encoders; ++e) {
        lay.enc.push_back(add_block("enc" + std::to_string(e)));
    }
    lay.queries = reg.add("queries", {Kind::Other, {}}, {{p.queries, dm}});
    m.weights_[lay.queries] = {
        init_uniform(rng, {p.queries, dm}, 1.0f / std::sqrt(static_cast<float>(dm)))};
    for (std::size_t d = 0; d < p.decoders; ++d) {
        lay.dec.push_back(add_block("dec" + std::to_string(d)));
    }

    lay.head_class = reg.add("head.class", {Kind::Linear, {}},
                             {{dm, p.num_classes}, {p.num_classes}});
    m.weights_[lay.head_class] = init_linear(rng, dm, p.num_classes, p.head_gain);
    lay.head_box = reg.add("head.box", {Kind::Linear, {}}, {{dm, 4}, {4}});
    m.weights_[lay.head_box] = init_linear(rng, dm, 4, p.head_gain);

    m.record_output_shapes();
    return m;
}

Model Model::build_toy_cnn(const ToyCnnParams& p, std::uint64_t seed) {
    if (p.conv_layers < 1) throw ConfigError("conv_layers must be >= 1");
    if (p.channels < 1 || p.num_classes < 1) {
        throw ConfigError("channels and num_classes must be >= 1");
    }
    if (p.image_h < 4 || p.image_w < 4 || p.in_channels < 1) {
        throw ConfigError("image must be at least 4x4 with >= 1 channel");
    }
    if (!(p.head_gain > 0.0f)) throw ConfigError("head_gain must be > 0");
    if (!(p.score_threshold >= 0.0f && p.score_threshold <= 1.0f)) {
        throw ConfigError("score_threshold must be in [0,1]");
    }

    Model m;
    m.arch_ = Architecture::ToyCnn;
    m.seed_ = seed;
    m.cnn_ = p;
    Rng rng(seed);
    auto& reg = m.registry_;
    auto& lay = m.cnn_layout_;

    std::size_t cin = p.in_channels;
    for (std::size_t i = 0; i < p.conv_layers; ++i) {
        const int cid = reg.add("conv" + std::to_string(i), {Kind::Conv, {}},
                                {{p.channels, cin, 3, 3}, {p.channels}});
        m.weights_[cid] = init_conv(rng, p.channels, cin, 3);
        lay.conv.push_back(cid);
        const int rid = reg.add("relu" + std::to_string(i), {Kind::Activation, {}}, {});
        m.weights_[rid] = {};
        lay.conv_relu.push_back(rid);
        cin = p.channels;
    }
    lay.head_dense = reg.add("head.dense", {Kind::Linear, {}},
                             {{p.channels, 5 + p.num_classes}, {5 + p.num_classes}});
    m.weights_[lay.head_dense] = init_linear(rng, p.channels, 5 + p.num_classes, p.head_gain);

    m.record_output_shapes();
    return m;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Model::input_shape() const {
    if (arch_ == Architecture::ToyDetr) {
        return {detr_.in_channels, detr_.image_h, detr_.image_w};
    }
    return {cnn_.in_channels, cnn_.image_h, cnn_.image_w};
}

float Model::score_threshold() const {
    return arch_ == Architecture::ToyDetr ? detr_.score_threshold : cnn_.score_threshold;
}

const std::vector<Tensor>& Model::weights(int layer_id) const {
    auto it = weights_.find(layer_id);
    if (it == weights_.end()) throw ConfigError("unknown layer_id " + std::to_string(layer_id));
    return it->second;
}

std::vector<Tensor>& Model::weights_mut(int layer_id) {
    auto it = weights_.find(layer_id);
    if (it == weights_.end()) throw ConfigError("unknown layer_id " + std::to_string(layer_id));
    hash_valid_ = false;
    return it->second;
}

const ToyDetrParams& Model::detr_params() const {
    if (arch_ != Architecture::ToyDetr) throw ConfigError("model is not a toy-detr");
    return detr_;
}

const ToyCnnParams& Model::cnn_params() const {
    if (arch_ != Architecture::ToyCnn) throw ConfigError("model is not a toy-cnn");
    return cnn_;
}

ForwardResult Model::forward(const Tensor& image, const HookSet& hooks) const {
    for (const auto& [id, fn] : hooks.fault) {
        if (!registry_.contains(id)) {
            throw ConfigError("fault hook references unknown layer_id " + std::to_string(id));
        }
    }
    for (const auto& [id, fn] : hooks.mitigation) {
        if (!registry_.contains(id)) {
            throw ConfigError("mitigation hook references unknown layer_id " +
                              std::to_string(id));
        }
    }
    for (int id : hooks.capture) {
        if (!registry_.contains(id)) {
            throw ConfigError("capture hook references unknown layer_id " + std::to_string(id));
        }
    }
    return forward_impl(image, hooks, nullptr);
}

ForwardResult Model::forward_impl(const Tensor& image, const HookSet& hooks,
                                  ShapeRecorder* probe) const {
    const auto expect = input_shape();
    if (image.shape() != expect) {
        throw DimensionError("input image shape " + shape_to_string(image.shape()) +
                             " does not match model input " +
                             shape_to_string(expect));
    }
    if (arch_ == Architecture::ToyDetr) return forward_detr(image, hooks, probe);
    return forward_cnn(image, hooks, probe);
}

namespace {

Tensor linear_fwd(const Tensor& x, const std::vector<Tensor>& w) {
    return add_rowwise(matmul(x, w[0]), w[1]);
}

/// Weighted gather along sampled rows of the value matrix, per head.
Tensor aggregate_samples(const Tensor& offsets, const Tensor& attn, const Tensor& values,
                         std::size_t heads, std::size_t points, bool self_reference) {
    const std::size_t n = offsets.dim(0);
    const std::size_t t = values.dim(0);
    const std::size_t dm = values.dim(1);
    const std::size_t dh = dm / heads;
    Tensor agg({n, dm});
    for (std::size_t i = 0; i < n; ++i) {
        const float ref =
            self_reference
                ? static_cast<float>(i)
                : ((static_cast<float>(i) + 0.5f) / static_cast<float>(n)) *
                      static_cast<float>(t);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            for (std::size_t k = 0; k < points; ++k) {
                const float off = offsets[i * heads * points + hd * points + k];
                const std::size_t pos = sample_index(ref + off, t);
                const float wgt = attn[(i * heads + hd) * points + k];
                for (std::size_t c = 0; c < dh; ++c) {
                    agg[i * dm + hd * dh + c] += wgt * values[pos * dm + hd * dh + c];
                }
            }
        }
    }
    return agg;
}

} // namespace

ForwardResult Model::forward_detr(const Tensor& image, const HookSet& hooks,
                                  ShapeRecorder* probe) const {
    ForwardResult res;
    HookRunner hr{hooks, res.trace, res.captured, probe};
    const auto& p = detr_;
    const auto& lay = detr_layout_;

    Tensor x = image;
    for (std::size_t i = 0; i < lay.conv.size(); ++i) {
        const std::size_t stride = (i == 0) ? 1 : 2;
        const auto& w = weights_.at(lay.conv[i]);
        x = hr.finish(lay.conv[i], add_channel_bias(conv2d(x, w[0], stride, 1), w[1]));
        x = hr.finish(lay.conv_relu[i], relu(x));
    }

    // [dm, h, w] -> [tokens, dm], then add the learned positional table.
    const std::size_t fh = x.dim(1), fw = x.dim(2);
    const std::size_t perm[] = {1, 2, 0};
    Tensor tok = reshape(transpose(x, perm), {fh * fw, p.embed_dim});
    tok = hr.finish(lay.pos_embed, add(tok, weights_.at(lay.pos_embed)[0]));

    auto run_block = [&](const AttentionBlockIds& b, Tensor q, const Tensor& mem,
                         bool self_reference) {
        Tensor off = hr.finish(b.offsets, linear_fwd(q, weights_.at(b.offsets)));
        Tensor logits = hr.finish(b.attn_weights, linear_fwd(q, weights_.at(b.attn_weights)));
        Tensor attn = hr.finish(
            b.attn_softmax,
            softmax(reshape(logits, {q.dim(0), p.heads, p.points}), 2));
        Tensor val = hr.finish(b.value, linear_fwd(mem, weights_.at(b.value)));
        Tensor agg = aggregate_samples(off, attn, val, p.heads, p.points, self_reference);
        Tensor out = hr.finish(b.output, linear_fwd(agg, weights_.at(b.output)));
        const auto& n1 = weights_.at(b.norm1);
        Tensor h1 = hr.finish(b.norm1, layernorm(add(q, out), n1[0], n1[1], kLayerNormEps));
        Tensor f = hr.finish(b.ffn1, linear_fwd(h1, weights_.at(b.ffn1)));
        f = hr.finish(b.ffn_relu, relu(f));
        Tensor f2 = hr.finish(b.ffn2, linear_fwd(f, weights_.at(b.ffn2)));
        const auto& n2 = weights_.at(b.norm2);
        return hr.finish(b.norm2, layernorm(add(h1, f2), n2[0], n2[1], kLayerNormEps));
    };

    for (const auto& b : lay.enc) tok = run_block(b, tok, tok, true);

    Tensor q = hr.finish(lay.queries, weights_.at(lay.queries)[0]);
    for (const auto& b : lay.dec) q = run_block(b, q, tok, false);

    Tensor cls = hr.finish(lay.head_class, linear_fwd(q, weights_.at(lay.head_class)));
    Tensor box = hr.finish(lay.head_box, linear_fwd(q, weights_.at(lay.head_box)));

    for (std::size_t i = 0; i < p.queries; ++i) {
        Detection d;
        int best = 0;
        for (std::size_t c = 1; c < p.num_classes; ++c) {
            if (cls[i * p.num_classes + c] > cls[i * p.num_classes + best]) {
                best = static_cast<int>(c);
            }
        }
        d.class_id = best;
        d.score = det_sigmoidf(cls[i * p.num_classes + static_cast<std::size_t>(best)]);
        const float cx = det_sigmoidf(box[i * 4 + 0]);
        const float cy = det_sigmoidf(box[i * 4 + 1]);
        const float bw = det_sigmoidf(box[i * 4 + 2]);
        const float bh = det_sigmoidf(box[i * 4 + 3]);
        d.x_min = clamp01_keep_special(cx - bw * 0.5f);
        d.y_min = clamp01_keep_special(cy - bh * 0.5f);
        d.x_max = clamp01_keep_special(cx + bw * 0.5f);
        d.y_max = clamp01_keep_special(cy + bh * 0.5f);
        res.raw.push_back(d);
    }
    res.detections = threshold_detections(res.raw, p.score_threshold);
    return res;
}

ForwardResult Model::forward_cnn(const Tensor& image, const HookSet& hooks,
                                 ShapeRecorder* probe) const {
    ForwardResult res;
    HookRunner hr{hooks, res.trace, res.captured, probe};
    const auto& p = cnn_;
    const auto& lay = cnn_layout_;

    Tensor x = image;
    for (std::size_t i = 0; i < lay.conv.size(); ++i) {
        // Downsample at the 2nd and 4th conv when present.
        const std::size_t stride = (i == 1 || i == 3) ? 2 : 1;
        const auto& w = weights_.at(lay.conv[i]);
        x = hr.finish(lay.conv[i], add_channel_bias(conv2d(x, w[0], stride, 1), w[1]));
        x = hr.finish(lay.conv_relu[i], relu(x));
    }

    const std::size_t gh = x.dim(1), gw = x.dim(2);
    const std::size_t perm[] = {1, 2, 0};
    Tensor cells = reshape(transpose(x, perm), {gh * gw, p.channels});
    Tensor logits = hr.finish(lay.head_dense, linear_fwd(cells, weights_.at(lay.head_dense)));

    const std::size_t fields = 5 + p.num_classes;
    for (std::size_t i = 0; i < gh * gw; ++i) {
        const std::size_t gy = i / gw, gx = i % gw;
        const float* row = logits.data() + i * fields;
        Detection d;
        const float cx = (static_cast<float>(gx) + det_sigmoidf(row[0])) / static_cast<float>(gw);
        const float cy = (static_cast<float>(gy) + det_sigmoidf(row[1])) / static_cast<float>(gh);
        const float bw = det_sigmoidf(row[2]);
        const float bh = det_sigmoidf(row[3]);
        d.score = det_sigmoidf(row[4]);
        int best = 0;
        for (std::size_t c = 1; c < p.num_classes; ++c) {
            if (row[5 + c] > row[5 + static_cast<std::size_t>(best)]) best = static_cast<int>(c);
        }
        d.class_id = best;
        d.x_min = clamp01_keep_special(cx - bw * 0.5f);
        d.y_min = clamp01_keep_special(cy - bh * 0.5f);
        d.x_max = clamp01_keep_special(cx + bw * 0.5f);
        d.y_max = clamp01_keep_special(cy + bh * 0.5f);
        res.raw.push_back(d);
    }
    res.detections = threshold_detections(res.raw, p.score_threshold);
    return res;
}

void Model::record_output_shapes() {
    ShapeRecorder rec;
    Tensor zero(input_shape());
    forward_impl(zero, HookSet{}, &rec);
    for (const auto& e : registry_.entries()) {
        auto it = rec.find(e.layer_id);
        if (it == rec.end()) {
            throw ConfigError("layer " + e.name + " was never executed during shape probe");
        }
        registry_.entry_mut(e.layer_id).output_shape = it->second;
    }
}

// ---------------------------------------------------------------------------
// Persistence.

namespace {

template <typename T>
T get_field(const json& j, const char* name) {
    if (!j.contains(name)) throw FormatError(std::string("missing field: ") + name);
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        throw FormatError(std::string("invalid field: ") + name);
    }
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                           static_cast<char>((v >> 16) & 0xFF),
                           static_cast<char>((v >> 24) & 0xFF)};
    out.write(bytes, 4);
}

std::uint32_t read_u32_le(std::istream& in, const char* field) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    if (!in) throw FormatError(std::string("truncated input reading ") + field);
    return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
           (static_cast<std::uint32_t>(bytes[2]) << 16) |
           (static_cast<std::uint32_t>(bytes[3]) << 24);
}

} // namespace

std::string Model::params_json() const {
    json j;
    j["arch"] = architecture_to_string(arch_);
    j["seed"] = seed_;
    if (arch_ == Architecture::ToyDetr) {
        j["in_channels"] = detr_.in_channels;
        j["image_h"] = detr_.image_h;
        j["image_w"] = detr_.image_w;
        j["backbone_channels"] = detr_.backbone_channels;
        j["embed_dim"] = detr_.embed_dim;
        j["heads"] = detr_.heads;
        j["points"] = detr_.points;
        j["ffn_dim"] = detr_.ffn_dim;
        j["encoders"] = detr_.encoders;
        j["decoders"] = detr_.decoders;
        j["queries"] = detr_.queries;
        j["num_classes"] = detr_.num_classes;
        j["head_gain"] = detr_.head_gain;
        j["score_threshold"] = detr_.score_threshold;
    } else {
        j["in_channels"] = cnn_.in_channels;
        j["image_h"] = cnn_.image_h;
        j["image_w"] = cnn_.image_w;
        j["channels"] = cnn_.channels;
        j["conv_layers"] = cnn_.conv_layers;
        j["num_classes"] = cnn_.num_classes;
        j["head_gain"] = cnn_.head_gain;
        j["score_threshold"] = cnn_.score_threshold;
    }
    return j.dump();
}

void Model::save(std::ostream& out) const {
    out.write(kWeightsMagic, 4);
    write_u32_le(out, kWeightsVersion);
    const std::string params = params_json();
    write_u32_le(out, static_cast<std::uint32_t>(params.size()));
    out.write(params.data(), static_cast<std::streamsize>(params.size()));
    write_u32_le(out, static_cast<std::uint32_t>(registry_.size()));
    for (const auto& e : registry_.entries()) {
        write_u32_le(out, static_cast<std::uint32_t>(e.layer_id));
        const auto& w = weights_.at(e.layer_id);
        write_u32_le(out, static_cast<std::uint32_t>(w.size()));
        for (const auto& t : w) write_tensor(out, t);
    }
}

void Model::save_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open for writing: " + path);
    save(f);
    if (!f) throw FormatError("write failed: " + path);
}

Model Model::load(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kWeightsMagic, 4) != 0) {
        throw FormatError("bad magic: not a weights file");
    }
    const std::uint32_t version = read_u32_le(in, "version");
    if (version != kWeightsVersion) {
        throw VersionError("unsupported weights version " + std::to_string(version) +
                           " (expected " + std::to_string(kWeightsVersion) + ")");
    }
    const std::uint32_t json_len = read_u32_le(in, "params length");
    std::string params(json_len, '\0');
    in.read(params.data(), json_len);
    if (!in) throw FormatError("truncated input reading params json");

    json j;
    try {
        j = json::parse(params);
    } catch (const json::exception& ex) {
        throw FormatError(std::string("unparseable params json: ") + ex.what());
    }
    const std::string arch = get_field<std::string>(j, "arch");
    const std::uint64_t seed = get_field<std::uint64_t>(j, "seed");

    Model m;
    if (arch == "toy-detr") {
        ToyDetrParams p;
        p.in_channels = get_field<std::size_t>(j, "in_channels");
        p.image_h = get_field<std::size_t>(j, "image_h");
        p.image_w = get_field<std::size_t>(j, "image_w");
        p.backbone_channels = get_field<std::vector<std::size_t>>(j, "backbone_channels");
        p.embed_dim = get_field<std::size_t>(j, "embed_dim");
        p.heads = get_field<std::size_t>(j, "heads");
        p.points = get_field<std::size_t>(j, "points");
        p.ffn_dim = get_field<std::size_t>(j, "ffn_dim");
        p.encoders = get_field<std::size_t>(j, "encoders");
        p.decoders = get_field<std::size_t>(j, "decoders");
        p.queries = get_field<std::size_t>(j, "queries");
        p.num_classes = get_field<std::size_t>(j, "num_classes");
        p.head_gain = get_field<float>(j, "head_gain");
        p.score_threshold = get_field<float>(j, "score_threshold");
        m = build_toy_detr(p, seed);
    } else if (arch == "toy-cnn") {
        ToyCnnParams p;
        p.in_channels = get_field<std::size_t>(j, "in_channels");
        p.image_h = get_field<std::size_t>(j, "image_h");
        p.image_w = get_field<std::size_t>(j, "image_w");
        p.channels = get_field<std::size_t>(j, "channels");
        p.conv_layers = get_field<std::size_t>(j, "conv_layers");
        p.num_classes = get_field<std::size_t>(j, "num_classes");
        p.head_gain = get_field<float>(j, "head_gain");
        p.score_threshold = get_field<float>(j, "score_threshold");
        m = build_toy_cnn(p, seed);
    } else {
        throw FormatError("unknown arch: " + arch);
    }

    const std::uint32_t n_layers = read_u32_le(in, "layer count");
    if (n_layers != m.registry_.size()) {
        throw FormatError("layer count " + std::to_string(n_layers) + " does not match " +
                          std::to_string(m.registry_.size()) + " for " + arch);
    }
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        const std::uint32_t id = read_u32_le(in, "layer id");
        if (id != i) throw FormatError("layer id out of order at position " + std::to_string(i));
        const auto& entry = m.registry_.entry(static_cast<int>(id));
        const std::uint32_t n_tensors = read_u32_le(in, "tensor count");
        if (n_tensors != entry.weight_shapes.size()) {
            throw FormatError("tensor count mismatch at layer " + entry.name);
        }
        auto& slot = m.weights_.at(static_cast<int>(id));
        for (std::uint32_t t = 0; t < n_tensors; ++t) {
            Tensor loaded = read_tensor(in);
            if (loaded.shape() != entry.weight_shapes[t]) {
                throw FormatError("tensor shape mismatch at layer " + entry.name + " slot " +
                                  std::to_string(t));
            }
            slot[t] = std::move(loaded);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes after last tensor");
    }
    return m;
}

Model Model::load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    return load(f);
}

std::uint64_t Model::content_hash() const {
    if (!hash_valid_) {
        std::ostringstream os(std::ios::binary);
        save(os);
        hash_cache_ = fnv1a64(os.str());
        hash_valid_ = true;
    }
    return hash_cache_;
}

} // namespace flipshield
