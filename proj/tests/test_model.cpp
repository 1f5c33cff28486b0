#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "flipshield/errors.hpp"
#include "flipshield/model.hpp"
#include "flipshield/rng.hpp"
#include "flipshield/tensor.hpp"

using namespace flipshield;

namespace {

Tensor zero_image(const Model& m) {
    return Tensor(m.input_shape());
}

Tensor random_image(const Model& m, std::uint64_t seed) {
    Tensor img(m.input_shape());
    Rng rng(seed);
    for (float& v : img.values()) v = rng.uniform01();
    return img;
}

} // namespace

TEST_CASE("toy detr registry wires four attention linears per block") {
    ToyDetrParams p; // E=2, D=2
    const Model m = Model::build_toy_detr(p, 7);

    std::size_t attention = 0;
    std::map<Stage, int> per_stage;
    int last_id = -1;
    std::set<int> ids;
    for (const auto& e : m.registry().entries()) {
        CHECK(e.layer_id == last_id + 1); // dense, execution-ordered
        last_id = e.layer_id;
        CHECK(ids.insert(e.layer_id).second);
        if (e.kind.kind == Kind::AttentionLinear) {
            ++attention;
            REQUIRE(e.kind.stage.has_value());
            ++per_stage[*e.kind.stage];
        } else {
            CHECK(!e.kind.stage.has_value());
        }
    }
    CHECK(attention == 4 * (p.encoders + p.decoders));
    for (Stage s : {Stage::A, Stage::B, Stage::C, Stage::D}) {
        CHECK(per_stage[s] == static_cast<int>(p.encoders + p.decoders));
    }
    CHECK(m.registry().attention_linear_ids(Stage::D).size() == p.encoders + p.decoders);
    CHECK(m.registry().attention_linear_ids().size() == attention);
}

TEST_CASE("toy detr validates hyperparameters") {
    ToyDetrParams p;
    p.embed_dim = 30; // not divisible by heads=2? 30 is; use heads=4
    p.heads = 4;
    CHECK_THROWS_AS(Model::build_toy_detr(p, 7), ConfigError);
    ToyDetrParams q;
    q.encoders = 0;
    CHECK_THROWS_AS(Model::build_toy_detr(q, 7), ConfigError);
    ToyDetrParams r;
    r.queries = 0;
    CHECK_THROWS_AS(Model::build_toy_detr(r, 7), ConfigError);
}

TEST_CASE("toy cnn registry pairs each conv with an activation") {
    ToyCnnParams p;
    p.conv_layers = 6;
    const Model m = Model::build_toy_cnn(p, 3);
    std::size_t convs = 0;
    const auto& entries = m.registry().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].kind.kind == Kind::Conv) {
            ++convs;
            REQUIRE(i + 1 < entries.size());
            CHECK(entries[i + 1].kind.kind == Kind::Activation);
        }
    }
    CHECK(convs == 6);
    CHECK(m.registry().attention_linear_ids().empty());
}

TEST_CASE("same seed rebuilds bit-identical weights, different seed differs") {
    const Model a = Model::build_toy_detr(ToyDetrParams{}, 7);
    const Model b = Model::build_toy_detr(ToyDetrParams{}, 7);
    CHECK(a.content_hash() == b.content_hash());
    for (const auto& e : a.registry().entries()) {
        const auto& wa = a.weights(e.layer_id);
        const auto& wb = b.weights(e.layer_id);
        REQUIRE(wa.size() == wb.size());
        for (std::size_t i = 0; i < wa.size(); ++i) CHECK(bits_equal(wa[i], wb[i]));
    }
    const Model c = Model::build_toy_detr(ToyDetrParams{}, 8);
    CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("forward on a zero image yields the configured detection count, finite") {
    const Model detr = Model::build_toy_detr(ToyDetrParams{}, 7);
    const ForwardResult r = detr.forward(zero_image(detr));
    CHECK(r.raw.size() == ToyDetrParams{}.queries);
    for (const auto& d : r.raw) {
        CHECK(d.finite());
        CHECK(d.x_min <= d.x_max);
        CHECK(d.y_min <= d.y_max);
        CHECK(d.score >= 0.0f);
        CHECK(d.score <= 1.0f);
    }
    CHECK(r.trace.entries.size() == detr.registry().size());

    const Model cnn = Model::build_toy_cnn(ToyCnnParams{}, 3);
    const ForwardResult rc = cnn.forward(zero_image(cnn));
    CHECK(!rc.raw.empty());
    for (const auto& d : rc.raw) CHECK(d.finite());
}

TEST_CASE("forward is bit-deterministic and trace covers layers in order") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const Tensor img = random_image(m, 5);
    const ForwardResult a = m.forward(img);
    const ForwardResult b = m.forward(img);
    REQUIRE(a.raw.size() == b.raw.size());
    for (std::size_t i = 0; i < a.raw.size(); ++i) {
        CHECK(float_to_bits(a.raw[i].score) == float_to_bits(b.raw[i].score));
        CHECK(float_to_bits(a.raw[i].x_min) == float_to_bits(b.raw[i].x_min));
        CHECK(a.raw[i].class_id == b.raw[i].class_id);
    }
    int prev = -1;
    for (std::size_t i = 0; i < a.trace.entries.size(); ++i) {
        CHECK(a.trace.entries[i].layer_id > prev); // strictly increasing = execution order
        prev = a.trace.entries[i].layer_id;
        CHECK(float_to_bits(a.trace.entries[i].mean) == float_to_bits(b.trace.entries[i].mean));
    }
}

TEST_CASE("trace statistics match a direct recomputation on captured output") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const Tensor img = random_image(m, 9);
    const int target = m.registry().attention_linear_ids(Stage::C)[0];
    HookSet hooks;
    hooks.capture.insert(target);
    const ForwardResult r = m.forward(img, hooks);
    REQUIRE(r.captured.count(target) == 1);
    const Tensor& out = r.captured.at(target);

    double sum = 0.0;
    for (float v : out.values()) sum += v;
    const double mean = sum / static_cast<double>(out.size());
    double var = 0.0;
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (float v : out.values()) {
        var += (v - mean) * (v - mean);
        lo = v < lo ? v : lo;
        hi = v > hi ? v : hi;
    }
    var /= static_cast<double>(out.size());

    const TraceEntry& e = r.trace.for_layer(target);
    CHECK(e.mean == doctest::Approx(mean).epsilon(1e-5));
    CHECK(e.variance == doctest::Approx(var).epsilon(1e-4));
    CHECK(e.min == lo);
    CHECK(e.max == hi);
    CHECK(e.all_finite);
}

TEST_CASE("hooks fire in fault, mitigation, trace order") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const Tensor img = random_image(m, 11);
    const int target = m.registry().attention_linear_ids(Stage::D)[0];

    // Golden value of element 0 at the target layer.
    HookSet capture_only;
    capture_only.capture.insert(target);
    const float golden0 = m.forward(img, capture_only).captured.at(target).values()[0];

    // Fault writes a sentinel; mitigation sees the faulted value (not golden);
    // trace sees the mitigated value.
    HookSet hooks;
    float seen_by_mitigation = 0.0f;
    hooks.fault[target] = [](Tensor& t) { t.values()[0] = 1.0e9f; };
    hooks.mitigation[target] = [&](Tensor& t) {
        seen_by_mitigation = t.values()[0];
        t.values()[0] = 2.0f;
    };
    hooks.capture.insert(target);
    const ForwardResult r = m.forward(img, hooks);
    CHECK(seen_by_mitigation == 1.0e9f);
    CHECK(r.captured.at(target).values()[0] == 2.0f);
    CHECK(golden0 != 1.0e9f);
    // The trace max reflects the mitigated tensor, not the faulted one.
    CHECK(r.trace.for_layer(target).max < 1.0e9f);
}

TEST_CASE("hook on an unknown layer id is a configuration error") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    HookSet hooks;
    hooks.fault[9999] = [](Tensor&) {};
    CHECK_THROWS_AS(m.forward(zero_image(m), hooks), ConfigError);
    HookSet h2;
    h2.mitigation[-1] = [](Tensor&) {};
    CHECK_THROWS_AS(m.forward(zero_image(m), h2), ConfigError);
    HookSet h3;
    h3.capture.insert(12345);
    CHECK_THROWS_AS(m.forward(zero_image(m), h3), ConfigError);
}

TEST_CASE("a mid-network fault changes downstream trace means only") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const Tensor img = random_image(m, 13);
    const LayerTrace golden = m.forward(img).trace;

    const int target = m.registry().attention_linear_ids(Stage::C)[1];
    HookSet hooks;
    hooks.fault[target] = [](Tensor& t) {
        for (float& v : t.values()) v += 50.0f;
    };
    const LayerTrace faulty = m.forward(img, hooks).trace;

    bool upstream_equal = true, downstream_differs = false;
    for (std::size_t i = 0; i < golden.entries.size(); ++i) {
        const bool same =
            float_to_bits(golden.entries[i].mean) == float_to_bits(faulty.entries[i].mean);
        if (golden.entries[i].layer_id < target && !same) upstream_equal = false;
        if (golden.entries[i].layer_id >= target && !same) downstream_differs = true;
    }
    CHECK(upstream_equal);
    CHECK(downstream_differs);
}

TEST_CASE("detection threshold filters raw outputs") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const ForwardResult r = m.forward(random_image(m, 17));
    for (const auto& d : r.detections) CHECK(d.score >= m.score_threshold());
    CHECK(r.detections.size() ==
          threshold_detections(r.raw, m.score_threshold()).size());
    CHECK(r.detections.size() <= r.raw.size());
}

TEST_CASE("save/load roundtrips weights and behavior bit-exactly") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 21);
    std::stringstream ss;
    m.save(ss);
    const Model back = Model::load(ss);
    CHECK(back.content_hash() == m.content_hash());
    CHECK(back.registry().size() == m.registry().size());

    const Tensor img = random_image(m, 19);
    const ForwardResult a = m.forward(img);
    const ForwardResult b = back.forward(img);
    for (std::size_t i = 0; i < a.raw.size(); ++i) {
        CHECK(float_to_bits(a.raw[i].score) == float_to_bits(b.raw[i].score));
    }

    const Model cnn = Model::build_toy_cnn(ToyCnnParams{}, 4);
    std::stringstream sc;
    cnn.save(sc);
    CHECK(Model::load(sc).content_hash() == cnn.content_hash());
}

TEST_CASE("load rejects corrupt or mismatched files naming the field") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    std::stringstream ss;
    m.save(ss);
    const std::string bytes = ss.str();

    // Bad magic.
    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream s1(bad);
    CHECK_THROWS_AS(Model::load(s1), FormatError);

    // Unsupported version.
    std::string vbad = bytes;
    vbad[4] = 99;
    std::stringstream s2(vbad);
    CHECK_THROWS_AS(Model::load(s2), VersionError);

    // Truncation.
    std::stringstream s3(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(Model::load(s3), FormatError);

    // Trailing garbage.
    std::stringstream s4(bytes + "extra");
    CHECK_THROWS_AS(Model::load(s4), FormatError);
}

TEST_CASE("content hash tracks weight mutation") {
    Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const std::uint64_t before = m.content_hash();
    const int target = m.registry().attention_linear_ids(Stage::A)[0];
    auto& w = m.weights_mut(target);
    REQUIRE(!w.empty());
    REQUIRE(w[0].size() > 0);
    const float orig = w[0].values()[0];
    w[0].values()[0] = orig + 1.0f;
    CHECK(m.content_hash() != before);
    m.weights_mut(target)[0].values()[0] = orig;
    CHECK(m.content_hash() == before);
}

TEST_CASE("input shape mismatch is a dimension error") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const Tensor wrong({3, 16, 16}, std::vector<float>(3 * 16 * 16, 0.0f));
    CHECK_THROWS_AS(m.forward(wrong), DimensionError);
}
