#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "flipshield/errors.hpp"
#include "flipshield/mitigation.hpp"
#include "flipshield/model.hpp"
#include "flipshield/rng.hpp"
#include "flipshield/tensor.hpp"

using namespace flipshield;

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();
const float kNan = std::numeric_limits<float>::quiet_NaN();

/// Independent restriction oracle phrased with min/max instead of branches.
float oracle_restrict(float x, RestrictionRule rule, Bounds b) {
    if (rule == RestrictionRule::ClipToZero) {
        const bool inside = !(x < b.lower) && !(x > b.upper) && !std::isnan(x) && !std::isinf(x);
        return inside ? x : 0.0f;
    }
    if (std::isnan(x)) return 0.0f;
    return std::min(std::max(x, b.lower), b.upper);
}

std::vector<Tensor> random_images(const Model& m, std::uint64_t seed, int n) {
    std::vector<Tensor> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Tensor img(m.input_shape());
        for (float& v : img.values()) v = rng.uniform(-1.0f, 1.0f);
        out.push_back(std::move(img));
    }
    return out;
}

} // namespace

TEST_CASE("restriction rules on hand-picked values") {
    const Bounds b{-1.0f, 2.0f};
    CHECK(restrict_value(0.5f, RestrictionRule::ClipToZero, b) == 0.5f);
    CHECK(restrict_value(5.0f, RestrictionRule::ClipToZero, b) == 0.0f);
    CHECK(restrict_value(-1.5f, RestrictionRule::ClipToZero, b) == 0.0f);
    CHECK(restrict_value(5.0f, RestrictionRule::ClampToBounds, b) == 2.0f);
    CHECK(restrict_value(-1.5f, RestrictionRule::ClampToBounds, b) == -1.0f);
    CHECK(restrict_value(0.5f, RestrictionRule::ClampToBounds, b) == 0.5f);
    // Boundary values pass through untouched under both rules.
    CHECK(restrict_value(2.0f, RestrictionRule::ClipToZero, b) == 2.0f);
    CHECK(restrict_value(-1.0f, RestrictionRule::ClampToBounds, b) == -1.0f);
    // Specials: NaN and infinities never survive.
    CHECK(restrict_value(kNan, RestrictionRule::ClipToZero, b) == 0.0f);
    CHECK(restrict_value(kNan, RestrictionRule::ClampToBounds, b) == 0.0f);
    CHECK(restrict_value(kInf, RestrictionRule::ClipToZero, b) == 0.0f);
    CHECK(restrict_value(-kInf, RestrictionRule::ClipToZero, b) == 0.0f);
    CHECK(restrict_value(kInf, RestrictionRule::ClampToBounds, b) == 2.0f);
    CHECK(restrict_value(-kInf, RestrictionRule::ClampToBounds, b) == -1.0f);
}

TEST_CASE("restriction matches the min/max oracle on a random grid") {
    Rng rng(301);
    for (int i = 0; i < 10000; ++i) {
        float lo = rng.uniform(-100.0f, 100.0f);
        float hi = rng.uniform(-100.0f, 100.0f);
        if (lo > hi) std::swap(lo, hi);
        const Bounds b{lo, hi};
        float x;
        if (i % 100 == 0) {
            x = kNan;
        } else if (i % 100 == 1) {
            x = (i % 200 == 1) ? kInf : -kInf;
        } else {
            x = bits_to_float(static_cast<std::uint32_t>(rng.next_u64()));
        }
        for (RestrictionRule rule : {RestrictionRule::ClipToZero, RestrictionRule::ClampToBounds}) {
            const float got = restrict_value(x, rule, b);
            const float want = oracle_restrict(x, rule, b);
            CHECK(float_to_bits(got) == float_to_bits(want));
            // Idempotence. The one exception: clamp maps NaN to the neutral 0,
            // which re-clamps to the lower bound when 0 lies outside [lo, hi].
            if (rule == RestrictionRule::ClipToZero || !std::isnan(x)) {
                CHECK(float_to_bits(restrict_value(got, rule, b)) == float_to_bits(got));
            }
        }
    }
}

TEST_CASE("bounds profiling agrees with a direct min/max over captured outputs") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const std::vector<Tensor> images = random_images(m, 400, 4);
    const BoundsProfile profile = profile_bounds(m, images, "four random images");

    CHECK(profile.size() == m.registry().size());
    CHECK(profile.sample_count() == 4);
    CHECK(profile.provenance() == "four random images");

    HookSet capture;
    for (const auto& e : m.registry().entries()) capture.capture.insert(e.layer_id);
    std::map<int, Bounds> oracle;
    for (const auto& img : images) {
        const ForwardResult fr = m.forward(img, capture);
        for (const auto& [id, t] : fr.captured) {
            float lo = t.values()[0], hi = t.values()[0];
            for (const float v : t.values()) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            auto [it, fresh] = oracle.try_emplace(id, Bounds{lo, hi});
            if (!fresh) {
                it->second.lower = std::min(it->second.lower, lo);
                it->second.upper = std::max(it->second.upper, hi);
            }
        }
    }
    REQUIRE(oracle.size() == profile.size());
    for (const auto& [id, b] : oracle) {
        CHECK(float_to_bits(profile.at(id).lower) == float_to_bits(b.lower));
        CHECK(float_to_bits(profile.at(id).upper) == float_to_bits(b.upper));
        CHECK(std::isfinite(b.lower));
        CHECK(std::isfinite(b.upper));
    }
}

TEST_CASE("bounds widen monotonically with more profiling images") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const std::vector<Tensor> images = random_images(m, 410, 8);
    const BoundsProfile small =
        profile_bounds(m, {images.begin(), images.begin() + 2}, "first two");
    const BoundsProfile big = profile_bounds(m, images, "all eight");
    for (const auto& e : m.registry().entries()) {
        CHECK(big.at(e.layer_id).lower <= small.at(e.layer_id).lower);
        CHECK(big.at(e.layer_id).upper >= small.at(e.layer_id).upper);
    }
    CHECK_THROWS_AS(profile_bounds(m, {}), ConfigError);
}

TEST_CASE("named policies place rules exactly per the placement table") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const LayerRegistry& reg = m.registry();
    const std::vector<int> acts = reg.ids_of_kind(Kind::Activation);
    const std::vector<int> attn = reg.attention_linear_ids();
    const std::vector<int> softmax = reg.ids_of_kind(Kind::Softmax);
    REQUIRE(acts.size() == 7);  // 3 backbone relus + 4 ffn relus
    REQUIRE(attn.size() == 16); // 4 stages x 4 blocks
    REQUIRE(softmax.size() == 4);

    struct Case {
        PolicyVariant variant;
        RestrictionRule act_rule;
        bool covers_attn;
        RestrictionRule attn_rule;
    };
    const Case table[] = {
        {PolicyVariant::Ranger, RestrictionRule::ClampToBounds, false, {}},
        {PolicyVariant::Clipper, RestrictionRule::ClipToZero, false, {}},
        {PolicyVariant::GlobalRanger, RestrictionRule::ClampToBounds, true,
         RestrictionRule::ClampToBounds},
        {PolicyVariant::GlobalClipper, RestrictionRule::ClipToZero, true,
         RestrictionRule::ClipToZero},
        {PolicyVariant::GlobalHybridClipper, RestrictionRule::ClipToZero, true,
         RestrictionRule::ClampToBounds},
    };
    for (const Case& c : table) {
        const auto placement = resolve_placement(MitigationPolicy::named(c.variant), reg);
        const std::size_t expected = acts.size() + (c.covers_attn ? attn.size() : 0);
        CHECK(placement.size() == expected);
        for (int id : acts) {
            REQUIRE(placement.count(id) == 1);
            CHECK(placement.at(id) == c.act_rule);
        }
        for (int id : attn) {
            CHECK(placement.count(id) == (c.covers_attn ? 1u : 0u));
            if (c.covers_attn) CHECK(placement.at(id) == c.attn_rule);
        }
        for (int id : softmax) CHECK(placement.count(id) == 0); // never protected
    }

    CHECK(resolve_placement(MitigationPolicy{}, reg).empty()); // None
    CHECK_THROWS_AS(MitigationPolicy::named(PolicyVariant::Custom), ConfigError);
}

TEST_CASE("custom placements are validated against the registry") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    MitigationPolicy p;
    p.variant = PolicyVariant::Custom;
    p.label = "probe";
    p.custom[m.registry().ids_of_kind(Kind::Activation)[0]] = RestrictionRule::ClampToBounds;
    CHECK(resolve_placement(p, m.registry()).size() == 1);

    MitigationPolicy unknown = p;
    unknown.custom[424242] = RestrictionRule::ClipToZero;
    CHECK_THROWS_AS(resolve_placement(unknown, m.registry()), PlacementError);

    MitigationPolicy softmaxed = p;
    softmaxed.custom[m.registry().ids_of_kind(Kind::Softmax)[0]] = RestrictionRule::ClipToZero;
    CHECK_THROWS_AS(resolve_placement(softmaxed, m.registry()), PlacementError);
}

TEST_CASE("minimal placement keeps activations and the chosen attention stages") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const LayerRegistry& reg = m.registry();
    const MitigationPolicy p = minimal_placement({Stage::C, Stage::D}, reg);
    CHECK(p.variant == PolicyVariant::Custom);
    CHECK(p.label == "stages-CD");

    const auto placement = resolve_placement(p, reg);
    const std::vector<int> acts = reg.ids_of_kind(Kind::Activation);
    std::set<int> expected(acts.begin(), acts.end());
    for (int id : reg.attention_linear_ids(Stage::C)) expected.insert(id);
    for (int id : reg.attention_linear_ids(Stage::D)) expected.insert(id);
    CHECK(placement.size() == acts.size() + 8); // 2 stages x 4 blocks
    for (int id : expected) REQUIRE(placement.count(id) == 1);
    for (const auto& [id, rule] : placement) CHECK(rule == RestrictionRule::ClipToZero);

    const MitigationPolicy all = minimal_placement({Stage::A, Stage::B, Stage::C, Stage::D}, reg);
    CHECK(all.label == "stages-ABCD");
    CHECK(resolve_placement(all, reg).size() == acts.size() + 16);

    CHECK_THROWS_AS(minimal_placement({}, reg), ConfigError);
}

TEST_CASE("mitigation is transparent on fault-free inputs") {
    // Bounds profiled over the very images being evaluated: every observed
    // value sits inside its own [min, max], so restriction is the identity.
    for (int arch = 0; arch < 2; ++arch) {
        const Model m = arch == 0 ? Model::build_toy_detr(ToyDetrParams{}, 7)
                                  : Model::build_toy_cnn(ToyCnnParams{}, 3);
        const std::vector<Tensor> images = random_images(m, 500 + arch, 3);
        const BoundsProfile bounds = profile_bounds(m, images, "eval split");
        for (PolicyVariant v : {PolicyVariant::Ranger, PolicyVariant::Clipper,
                                PolicyVariant::GlobalRanger, PolicyVariant::GlobalClipper,
                                PolicyVariant::GlobalHybridClipper}) {
            const HookSet hooks = make_mitigation_hooks(MitigationPolicy::named(v), m.registry(),
                                                        bounds);
            for (const Tensor& img : images) {
                const ForwardResult plain = m.forward(img);
                const ForwardResult guarded = m.forward(img, hooks);
                REQUIRE(plain.raw.size() == guarded.raw.size());
                for (std::size_t i = 0; i < plain.raw.size(); ++i) {
                    CHECK(float_to_bits(plain.raw[i].score) ==
                          float_to_bits(guarded.raw[i].score));
                    CHECK(float_to_bits(plain.raw[i].x_min) ==
                          float_to_bits(guarded.raw[i].x_min));
                    CHECK(float_to_bits(plain.raw[i].y_min) ==
                          float_to_bits(guarded.raw[i].y_min));
                    CHECK(float_to_bits(plain.raw[i].x_max) ==
                          float_to_bits(guarded.raw[i].x_max));
                    CHECK(float_to_bits(plain.raw[i].y_max) ==
                          float_to_bits(guarded.raw[i].y_max));
                }
                REQUIRE(plain.trace.entries.size() == guarded.trace.entries.size());
                for (std::size_t i = 0; i < plain.trace.entries.size(); ++i) {
                    CHECK(float_to_bits(plain.trace.entries[i].mean) ==
                          float_to_bits(guarded.trace.entries[i].mean));
                }
            }
        }
    }
}

TEST_CASE("bounds profiles round-trip through JSON via bit patterns") {
    BoundsProfile p;
    p.set(3, "conv0", Bounds{-0.1f, 0.30000001192092896f});
    p.set(9, "ffn_relu", Bounds{0.0f, bits_to_float(0x7F7FFFFFu)}); // max finite
    p.set_provenance("unit test");
    p.set_sample_count(12);

    const std::string text = p.to_json();
    const BoundsProfile q = BoundsProfile::from_json(text);
    CHECK(q.size() == 2);
    CHECK(q.sample_count() == 12);
    CHECK(q.provenance() == "unit test");
    CHECK(float_to_bits(q.at(3).lower) == float_to_bits(-0.1f));
    CHECK(float_to_bits(q.at(9).upper) == 0x7F7FFFFFu);
    CHECK(q.content_hash() == p.content_hash());

    // Hex fields are authoritative: corrupting the decimal view changes nothing.
    std::string tampered = text;
    const auto pos = tampered.find("-0.1");
    REQUIRE(pos != std::string::npos);
    tampered.replace(pos, 4, "-9.9");
    const BoundsProfile r = BoundsProfile::from_json(tampered);
    CHECK(float_to_bits(r.at(3).lower) == float_to_bits(-0.1f));
    CHECK(r.content_hash() == p.content_hash());

    CHECK_THROWS_AS(BoundsProfile::from_json("not json"), FormatError);
    CHECK_THROWS_AS(BoundsProfile::from_json("{\"bounds\": [{\"layer_id\": 1}]}"), FormatError);
}

TEST_CASE("bounds entries are validated when set or fetched") {
    BoundsProfile p;
    CHECK_THROWS_AS(p.set(1, "x", Bounds{kNan, 1.0f}), ConfigError);
    CHECK_THROWS_AS(p.set(1, "x", Bounds{0.0f, kInf}), ConfigError);
    CHECK_THROWS_AS(p.set(1, "x", Bounds{2.0f, 1.0f}), ConfigError);
    CHECK_THROWS_AS(p.at(1), ConfigError);
    p.set(1, "x", Bounds{-1.0f, 1.0f});
    CHECK(p.contains(1));
    CHECK(p.at(1).upper == 1.0f);
}

TEST_CASE("mitigation hooks require a bounds entry for every protected layer") {
    const Model m = Model::build_toy_detr(ToyDetrParams{}, 7);
    const BoundsProfile empty;
    CHECK_THROWS_AS(
        make_mitigation_hooks(MitigationPolicy::named(PolicyVariant::GlobalClipper),
                              m.registry(), empty),
        ConfigError);

    const std::vector<Tensor> images = random_images(m, 600, 2);
    const BoundsProfile bounds = profile_bounds(m, images);
    const HookSet hooks = make_mitigation_hooks(
        MitigationPolicy::named(PolicyVariant::GlobalClipper), m.registry(), bounds);
    CHECK(hooks.mitigation.size() == 23); // 7 activations + 16 attention linears
    CHECK(hooks.fault.empty());
    CHECK(hooks.capture.empty());
}
