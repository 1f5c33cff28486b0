#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <vector>

#include "flipshield/errors.hpp"
#include "flipshield/rng.hpp"
#include "flipshield/tensor.hpp"

using namespace flipshield;

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();
constexpr float kNan = std::numeric_limits<float>::quiet_NaN();

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, float lo = -2.0f,
                     float hi = 2.0f) {
    Tensor t(std::move(shape));
    for (float& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

/// Independent i,j,k oracle with the same ascending-k accumulation contract.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (std::size_t kk = 0; kk < k; ++kk) {
                acc += a.values()[i * k + kk] * b.values()[kk * n + j];
            }
            out.values()[i * n + j] = acc;
        }
    }
    return out;
}

/// Direct six-nested-loop cross-correlation with zero padding.
Tensor conv2d_oracle(const Tensor& input, const Tensor& kernels, std::size_t stride,
                     std::size_t padding) {
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t f = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor out({f, oh, ow});
    for (std::size_t fi = 0; fi < f; ++fi) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                float acc = 0.0f;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long iy = static_cast<long>(oy * stride + ky) -
                                            static_cast<long>(padding);
                            const long ix = static_cast<long>(ox * stride + kx) -
                                            static_cast<long>(padding);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                ix >= static_cast<long>(w)) {
                                continue;
                            }
                            acc += input.values()[(ci * h + iy) * w + ix] *
                                   kernels.values()[((fi * input.dim(0) + ci) * kh + ky) * kw +
                                                    kx];
                        }
                    }
                }
                out.values()[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return out;
}

} // namespace

TEST_CASE("matmul matches hand examples") {
    const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(1);
    const Tensor a = random_tensor({3, 3}, rng);
    CHECK(bits_equal(matmul(eye, a), a));

    const Tensor b({2, 2}, {1, 2, 3, 4});
    const Tensor ones({2, 1}, {1, 1});
    const Tensor prod = matmul(b, ones);
    CHECK(prod.values()[0] == 3.0f);
    CHECK(prod.values()[1] == 7.0f);
}

TEST_CASE("matmul propagates infinities per binary32 rules") {
    const Tensor inf_row({1, 2}, {kInf, kInf});
    const Tensor pos({2, 1}, {1.0f, 2.0f});
    CHECK(matmul(inf_row, pos).values()[0] == kInf);
    // Inf * 0 inside the accumulation yields NaN.
    const Tensor with_zero({2, 1}, {0.0f, 1.0f});
    CHECK(std::isnan(matmul(inf_row, with_zero).values()[0]));
}

TEST_CASE("matmul agrees with the ascending-k oracle bit-exactly") {
    Rng rng(17);
    for (int round = 0; round < 20; ++round) {
        const std::size_t m = 1 + rng.uniform_index(6);
        const std::size_t k = 1 + rng.uniform_index(6);
        const std::size_t n = 1 + rng.uniform_index(6);
        const Tensor a = random_tensor({m, k}, rng);
        const Tensor b = random_tensor({k, n}, rng);
        CHECK(bits_equal(matmul(a, b), matmul_oracle(a, b)));
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
    const Tensor a({2, 3}, std::vector<float>(6, 0.0f));
    const Tensor b({2, 2}, std::vector<float>(4, 0.0f));
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    const Tensor r1({4}, std::vector<float>(4, 0.0f));
    CHECK_THROWS_AS(matmul(r1, b), DimensionError);
}

TEST_CASE("conv2d identity and all-ones examples") {
    Rng rng(3);
    const Tensor img = random_tensor({1, 4, 4}, rng);
    const Tensor unit({1, 1, 1, 1}, {1.0f});
    CHECK(bits_equal(conv2d(img, unit, 1, 0), img));

    const Tensor ones_img({1, 3, 3}, std::vector<float>(9, 1.0f));
    const Tensor ones_k({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
    const Tensor out = conv2d(ones_img, ones_k, 1, 0);
    CHECK(out.shape() == std::vector<std::size_t>{1, 1, 1});
    CHECK(out.values()[0] == 9.0f);
}

TEST_CASE("conv2d agrees with the naive loop oracle bit-exactly") {
    Rng rng(23);
    for (int round = 0; round < 12; ++round) {
        const std::size_t c = 1 + rng.uniform_index(3);
        const std::size_t h = 3 + rng.uniform_index(6); // up to 8x8
        const std::size_t w = 3 + rng.uniform_index(6);
        const std::size_t f = 1 + rng.uniform_index(3);
        const std::size_t k = 1 + rng.uniform_index(3);
        const std::size_t stride = 1 + rng.uniform_index(2);
        const std::size_t padding = rng.uniform_index(2);
        const Tensor input = random_tensor({c, h, w}, rng);
        const Tensor kernels = random_tensor({f, c, k, k}, rng);
        CHECK(bits_equal(conv2d(input, kernels, stride, padding),
                         conv2d_oracle(input, kernels, stride, padding)));
    }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
    const Tensor img({1, 3, 3}, std::vector<float>(9, 0.0f));
    const Tensor big({1, 1, 5, 5}, std::vector<float>(25, 0.0f));
    CHECK_THROWS_AS(conv2d(img, big, 1, 0), DimensionError);
    CHECK_NOTHROW(conv2d(img, big, 1, 1)); // 3 + 2*1 = 5 fits exactly
}

TEST_CASE("relu clamps negatives and propagates NaN") {
    const Tensor x({3}, {-1.0f, 0.0f, 2.0f});
    const Tensor y = relu(x);
    CHECK(y.values()[0] == 0.0f);
    CHECK(y.values()[1] == 0.0f);
    CHECK(y.values()[2] == 2.0f);
    const Tensor n({2}, {kNan, -kInf});
    CHECK(std::isnan(relu(n).values()[0]));
    CHECK(relu(n).values()[1] == 0.0f);
}

TEST_CASE("softmax handles symmetry and large inputs without overflow") {
    const Tensor sym({1, 2}, {0.0f, 0.0f});
    const Tensor s = softmax(sym, 1);
    CHECK(s.values()[0] == 0.5f);
    CHECK(s.values()[1] == 0.5f);

    const Tensor big({1, 2}, {1000.0f, 0.0f});
    const Tensor sb = softmax(big, 1);
    CHECK(sb.values()[0] == 1.0f);
    CHECK(sb.values()[1] == 0.0f);
}

TEST_CASE("softmax rows sum to 1 and stay in [0, 1]") {
    Rng rng(31);
    const Tensor x = random_tensor({5, 7}, rng, -30.0f, 30.0f);
    const Tensor s = softmax(x, 1);
    for (std::size_t i = 0; i < 5; ++i) {
        float sum = 0.0f;
        for (std::size_t j = 0; j < 7; ++j) {
            const float v = s.values()[i * 7 + j];
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
    }
    CHECK_THROWS_AS(softmax(x, 2), DimensionError);
}

TEST_CASE("layernorm normalizes the last axis") {
    const Tensor x({2, 4}, {1, 2, 3, 4, -1, -1, -1, -1});
    const Tensor gamma({4}, {1, 1, 1, 1});
    const Tensor beta({4}, {0, 0, 0, 0});
    const Tensor y = layernorm(x, gamma, beta, 1e-5f);
    // Row mean ~0, unit variance ordering preserved.
    float mean = 0.0f;
    for (std::size_t j = 0; j < 4; ++j) mean += y.values()[j];
    CHECK(std::fabs(mean / 4.0f) < 1e-6f);
    CHECK(y.values()[0] < y.values()[1]);
    // Constant row maps to beta.
    for (std::size_t j = 4; j < 8; ++j) CHECK(y.values()[j] == 0.0f);

    CHECK_THROWS_AS(layernorm(x, gamma, beta, 0.0f), ConfigError);
    const Tensor bad_gamma({3}, {1, 1, 1});
    CHECK_THROWS_AS(layernorm(x, bad_gamma, beta, 1e-5f), DimensionError);
}

TEST_CASE("element bit access matches reference patterns") {
    Tensor t({3}, {1.0f, 0.0f, -2.0f});
    CHECK(element_bits(t, 0) == 0x3F800000u);
    CHECK(element_bits(t, 1) == 0x00000000u);
    CHECK(element_bits(t, 2) == 0xC0000000u);
    set_element_bits(t, 1, 0x7F800000u);
    CHECK(t.values()[1] == kInf);
    CHECK_THROWS_AS(element_bits(t, 3), RangeError);
    CHECK_THROWS_AS(set_element_bits(t, 3, 0), RangeError);
}

TEST_CASE("element bit roundtrip is the identity on random patterns") {
    Rng rng(91);
    Tensor t({1}, {0.0f});
    int nan_count = 0, inf_count = 0;
    for (int i = 0; i < 120000; ++i) {
        std::uint32_t pattern = static_cast<std::uint32_t>(rng.next_u64());
        if (i % 1000 == 0) pattern = 0x7FC00000u | (pattern & 0x003FFFFFu); // NaN payloads
        if (i % 1000 == 1) pattern = (pattern & 0x80000000u) | 0x7F800000u; // +/-Inf
        set_element_bits(t, 0, pattern);
        CHECK(element_bits(t, 0) == pattern);
        nan_count += std::isnan(t.values()[0]);
        inf_count += std::isinf(t.values()[0]);
    }
    CHECK(nan_count >= 120);
    CHECK(inf_count >= 120);
}

TEST_CASE("float bit transcription is exact both ways") {
    CHECK(float_to_bits(1.0f) == 0x3F800000u);
    CHECK(bits_to_float(0x3F800000u) == 1.0f);
    CHECK(float_to_bits(bits_to_float(0x7FC01234u)) == 0x7FC01234u);
}

TEST_CASE("det_expf tracks the reference exp closely on the finite range") {
    Rng rng(47);
    for (int i = 0; i < 20000; ++i) {
        const float x = rng.uniform(-80.0f, 80.0f);
        const double ref = std::exp(static_cast<double>(x));
        const float got = det_expf(x);
        if (ref > std::numeric_limits<float>::max()) {
            CHECK(got == kInf);
        } else {
            CHECK(std::fabs(static_cast<double>(got) - ref) <=
                  2e-6 * std::max(1.0, std::fabs(ref)));
        }
    }
    CHECK(det_expf(0.0f) == 1.0f);
    CHECK(det_expf(-kInf) == 0.0f);
    CHECK(det_expf(kInf) == kInf);
    CHECK(std::isnan(det_expf(kNan)));
    CHECK(det_expf(-200.0f) == 0.0f);
    CHECK(det_expf(200.0f) == kInf);
}

TEST_CASE("det_sigmoidf stays in [0, 1] and handles specials") {
    Rng rng(53);
    for (int i = 0; i < 20000; ++i) {
        const float x = rng.uniform(-50.0f, 50.0f);
        const float s = det_sigmoidf(x);
        CHECK(s >= 0.0f);
        CHECK(s <= 1.0f);
        const double ref = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
        CHECK(std::fabs(static_cast<double>(s) - ref) <= 3e-6);
    }
    CHECK(det_sigmoidf(0.0f) == 0.5f);
    CHECK(det_sigmoidf(kInf) == 1.0f);
    CHECK(det_sigmoidf(-kInf) == 0.0f);
    CHECK(std::isnan(det_sigmoidf(kNan)));
}

TEST_CASE("ops are deterministic across repeated evaluation") {
    Rng rng(61);
    const Tensor a = random_tensor({6, 5}, rng);
    const Tensor b = random_tensor({5, 4}, rng);
    CHECK(bits_equal(matmul(a, b), matmul(a, b)));
    const Tensor img = random_tensor({2, 8, 8}, rng);
    const Tensor k = random_tensor({3, 2, 3, 3}, rng);
    CHECK(bits_equal(conv2d(img, k, 2, 1), conv2d(img, k, 2, 1)));
    CHECK(bits_equal(softmax(a, 1), softmax(a, 1)));
}

TEST_CASE("elementwise and shape ops behave") {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor b({2, 2}, {10, 20, 30, 40});
    CHECK(add(a, b).values()[3] == 44.0f);
    CHECK(mul(a, b).values()[2] == 90.0f);
    CHECK(scalar_mul(a, 2.0f).values()[1] == 4.0f);
    const Tensor bias({2}, {100, 200});
    const Tensor rw = add_rowwise(a, bias);
    CHECK(rw.values()[0] == 101.0f);
    CHECK(rw.values()[3] == 204.0f);
    CHECK_THROWS_AS(add(a, Tensor({3}, {0, 0, 0})), DimensionError);

    const Tensor r = reshape(a, {4});
    CHECK(r.shape() == std::vector<std::size_t>{4});
    CHECK_THROWS_AS(reshape(a, {5}), DimensionError);

    const Tensor t = transpose2d(a);
    CHECK(t.values()[1] == 3.0f);
    CHECK(t.values()[2] == 2.0f);
    const std::vector<std::size_t> bad_perm{0, 0};
    CHECK_THROWS_AS(transpose(a, bad_perm), DimensionError);
}

TEST_CASE("tensor serialization roundtrips bit-exactly, NaN payloads included") {
    Tensor t({2, 3}, {1.5f, -0.0f, kInf, -kInf, 0.0f, 3.25f});
    set_element_bits(t, 4, 0x7FC01234u); // NaN with payload
    std::stringstream ss;
    write_tensor(ss, t);
    const Tensor back = read_tensor(ss);
    CHECK(bits_equal(t, back));

    const std::vector<std::uint8_t> bytes = tensor_to_bytes(t);
    CHECK(bits_equal(tensor_from_bytes(bytes), t));

    // Truncation anywhere is a format error naming the field.
    for (std::size_t cut : {std::size_t{2}, std::size_t{6}, bytes.size() - 3}) {
        const std::vector<std::uint8_t> partial(bytes.begin(), bytes.begin() + cut);
        CHECK_THROWS_AS(tensor_from_bytes(partial), FormatError);
    }
}
