#include "flipshield/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <utility>

namespace flipshield {

std::size_t shape_product(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(std::span<const std::size_t> shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::full(std::vector<std::size_t> shape, float value) {
    Tensor t(std::move(shape));
    for (float& v : t.data_) v = value;
    return t;
}

float& Tensor::at(std::size_t flat) {
    if (flat >= data_.size()) {
        throw RangeError("flat index " + std::to_string(flat) + " out of range for " +
                         std::to_string(data_.size()) + " elements");
    }
    return data_[flat];
}

float Tensor::at(std::size_t flat) const {
    if (flat >= data_.size()) {
        throw RangeError("flat index " + std::to_string(flat) + " out of range for " +
                         std::to_string(data_.size()) + " elements");
    }
    return data_[flat];
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) {
        throw DimensionError("index rank " + std::to_string(index.size()) +
                             " does not match tensor rank " + std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= shape_[i]) {
            throw RangeError("index " + std::to_string(index[i]) + " out of range on axis " +
                             std::to_string(i));
        }
        off = off * shape_[i] + index[i];
    }
    return off;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (float_to_bits(a[i]) != float_to_bits(b[i])) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------

std::uint32_t float_to_bits(float value) { return std::bit_cast<std::uint32_t>(value); }

float bits_to_float(std::uint32_t pattern) { return std::bit_cast<float>(pattern); }

std::uint32_t element_bits(const Tensor& t, std::size_t flat_index) {
    return float_to_bits(t.at(flat_index));
}

void set_element_bits(Tensor& t, std::size_t flat_index, std::uint32_t pattern) {
    t.at(flat_index) = bits_to_float(pattern);
}

// ---------------------------------------------------------------------------

float det_expf(float x) {
    if (std::isnan(x)) return x;
    if (x > 88.722839f) return std::numeric_limits<float>::infinity();
    if (x < -103.972084f) return 0.0f;

    // x = k*ln2 + r with |r| <= 0.3466; split constant keeps r exact.
    const float log2e = 1.44269504f;
    const float ln2_hi = 0.693359375f;
    const float ln2_lo = -2.12194440e-4f;
    float k = std::floor(x * log2e + 0.5f);
    float r = (x - k * ln2_hi) - k * ln2_lo;

    // Degree-6 Taylor of exp(r), Horner order fixed.
    float p = 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;

    // Scale by 2^k through exponent-field construction; k in [-150, 128].
    int ki = static_cast<int>(k);
    if (ki >= 128) {
        // At most one doubling past the representable exponent.
        return (p * bits_to_float((127 + 127) << 23)) * bits_to_float((127 + (ki - 127)) << 23);
    }
    if (ki <= -127) {
        // Subnormal range: two-step scale keeps each factor representable.
        return (p * bits_to_float((127 - 100) << 23)) *
               bits_to_float(static_cast<std::uint32_t>(127 + (ki + 100)) << 23);
    }
    return p * bits_to_float(static_cast<std::uint32_t>(127 + ki) << 23);
}

float det_sigmoidf(float x) {
    if (std::isnan(x)) return x;
    return 1.0f / (1.0f + det_expf(-x));
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul expects rank-2 tensors, got " +
                             shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner dimensions disagree: " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
    const std::size_t n = b.dim(1);
    Tensor out({m, n});
    const float* ap = a.data();
    const float* bp = b.data();
    float* op = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (std::size_t kk = 0; kk < k; ++kk) {
                acc += ap[i * k + kk] * bp[kk * n + j];
            }
            op[i * n + j] = acc;
        }
    }
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t padding) {
    if (input.rank() != 3 || kernels.rank() != 4) {
        throw DimensionError("conv2d expects input [C,H,W] and kernels [F,C,k,k], got " +
                             shape_to_string(input.shape()) + " and " +
                             shape_to_string(kernels.shape()));
    }
    if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t f = kernels.dim(0), kc = kernels.dim(1);
    const std::size_t kh = kernels.dim(2), kw = kernels.dim(3);
    if (kc != c) {
        throw DimensionError("conv2d channel mismatch: input has " + std::to_string(c) +
                             ", kernels expect " + std::to_string(kc));
    }
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw DimensionError("conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than padded input");
    }
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor out({f, oh, ow});
    const float* in = input.data();
    const float* kn = kernels.data();
    float* op = out.data();
    for (std::size_t fi = 0; fi < f; ++fi) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                float acc = 0.0f;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            acc += in[(ci * h + static_cast<std::size_t>(iy)) * w +
                                      static_cast<std::size_t>(ix)] *
                                   kn[((fi * c + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                op[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (float& v : out.values()) {
        if (!(v > 0.0f) && !std::isnan(v)) v = 0.0f;
    }
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(x.rank()));
    }
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];

    Tensor out(x.shape());
    const float* in = x.data();
    float* op = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * n * inner + j;
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                const float v = in[base + i * inner];
                if (v > mx) mx = v;
            }
            float sum = 0.0f;
            for (std::size_t i = 0; i < n; ++i) {
                const float e = det_expf(in[base + i * inner] - mx);
                op[base + i * inner] = e;
                sum += e;
            }
            for (std::size_t i = 0; i < n; ++i) {
                op[base + i * inner] /= sum;
            }
        }
    }
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (!(eps > 0.0f)) throw ConfigError("layernorm eps must be > 0");
    if (x.rank() < 1) throw DimensionError("layernorm needs rank >= 1");
    const std::size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d) {
        throw DimensionError("layernorm gamma/beta length must equal last axis " +
                             std::to_string(d));
    }
    const std::size_t rows = x.size() / d;
    Tensor out(x.shape());
    const float* in = x.data();
    const float* g = gamma.data();
    const float* b = beta.data();
    float* op = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = in + r * d;
        float mean = 0.0f;
        for (std::size_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t i = 0; i < d; ++i) {
            const float dv = row[i] - mean;
            var += dv * dv;
        }
        var /= static_cast<float>(d);
        const float inv = 1.0f / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) {
            op[r * d + i] = g[i] * ((row[i] - mean) * inv) + b[i];
        }
    }
    return out;
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
}
} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor scalar_mul(const Tensor& a, float s) {
    Tensor out = a;
    for (float& v : out.values()) v *= s;
    return out;
}

Tensor add_rowwise(const Tensor& mat, const Tensor& bias) {
    if (mat.rank() != 2 || bias.rank() != 1 || bias.dim(0) != mat.dim(1)) {
        throw DimensionError("add_rowwise expects [N,D] and [D], got " +
                             shape_to_string(mat.shape()) + " and " +
                             shape_to_string(bias.shape()));
    }
    Tensor out = mat;
    const std::size_t n = mat.dim(0), d = mat.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias[j];
    }
    return out;
}

Tensor reshape(const Tensor& t, std::vector<std::size_t> shape) {
    if (shape_product(shape) != t.size()) {
        throw DimensionError("reshape to " + shape_to_string(shape) + " changes element count");
    }
    return Tensor(std::move(shape), std::vector<float>(t.values().begin(), t.values().end()));
}

Tensor transpose(const Tensor& t, std::span<const std::size_t> perm) {
    const std::size_t r = t.rank();
    if (perm.size() != r) throw DimensionError("transpose perm rank mismatch");
    std::vector<bool> seen(r, false);
    for (std::size_t p : perm) {
        if (p >= r || seen[p]) throw DimensionError("transpose perm is not a permutation");
        seen[p] = true;
    }
    std::vector<std::size_t> out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = t.dim(perm[i]);
    Tensor out(out_shape);

    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * t.dim(i);

    std::vector<std::size_t> idx(r, 0);
    const std::size_t n = t.size();
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
        out[flat] = t[src];
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

Tensor transpose2d(const Tensor& t) {
    const std::size_t perm[] = {1, 0};
    return transpose(t, perm);
}

// ---------------------------------------------------------------------------

namespace {

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

void write_tensor(std::ostream& out, const Tensor& t) {
    write_u32_le(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32_le(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) write_u32_le(out, float_to_bits(t[i]));
}

Tensor read_tensor(std::istream& in) {
    const std::uint32_t rank = read_u32_le(in, "tensor rank");
    if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " implausible");
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = read_u32_le(in, "tensor dim");
    const std::size_t n = shape_product(shape);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = bits_to_float(read_u32_le(in, "tensor payload"));
    return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> tensor_to_bytes(const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    const std::string s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

Tensor tensor_from_bytes(std::span<const std::uint8_t> bytes) {
    std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    return read_tensor(is);
}

} // namespace flipshield
