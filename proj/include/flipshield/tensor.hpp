#ifndef FLIPSHIELD_TENSOR_HPP
#define FLIPSHIELD_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "flipshield/errors.hpp"

namespace flipshield {

/// Dense n-dimensional array of binary32 values, row-major.
///
/// The sole numeric carrier of the toolkit. All arithmetic on it is
/// single-threaded with a fixed accumulation order, so a computation
/// repeated on equal inputs yields bit-identical outputs. NaN and Inf are
/// ordinary states, never errors.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape);

    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor full(std::vector<std::size_t> shape, float value);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](std::size_t flat) { return data_[flat]; }
    float operator[](std::size_t flat) const { return data_[flat]; }

    float& at(std::size_t flat);
    float at(std::size_t flat) const;

    /// Flat offset of a multi-dimensional index (row-major).
    std::size_t offset(std::span<const std::size_t> index) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

std::size_t shape_product(std::span<const std::size_t> shape);
std::string shape_to_string(std::span<const std::size_t> shape);

/// True when the two tensors agree in shape and every element is
/// bit-identical (NaN payloads included).
bool bits_equal(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Bit-level element access (IEEE 754 binary32 <-> u32 transcription).

std::uint32_t float_to_bits(float value);
float bits_to_float(std::uint32_t pattern);

/// 32-bit pattern of element `flat_index`. Throws RangeError when out of range.
std::uint32_t element_bits(const Tensor& t, std::size_t flat_index);

/// Overwrites element `flat_index` with the exact bit pattern, no rounding.
void set_element_bits(Tensor& t, std::size_t flat_index, std::uint32_t pattern);

// ---------------------------------------------------------------------------
// Deterministic elementary functions.
//
// libm transcendentals are not bit-identical across platforms, so the few
// the models need are implemented here with fixed float arithmetic.

/// exp(x) for binary32, accurate to ~1 ulp over the finite range, bit-stable
/// across IEEE platforms. exp(-Inf)=0, exp(+Inf)=Inf, NaN propagates.
float det_expf(float x);

/// 1 / (1 + exp(-x)) built on det_expf. NaN propagates; +/-Inf map to 1/0.
float det_sigmoidf(float x);

// ---------------------------------------------------------------------------
// Operations. Accumulations run in ascending index order; no op reorders
// floating-point sums.

/// [M x K] * [K x N] -> [M x N]. Throws DimensionError on mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of input [C x H x W] with kernels [F x C x k x k],
/// zero padding, H' = floor((H + 2p - k) / stride) + 1. No kernel flip.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t padding);

/// max(0, x) elementwise; NaN propagates.
Tensor relu(const Tensor& x);

/// Numerically stabilized softmax along `axis` (subtract the slice max).
Tensor softmax(const Tensor& x, std::size_t axis);

/// Layer normalization over the last axis with learned scale/shift.
/// gamma/beta are 1-d of that axis length; eps must be > 0.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, float s);

/// Adds `bias` (length D) to every row of `mat` ([N x D]).
Tensor add_rowwise(const Tensor& mat, const Tensor& bias);

/// Same data, new shape; element count must match.
Tensor reshape(const Tensor& t, std::vector<std::size_t> shape);

/// Axis permutation; `perm` must be a permutation of 0..rank-1.
Tensor transpose(const Tensor& t, std::span<const std::size_t> perm);

/// 2-d transpose shorthand.
Tensor transpose2d(const Tensor& t);

// ---------------------------------------------------------------------------
// Serialization: u32 rank, u32 dims, then raw binary32 payload, all
// little-endian. Documented byte-exactly in docs/formats.md.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
std::vector<std::uint8_t> tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(std::span<const std::uint8_t> bytes);

} // namespace flipshield

#endif // FLIPSHIELD_TENSOR_HPP
