#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "smmini/tensor.hpp"

namespace smmini {

enum class QuantMode : std::uint8_t {
    absmax_int4 = 0,
    nf4 = 1,
};

std::string_view to_string(QuantMode mode) noexcept;
QuantMode parse_quant_mode(std::string_view text);

inline constexpr std::size_t kDefaultBlockSize = 64;

/// Code stored for a value of exactly zero in absmax mode (levels -7..7 offset by 7).
inline constexpr std::uint8_t kAbsmaxZeroCode = 7;
/// Reserved in absmax mode; never produced by the quantizer.
inline constexpr std::uint8_t kAbsmaxReservedCode = 15;
/// NF4 has no exact zero level; all-zero blocks store the smallest positive level.
inline constexpr std::uint8_t kNf4ZeroCode = 8;

/// Sixteen normal-quantile levels in [-1, 1], strictly increasing and exactly
/// symmetric: level[15 - i] == -level[i].
const std::array<double, 16>& nf4_codebook() noexcept;

/// 4-bit blockwise representation of a row-major matrix. Blocks run over the
/// flattened element order; the final block may be shorter than block_size.
struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t block_size = kDefaultBlockSize;
    QuantMode mode = QuantMode::absmax_int4;
    std::vector<double> scales;       // one per block, >= 0
    std::vector<std::uint8_t> codes;  // one per element, in [0, 15]

    std::size_t element_count() const noexcept { return rows * cols; }
    std::size_t block_count() const noexcept;

    /// Checks the structural invariants; throws Error(quant) on violation.
    void validate() const;

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Round half away from zero to the nearest code. Throws Error(quant) on
/// non-finite input or block_size < 2.
QuantizedTensor quantize_blockwise(const Matrix& weights, std::size_t block_size = kDefaultBlockSize,
                                   QuantMode mode = QuantMode::absmax_int4);

/// scale * level(code). Throws Error(quant) on a malformed tensor.
Matrix dequantize(const QuantizedTensor& q);

/// Decoded level for one code before scaling.
double decode_level(QuantMode mode, std::uint8_t code);

struct QuantErrorReport {
    double max_abs_err = 0.0;
    double rms_err = 0.0;
    std::vector<double> per_block_max;
};

/// Throws Error(shape) if `original` and `q` disagree in shape.
QuantErrorReport quant_error_report(const Matrix& original, const QuantizedTensor& q);

/// Binary encoding: u64 rows, u64 cols, u32 block_size, u8 mode, then the
/// little-endian f64 scale array, then codes packed two per byte, low nibble first.
void write_quantized(std::ostream& out, const QuantizedTensor& q);
QuantizedTensor read_quantized(std::istream& in);

}  // namespace smmini
