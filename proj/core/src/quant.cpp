#include "smmini/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "binary_io.hpp"
#include "smmini/error.hpp"

namespace smmini {

namespace {

// Positive half: normal quantiles at 8 evenly spaced probabilities from
// 0.9677 down towards 0.5 (exclusive), normalized so the outermost is 1.
// The negative half mirrors it exactly.
constexpr std::array<double, 16> kNf4Levels = {
    -1.0,
    -0.7229775747478739,
    -0.5626374120400353,
    -0.44072736736128604,
    -0.3379293375194552,
    -0.24612289600943407,
    -0.16093722491958495,
    -0.07958384859196908,
    0.07958384859196908,
    0.16093722491958495,
    0.24612289600943407,
    0.3379293375194552,
    0.44072736736128604,
    0.5626374120400353,
    0.7229775747478739,
    1.0,
};

std::uint8_t absmax_code(double normalized) {
    const double r = std::round(normalized);  // half away from zero
    return static_cast<std::uint8_t>(std::clamp(r, -7.0, 7.0) + 7.0);
}

std::uint8_t nf4_code(double normalized) {
    const auto& levels = kNf4Levels;
    const auto upper = std::lower_bound(levels.begin(), levels.end(), normalized);
    if (upper == levels.begin()) {
        return 0;
    }
    if (upper == levels.end()) {
        return 15;
    }
    const auto hi = static_cast<std::uint8_t>(upper - levels.begin());
    const auto lo = static_cast<std::uint8_t>(hi - 1);
    const double d_lo = normalized - levels[lo];
    const double d_hi = levels[hi] - normalized;
    if (d_lo < d_hi) {
        return lo;
    }
    if (d_hi < d_lo) {
        return hi;
    }
    // Exact tie: prefer the level with the larger magnitude.
    return std::abs(levels[hi]) >= std::abs(levels[lo]) ? hi : lo;
}

}  // namespace

std::string_view to_string(QuantMode mode) noexcept {
    switch (mode) {
        case QuantMode::absmax_int4: return "absmax_int4";
        case QuantMode::nf4: return "nf4";
    }
    return "unknown";
}

QuantMode parse_quant_mode(std::string_view text) {
    if (text == "absmax_int4" || text == "absmax-int4") {
        return QuantMode::absmax_int4;
    }
    if (text == "nf4") {
        return QuantMode::nf4;
    }
    throw Error(ErrorKind::config, "unknown quantization mode '" + std::string(text) + "'");
}

const std::array<double, 16>& nf4_codebook() noexcept {
    return kNf4Levels;
}

std::size_t QuantizedTensor::block_count() const noexcept {
    return block_size == 0 ? 0 : (element_count() + block_size - 1) / block_size;
}

void QuantizedTensor::validate() const {
    if (block_size < 2) {
        throw Error(ErrorKind::quant, "block_size must be at least 2");
    }
    if (mode != QuantMode::absmax_int4 && mode != QuantMode::nf4) {
        throw Error(ErrorKind::quant, "unknown mode tag " + std::to_string(static_cast<int>(mode)));
    }
    if (codes.size() != element_count()) {
        throw Error(ErrorKind::quant, "code count " + std::to_string(codes.size()) + " != element count " +
                                          std::to_string(element_count()));
    }
    if (scales.size() != block_count()) {
        throw Error(ErrorKind::quant, "scale count does not match block count");
    }
    for (double s : scales) {
        if (!(s >= 0.0) || !std::isfinite(s)) {
            throw Error(ErrorKind::quant, "scale must be finite and non-negative");
        }
    }
    for (auto c : codes) {
        if (c > 15 || (mode == QuantMode::absmax_int4 && c == kAbsmaxReservedCode)) {
            throw Error(ErrorKind::quant, "malformed code " + std::to_string(c) + " for mode " +
                                              std::string(to_string(mode)));
        }
    }
}

double decode_level(QuantMode mode, std::uint8_t code) {
    if (code > 15) {
        throw Error(ErrorKind::quant, "code out of range: " + std::to_string(code));
    }
    if (mode == QuantMode::absmax_int4) {
        if (code == kAbsmaxReservedCode) {
            throw Error(ErrorKind::quant, "reserved code 15 in absmax_int4 data");
        }
        return static_cast<double>(static_cast<int>(code) - 7);
    }
    return kNf4Levels[code];
}

QuantizedTensor quantize_blockwise(const Matrix& weights, std::size_t block_size, QuantMode mode) {
    if (block_size < 2) {
        throw Error(ErrorKind::quant, "block_size must be at least 2, got " + std::to_string(block_size));
    }
    const auto values = weights.values();
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw Error(ErrorKind::quant, "cannot quantize non-finite weights");
        }
    }

    QuantizedTensor q;
    q.rows = weights.rows();
    q.cols = weights.cols();
    q.block_size = block_size;
    q.mode = mode;
    q.codes.resize(values.size());
    q.scales.resize(q.block_count());

    const std::uint8_t zero_code = mode == QuantMode::absmax_int4 ? kAbsmaxZeroCode : kNf4ZeroCode;
    for (std::size_t b = 0; b < q.scales.size(); ++b) {
        const std::size_t begin = b * block_size;
        const std::size_t end = std::min(begin + block_size, values.size());
        double absmax = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            absmax = std::max(absmax, std::abs(values[i]));
        }
        if (absmax == 0.0) {
            q.scales[b] = 0.0;
            std::fill(q.codes.begin() + static_cast<std::ptrdiff_t>(begin),
                      q.codes.begin() + static_cast<std::ptrdiff_t>(end), zero_code);
            continue;
        }
        if (mode == QuantMode::absmax_int4) {
            const double scale = absmax / 7.0;
            q.scales[b] = scale;
            for (std::size_t i = begin; i < end; ++i) {
                q.codes[i] = absmax_code(values[i] / scale);
            }
        } else {
            q.scales[b] = absmax;
            for (std::size_t i = begin; i < end; ++i) {
                q.codes[i] = nf4_code(values[i] / absmax);
            }
        }
    }
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    q.validate();
    Matrix out(q.rows, q.cols);
    auto values = out.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = q.scales[i / q.block_size] * decode_level(q.mode, q.codes[i]);
    }
    return out;
}

QuantErrorReport quant_error_report(const Matrix& original, const QuantizedTensor& q) {
    if (original.rows() != q.rows || original.cols() != q.cols) {
        throw Error(ErrorKind::shape, "original is " + std::to_string(original.rows()) + "x" +
                                          std::to_string(original.cols()) + ", quantized is " +
                                          std::to_string(q.rows) + "x" + std::to_string(q.cols));
    }
    const Matrix restored = dequantize(q);
    const auto a = original.values();
    const auto b = restored.values();

    QuantErrorReport report;
    report.per_block_max.assign(q.block_count(), 0.0);
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double err = std::abs(a[i] - b[i]);
        sum_sq += err * err;
        auto& block_max = report.per_block_max[i / q.block_size];
        block_max = std::max(block_max, err);
        report.max_abs_err = std::max(report.max_abs_err, err);
    }
    report.rms_err = a.empty() ? 0.0 : std::sqrt(sum_sq / static_cast<double>(a.size()));
    return report;
}

void write_quantized(std::ostream& out, const QuantizedTensor& q) {
    q.validate();
    detail::put_u64(out, q.rows);
    detail::put_u64(out, q.cols);
    detail::put_u32(out, static_cast<std::uint32_t>(q.block_size));
    detail::put_u8(out, static_cast<std::uint8_t>(q.mode));
    for (double s : q.scales) {
        detail::put_f64(out, s);
    }
    for (std::size_t i = 0; i < q.codes.size(); i += 2) {
        const std::uint8_t lo = q.codes[i];
        const std::uint8_t hi = i + 1 < q.codes.size() ? q.codes[i + 1] : 0;
        detail::put_u8(out, static_cast<std::uint8_t>(lo | (hi << 4)));
    }
}

QuantizedTensor read_quantized(std::istream& in) {
    detail::ByteReader r(in, ErrorKind::quant);
    QuantizedTensor q;
    q.rows = r.u64();
    q.cols = r.u64();
    q.block_size = r.u32();
    q.mode = static_cast<QuantMode>(r.u8());
    if (q.block_size < 2) {
        r.fail("block_size must be at least 2");
    }
    if (q.rows != 0 && q.cols > std::numeric_limits<std::uint64_t>::max() / q.rows) {
        r.fail("shape overflow");
    }
    const std::uint64_t n = q.rows * q.cols;
    if (n > (std::uint64_t{1} << 40)) {
        r.fail("implausible element count");
    }
    const std::uint64_t n_blocks = (n + q.block_size - 1) / q.block_size;
    r.check_available(n_blocks * 8 + (n + 1) / 2);
    q.scales.resize(n_blocks);
    for (auto& s : q.scales) {
        s = r.f64();
    }
    q.codes.resize(n);
    for (std::size_t i = 0; i < n; i += 2) {
        const std::uint8_t byte = r.u8();
        q.codes[i] = byte & 0x0f;
        if (i + 1 < n) {
            q.codes[i + 1] = byte >> 4;
        }
    }
    q.validate();
    return q;
}

}  // namespace smmini
