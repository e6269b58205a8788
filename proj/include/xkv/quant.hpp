#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace xkv {

// Asymmetric uniform quantization:
//   code = clamp(round(x / s) + z, 0, 2^b - 1)
//   s    = (max - min) / (2^b - 1)
//   z    = round(-min / s)
// Rounding is half away from zero. z may land outside [0, 2^b - 1] when the
// group does not straddle zero; only codes are clamped. A zero-range group
// stores its value out of band (scale == 0 marks it) and round-trips exactly.
struct QuantParams {
    double scale = 0.0;
    std::int64_t zero_point = 0;
    int bits = 4;
    std::optional<float> degenerate_min{};

    bool degenerate() const { return degenerate_min.has_value(); }
};

enum class QuantAxis : std::uint8_t {
    per_channel = 0, // groups run along tokens within one (head, channel)
    per_token   = 1, // groups run along channels within one (head, token)
};

namespace detail {

inline void check_bits(int bits) {
    if (bits != 2 && bits != 4 && bits != 8) {
        throw std::invalid_argument("bit width must be 2, 4, or 8, got " +
                                    std::to_string(bits));
    }
}

inline int level_count(int bits) { return (1 << bits) - 1; }

// llround with the argument pre-clamped so values far outside the code range
// cannot overflow the integer conversion.
inline std::int64_t safe_llround(double t) {
    constexpr double lim = 4.0e18;
    if (t > lim) return static_cast<std::int64_t>(lim);
    if (t < -lim) return -static_cast<std::int64_t>(lim);
    return std::llround(t);
}

inline std::uint8_t encode_one(float x, double scale, std::int64_t zero_point,
                               int levels) {
    double t = static_cast<double>(x) / scale;
    std::int64_t code = safe_llround(t) + zero_point;
    if (code < 0) code = 0;
    if (code > levels) code = levels;
    return static_cast<std::uint8_t>(code);
}

} // namespace detail

inline QuantParams quant_params(std::span<const float> values, int bits) {
    detail::check_bits(bits);
    if (values.empty()) {
        throw std::invalid_argument("quant_params: empty input");
    }
    float mn = values[0];
    float mx = values[0];
    for (float x : values) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument("quant_params: non-finite input");
        }
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    QuantParams p;
    p.bits = bits;
    if (mn == mx) {
        p.degenerate_min = mn;
        return p;
    }
    const int levels = detail::level_count(bits);
    const double range = static_cast<double>(mx) - static_cast<double>(mn);
    p.scale = range / levels;
    // Single rounding from the exact ratio; dividing by the already rounded
    // scale can land on the wrong side of a .5 tie.
    p.zero_point = detail::safe_llround(-static_cast<double>(mn) * levels / range);
    return p;
}

inline std::vector<std::uint8_t> quantize(std::span<const float> values,
                                          const QuantParams &p) {
    detail::check_bits(p.bits);
    std::vector<std::uint8_t> codes(values.size(), 0);
    if (p.degenerate()) return codes;
    const int levels = detail::level_count(p.bits);
    for (std::size_t i = 0; i < values.size(); ++i) {
        codes[i] = detail::encode_one(values[i], p.scale, p.zero_point, levels);
    }
    return codes;
}

inline std::vector<float> dequantize(std::span<const std::uint8_t> codes,
                                     const QuantParams &p) {
    std::vector<float> out(codes.size(), 0.0f);
    if (p.degenerate()) {
        std::fill(out.begin(), out.end(), *p.degenerate_min);
        return out;
    }
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const double c = static_cast<double>(codes[i]) - static_cast<double>(p.zero_point);
        out[i] = static_cast<float>(c * p.scale);
    }
    return out;
}

// Bit packing. b divides 8, so codes never straddle byte boundaries; element
// j occupies bits [(j % (8/b)) * b, ...) of byte j / (8/b). For b=4 that puts
// element 2i in the low nibble and 2i+1 in the high nibble.
inline std::size_t packed_code_bytes(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
    detail::check_bits(bits);
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    std::vector<std::uint8_t> bytes(packed_code_bytes(codes.size(), bits), 0);
    for (std::size_t j = 0; j < codes.size(); ++j) {
        const unsigned shift = static_cast<unsigned>((j % per_byte) * bits);
        bytes[j / per_byte] |= static_cast<std::uint8_t>(codes[j] << shift);
    }
    return bytes;
}

inline std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes,
                                              std::size_t count, int bits) {
    detail::check_bits(bits);
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    const std::uint8_t mask = static_cast<std::uint8_t>((1 << bits) - 1);
    if (bytes.size() < packed_code_bytes(count, bits)) {
        throw std::invalid_argument("unpack_codes: buffer too small");
    }
    std::vector<std::uint8_t> codes(count, 0);
    for (std::size_t j = 0; j < count; ++j) {
        const unsigned shift = static_cast<unsigned>((j % per_byte) * bits);
        codes[j] = static_cast<std::uint8_t>(bytes[j / per_byte] >> shift) & mask;
    }
    return codes;
}

// Packed codes plus one QuantParams per group. Codes are stored axis-major:
//   per_channel: flat = (h * channels + c) * tokens + t
//   per_token:   flat = (h * tokens + t) * channels + c
// so each group's codes are contiguous. Group metadata is stored as a 32-bit
// scale plus a 32-bit zero point (8 bytes per group in the accounting);
// params here are created pre-rounded to that width so serialization is
// value-exact.
struct QuantizedTensor {
    std::size_t heads = 0;
    std::size_t tokens = 0;
    std::size_t channels = 0;
    int bits = 4;
    std::size_t group_size = 64;
    QuantAxis axis = QuantAxis::per_channel;
    std::vector<std::uint8_t> codes;  // bit-packed
    std::vector<QuantParams> params;  // row-major over (row, group)

    std::size_t element_count() const { return heads * tokens * channels; }
    std::size_t row_extent() const {
        return axis == QuantAxis::per_channel ? tokens : channels;
    }
    std::size_t row_count() const {
        return axis == QuantAxis::per_channel ? heads * channels : heads * tokens;
    }
    std::size_t groups_per_row() const {
        return (row_extent() + group_size - 1) / group_size;
    }
    std::size_t group_count() const { return row_count() * groups_per_row(); }

    // Packed codes plus 8 metadata bytes per group.
    std::uint64_t storage_bytes() const {
        return static_cast<std::uint64_t>(codes.size()) +
               8ull * static_cast<std::uint64_t>(params.size());
    }
};

namespace detail {

// Group params for stored tensors: scale rounded through float32 and z
// clamped to int32, matching the 8-byte metadata record exactly.
inline QuantParams storage_group_params(std::span<const float> values, int bits) {
    QuantParams p = quant_params(values, bits);
    if (p.degenerate()) return p;
    float mn = values[0];
    for (float x : values) mn = std::min(mn, x);
    p.scale = static_cast<double>(static_cast<float>(p.scale));
    if (p.scale == 0.0) {
        // Range below float32 resolution; storing the min loses at most the
        // sub-denormal spread and keeps scale == 0 reserved for this case.
        p.degenerate_min = mn;
        return p;
    }
    const std::int64_t z = safe_llround(-static_cast<double>(mn) / p.scale);
    constexpr std::int64_t i32min = std::numeric_limits<std::int32_t>::min();
    constexpr std::int64_t i32max = std::numeric_limits<std::int32_t>::max();
    p.zero_point = std::clamp(z, i32min, i32max);
    return p;
}

inline QuantizedTensor quantize_grouped(const HeadTensor &x, int bits,
                                        std::size_t group_size, QuantAxis axis) {
    check_bits(bits);
    if (group_size == 0) {
        throw std::invalid_argument("group size must be positive");
    }
    QuantizedTensor q;
    q.heads = x.heads;
    q.tokens = x.tokens;
    q.channels = x.channels;
    q.bits = bits;
    q.group_size = group_size;
    q.axis = axis;
    q.codes.assign(packed_code_bytes(x.size(), bits), 0);
    q.params.reserve(q.group_count());

    const int levels = level_count(bits);
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    const std::size_t extent = q.row_extent();
    std::vector<float> scratch;
    scratch.reserve(std::min(group_size, extent));

    for (std::size_t row = 0; row < q.row_count(); ++row) {
        // Row element i lives at flat index row * extent + i by construction.
        const std::size_t h = row / (axis == QuantAxis::per_channel ? x.channels : x.tokens);
        const std::size_t minor = row % (axis == QuantAxis::per_channel ? x.channels : x.tokens);
        for (std::size_t g0 = 0; g0 < extent; g0 += group_size) {
            const std::size_t g1 = std::min(g0 + group_size, extent);
            scratch.clear();
            for (std::size_t i = g0; i < g1; ++i) {
                const float v = axis == QuantAxis::per_channel ? x.at(h, i, minor)
                                                               : x.at(h, minor, i);
                if (!std::isfinite(v)) {
                    throw std::invalid_argument("quantize: non-finite input");
                }
                scratch.push_back(v);
            }
            const QuantParams p = storage_group_params(scratch, bits);
            if (!p.degenerate()) {
                for (std::size_t i = g0; i < g1; ++i) {
                    const std::uint8_t code =
                        encode_one(scratch[i - g0], p.scale, p.zero_point, levels);
                    const std::size_t flat = row * extent + i;
                    const unsigned shift = static_cast<unsigned>((flat % per_byte) * bits);
                    q.codes[flat / per_byte] |= static_cast<std::uint8_t>(code << shift);
                }
            }
            q.params.push_back(p);
        }
    }
    return q;
}

} // namespace detail

// Key cache quantization: one group spans group_size consecutive tokens
// within a single (head, channel) lane.
inline QuantizedTensor quantize_key_per_channel(const HeadTensor &k, int bits,
                                                std::size_t group_size) {
    return detail::quantize_grouped(k, bits, group_size, QuantAxis::per_channel);
}

// Value cache quantization: one group spans group_size consecutive channels
// within a single (head, token) row.
inline QuantizedTensor quantize_value_per_token(const HeadTensor &v, int bits,
                                                std::size_t group_size) {
    return detail::quantize_grouped(v, bits, group_size, QuantAxis::per_token);
}

inline HeadTensor dequantize_tensor(const QuantizedTensor &q) {
    HeadTensor out(q.heads, q.tokens, q.channels);
    const std::size_t per_byte = 8 / static_cast<std::size_t>(q.bits);
    const std::uint8_t mask = static_cast<std::uint8_t>((1 << q.bits) - 1);
    const std::size_t extent = q.row_extent();
    const std::size_t gpr = q.groups_per_row();
    const std::size_t minor_count =
        q.axis == QuantAxis::per_channel ? q.channels : q.tokens;
    if (q.params.size() != q.group_count()) {
        throw std::invalid_argument("dequantize_tensor: group metadata count mismatch");
    }
    for (std::size_t row = 0; row < q.row_count(); ++row) {
        const std::size_t h = row / minor_count;
        const std::size_t minor = row % minor_count;
        for (std::size_t i = 0; i < extent; ++i) {
            const QuantParams &p = q.params[row * gpr + i / q.group_size];
            float v;
            if (p.degenerate()) {
                v = *p.degenerate_min;
            } else {
                const std::size_t flat = row * extent + i;
                const unsigned shift = static_cast<unsigned>((flat % per_byte) * q.bits);
                const std::uint8_t code =
                    static_cast<std::uint8_t>(q.codes[flat / per_byte] >> shift) & mask;
                const double c =
                    static_cast<double>(code) - static_cast<double>(p.zero_point);
                v = static_cast<float>(c * p.scale);
            }
            if (q.axis == QuantAxis::per_channel) {
                out.at(h, i, minor) = v;
            } else {
                out.at(h, minor, i) = v;
            }
        }
    }
    return out;
}

} // namespace xkv
