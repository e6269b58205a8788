#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xkv {

// Dense row-major [heads][tokens][channels] activation block. All shape
// arithmetic in the library goes through this one type; per-head channel
// width is uniform.
template <typename Scalar>
struct BasicHeadTensor {
    std::size_t heads = 0;
    std::size_t tokens = 0;
    std::size_t channels = 0;
    std::vector<Scalar> data;

    BasicHeadTensor() = default;

    BasicHeadTensor(std::size_t h, std::size_t t, std::size_t c)
        : heads(h), tokens(t), channels(c), data(h * t * c, Scalar(0)) {}

    std::size_t size() const { return data.size(); }

    Scalar *row(std::size_t h, std::size_t t) {
        return data.data() + (h * tokens + t) * channels;
    }
    const Scalar *row(std::size_t h, std::size_t t) const {
        return data.data() + (h * tokens + t) * channels;
    }

    Scalar &at(std::size_t h, std::size_t t, std::size_t c) {
        return data[(h * tokens + t) * channels + c];
    }
    Scalar at(std::size_t h, std::size_t t, std::size_t c) const {
        return data[(h * tokens + t) * channels + c];
    }

    bool all_finite() const {
        for (Scalar x : data) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    bool same_shape(const BasicHeadTensor &o) const {
        return heads == o.heads && tokens == o.tokens && channels == o.channels;
    }
};

using HeadTensor   = BasicHeadTensor<float>;
using HeadTensor64 = BasicHeadTensor<double>;

template <typename To, typename From>
BasicHeadTensor<To> tensor_cast(const BasicHeadTensor<From> &x) {
    BasicHeadTensor<To> out(x.heads, x.tokens, x.channels);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        out.data[i] = static_cast<To>(x.data[i]);
    }
    return out;
}

// One stream step carries matched Q/K/V blocks for a single frame.
struct Frame {
    HeadTensor q, k, v;
};

// Token composition of one frame: [camera | registers | patches], in that
// order. The camera token count is fixed at one.
struct FrameLayout {
    std::size_t register_tokens = 0;
    std::size_t patch_tokens = 1;

    static constexpr std::size_t camera_tokens = 1;

    std::size_t special_count() const { return camera_tokens + register_tokens; }
    std::size_t total() const { return special_count() + patch_tokens; }
};

inline void validate_layout(const FrameLayout &layout) {
    if (layout.patch_tokens == 0) {
        throw std::invalid_argument("frame layout requires at least one patch token");
    }
}

// Token-index bookkeeping over [first frame | middle | current frame].
// first_len and current_len are whole frames whenever nonzero.
struct CacheSegments {
    std::size_t first_len = 0;
    std::size_t middle_len = 0;
    std::size_t current_len = 0;

    std::size_t total() const { return first_len + middle_len + current_len; }
};

namespace detail {

inline void check_token_range(std::size_t tokens, std::size_t begin, std::size_t end,
                              const char *who) {
    if (begin > end || end > tokens) {
        throw std::invalid_argument(std::string(who) + ": token range [" +
                                    std::to_string(begin) + ", " + std::to_string(end) +
                                    ") out of bounds for " + std::to_string(tokens) +
                                    " tokens");
    }
}

} // namespace detail

// Splits a frame's rows into (special, normal) = (camera+register, patch).
template <typename Scalar>
std::pair<BasicHeadTensor<Scalar>, BasicHeadTensor<Scalar>>
split_special_normal(const BasicHeadTensor<Scalar> &x, const FrameLayout &layout) {
    validate_layout(layout);
    if (x.tokens != layout.total()) {
        throw std::invalid_argument("split_special_normal: tensor has " +
                                    std::to_string(x.tokens) + " tokens, layout expects " +
                                    std::to_string(layout.total()));
    }
    const std::size_t s = layout.special_count();
    BasicHeadTensor<Scalar> special(x.heads, s, x.channels);
    BasicHeadTensor<Scalar> normal(x.heads, layout.patch_tokens, x.channels);
    for (std::size_t h = 0; h < x.heads; ++h) {
        for (std::size_t t = 0; t < s; ++t) {
            const Scalar *src = x.row(h, t);
            std::copy(src, src + x.channels, special.row(h, t));
        }
        for (std::size_t t = 0; t < layout.patch_tokens; ++t) {
            const Scalar *src = x.row(h, s + t);
            std::copy(src, src + x.channels, normal.row(h, t));
        }
    }
    return {std::move(special), std::move(normal)};
}

template <typename Scalar>
BasicHeadTensor<Scalar> slice_tokens(const BasicHeadTensor<Scalar> &x, std::size_t begin,
                                     std::size_t end) {
    detail::check_token_range(x.tokens, begin, end, "slice_tokens");
    BasicHeadTensor<Scalar> out(x.heads, end - begin, x.channels);
    for (std::size_t h = 0; h < x.heads; ++h) {
        for (std::size_t t = begin; t < end; ++t) {
            const Scalar *src = x.row(h, t);
            std::copy(src, src + x.channels, out.row(h, t - begin));
        }
    }
    return out;
}

template <typename Scalar>
BasicHeadTensor<Scalar> gather_tokens(const BasicHeadTensor<Scalar> &x,
                                      std::span<const std::size_t> indices) {
    for (std::size_t idx : indices) {
        if (idx >= x.tokens) {
            throw std::invalid_argument("gather_tokens: index " + std::to_string(idx) +
                                        " out of bounds for " + std::to_string(x.tokens) +
                                        " tokens");
        }
    }
    BasicHeadTensor<Scalar> out(x.heads, indices.size(), x.channels);
    for (std::size_t h = 0; h < x.heads; ++h) {
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const Scalar *src = x.row(h, indices[i]);
            std::copy(src, src + x.channels, out.row(h, i));
        }
    }
    return out;
}

template <typename Scalar>
BasicHeadTensor<Scalar> concat_tokens(const BasicHeadTensor<Scalar> &a,
                                      const BasicHeadTensor<Scalar> &b) {
    if (a.tokens == 0 && a.heads == 0) return b;
    if (b.tokens == 0 && b.heads == 0) return a;
    if (a.heads != b.heads || a.channels != b.channels) {
        throw std::invalid_argument("concat_tokens: head/channel mismatch");
    }
    BasicHeadTensor<Scalar> out(a.heads, a.tokens + b.tokens, a.channels);
    for (std::size_t h = 0; h < a.heads; ++h) {
        for (std::size_t t = 0; t < a.tokens; ++t) {
            const Scalar *src = a.row(h, t);
            std::copy(src, src + a.channels, out.row(h, t));
        }
        for (std::size_t t = 0; t < b.tokens; ++t) {
            const Scalar *src = b.row(h, t);
            std::copy(src, src + b.channels, out.row(h, a.tokens + t));
        }
    }
    return out;
}

// Writes src's tokens into dst starting at token offset dst_begin. Shapes
// must agree on heads/channels and the span must fit.
template <typename Scalar>
void copy_tokens_into(BasicHeadTensor<Scalar> &dst, std::size_t dst_begin,
                      const BasicHeadTensor<Scalar> &src) {
    if (dst.heads != src.heads || dst.channels != src.channels) {
        throw std::invalid_argument("copy_tokens_into: head/channel mismatch");
    }
    detail::check_token_range(dst.tokens, dst_begin, dst_begin + src.tokens,
                              "copy_tokens_into");
    for (std::size_t h = 0; h < src.heads; ++h) {
        for (std::size_t t = 0; t < src.tokens; ++t) {
            const Scalar *s = src.row(h, t);
            std::copy(s, s + src.channels, dst.row(h, dst_begin + t));
        }
    }
}

} // namespace xkv
