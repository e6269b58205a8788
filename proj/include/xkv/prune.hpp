#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace xkv {

// Token budget sentinel: never triggers pruning.
inline constexpr std::uint64_t kUnboundedBudget =
    std::numeric_limits<std::uint64_t>::max();

// Head-averaged query rows after temporal pooling. Camera and register rows
// pass through unpooled; patch rows are mean-pooled in windows of the pool
// size, last window possibly short.
struct PooledQuery {
    std::size_t tokens = 0;
    std::size_t channels = 0;
    std::vector<float> data; // row-major [tokens][channels]

    const float *row(std::size_t i) const { return data.data() + i * channels; }
    float *row(std::size_t i) { return data.data() + i * channels; }
};

// Head-averaged keys for the prunable middle segment.
struct KeySummary {
    std::size_t tokens = 0;
    std::size_t channels = 0;
    std::vector<float> data; // row-major [tokens][channels]

    const float *row(std::size_t i) const { return data.data() + i * channels; }
    float *row(std::size_t i) { return data.data() + i * channels; }
};

struct ImportanceScores {
    std::vector<float> scores; // one per middle token, cache order
};

// Ascending token indices into the [first | middle | current] space.
struct KeepSet {
    std::vector<std::size_t> indices;
};

inline PooledQuery pool_queries(const HeadTensor &q, const FrameLayout &layout,
                                std::size_t pool_size) {
    validate_layout(layout);
    if (pool_size == 0) {
        throw std::invalid_argument("pool_queries: pool size must be positive");
    }
    if (q.tokens != layout.total()) {
        throw std::invalid_argument("pool_queries: tensor has " + std::to_string(q.tokens) +
                                    " tokens, layout expects " +
                                    std::to_string(layout.total()));
    }
    if (q.heads == 0) {
        throw std::invalid_argument("pool_queries: no heads");
    }
    const std::size_t special = layout.special_count();
    const std::size_t pooled_patches = (layout.patch_tokens + pool_size - 1) / pool_size;
    PooledQuery out;
    out.tokens = special + pooled_patches;
    out.channels = q.channels;
    out.data.assign(out.tokens * out.channels, 0.0f);

    std::vector<double> acc(q.channels);
    for (std::size_t i = 0; i < out.tokens; ++i) {
        std::size_t t0, t1;
        if (i < special) {
            t0 = i;
            t1 = i + 1;
        } else {
            t0 = special + (i - special) * pool_size;
            t1 = std::min(t0 + pool_size, layout.total());
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t h = 0; h < q.heads; ++h) {
            for (std::size_t t = t0; t < t1; ++t) {
                const float *src = q.row(h, t);
                for (std::size_t c = 0; c < q.channels; ++c) acc[c] += src[c];
            }
        }
        const double inv = 1.0 / (static_cast<double>(q.heads) * static_cast<double>(t1 - t0));
        float *dst = out.row(i);
        for (std::size_t c = 0; c < q.channels; ++c) {
            dst[c] = static_cast<float>(acc[c] * inv);
        }
    }
    return out;
}

// Mean over heads of the middle-segment keys. k spans the full
// [first | middle | current] token space.
inline KeySummary key_summary(const HeadTensor &k, const CacheSegments &seg) {
    if (k.tokens != seg.total()) {
        throw std::invalid_argument("key_summary: tensor has " + std::to_string(k.tokens) +
                                    " tokens, segments total " +
                                    std::to_string(seg.total()));
    }
    if (k.heads == 0) {
        throw std::invalid_argument("key_summary: no heads");
    }
    KeySummary out;
    out.tokens = seg.middle_len;
    out.channels = k.channels;
    out.data.assign(out.tokens * out.channels, 0.0f);
    const double inv = 1.0 / static_cast<double>(k.heads);
    std::vector<double> acc(k.channels);
    for (std::size_t j = 0; j < seg.middle_len; ++j) {
        const std::size_t t = seg.first_len + j;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t h = 0; h < k.heads; ++h) {
            const float *src = k.row(h, t);
            for (std::size_t c = 0; c < k.channels; ++c) acc[c] += src[c];
        }
        float *dst = out.row(j);
        for (std::size_t c = 0; c < k.channels; ++c) {
            dst[c] = static_cast<float>(acc[c] * inv);
        }
    }
    return out;
}

// S[j] = mean over pooled query rows of <pq_i, ks_j>.
inline ImportanceScores importance_scores(const PooledQuery &pq, const KeySummary &ks) {
    if (pq.channels != ks.channels) {
        throw std::invalid_argument("importance_scores: channel mismatch");
    }
    if (pq.tokens == 0) {
        throw std::invalid_argument("importance_scores: no pooled queries");
    }
    ImportanceScores out;
    out.scores.assign(ks.tokens, 0.0f);
    const double inv = 1.0 / static_cast<double>(pq.tokens);
    for (std::size_t j = 0; j < ks.tokens; ++j) {
        const float *kj = ks.row(j);
        double total = 0.0;
        for (std::size_t i = 0; i < pq.tokens; ++i) {
            const float *qi = pq.row(i);
            double dot = 0.0;
            for (std::size_t c = 0; c < pq.channels; ++c) {
                dot += static_cast<double>(qi[c]) * static_cast<double>(kj[c]);
            }
            total += dot;
        }
        out.scores[j] = static_cast<float>(total * inv);
    }
    return out;
}

// Keeps the whole first and current segments, plus the top
// k = max(0, budget - first_len - current_len) middle tokens by score. Score
// ties break toward the higher token index (the more recent token). Indices
// come back ascending.
inline KeepSet select_keep_indices(const ImportanceScores &scores,
                                   const CacheSegments &seg, std::uint64_t budget) {
    if (scores.scores.size() != seg.middle_len) {
        throw std::invalid_argument("select_keep_indices: score count " +
                                    std::to_string(scores.scores.size()) +
                                    " does not match middle length " +
                                    std::to_string(seg.middle_len));
    }
    const std::uint64_t protected_len =
        static_cast<std::uint64_t>(seg.first_len) + seg.current_len;
    std::uint64_t k = 0;
    if (budget == kUnboundedBudget) {
        k = seg.middle_len;
    } else if (budget > protected_len) {
        k = budget - protected_len;
    }
    const std::size_t m = static_cast<std::size_t>(
        std::min<std::uint64_t>(k, seg.middle_len));

    std::vector<std::size_t> order(seg.middle_len);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto better = [&](std::size_t a, std::size_t b) {
        if (scores.scores[a] != scores.scores[b]) {
            return scores.scores[a] > scores.scores[b];
        }
        return a > b;
    };
    if (m > 0 && m < order.size()) {
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m),
                         order.end(), better);
    }
    order.resize(m);
    std::sort(order.begin(), order.end());

    KeepSet keep;
    keep.indices.reserve(seg.first_len + m + seg.current_len);
    for (std::size_t t = 0; t < seg.first_len; ++t) keep.indices.push_back(t);
    for (std::size_t j : order) keep.indices.push_back(seg.first_len + j);
    for (std::size_t t = 0; t < seg.current_len; ++t) {
        keep.indices.push_back(seg.first_len + seg.middle_len + t);
    }
    return keep;
}

} // namespace xkv
