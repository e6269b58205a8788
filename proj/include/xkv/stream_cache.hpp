#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "prune.hpp"
#include "quant.hpp"
#include "tensor.hpp"

namespace xkv {

struct CacheConfig {
    std::uint64_t budget = 2048;       // max cached tokens; kUnboundedBudget disables pruning
    std::size_t pool_size = 16;        // query pooling window
    int bits = 4;
    std::size_t group_size = 64;
    bool quantization_enabled = true;
    std::size_t heads = 8;
    std::size_t head_dim = 64;
    FrameLayout layout{4, 59};

    void validate() const {
        validate_layout(layout);
        if (heads == 0) throw std::invalid_argument("config: heads must be positive");
        if (head_dim == 0) throw std::invalid_argument("config: head_dim must be positive");
        if (pool_size == 0) throw std::invalid_argument("config: pool_size must be positive");
        if (group_size == 0) throw std::invalid_argument("config: group_size must be positive");
        detail::check_bits(bits);
        if (budget < layout.total()) {
            throw std::invalid_argument("config: budget " + std::to_string(budget) +
                                        " is smaller than one frame (" +
                                        std::to_string(layout.total()) + " tokens)");
        }
    }
};

struct MemoryUsage {
    std::uint64_t compressed_bytes = 0;      // codes + 8 bytes per group, or raw f32
    std::uint64_t fp16_equivalent_bytes = 0; // 2 bytes/element for everything ingested
};

namespace detail {

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int b = 0; b < 8; ++b) {
                c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            }
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::uint8_t x : bytes) {
        crc = table[(crc ^ x) & 0xFFu] ^ (crc >> 8);
    }
    return crc ^ 0xFFFFFFFFu;
}

struct ByteWriter {
    std::vector<std::uint8_t> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(std::span<const std::uint8_t> v) { bytes.insert(bytes.end(), v.begin(), v.end()); }
};

struct ByteReader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) {
            throw std::runtime_error("snapshot truncated");
        }
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n);
        auto s = bytes.subspan(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

inline constexpr std::uint16_t kSnapshotVersion = 1;

// Streaming KV cache with a hard token budget.
//
// Ingest path per frame:
//   1. attend over [dequantized cache | incoming frame] at full precision,
//      after pruning when the post-append length would exceed the budget
//   2. prune selects top-scoring middle tokens; the first frame and the
//      incoming frame are always kept
//   3. the incoming frame is quantized once and appended as its own chunk
//
// Storage is chunked: chunk 0 holds the first frame and is quantized exactly
// once for the life of the stream. Every appended frame forms a chunk. A
// prune event rebuilds all middle chunks into a single requantized chunk, so
// retained middle tokens accumulate quantization passes only when pruning
// actually fires. Group partitions restart at chunk boundaries.
class StreamingKVCache {
  public:
    explicit StreamingKVCache(CacheConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const CacheConfig &config() const { return cfg_; }

    std::size_t cache_len() const {
        std::size_t n = 0;
        for (const Chunk &c : chunks_) n += c.tokens;
        return n;
    }

    std::uint64_t frame_count() const { return frame_counter_; }
    std::uint64_t total_ingested_tokens() const { return total_ingested_; }
    std::uint64_t prune_events() const { return prune_events_; }

    CacheSegments segments() const {
        const std::size_t len = cache_len();
        CacheSegments seg;
        seg.first_len = first_frame_len_;
        seg.current_len = len > first_frame_len_ ? cfg_.layout.total() : 0;
        seg.middle_len = len - seg.first_len - seg.current_len;
        return seg;
    }

    // Mean quantization passes over currently retained tokens. 1.0 means no
    // token has ever been requantized.
    double mean_requant_passes() const {
        std::uint64_t passes = 0;
        std::uint64_t tokens = 0;
        for (const Chunk &c : chunks_) {
            for (std::uint32_t p : c.quant_passes) passes += p;
            tokens += c.quant_passes.size();
        }
        return tokens == 0 ? 0.0 : static_cast<double>(passes) / static_cast<double>(tokens);
    }

    MemoryUsage memory_bytes() const {
        MemoryUsage m;
        for (const Chunk &c : chunks_) {
            if (cfg_.quantization_enabled) {
                m.compressed_bytes += c.k_q.storage_bytes() + c.v_q.storage_bytes();
            } else {
                m.compressed_bytes += 4ull * (c.k_raw.size() + c.v_raw.size());
            }
        }
        m.fp16_equivalent_bytes = 2ull * total_ingested_ * cfg_.heads * cfg_.head_dim * 2ull;
        return m;
    }

    // Dequantized copies of the full cached K/V, in cache token order. This
    // is the view attention consumes; handy for inspection and tests.
    HeadTensor dequantized_keys() const {
        HeadTensor k(cfg_.heads, cache_len(), cfg_.head_dim);
        HeadTensor v(cfg_.heads, cache_len(), cfg_.head_dim);
        materialize_cache(k, v);
        return k;
    }

    HeadTensor dequantized_values() const {
        HeadTensor k(cfg_.heads, cache_len(), cfg_.head_dim);
        HeadTensor v(cfg_.heads, cache_len(), cfg_.head_dim);
        materialize_cache(k, v);
        return v;
    }

    HeadTensor step(const HeadTensor &q, const HeadTensor &k, const HeadTensor &v) {
        check_frame_shape(q, "q");
        check_frame_shape(k, "k");
        check_frame_shape(v, "v");
        const std::size_t frame = cfg_.layout.total();

        if (frame_counter_ == 0) {
            HeadTensor out = attend(q, k, v);
            chunks_.push_back(make_chunk(k, v, std::vector<std::uint32_t>(frame, 1)));
            first_frame_len_ = frame;
            finish_step(frame);
            return out;
        }

        const std::size_t len = cache_len();
        HeadTensor k_full(cfg_.heads, len + frame, cfg_.head_dim);
        HeadTensor v_full(cfg_.heads, len + frame, cfg_.head_dim);
        materialize_cache(k_full, v_full);
        copy_tokens_into(k_full, len, k);
        copy_tokens_into(v_full, len, v);

        HeadTensor out;
        if (static_cast<std::uint64_t>(len) + frame > cfg_.budget) {
            const CacheSegments seg{first_frame_len_, len - first_frame_len_, frame};
            const PooledQuery pooled = pool_queries(q, cfg_.layout, cfg_.pool_size);
            const KeySummary summary = key_summary(k_full, seg);
            const ImportanceScores scores = importance_scores(pooled, summary);
            const KeepSet keep = select_keep_indices(scores, seg, cfg_.budget);

            const HeadTensor k_kept = gather_tokens(k_full, std::span<const std::size_t>(keep.indices));
            const HeadTensor v_kept = gather_tokens(v_full, std::span<const std::size_t>(keep.indices));
            out = attend(q, k_kept, v_kept);

            const std::size_t m = keep.indices.size() - seg.first_len - seg.current_len;
            std::vector<std::uint32_t> middle_passes = gather_middle_passes(keep, seg);

            chunks_.resize(1);
            if (m > 0) {
                chunks_.push_back(make_chunk(
                    slice_tokens(k_kept, seg.first_len, seg.first_len + m),
                    slice_tokens(v_kept, seg.first_len, seg.first_len + m),
                    std::move(middle_passes)));
            }
            ++prune_events_;
        } else {
            out = attend(q, k_full, v_full);
        }
        chunks_.push_back(make_chunk(k, v, std::vector<std::uint32_t>(frame, 1)));

        finish_step(frame);
        const std::size_t now = cache_len();
        const std::uint64_t bound =
            std::max<std::uint64_t>(cfg_.budget, static_cast<std::uint64_t>(first_frame_len_) + frame);
        if (static_cast<std::uint64_t>(now) > bound) {
            throw std::logic_error("cache invariant violated: length " + std::to_string(now) +
                                   " exceeds bound " + std::to_string(bound));
        }
        return out;
    }

    // Snapshot layout (all little-endian):
    //   "XKVC" | u16 version | u8 flags | u8 bits
    //   u32 heads | u32 head_dim | u32 group_size | u32 pool_size
    //   u64 budget | u32 register_tokens | u32 patch_tokens
    //   u64 frame_counter | u64 total_ingested | u64 prune_events
    //   u32 first_frame_len | u32 chunk_count
    //   per chunk: u32 tokens | u32[tokens] passes | K block | V block
    //   quantized block: u32 groups | groups x (f32 scale, then f32
    //     degenerate value when scale == 0, else i32 zero point) |
    //     u64 code_bytes | codes
    //   raw block: u64 count | f32[count]
    //   u32 crc32 of everything above
    std::vector<std::uint8_t> snapshot() const {
        detail::ByteWriter w;
        w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t *>("XKVC"), 4));
        w.u16(kSnapshotVersion);
        w.u8(cfg_.quantization_enabled ? 1 : 0);
        w.u8(static_cast<std::uint8_t>(cfg_.bits));
        w.u32(static_cast<std::uint32_t>(cfg_.heads));
        w.u32(static_cast<std::uint32_t>(cfg_.head_dim));
        w.u32(static_cast<std::uint32_t>(cfg_.group_size));
        w.u32(static_cast<std::uint32_t>(cfg_.pool_size));
        w.u64(cfg_.budget);
        w.u32(static_cast<std::uint32_t>(cfg_.layout.register_tokens));
        w.u32(static_cast<std::uint32_t>(cfg_.layout.patch_tokens));
        w.u64(frame_counter_);
        w.u64(total_ingested_);
        w.u64(prune_events_);
        w.u32(static_cast<std::uint32_t>(first_frame_len_));
        w.u32(static_cast<std::uint32_t>(chunks_.size()));
        for (const Chunk &c : chunks_) {
            w.u32(static_cast<std::uint32_t>(c.tokens));
            for (std::uint32_t p : c.quant_passes) w.u32(p);
            if (cfg_.quantization_enabled) {
                write_quantized(w, c.k_q);
                write_quantized(w, c.v_q);
            } else {
                write_raw(w, c.k_raw);
                write_raw(w, c.v_raw);
            }
        }
        w.u32(detail::crc32(w.bytes));
        return std::move(w.bytes);
    }

    static StreamingKVCache restore(std::span<const std::uint8_t> bytes) {
        if (bytes.size() < 8) throw std::runtime_error("snapshot truncated");
        const std::uint32_t stored =
            static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
            static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
            static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
            static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
        if (detail::crc32(bytes.first(bytes.size() - 4)) != stored) {
            throw std::runtime_error("snapshot checksum mismatch");
        }
        detail::ByteReader r{bytes.first(bytes.size() - 4)};
        const auto magic = r.raw(4);
        if (!std::equal(magic.begin(), magic.end(),
                        reinterpret_cast<const std::uint8_t *>("XKVC"))) {
            throw std::runtime_error("snapshot magic mismatch");
        }
        const std::uint16_t version = r.u16();
        if (version != kSnapshotVersion) {
            throw std::runtime_error("snapshot version " + std::to_string(version) +
                                     " is not supported");
        }
        CacheConfig cfg;
        const std::uint8_t flags = r.u8();
        cfg.quantization_enabled = (flags & 1) != 0;
        cfg.bits = r.u8();
        cfg.heads = r.u32();
        cfg.head_dim = r.u32();
        cfg.group_size = r.u32();
        cfg.pool_size = r.u32();
        cfg.budget = r.u64();
        cfg.layout.register_tokens = r.u32();
        cfg.layout.patch_tokens = r.u32();

        StreamingKVCache cache(cfg);
        cache.frame_counter_ = r.u64();
        cache.total_ingested_ = r.u64();
        cache.prune_events_ = r.u64();
        cache.first_frame_len_ = r.u32();
        const std::uint32_t chunk_count = r.u32();
        for (std::uint32_t ci = 0; ci < chunk_count; ++ci) {
            Chunk c;
            c.tokens = r.u32();
            if (cfg.quantization_enabled) {
                c.quant_passes.resize(c.tokens);
                for (std::size_t i = 0; i < c.tokens; ++i) c.quant_passes[i] = r.u32();
                c.k_q = read_quantized(r, cfg, c.tokens, QuantAxis::per_channel);
                c.v_q = read_quantized(r, cfg, c.tokens, QuantAxis::per_token);
            } else {
                c.k_raw = read_raw(r, cfg, c.tokens);
                c.v_raw = read_raw(r, cfg, c.tokens);
            }
            cache.chunks_.push_back(std::move(c));
        }
        if (r.pos != r.bytes.size()) {
            throw std::runtime_error("snapshot has trailing bytes");
        }
        return cache;
    }

  private:
    struct Chunk {
        std::size_t tokens = 0;
        QuantizedTensor k_q, v_q;
        HeadTensor k_raw, v_raw;
        std::vector<std::uint32_t> quant_passes; // per token; empty when quantization is off
    };

    void check_frame_shape(const HeadTensor &x, const char *name) const {
        if (x.heads != cfg_.heads || x.channels != cfg_.head_dim ||
            x.tokens != cfg_.layout.total()) {
            throw std::invalid_argument(std::string("step: ") + name + " has shape [" +
                                        std::to_string(x.heads) + ", " +
                                        std::to_string(x.tokens) + ", " +
                                        std::to_string(x.channels) + "], expected [" +
                                        std::to_string(cfg_.heads) + ", " +
                                        std::to_string(cfg_.layout.total()) + ", " +
                                        std::to_string(cfg_.head_dim) + "]");
        }
    }

    Chunk make_chunk(const HeadTensor &k, const HeadTensor &v,
                     std::vector<std::uint32_t> passes) const {
        Chunk c;
        c.tokens = k.tokens;
        if (cfg_.quantization_enabled) {
            c.k_q = quantize_key_per_channel(k, cfg_.bits, cfg_.group_size);
            c.v_q = quantize_value_per_token(v, cfg_.bits, cfg_.group_size);
            c.quant_passes = std::move(passes);
        } else {
            c.k_raw = k;
            c.v_raw = v;
        }
        return c;
    }

    void materialize_cache(HeadTensor &k_dst, HeadTensor &v_dst) const {
        std::size_t off = 0;
        for (const Chunk &c : chunks_) {
            if (cfg_.quantization_enabled) {
                copy_tokens_into(k_dst, off, dequantize_tensor(c.k_q));
                copy_tokens_into(v_dst, off, dequantize_tensor(c.v_q));
            } else {
                copy_tokens_into(k_dst, off, c.k_raw);
                copy_tokens_into(v_dst, off, c.v_raw);
            }
            off += c.tokens;
        }
    }

    std::vector<std::uint32_t> gather_middle_passes(const KeepSet &keep,
                                                    const CacheSegments &seg) const {
        if (!cfg_.quantization_enabled) return {};
        std::vector<std::uint32_t> all;
        all.reserve(seg.middle_len);
        for (std::size_t ci = 1; ci < chunks_.size(); ++ci) {
            all.insert(all.end(), chunks_[ci].quant_passes.begin(),
                       chunks_[ci].quant_passes.end());
        }
        std::vector<std::uint32_t> out;
        for (std::size_t idx : keep.indices) {
            if (idx >= seg.first_len && idx < seg.first_len + seg.middle_len) {
                out.push_back(all[idx - seg.first_len] + 1);
            }
        }
        return out;
    }

    void finish_step(std::size_t frame) {
        ++frame_counter_;
        total_ingested_ += frame;
    }

    static void write_quantized(detail::ByteWriter &w, const QuantizedTensor &q) {
        w.u32(static_cast<std::uint32_t>(q.params.size()));
        for (const QuantParams &p : q.params) {
            if (p.degenerate()) {
                w.f32(0.0f);
                w.f32(*p.degenerate_min);
            } else {
                w.f32(static_cast<float>(p.scale));
                w.u32(static_cast<std::uint32_t>(static_cast<std::int32_t>(p.zero_point)));
            }
        }
        w.u64(q.codes.size());
        w.raw(q.codes);
    }

    static QuantizedTensor read_quantized(detail::ByteReader &r, const CacheConfig &cfg,
                                          std::size_t tokens, QuantAxis axis) {
        QuantizedTensor q;
        q.heads = cfg.heads;
        q.tokens = tokens;
        q.channels = cfg.head_dim;
        q.bits = cfg.bits;
        q.group_size = cfg.group_size;
        q.axis = axis;
        const std::uint32_t groups = r.u32();
        if (groups != q.group_count()) {
            throw std::runtime_error("snapshot group count mismatch");
        }
        q.params.reserve(groups);
        for (std::uint32_t i = 0; i < groups; ++i) {
            QuantParams p;
            p.bits = cfg.bits;
            const float scale = r.f32();
            if (scale == 0.0f) {
                p.degenerate_min = r.f32();
            } else {
                p.scale = static_cast<double>(scale);
                p.zero_point = static_cast<std::int32_t>(r.u32());
            }
            q.params.push_back(p);
        }
        const std::uint64_t nbytes = r.u64();
        if (nbytes != packed_code_bytes(q.element_count(), cfg.bits)) {
            throw std::runtime_error("snapshot code size mismatch");
        }
        const auto raw = r.raw(nbytes);
        q.codes.assign(raw.begin(), raw.end());
        return q;
    }

    static void write_raw(detail::ByteWriter &w, const HeadTensor &x) {
        w.u64(x.data.size());
        for (float v : x.data) w.f32(v);
    }

    static HeadTensor read_raw(detail::ByteReader &r, const CacheConfig &cfg,
                               std::size_t tokens) {
        HeadTensor x(cfg.heads, tokens, cfg.head_dim);
        const std::uint64_t n = r.u64();
        if (n != x.data.size()) {
            throw std::runtime_error("snapshot tensor size mismatch");
        }
        for (std::size_t i = 0; i < n; ++i) x.data[i] = r.f32();
        return x;
    }

    CacheConfig cfg_;
    std::vector<Chunk> chunks_;
    std::uint64_t frame_counter_ = 0;
    std::uint64_t total_ingested_ = 0;
    std::uint64_t prune_events_ = 0;
    std::size_t first_frame_len_ = 0;
};

} // namespace xkv
