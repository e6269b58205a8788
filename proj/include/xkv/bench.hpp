#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "attention.hpp"
#include "stream_cache.hpp"
#include "workload.hpp"

namespace xkv {

struct FrameStats {
    double wall_ms = 0.0;
    std::uint64_t cache_tokens = 0;
    std::uint64_t compressed_bytes = 0;
    std::uint64_t fp16_equivalent_bytes = 0;
    std::optional<double> rel_l2_error;
};

struct Aggregates {
    std::optional<double> mean_error;
    std::optional<double> max_error;
    double memory_ratio = 0.0;
    std::optional<double> latency_slope_ms_per_frame;
    double latency_mean_ms = 0.0;
    double requant_passes = 0.0;
    std::optional<std::size_t> saturation_frame; // first frame that pruned
};

struct StreamMetrics {
    WorkloadConfig workload;
    CacheConfig cache;
    bool oracle_enabled = false;
    std::vector<FrameStats> frames;
    Aggregates aggregate;
};

enum class EmitFormat { json, csv };

// Frames this many steps in before the latency fit starts, so first-touch
// and allocator warmup do not tilt the slope.
inline constexpr std::size_t kLatencyWarmupFrames = 3;

// Upper bound on the approximate working set before a run is refused.
inline constexpr std::uint64_t kMaxRunBytes = 6ull << 30;

inline std::uint64_t estimate_run_bytes(const WorkloadConfig &wl, const CacheConfig &cc,
                                        bool oracle) {
    const std::uint64_t per_token = static_cast<std::uint64_t>(wl.heads) * wl.head_dim;
    const std::uint64_t total = static_cast<std::uint64_t>(wl.frames) * wl.layout.total();
    std::uint64_t bytes = 3ull * total * per_token * 4; // generated workload
    const std::uint64_t resident =
        cc.budget == kUnboundedBudget
            ? total
            : std::min<std::uint64_t>(total, cc.budget + wl.layout.total());
    bytes += 6ull * resident * per_token * 4; // cache plus step working copies
    if (oracle) {
        bytes += 3ull * total * per_token * 8; // f64 concat K/V plus outputs
    }
    return bytes;
}

inline StreamMetrics run_benchmark(const WorkloadConfig &wl, const CacheConfig &cc,
                                   bool compare_oracle) {
    wl.validate();
    cc.validate();
    if (wl.heads != cc.heads || wl.head_dim != cc.head_dim ||
        wl.layout.register_tokens != cc.layout.register_tokens ||
        wl.layout.patch_tokens != cc.layout.patch_tokens) {
        throw std::invalid_argument("run_benchmark: workload and cache shapes disagree");
    }
    const std::uint64_t est = estimate_run_bytes(wl, cc, compare_oracle);
    if (est > kMaxRunBytes) {
        throw std::invalid_argument("run_benchmark: estimated working set " +
                                    std::to_string(est >> 20) + " MiB exceeds the " +
                                    std::to_string(kMaxRunBytes >> 20) + " MiB limit");
    }

    const std::vector<Frame> frames = gen_workload(wl);
    std::vector<HeadTensor64> reference;
    if (compare_oracle) {
        reference = reference_stream(frames);
    }

    StreamMetrics m;
    m.workload = wl;
    m.cache = cc;
    m.oracle_enabled = compare_oracle;
    m.frames.reserve(frames.size());

    StreamingKVCache cache(cc);
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const bool pruned_before = cache.prune_events() > 0;
        const auto t0 = std::chrono::steady_clock::now();
        const HeadTensor out = cache.step(frames[t].q, frames[t].k, frames[t].v);
        const auto t1 = std::chrono::steady_clock::now();

        FrameStats fs;
        fs.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        fs.cache_tokens = cache.cache_len();
        const MemoryUsage mem = cache.memory_bytes();
        fs.compressed_bytes = mem.compressed_bytes;
        fs.fp16_equivalent_bytes = mem.fp16_equivalent_bytes;
        if (compare_oracle) {
            fs.rel_l2_error = relative_l2(out, reference[t]);
        }
        m.frames.push_back(fs);

        if (!pruned_before && cache.prune_events() > 0) {
            m.aggregate.saturation_frame = t;
        }
    }

    if (compare_oracle && !m.frames.empty()) {
        double total = 0.0;
        double mx = 0.0;
        for (const FrameStats &fs : m.frames) {
            total += *fs.rel_l2_error;
            mx = std::max(mx, *fs.rel_l2_error);
        }
        m.aggregate.mean_error = total / static_cast<double>(m.frames.size());
        m.aggregate.max_error = mx;
    }
    if (!m.frames.empty()) {
        const FrameStats &last = m.frames.back();
        m.aggregate.memory_ratio =
            last.fp16_equivalent_bytes == 0
                ? 0.0
                : static_cast<double>(last.compressed_bytes) /
                      static_cast<double>(last.fp16_equivalent_bytes);
    }
    m.aggregate.requant_passes = cache.mean_requant_passes();

    const std::size_t start =
        std::max(kLatencyWarmupFrames, m.aggregate.saturation_frame.value_or(0));
    if (m.frames.size() >= start + 2) {
        double sx = 0.0, sy = 0.0;
        const std::size_t n = m.frames.size() - start;
        for (std::size_t i = start; i < m.frames.size(); ++i) {
            sx += static_cast<double>(i);
            sy += m.frames[i].wall_ms;
        }
        const double mx = sx / static_cast<double>(n);
        const double my = sy / static_cast<double>(n);
        double num = 0.0, den = 0.0;
        for (std::size_t i = start; i < m.frames.size(); ++i) {
            const double dx = static_cast<double>(i) - mx;
            num += dx * (m.frames[i].wall_ms - my);
            den += dx * dx;
        }
        m.aggregate.latency_slope_ms_per_frame = num / den;
        m.aggregate.latency_mean_ms = my;
    }
    return m;
}

inline nlohmann::json workload_to_json(const WorkloadConfig &wl) {
    return {
        {"frames", wl.frames},
        {"tokens_per_frame", wl.layout.total()},
        {"register_tokens", wl.layout.register_tokens},
        {"patch_tokens", wl.layout.patch_tokens},
        {"heads", wl.heads},
        {"head_dim", wl.head_dim},
        {"seed", wl.seed},
        {"outlier_fraction", wl.outlier_fraction},
        {"outlier_scale", wl.outlier_scale},
        {"temporal_correlation", wl.temporal_correlation},
    };
}

inline nlohmann::json cache_to_json(const CacheConfig &cc) {
    return {
        {"budget", cc.budget == kUnboundedBudget ? 0 : cc.budget},
        {"pool_size", cc.pool_size},
        {"bits", cc.bits},
        {"group_size", cc.group_size},
        {"quantization", cc.quantization_enabled},
    };
}

inline nlohmann::json metrics_to_json(const StreamMetrics &m) {
    nlohmann::json frames = nlohmann::json::array();
    for (std::size_t i = 0; i < m.frames.size(); ++i) {
        const FrameStats &fs = m.frames[i];
        nlohmann::json row = {
            {"frame", i},
            {"wall_ms", fs.wall_ms},
            {"cache_tokens", fs.cache_tokens},
            {"compressed_bytes", fs.compressed_bytes},
            {"fp16_equivalent_bytes", fs.fp16_equivalent_bytes},
        };
        if (fs.rel_l2_error) row["rel_l2_error"] = *fs.rel_l2_error;
        frames.push_back(std::move(row));
    }
    nlohmann::json agg = {
        {"memory_ratio", m.aggregate.memory_ratio},
        {"latency_mean_ms", m.aggregate.latency_mean_ms},
        {"requant_passes", m.aggregate.requant_passes},
    };
    if (m.aggregate.mean_error) agg["mean_error"] = *m.aggregate.mean_error;
    if (m.aggregate.max_error) agg["max_error"] = *m.aggregate.max_error;
    if (m.aggregate.latency_slope_ms_per_frame) {
        agg["latency_slope_ms_per_frame"] = *m.aggregate.latency_slope_ms_per_frame;
    }
    if (m.aggregate.saturation_frame) {
        agg["saturation_frame"] = *m.aggregate.saturation_frame;
    }
    return {
        {"workload", workload_to_json(m.workload)},
        {"cache", cache_to_json(m.cache)},
        {"oracle", m.oracle_enabled},
        {"frames", std::move(frames)},
        {"aggregate", std::move(agg)},
    };
}

// Zeroes every wall-clock-derived field. Determinism comparisons run on the
// result; everything else in the document is seed-determined.
inline void strip_wall_fields(nlohmann::json &doc) {
    if (doc.contains("frames")) {
        for (auto &row : doc["frames"]) row["wall_ms"] = 0.0;
    }
    if (doc.contains("aggregate")) {
        auto &agg = doc["aggregate"];
        if (agg.contains("latency_mean_ms")) agg["latency_mean_ms"] = 0.0;
        if (agg.contains("latency_slope_ms_per_frame")) {
            agg["latency_slope_ms_per_frame"] = 0.0;
        }
    }
}

inline std::string metrics_to_csv(const StreamMetrics &m) {
    std::ostringstream out;
    out.precision(17);
    out << "frame,wall_ms,cache_tokens,compressed_bytes,fp16_equivalent_bytes";
    if (m.oracle_enabled) out << ",rel_l2_error";
    out << "\n";
    for (std::size_t i = 0; i < m.frames.size(); ++i) {
        const FrameStats &fs = m.frames[i];
        out << i << "," << fs.wall_ms << "," << fs.cache_tokens << ","
            << fs.compressed_bytes << "," << fs.fp16_equivalent_bytes;
        if (m.oracle_enabled) out << "," << *fs.rel_l2_error;
        out << "\n";
    }
    out << "# memory_ratio=" << m.aggregate.memory_ratio << "\n";
    out << "# latency_mean_ms=" << m.aggregate.latency_mean_ms << "\n";
    out << "# requant_passes=" << m.aggregate.requant_passes << "\n";
    if (m.aggregate.mean_error) out << "# mean_error=" << *m.aggregate.mean_error << "\n";
    if (m.aggregate.max_error) out << "# max_error=" << *m.aggregate.max_error << "\n";
    if (m.aggregate.latency_slope_ms_per_frame) {
        out << "# latency_slope_ms_per_frame=" << *m.aggregate.latency_slope_ms_per_frame
            << "\n";
    }
    if (m.aggregate.saturation_frame) {
        out << "# saturation_frame=" << *m.aggregate.saturation_frame << "\n";
    }
    return out.str();
}

inline void emit(const StreamMetrics &m, EmitFormat format, const std::string &path) {
    std::string text;
    if (format == EmitFormat::json) {
        text = metrics_to_json(m).dump(2);
        text.push_back('\n');
    } else {
        text = metrics_to_csv(m);
    }
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open output file: " + path);
    }
    out << text;
}

// Post-run self checks, used by the CLI's --assert-properties.
inline std::vector<std::string> check_stream_properties(const StreamMetrics &m) {
    std::vector<std::string> failures;
    const std::uint64_t frame_tokens = m.workload.layout.total();

    if (m.cache.budget != kUnboundedBudget) {
        const std::uint64_t bound = std::max(m.cache.budget, 2 * frame_tokens);
        for (std::size_t i = 0; i < m.frames.size(); ++i) {
            if (m.frames[i].cache_tokens > bound) {
                failures.push_back("budget bound violated at frame " + std::to_string(i) +
                                   ": " + std::to_string(m.frames[i].cache_tokens) + " > " +
                                   std::to_string(bound));
                break;
            }
        }
    }

    if (m.oracle_enabled && !m.cache.quantization_enabled &&
        m.cache.budget == kUnboundedBudget && m.aggregate.max_error &&
        *m.aggregate.max_error > 1e-5) {
        failures.push_back("lossless mode error " + std::to_string(*m.aggregate.max_error) +
                           " exceeds 1e-5");
    }

    const std::uint64_t ingested =
        static_cast<std::uint64_t>(m.workload.frames) * frame_tokens;
    if (m.cache.quantization_enabled && m.cache.budget != kUnboundedBudget &&
        ingested >= 4 * m.cache.budget && !m.frames.empty()) {
        if (m.aggregate.memory_ratio >= 0.25) {
            failures.push_back("memory ratio " + std::to_string(m.aggregate.memory_ratio) +
                               " is not below 0.25");
        }
    }

    if (m.aggregate.saturation_frame && m.aggregate.latency_slope_ms_per_frame &&
        m.frames.size() >= *m.aggregate.saturation_frame + 32) {
        const double slope = std::abs(*m.aggregate.latency_slope_ms_per_frame);
        if (slope > 0.05 * m.aggregate.latency_mean_ms) {
            failures.push_back("latency slope " + std::to_string(slope) +
                               " ms/frame exceeds 5% of mean " +
                               std::to_string(m.aggregate.latency_mean_ms) + " ms");
        }
    }
    return failures;
}

} // namespace xkv
