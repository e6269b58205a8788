// Acceptance gate for the streaming cache. Each criterion prints exactly one
// [PASS]/[FAIL] line; the exit code is the number of failed criteria. The
// first argument, when present, is the path to the benchmark binary used by
// the process-level determinism check.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xkv/xkv.hpp"

using namespace xkv;

namespace {

std::string g_bench_path;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char *spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// Reconstruction lands on the float32 grid, so the slack is in float ulps.
double ulp_of(double x) {
    const float a = std::fabs(static_cast<float>(x));
    return static_cast<double>(
        std::nextafter(a, std::numeric_limits<float>::infinity()) - a);
}

// ---------------------------------------------------------------------------
// 1. Disabling quantization with an unbounded budget must reproduce the
//    full-precision stream within 1e-5 relative L2, quickly.

Outcome criterion_lossless() {
    WorkloadConfig wl;
    wl.frames = 32;
    wl.layout = FrameLayout{4, 59};
    wl.heads = 4;
    wl.head_dim = 32;
    wl.seed = 42;

    CacheConfig cc;
    cc.budget = kUnboundedBudget;
    cc.quantization_enabled = false;
    cc.heads = wl.heads;
    cc.head_dim = wl.head_dim;
    cc.layout = wl.layout;

    const auto t0 = std::chrono::steady_clock::now();
    const StreamMetrics m = run_benchmark(wl, cc, true);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const double err = m.aggregate.max_error.value_or(1.0);
    const bool pass = err <= 1e-5 && secs < 10.0;
    return {pass, "max rel L2 " + fmt("%.2e", err) + ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Grouped asymmetric round trips stay within half a quantization step
//    (plus float32 reconstruction slack) for every element at every width.

Outcome criterion_roundtrip() {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int widths[] = {2, 4, 8};
    const std::size_t sizes[] = {64, 17, 3};
    const double mags[] = {1e-3, 1.0, 1e3};

    std::size_t groups = 0;
    std::size_t violations = 0;
    double worst = 0.0;
    for (int bits : widths) {
        for (std::size_t g = 0; g < 10000; ++g) {
            const std::size_t n = sizes[g % 3];
            const double mag = mags[(g / 3) % 3];
            std::vector<float> x(n);
            if (g % 97 == 0) {
                std::fill(x.begin(), x.end(), static_cast<float>(gauss(rng) * mag));
            } else {
                const double shift = (g % 11 == 0) ? 3.0 * mag : 0.0;
                for (float &v : x) v = static_cast<float>(gauss(rng) * mag + shift);
            }

            const QuantParams p = quant_params(x, bits);
            const auto codes = quantize(x, p);
            const auto y = dequantize(codes, p);
            double amax = 0.0;
            for (float v : x) amax = std::max(amax, std::fabs(static_cast<double>(v)));
            const double bound = p.scale / 2.0 + 4.0 * ulp_of(amax);
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::fabs(static_cast<double>(x[i]) - y[i]);
                worst = std::max(worst, p.scale > 0.0 ? e / p.scale : e);
                if (e > bound) ++violations;
            }
            ++groups;
        }
    }
    return {violations == 0, std::to_string(groups) + " groups, " +
                                 std::to_string(violations) + " violations, worst " +
                                 fmt("%.3f", worst) + " steps"};
}

// ---------------------------------------------------------------------------
// 3. The partial-select keep set must equal a full stable sort, ties and
//    protected spans included.

std::vector<std::size_t> select_by_full_sort(const std::vector<float> &scores,
                                             const CacheSegments &seg,
                                             std::uint64_t budget) {
    const std::uint64_t prot =
        static_cast<std::uint64_t>(seg.first_len) + seg.current_len;
    std::uint64_t k = 0;
    if (budget == kUnboundedBudget) {
        k = seg.middle_len;
    } else if (budget > prot) {
        k = budget - prot;
    }
    const std::size_t m =
        static_cast<std::size_t>(std::min<std::uint64_t>(k, seg.middle_len));

    std::vector<std::size_t> order(seg.middle_len);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a > b;
    });
    order.resize(m);
    std::sort(order.begin(), order.end());

    std::vector<std::size_t> keep;
    for (std::size_t t = 0; t < seg.first_len; ++t) keep.push_back(t);
    for (std::size_t j : order) keep.push_back(seg.first_len + j);
    for (std::size_t t = 0; t < seg.current_len; ++t) {
        keep.push_back(seg.first_len + seg.middle_len + t);
    }
    return keep;
}

Outcome criterion_selection() {
    std::mt19937_64 rng(2024);
    std::size_t mismatches = 0;
    const std::size_t instances = 1000;
    for (std::size_t it = 0; it < instances; ++it) {
        CacheSegments seg;
        seg.first_len = 1 + rng() % 8;
        seg.middle_len = rng() % 40;
        seg.current_len = 1 + rng() % 8;
        const std::uint64_t prot =
            static_cast<std::uint64_t>(seg.first_len) + seg.current_len;
        const std::uint64_t budget =
            (it % 7 == 0) ? kUnboundedBudget : prot + rng() % (seg.middle_len + 4);

        ImportanceScores s;
        s.scores.resize(seg.middle_len);
        for (float &v : s.scores) {
            if (it % 3 == 0) {
                v = static_cast<float>(rng() % 1000) / 31.0f; // mostly distinct
            } else {
                v = static_cast<float>(static_cast<int>(rng() % 9) - 4); // heavy ties
            }
        }

        const KeepSet keep = select_keep_indices(s, seg, budget);
        if (keep.indices != select_by_full_sort(s.scores, seg, budget)) ++mismatches;
    }
    return {mismatches == 0, std::to_string(instances) + " instances, " +
                                 std::to_string(mismatches) + " mismatches"};
}

// ---------------------------------------------------------------------------
// 4. The cache never holds more than max(budget, first frame + new frame)
//    tokens, and grows exactly with ingest until the budget binds.

Outcome criterion_budget_bound() {
    const std::uint64_t budgets[] = {32, 128, 256, 2048};
    std::size_t checks = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        WorkloadConfig wl;
        wl.frames = 64;
        wl.layout = FrameLayout{1, 30}; // 32 tokens
        wl.heads = 2;
        wl.head_dim = 32;
        wl.seed = seed;
        const auto frames = gen_workload(wl);
        const std::size_t frame_tokens = wl.layout.total();

        for (std::uint64_t budget : budgets) {
            CacheConfig cc;
            cc.budget = budget;
            cc.pool_size = 4;
            cc.heads = wl.heads;
            cc.head_dim = wl.head_dim;
            cc.layout = wl.layout;
            StreamingKVCache cache(cc);

            for (std::size_t t = 0; t < frames.size(); ++t) {
                cache.step(frames[t].q, frames[t].k, frames[t].v);
                const std::uint64_t len = cache.cache_len();
                const std::uint64_t ingested = (t + 1) * frame_tokens;
                const std::uint64_t bound =
                    std::max<std::uint64_t>(budget, 2 * frame_tokens);
                ++checks;
                if (len > bound) {
                    return {false, "seed " + std::to_string(seed) + " budget " +
                                       std::to_string(budget) + " frame " +
                                       std::to_string(t) + ": length " +
                                       std::to_string(len) + " > " + std::to_string(bound)};
                }
                if (ingested <= budget && len != ingested) {
                    return {false, "seed " + std::to_string(seed) + " budget " +
                                       std::to_string(budget) + " frame " +
                                       std::to_string(t) + ": pruned below budget"};
                }
            }
        }
    }
    return {true, std::to_string(checks) + " frame checks across 20 seeds x 4 budgets"};
}

// ---------------------------------------------------------------------------
// 5. With boosted key channels, channel-grouped key quantization must cut RMS
//    error to at most a quarter of whole-token groups (median over seeds).

Outcome criterion_granularity() {
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        WorkloadConfig wl;
        wl.frames = 1;
        wl.layout = FrameLayout{1, 62}; // 64 tokens
        wl.heads = 2;
        wl.head_dim = 256;
        wl.seed = 900 + seed;
        wl.outlier_fraction = 1.0 / 16;
        wl.outlier_scale = 20.0;
        const HeadTensor k = gen_workload(wl)[0].k;

        const auto mse = [&](const HeadTensor &recon) {
            double ss = 0.0;
            for (std::size_t i = 0; i < k.data.size(); ++i) {
                const double d = static_cast<double>(k.data[i]) - recon.data[i];
                ss += d * d;
            }
            return ss / static_cast<double>(k.data.size());
        };
        const double mixed = mse(dequantize_tensor(quantize_key_per_channel(k, 4, 64)));
        const double token_grouped =
            mse(dequantize_tensor(quantize_value_per_token(k, 4, wl.head_dim)));
        ratios.push_back(mixed / token_grouped);
    }
    std::sort(ratios.begin(), ratios.end());
    const double median = ratios[ratios.size() / 2];
    const double worst = ratios.back();
    return {median <= 0.25,
            "median MSE ratio " + fmt("%.3f", median) + ", max " + fmt("%.3f", worst) +
                " over 100 seeds"};
}

// ---------------------------------------------------------------------------
// 6. A saturated default cache must hold under a quarter of the float16
//    footprint of everything ingested, with exact byte accounting.

Outcome criterion_memory() {
    WorkloadConfig wl;
    wl.frames = 128;
    wl.layout = FrameLayout{4, 59}; // 64 tokens
    wl.heads = 2;
    wl.head_dim = 32;
    wl.seed = 7;

    CacheConfig cc;
    cc.budget = 2048;
    cc.heads = wl.heads;
    cc.head_dim = wl.head_dim;
    cc.layout = wl.layout;

    const StreamMetrics m = run_benchmark(wl, cc, false);
    const std::uint64_t ingested =
        static_cast<std::uint64_t>(wl.frames) * wl.layout.total();
    const std::uint64_t expected_fp16 = 2ull * ingested * wl.heads * wl.head_dim * 2ull;
    const FrameStats &last = m.frames.back();

    if (last.fp16_equivalent_bytes != expected_fp16) {
        return {false, "fp16 accounting " + std::to_string(last.fp16_equivalent_bytes) +
                           " != expected " + std::to_string(expected_fp16)};
    }
    const double ratio = m.aggregate.memory_ratio;
    return {ratio < 0.25, "compressed/fp16 ratio " + fmt("%.3f", ratio) + " after " +
                              std::to_string(ingested) + " tokens"};
}

// ---------------------------------------------------------------------------
// 7. Per-frame latency must go flat once the budget saturates, while the
//    unbounded cache keeps slowing down.

Outcome criterion_latency() {
    WorkloadConfig wl;
    wl.frames = 200;
    wl.layout = FrameLayout{4, 59};
    wl.heads = 1;
    wl.head_dim = 16;
    wl.seed = 3;

    CacheConfig bounded;
    bounded.budget = 256;
    bounded.heads = wl.heads;
    bounded.head_dim = wl.head_dim;
    bounded.layout = wl.layout;

    CacheConfig unbounded = bounded;
    unbounded.budget = kUnboundedBudget;

    const StreamMetrics mb = run_benchmark(wl, bounded, false);
    const StreamMetrics mu = run_benchmark(wl, unbounded, false);

    if (!mb.aggregate.saturation_frame ||
        mb.frames.size() < *mb.aggregate.saturation_frame + 32) {
        return {false, "bounded run never saturated"};
    }
    if (!mb.aggregate.latency_slope_ms_per_frame ||
        !mu.aggregate.latency_slope_ms_per_frame) {
        return {false, "latency fit missing"};
    }
    const double slope = *mb.aggregate.latency_slope_ms_per_frame;
    const double mean = mb.aggregate.latency_mean_ms;
    const double growth = *mu.aggregate.latency_slope_ms_per_frame;
    const bool flat = std::fabs(slope) <= 0.05 * mean;
    return {flat && growth > 0.0,
            "bounded slope " + fmt("%.4f", slope) + " ms/frame on mean " +
                fmt("%.3f", mean) + " ms; unbounded slope " + fmt("%.4f", growth)};
}

// ---------------------------------------------------------------------------
// 8. Oracle error must not increase with budget, and 8-bit storage must not
//    be worse than 4-bit at a fixed budget.

Outcome criterion_error_trend() {
    WorkloadConfig wl;
    wl.frames = 48;
    wl.layout = FrameLayout{1, 30}; // 32 tokens
    wl.heads = 2;
    wl.head_dim = 32;
    wl.seed = 11;

    const std::uint64_t budgets[] = {128, 256, 512, kUnboundedBudget};
    std::vector<double> errs;
    for (std::uint64_t budget : budgets) {
        CacheConfig cc;
        cc.budget = budget;
        cc.pool_size = 4;
        cc.heads = wl.heads;
        cc.head_dim = wl.head_dim;
        cc.layout = wl.layout;
        errs.push_back(*run_benchmark(wl, cc, true).aggregate.mean_error);
    }
    for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
        if (errs[i + 1] > errs[i]) {
            return {false, "mean error rose from " + fmt("%.3e", errs[i]) + " to " +
                               fmt("%.3e", errs[i + 1]) + " between budgets " +
                               std::to_string(budgets[i]) + " and " +
                               (budgets[i + 1] == kUnboundedBudget
                                    ? std::string("unbounded")
                                    : std::to_string(budgets[i + 1]))};
        }
    }

    CacheConfig cc8;
    cc8.budget = 256;
    cc8.pool_size = 4;
    cc8.bits = 8;
    cc8.heads = wl.heads;
    cc8.head_dim = wl.head_dim;
    cc8.layout = wl.layout;
    const double err8 = *run_benchmark(wl, cc8, true).aggregate.mean_error;
    if (err8 > errs[1]) {
        return {false, "8-bit mean error " + fmt("%.3e", err8) + " exceeds 4-bit " +
                           fmt("%.3e", errs[1]) + " at budget 256"};
    }
    return {true, "errors " + fmt("%.2e", errs[0]) + " >= " + fmt("%.2e", errs[1]) +
                      " >= " + fmt("%.2e", errs[2]) + " >= " + fmt("%.2e", errs[3]) +
                      "; 8-bit " + fmt("%.2e", err8)};
}

// ---------------------------------------------------------------------------
// 9. Same seed, same numbers: twice in process, twice through the CLI, and
//    across a snapshot round trip.

Outcome criterion_determinism() {
    WorkloadConfig wl;
    wl.frames = 24;
    wl.layout = FrameLayout{1, 14}; // 16 tokens
    wl.heads = 2;
    wl.head_dim = 16;
    wl.seed = 5;

    CacheConfig cc;
    cc.budget = 96;
    cc.pool_size = 4;
    cc.heads = wl.heads;
    cc.head_dim = wl.head_dim;
    cc.layout = wl.layout;

    nlohmann::json a = metrics_to_json(run_benchmark(wl, cc, true));
    nlohmann::json b = metrics_to_json(run_benchmark(wl, cc, true));
    strip_wall_fields(a);
    strip_wall_fields(b);
    if (a.dump() != b.dump()) {
        return {false, "in-process reruns diverged"};
    }

    // Snapshot round trip: identical continuations, identical bytes.
    WorkloadConfig swl = wl;
    swl.frames = 16;
    swl.seed = 6;
    const auto frames = gen_workload(swl);
    StreamingKVCache live(cc);
    for (std::size_t t = 0; t < 10; ++t) live.step(frames[t].q, frames[t].k, frames[t].v);
    StreamingKVCache revived = StreamingKVCache::restore(live.snapshot());
    for (std::size_t t = 10; t < 16; ++t) {
        const HeadTensor oa = live.step(frames[t].q, frames[t].k, frames[t].v);
        const HeadTensor ob = revived.step(frames[t].q, frames[t].k, frames[t].v);
        if (oa.data != ob.data) {
            return {false, "restored cache diverged at frame " + std::to_string(t)};
        }
    }
    if (live.snapshot() != revived.snapshot()) {
        return {false, "re-snapshot bytes diverged"};
    }

    if (g_bench_path.empty()) {
        return {false, "benchmark binary path not provided"};
    }
    const auto dir = std::filesystem::temp_directory_path() /
                     ("xkv_acceptance_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(dir);
    const std::string common = "\"" + g_bench_path +
                               "\" --frames 24 --tokens-per-frame 16 --registers 1"
                               " --heads 2 --head-dim 16 --budget 96 --seed 5"
                               " --oracle --out ";
    const auto pa = dir / "a.json";
    const auto pb = dir / "b.json";
    const int ra = std::system((common + "\"" + pa.string() + "\"").c_str());
    const int rb = std::system((common + "\"" + pb.string() + "\"").c_str());
    if (ra != 0 || rb != 0) {
        std::filesystem::remove_all(dir);
        return {false, "benchmark binary exited nonzero"};
    }
    nlohmann::json ja, jb;
    std::ifstream(pa) >> ja;
    std::ifstream(pb) >> jb;
    std::filesystem::remove_all(dir);
    strip_wall_fields(ja);
    strip_wall_fields(jb);
    if (ja.dump() != jb.dump()) {
        return {false, "CLI reruns diverged"};
    }
    return {true, "in-process, snapshot, and CLI reruns all bit-identical"};
}

} // namespace

int main(int argc, char **argv) {
    if (argc > 1) g_bench_path = argv[1];

    struct Row {
        const char *name;
        std::function<Outcome()> fn;
    };
    const std::vector<Row> rows = {
        {"lossless mode matches the full-precision stream", criterion_lossless},
        {"quantizer round-trip error within half a step", criterion_roundtrip},
        {"keep-set selection equals a full stable sort", criterion_selection},
        {"cache length respects the budget bound", criterion_budget_bound},
        {"channel groups beat token groups on outlier keys", criterion_granularity},
        {"saturated footprint under a quarter of float16", criterion_memory},
        {"per-frame latency flat after saturation", criterion_latency},
        {"error falls as budget and bit width grow", criterion_error_trend},
        {"reruns and snapshot round trips are bit-identical", criterion_determinism},
    };

    int failed = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        Outcome o;
        try {
            o = rows[i].fn();
        } catch (const std::exception &e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("[%s] criterion %zu: %s (%s)\n", o.pass ? "PASS" : "FAIL", i + 1,
                    rows[i].name, o.detail.c_str());
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    std::printf("%zu/%zu criteria passed\n", rows.size() - static_cast<std::size_t>(failed),
                rows.size());
    return failed;
}
