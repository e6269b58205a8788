#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace xkv {

struct WorkloadConfig {
    std::size_t frames = 200;
    FrameLayout layout{4, 59};
    std::size_t heads = 8;
    std::size_t head_dim = 64;
    std::uint64_t seed = 0;
    double outlier_fraction = 1.0 / 16; // fraction of key channels boosted
    double outlier_scale = 20.0;
    double temporal_correlation = 0.0;  // AR(1) coefficient across frames

    void validate() const {
        validate_layout(layout);
        if (frames == 0) throw std::invalid_argument("workload: frames must be positive");
        if (heads == 0) throw std::invalid_argument("workload: heads must be positive");
        if (head_dim == 0) throw std::invalid_argument("workload: head_dim must be positive");
        if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) {
            throw std::invalid_argument("workload: outlier fraction must be in [0, 1]");
        }
        if (outlier_scale <= 0.0) {
            throw std::invalid_argument("workload: outlier scale must be positive");
        }
        if (!(temporal_correlation >= 0.0 && temporal_correlation < 1.0)) {
            throw std::invalid_argument("workload: temporal correlation must be in [0, 1)");
        }
    }
};

namespace detail {

// Box-Muller over mt19937_64. std::normal_distribution is not pinned across
// standard libraries; this stream is, so seeded workloads are reproducible
// byte for byte anywhere.
class GaussianStream {
  public:
    explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        if (u1 == 0.0) u1 = 0x1p-53;
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t raw() { return rng_(); }

  private:
    double uniform01() {
        return static_cast<double>(rng_() >> 11) * 0x1p-53;
    }

    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// First ceil(fraction * d) positions of a seeded Fisher-Yates shuffle,
// returned sorted. Stable for a given seed, shared by every frame.
inline std::vector<std::size_t> pick_outlier_channels(GaussianStream &rng, std::size_t d,
                                                      double fraction) {
    const std::size_t count =
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d)));
    std::vector<std::size_t> perm(d);
    for (std::size_t i = 0; i < d; ++i) perm[i] = i;
    for (std::size_t i = d; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.raw() % i);
        std::swap(perm[i - 1], perm[j]);
    }
    perm.resize(std::min(count, d));
    std::sort(perm.begin(), perm.end());
    return perm;
}

} // namespace detail

// Synthetic frame stream. Base samples are i.i.d. standard normal; with
// temporal_correlation = rho > 0 each element follows an AR(1) chain
// x_t = rho * x_{t-1} + sqrt(1 - rho^2) * eps_t with unit marginal variance,
// so rho = 0 gives statistically independent frames. A fixed set of key
// channels (the same ones every frame) is multiplied by outlier_scale to
// reproduce the skewed per-channel key spread the cache is built around.
inline std::vector<Frame> gen_workload(const WorkloadConfig &cfg) {
    cfg.validate();
    detail::GaussianStream rng(cfg.seed);
    const std::size_t tokens = cfg.layout.total();
    const std::size_t per_tensor = cfg.heads * tokens * cfg.head_dim;

    std::vector<std::size_t> boosted;
    if (cfg.outlier_fraction > 0.0) {
        boosted = detail::pick_outlier_channels(rng, cfg.head_dim, cfg.outlier_fraction);
    }
    std::vector<bool> is_boosted(cfg.head_dim, false);
    for (std::size_t c : boosted) is_boosted[c] = true;

    const double rho = cfg.temporal_correlation;
    const double innov = std::sqrt(1.0 - rho * rho);
    std::vector<double> state_q(per_tensor), state_k(per_tensor), state_v(per_tensor);

    std::vector<Frame> frames;
    frames.reserve(cfg.frames);
    for (std::size_t t = 0; t < cfg.frames; ++t) {
        const auto advance = [&](std::vector<double> &state) {
            if (t == 0 || rho == 0.0) {
                for (double &x : state) x = rng.next();
            } else {
                for (double &x : state) x = rho * x + innov * rng.next();
            }
        };
        advance(state_q);
        advance(state_k);
        advance(state_v);

        Frame f;
        f.q = HeadTensor(cfg.heads, tokens, cfg.head_dim);
        f.k = HeadTensor(cfg.heads, tokens, cfg.head_dim);
        f.v = HeadTensor(cfg.heads, tokens, cfg.head_dim);
        for (std::size_t i = 0; i < per_tensor; ++i) {
            f.q.data[i] = static_cast<float>(state_q[i]);
            f.v.data[i] = static_cast<float>(state_v[i]);
        }
        std::size_t i = 0;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            for (std::size_t tk = 0; tk < tokens; ++tk) {
                for (std::size_t c = 0; c < cfg.head_dim; ++c, ++i) {
                    const double scale = is_boosted[c] ? cfg.outlier_scale : 1.0;
                    f.k.data[i] = static_cast<float>(state_k[i] * scale);
                }
            }
        }
        frames.push_back(std::move(f));
    }
    return frames;
}

} // namespace xkv
