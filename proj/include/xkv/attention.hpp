#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace xkv {

// Scaled dot-product attention, softmax(q kT / sqrt(d)) v, row by row with
// max subtraction. Inputs and outputs hold Scalar; dot products, the softmax
// normalizer, and the value accumulation run in double so the float path
// differs from a wide reference only by storage rounding.
template <typename Scalar>
BasicHeadTensor<Scalar> attend(const BasicHeadTensor<Scalar> &q,
                               const BasicHeadTensor<Scalar> &k,
                               const BasicHeadTensor<Scalar> &v) {
    if (q.heads != k.heads || q.heads != v.heads) {
        throw std::invalid_argument("attend: head count mismatch");
    }
    if (q.channels != k.channels || q.channels != v.channels) {
        throw std::invalid_argument("attend: channel mismatch");
    }
    if (k.tokens != v.tokens) {
        throw std::invalid_argument("attend: key/value token mismatch");
    }
    if (k.tokens == 0) {
        throw std::invalid_argument("attend: empty key set");
    }
    const std::size_t d = q.channels;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    BasicHeadTensor<Scalar> out(q.heads, q.tokens, d);
    std::vector<double> scores(k.tokens);
    std::vector<double> acc(d);

    for (std::size_t h = 0; h < q.heads; ++h) {
        for (std::size_t qi = 0; qi < q.tokens; ++qi) {
            const Scalar *qrow = q.row(h, qi);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k.tokens; ++j) {
                const Scalar *krow = k.row(h, j);
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dot += static_cast<double>(qrow[c]) * static_cast<double>(krow[c]);
                }
                scores[j] = dot * inv_sqrt_d;
                if (scores[j] > mx) mx = scores[j];
            }
            double norm = 0.0;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < k.tokens; ++j) {
                const double w = std::exp(scores[j] - mx);
                norm += w;
                const Scalar *vrow = v.row(h, j);
                for (std::size_t c = 0; c < d; ++c) {
                    acc[c] += w * static_cast<double>(vrow[c]);
                }
            }
            Scalar *orow = out.row(h, qi);
            for (std::size_t c = 0; c < d; ++c) {
                orow[c] = static_cast<Scalar>(acc[c] / norm);
            }
        }
    }
    return out;
}

// Full-precision, full-cache reference: frame t attends over the exact
// concatenation of K/V from frames 1..t, all in float64. No pruning, no
// quantization. Memory grows with the square of the stream length; this is
// the ground truth the compressed path is measured against, not a fast path.
inline std::vector<HeadTensor64> reference_stream(std::span<const Frame> frames) {
    std::vector<HeadTensor64> outputs;
    outputs.reserve(frames.size());
    if (frames.empty()) return outputs;

    HeadTensor64 k_all;
    HeadTensor64 v_all;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const Frame &f = frames[t];
        if (!f.q.same_shape(frames[0].q) || !f.k.same_shape(frames[0].k) ||
            !f.v.same_shape(frames[0].v)) {
            throw std::invalid_argument("reference_stream: frame shape drift at frame " +
                                        std::to_string(t));
        }
        k_all = concat_tokens(k_all, tensor_cast<double>(f.k));
        v_all = concat_tokens(v_all, tensor_cast<double>(f.v));
        outputs.push_back(attend(tensor_cast<double>(f.q), k_all, v_all));
    }
    return outputs;
}

// Relative L2 distance between a float frame output and its reference,
// computed in double over the flattened tensors.
inline double relative_l2(const HeadTensor &x, const HeadTensor64 &ref) {
    if (x.heads != ref.heads || x.tokens != ref.tokens || x.channels != ref.channels) {
        throw std::invalid_argument("relative_l2: shape mismatch");
    }
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double diff = static_cast<double>(x.data[i]) - ref.data[i];
        num += diff * diff;
        den += ref.data[i] * ref.data[i];
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

} // namespace xkv
