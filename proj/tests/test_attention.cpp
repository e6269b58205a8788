#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "xkv/attention.hpp"

using namespace xkv;

namespace {

HeadTensor random_tensor(std::size_t h, std::size_t t, std::size_t c,
                         std::mt19937_64 &rng) {
    std::uniform_real_distribution<float> val(-1.5f, 1.5f);
    HeadTensor x(h, t, c);
    for (float &e : x.data) e = val(rng);
    return x;
}

HeadTensor slice_head(const HeadTensor &x, std::size_t h) {
    HeadTensor out(1, x.tokens, x.channels);
    for (std::size_t t = 0; t < x.tokens; ++t) {
        std::copy(x.row(h, t), x.row(h, t) + x.channels, out.row(0, t));
    }
    return out;
}

// Textbook evaluation without max subtraction, in long double, for
// cross-checking the production kernel.
HeadTensor64 naive_attend(const HeadTensor &q, const HeadTensor &k, const HeadTensor &v) {
    HeadTensor64 out(q.heads, q.tokens, q.channels);
    const long double inv = 1.0L / std::sqrt(static_cast<long double>(q.channels));
    for (std::size_t h = 0; h < q.heads; ++h) {
        for (std::size_t qi = 0; qi < q.tokens; ++qi) {
            std::vector<long double> w(k.tokens);
            long double norm = 0.0L;
            for (std::size_t j = 0; j < k.tokens; ++j) {
                long double dot = 0.0L;
                for (std::size_t c = 0; c < q.channels; ++c) {
                    dot += static_cast<long double>(q.at(h, qi, c)) * k.at(h, j, c);
                }
                w[j] = std::exp(dot * inv);
                norm += w[j];
            }
            for (std::size_t c = 0; c < q.channels; ++c) {
                long double acc = 0.0L;
                for (std::size_t j = 0; j < k.tokens; ++j) {
                    acc += w[j] * static_cast<long double>(v.at(h, j, c));
                }
                out.at(h, qi, c) = static_cast<double>(acc / norm);
            }
        }
    }
    return out;
}

} // namespace

TEST_CASE("a single key hands back its value row") {
    std::mt19937_64 rng(1);
    const HeadTensor q = random_tensor(2, 3, 4, rng);
    const HeadTensor k = random_tensor(2, 1, 4, rng);
    const HeadTensor v = random_tensor(2, 1, 4, rng);
    const HeadTensor out = attend(q, k, v);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t qi = 0; qi < 3; ++qi) {
            for (std::size_t c = 0; c < 4; ++c) {
                CHECK(out.at(h, qi, c) == v.at(h, 0, c));
            }
        }
    }
}

TEST_CASE("two identical keys average their values") {
    HeadTensor q(1, 1, 2);
    q.at(0, 0, 0) = 0.3f;
    q.at(0, 0, 1) = -0.7f;
    HeadTensor k(1, 2, 2);
    k.at(0, 0, 0) = k.at(0, 1, 0) = 0.9f;
    k.at(0, 0, 1) = k.at(0, 1, 1) = -0.2f;
    HeadTensor v(1, 2, 2);
    v.at(0, 0, 0) = 1.0f;
    v.at(0, 0, 1) = 4.0f;
    v.at(0, 1, 0) = 3.0f;
    v.at(0, 1, 1) = -2.0f;
    const HeadTensor out = attend(q, k, v);
    CHECK(out.at(0, 0, 0) == 2.0f);
    CHECK(out.at(0, 0, 1) == 1.0f);
}

TEST_CASE("attention weights sum to one") {
    // With every value equal to one, the output is exactly the weight sum.
    std::mt19937_64 rng(2);
    const HeadTensor q = random_tensor(2, 4, 8, rng);
    const HeadTensor k = random_tensor(2, 16, 8, rng);
    HeadTensor v(2, 16, 8);
    std::fill(v.data.begin(), v.data.end(), 1.0f);
    const HeadTensor out = attend(q, k, v);
    for (float x : out.data) {
        CHECK(x == Catch::Approx(1.0f).margin(1e-6));
    }
}

TEST_CASE("the kernel matches a naive long-double evaluation") {
    std::mt19937_64 rng(3);
    const HeadTensor q = random_tensor(2, 3, 4, rng);
    const HeadTensor k = random_tensor(2, 5, 4, rng);
    const HeadTensor v = random_tensor(2, 5, 4, rng);
    const HeadTensor out = attend(q, k, v);
    const HeadTensor64 want = naive_attend(q, k, v);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        CHECK(static_cast<double>(out.data[i]) ==
              Catch::Approx(want.data[i]).margin(1e-6));
    }
}

TEST_CASE("heads attend independently") {
    std::mt19937_64 rng(4);
    const HeadTensor q = random_tensor(3, 2, 4, rng);
    const HeadTensor k = random_tensor(3, 6, 4, rng);
    const HeadTensor v = random_tensor(3, 6, 4, rng);
    const HeadTensor full = attend(q, k, v);

    for (std::size_t h = 0; h < 3; ++h) {
        const HeadTensor qh = slice_head(q, h);
        const HeadTensor kh = slice_head(k, h);
        const HeadTensor vh = slice_head(v, h);
        const HeadTensor out = attend(qh, kh, vh);
        for (std::size_t t = 0; t < 2; ++t) {
            for (std::size_t c = 0; c < 4; ++c) {
                CHECK(out.at(0, t, c) == full.at(h, t, c));
            }
        }
    }
}

TEST_CASE("attend validates shapes and rejects an empty key set") {
    std::mt19937_64 rng(5);
    const HeadTensor q = random_tensor(2, 3, 4, rng);
    const HeadTensor k = random_tensor(2, 5, 4, rng);
    const HeadTensor v = random_tensor(2, 5, 4, rng);

    CHECK_THROWS_AS(attend(q, random_tensor(1, 5, 4, rng), v), std::invalid_argument);
    CHECK_THROWS_AS(attend(q, random_tensor(2, 5, 3, rng), v), std::invalid_argument);
    CHECK_THROWS_AS(attend(q, k, random_tensor(2, 4, 4, rng)), std::invalid_argument);
    const HeadTensor empty(2, 0, 4);
    CHECK_THROWS_AS(attend(q, empty, HeadTensor(2, 0, 4)), std::invalid_argument);
}

TEST_CASE("a one-frame stream equals plain attention in wide precision") {
    std::mt19937_64 rng(6);
    std::vector<Frame> frames(1);
    frames[0].q = random_tensor(2, 4, 4, rng);
    frames[0].k = random_tensor(2, 4, 4, rng);
    frames[0].v = random_tensor(2, 4, 4, rng);
    const auto outputs = reference_stream(frames);
    REQUIRE(outputs.size() == 1);
    const HeadTensor64 want = attend(tensor_cast<double>(frames[0].q),
                                     tensor_cast<double>(frames[0].k),
                                     tensor_cast<double>(frames[0].v));
    CHECK(outputs[0].data == want.data);
}

TEST_CASE("each stream frame attends over every key so far") {
    std::mt19937_64 rng(7);
    std::vector<Frame> frames(3);
    for (Frame &f : frames) {
        f.q = random_tensor(1, 3, 4, rng);
        f.k = random_tensor(1, 3, 4, rng);
        f.v = random_tensor(1, 3, 4, rng);
    }
    const auto outputs = reference_stream(frames);
    REQUIRE(outputs.size() == 3);

    HeadTensor64 k_all = tensor_cast<double>(frames[0].k);
    HeadTensor64 v_all = tensor_cast<double>(frames[0].v);
    k_all = concat_tokens(k_all, tensor_cast<double>(frames[1].k));
    v_all = concat_tokens(v_all, tensor_cast<double>(frames[1].v));
    k_all = concat_tokens(k_all, tensor_cast<double>(frames[2].k));
    v_all = concat_tokens(v_all, tensor_cast<double>(frames[2].v));
    const HeadTensor64 want = attend(tensor_cast<double>(frames[2].q), k_all, v_all);
    CHECK(outputs[2].data == want.data);
}

TEST_CASE("the stream oracle rejects shape drift") {
    std::mt19937_64 rng(8);
    std::vector<Frame> frames(2);
    frames[0].q = random_tensor(1, 3, 4, rng);
    frames[0].k = random_tensor(1, 3, 4, rng);
    frames[0].v = random_tensor(1, 3, 4, rng);
    frames[1].q = random_tensor(1, 4, 4, rng);
    frames[1].k = random_tensor(1, 4, 4, rng);
    frames[1].v = random_tensor(1, 4, 4, rng);
    CHECK_THROWS_AS(reference_stream(frames), std::invalid_argument);
}

TEST_CASE("relative distance is zero on identical tensors and scales as expected") {
    std::mt19937_64 rng(9);
    const HeadTensor x = random_tensor(1, 4, 4, rng);
    const HeadTensor64 ref = tensor_cast<double>(x);
    CHECK(relative_l2(x, ref) == 0.0);

    HeadTensor y = x;
    for (float &e : y.data) e *= 1.01f;
    CHECK(relative_l2(y, ref) == Catch::Approx(0.01).epsilon(0.01));
}
