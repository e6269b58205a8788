#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "tensor.hpp"

namespace xkv {

// Reference outputs on disk: one raw little-endian float64 file per frame
// (frame_0000.f64, ...) plus a golden.json sidecar carrying the shape, the
// workload seed, and a config fingerprint so mismatched readers fail loudly.

inline std::uint64_t fnv1a64(const std::string &s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace detail {

inline std::string frame_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04zu.f64", index);
    return buf;
}

inline void write_f64_le(std::ofstream &out, double v) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(u >> (8 * i));
    out.write(b, 8);
}

inline double read_f64_le(std::ifstream &in) {
    char b[8];
    in.read(b, 8);
    if (!in) throw std::runtime_error("golden frame file truncated");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) {
        u |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    }
    return std::bit_cast<double>(u);
}

} // namespace detail

inline void write_golden(const std::filesystem::path &dir,
                         std::span<const HeadTensor64> outputs, std::uint64_t seed,
                         std::uint64_t config_hash) {
    if (outputs.empty()) {
        throw std::invalid_argument("write_golden: no outputs");
    }
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        if (!outputs[i].same_shape(outputs[0])) {
            throw std::invalid_argument("write_golden: output shape drift");
        }
        std::ofstream out(dir / detail::frame_file_name(i), std::ios::binary);
        if (!out) throw std::runtime_error("write_golden: cannot open frame file");
        for (double v : outputs[i].data) detail::write_f64_le(out, v);
    }
    nlohmann::json sidecar = {
        {"frames", outputs.size()},
        {"heads", outputs[0].heads},
        {"tokens", outputs[0].tokens},
        {"channels", outputs[0].channels},
        {"seed", seed},
        {"config_hash", config_hash},
    };
    std::ofstream side(dir / "golden.json", std::ios::binary);
    if (!side) throw std::runtime_error("write_golden: cannot open sidecar");
    side << sidecar.dump(2) << "\n";
}

inline std::vector<HeadTensor64> read_golden(const std::filesystem::path &dir,
                                             std::uint64_t expect_seed,
                                             std::uint64_t expect_config_hash) {
    std::ifstream side(dir / "golden.json");
    if (!side) throw std::runtime_error("read_golden: missing sidecar");
    nlohmann::json sidecar;
    side >> sidecar;
    if (sidecar.at("seed").get<std::uint64_t>() != expect_seed) {
        throw std::runtime_error("read_golden: seed mismatch");
    }
    if (sidecar.at("config_hash").get<std::uint64_t>() != expect_config_hash) {
        throw std::runtime_error("read_golden: config fingerprint mismatch");
    }
    const std::size_t frames = sidecar.at("frames").get<std::size_t>();
    const std::size_t heads = sidecar.at("heads").get<std::size_t>();
    const std::size_t tokens = sidecar.at("tokens").get<std::size_t>();
    const std::size_t channels = sidecar.at("channels").get<std::size_t>();

    std::vector<HeadTensor64> outputs;
    outputs.reserve(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        std::ifstream in(dir / detail::frame_file_name(i), std::ios::binary);
        if (!in) throw std::runtime_error("read_golden: missing frame file " +
                                          detail::frame_file_name(i));
        HeadTensor64 t(heads, tokens, channels);
        for (double &v : t.data) v = detail::read_f64_le(in);
        outputs.push_back(std::move(t));
    }
    return outputs;
}

} // namespace xkv
