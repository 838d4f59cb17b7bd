// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "distscale/model.hpp"

namespace distscale {

// Flat little-endian checkpoint:
//   magic "DSCKPT01"
//   u32 scalar_size (4 or 8)
//   i32 depth, n_heads, head_dim, vocab_size, context_length, mlp_ratio
//   u64 seed
//   u32 tensor_count, then per tensor in fixed visit order:
//     u16 name_len, name bytes, u32 rows, u32 cols, rows*cols scalars
static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts unsupported");

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace detail

template <class Scalar>
void save_checkpoint(const std::string& path, const Params<Scalar>& params, std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod(os, static_cast<std::uint32_t>(sizeof(Scalar)));
    const ModelConfig& c = params.config;
    for (int v : {c.depth, c.n_heads, c.head_dim, c.vocab_size, c.context_length, c.mlp_ratio})
        detail::write_pod(os, static_cast<std::int32_t>(v));
    detail::write_pod(os, seed);

    std::uint32_t count = 0;
    params.for_each_tensor([&](const std::string&, TensorKind, const MatX<Scalar>&) { ++count; });
    detail::write_pod(os, count);
    params.for_each_tensor([&](const std::string& name, TensorKind, const MatX<Scalar>& t) {
        detail::write_pod(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod(os, static_cast<std::uint32_t>(t.rows()));
        detail::write_pod(os, static_cast<std::uint32_t>(t.cols()));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(Scalar) * t.size()));
    });
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <class Scalar>
std::pair<Params<Scalar>, std::uint64_t> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto scalar_size = detail::read_pod<std::uint32_t>(is);
    if (scalar_size != sizeof(Scalar))
        throw std::runtime_error("checkpoint: scalar width mismatch in " + path);
    ModelConfig c;
    c.depth = detail::read_pod<std::int32_t>(is);
    c.n_heads = detail::read_pod<std::int32_t>(is);
    c.head_dim = detail::read_pod<std::int32_t>(is);
    c.vocab_size = detail::read_pod<std::int32_t>(is);
    c.context_length = detail::read_pod<std::int32_t>(is);
    c.mlp_ratio = detail::read_pod<std::int32_t>(is);
    const auto seed = detail::read_pod<std::uint64_t>(is);

    Params<Scalar> params = Params<Scalar>::zeros(c);
    const auto count = detail::read_pod<std::uint32_t>(is);
    std::uint32_t seen = 0;
    params.for_each_tensor([&](const std::string& name, TensorKind, MatX<Scalar>& t) {
        const auto name_len = detail::read_pod<std::uint16_t>(is);
        std::string stored(name_len, '\0');
        is.read(stored.data(), name_len);
        if (stored != name)
            throw std::runtime_error("checkpoint: tensor order mismatch, expected " + name +
                                     " got " + stored);
        const auto rows = detail::read_pod<std::uint32_t>(is);
        const auto cols = detail::read_pod<std::uint32_t>(is);
        if (rows != static_cast<std::uint32_t>(t.rows()) ||
            cols != static_cast<std::uint32_t>(t.cols()))
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(sizeof(Scalar) * t.size()));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
        ++seen;
    });
    if (seen != count) throw std::runtime_error("checkpoint: tensor count mismatch");
    return {std::move(params), seed};
}

}  // namespace distscale
