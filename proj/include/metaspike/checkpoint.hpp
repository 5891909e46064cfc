#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "metaspike/errors.hpp"
#include "metaspike/meta.hpp"
#include "metaspike/snn.hpp"

// Checkpoints: 64-bit lossless serialization of the parameter set, the outer
// optimizer state, and the architecture hash of the config that produced
// them. Binary, little-endian.

namespace metaspike::harness {

namespace ckpt_detail {

constexpr char kMagic[4] = {'M', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct Reader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;
    void need(std::size_t k) const {
        if (pos + k > n) throw FormatError("truncated checkpoint", static_cast<std::int64_t>(pos));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string str(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

template <typename S>
void put_tensor(std::string& out, const Tensor<S>& t) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (std::int64_t i = 0; i < t.size(); ++i) put_f64(out, static_cast<double>(t[i]));
}

template <typename S>
Tensor<S> get_tensor(Reader& r) {
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("implausible tensor rank", static_cast<std::int64_t>(r.pos - 4));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(r.u64());
    Tensor<S> t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(r.f64());
    return t;
}

}  // namespace ckpt_detail

template <typename S>
struct Checkpoint {
    snn::ParamSet<S> params;
    meta::AdamState<S> adam;
    std::uint64_t config_hash = 0;
};

template <typename S>
std::string serialize_checkpoint(const Checkpoint<S>& c) {
    using namespace ckpt_detail;
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, c.config_hash);
    put_u32(out, static_cast<std::uint32_t>(c.params.layers.size()));
    for (const auto& l : c.params.layers) {
        put_u32(out, static_cast<std::uint32_t>(l.name.size()));
        out += l.name;
        put_tensor(out, l.weight.value());
        put_tensor(out, l.bias.value());
    }
    put_u64(out, static_cast<std::uint64_t>(c.adam.t));
    put_u32(out, static_cast<std::uint32_t>(c.adam.m.size()));
    for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
        put_tensor(out, c.adam.m[i]);
        put_tensor(out, c.adam.v[i]);
    }
    return out;
}

template <typename S>
Checkpoint<S> deserialize_checkpoint(const std::string& bytes) {
    using namespace ckpt_detail;
    Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()};
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    Checkpoint<S> c;
    c.config_hash = r.u64();
    const std::uint32_t n_layers = r.u32();
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        const std::uint32_t name_len = r.u32();
        snn::LayerParams<S> l;
        l.name = r.str(name_len);
        l.weight = ad::Var<S>::leaf(get_tensor<S>(r), true);
        l.bias = ad::Var<S>::leaf(get_tensor<S>(r), true);
        c.params.layers.push_back(std::move(l));
    }
    c.adam.t = static_cast<std::int64_t>(r.u64());
    const std::uint32_t n_slots = r.u32();
    for (std::uint32_t i = 0; i < n_slots; ++i) {
        c.adam.m.push_back(get_tensor<S>(r));
        c.adam.v.push_back(get_tensor<S>(r));
    }
    if (r.pos != bytes.size())
        throw FormatError("trailing bytes after checkpoint", static_cast<std::int64_t>(r.pos));
    return c;
}

template <typename S>
void checkpoint_save(const Checkpoint<S>& c, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    const std::string bytes = serialize_checkpoint(c);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("write failed for '" + path + "'");
}

// Refuses a checkpoint whose architecture hash differs from the expected
// one unless forced.
template <typename S>
Checkpoint<S> checkpoint_load(const std::string& path, std::uint64_t expected_hash, bool force = false) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto c = deserialize_checkpoint<S>(bytes);
    if (!force && c.config_hash != expected_hash)
        throw FormatError("checkpoint architecture hash mismatch (config changed?); use --force to load anyway");
    return c;
}

}  // namespace metaspike::harness
