#pragma once

// CBEVTNSR container: magic "CBEVTNSR", u32 version (1), u32 dtype (0 = f32),
// u32 ndim, ndim x u32 dims, then the little-endian f32 payload in row-major order.

#include <cbev/tensor.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace cbev {

inline constexpr std::array<char, 8> kTensorMagic{'C', 'B', 'E', 'V', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace detail

inline std::string encode_tensor(const Tensor& t) {
    std::string buf(kTensorMagic.begin(), kTensorMagic.end());
    detail::put_u32(buf, kTensorVersion);
    detail::put_u32(buf, kDtypeF32);
    detail::put_u32(buf, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
    return buf;
}

inline Tensor decode_tensor(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    if (n < 20 || std::memcmp(p, kTensorMagic.data(), 8) != 0) throw FormatError("not a CBEVTNSR tensor");
    if (detail::get_u32(p + 8) != kTensorVersion) throw FormatError("unsupported CBEVTNSR version");
    if (detail::get_u32(p + 12) != kDtypeF32) throw FormatError("unsupported CBEVTNSR dtype");
    const std::uint32_t ndim = detail::get_u32(p + 16);
    std::size_t off = 20;
    if (n < off + 4ull * ndim) throw FormatError("truncated CBEVTNSR header");
    Shape shape(ndim);
    for (auto& d : shape) {
        d = detail::get_u32(p + off);
        off += 4;
    }
    const std::size_t count = shape_numel(shape);
    if (n != off + 4 * count) throw FormatError("CBEVTNSR payload size does not match shape " + shape_str(shape));
    std::vector<float> data(count);
    for (auto& v : data) {
        v = std::bit_cast<float>(detail::get_u32(p + off));
        off += 4;
    }
    return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    const std::string buf = encode_tensor(t);
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw FormatError("failed writing " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    try {
        return decode_tensor(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Named learnable parameters in a deterministic order.
using ParamStore = std::map<std::string, Tensor>;

inline constexpr const char* kCheckpointManifest = "checkpoint.txt";

/// One tensor file per parameter plus a text manifest of "name file shape" lines.
inline void save_checkpoint(const std::filesystem::path& dir, const ParamStore& params) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / kCheckpointManifest);
    if (!manifest) throw FormatError("cannot write checkpoint manifest in " + dir.string());
    for (const auto& [name, t] : params) {
        const std::string file = name + ".tnsr";
        write_tensor(dir / file, t);
        manifest << name << ' ' << file << ' ';
        for (std::size_t i = 0; i < t.ndim(); ++i) manifest << (i ? "x" : "") << t.dim(i);
        if (t.ndim() == 0) manifest << "scalar";
        manifest << '\n';
    }
}

inline ParamStore load_checkpoint(const std::filesystem::path& dir, bool requires_grad = false) {
    std::ifstream manifest(dir / kCheckpointManifest);
    if (!manifest) throw FormatError("missing checkpoint manifest in " + dir.string());
    ParamStore params;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, file, shape;
        if (!(ls >> name >> file >> shape)) throw FormatError("malformed checkpoint manifest line: " + line);
        Tensor t = read_tensor(dir / file);
        std::string actual;
        for (std::size_t i = 0; i < t.ndim(); ++i) actual += (i ? "x" : "") + std::to_string(t.dim(i));
        if (t.ndim() == 0) actual = "scalar";
        if (actual != shape)
            throw FormatError("checkpoint entry '" + name + "' declares shape " + shape + " but file holds " + actual);
        params[name] = t.clone(requires_grad);
    }
    return params;
}

} // namespace cbev
