#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "protag/common.hpp"

namespace protag::png {

// Minimal 8-bit PNG reader/writer on top of zlib. Handles gray (type 0),
// RGB (2) and RGBA (6); palette images are rejected. Writer emits filter-0
// scanlines, which is lossless and byte-deterministic for a given zlib.

struct Pixels {
    int width = 0, height = 0, channels = 0; // channels: 1, 3 or 4
    std::vector<std::uint8_t> data;          // row-major, interleaved
};

namespace detail {

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                         const std::uint8_t* payload, std::size_t n) {
    put_u32_be(out, static_cast<std::uint32_t>(n));
    std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload, payload + n);
    std::uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + start, static_cast<uInt>(4 + n));
    put_u32_be(out, crc);
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace detail

inline std::vector<std::uint8_t> encode(const Pixels& px) {
    require(px.channels == 1 || px.channels == 3 || px.channels == 4, "png::encode: channels must be 1, 3 or 4");
    require(px.width > 0 && px.height > 0, "png::encode: empty image");
    require(px.data.size() == static_cast<std::size_t>(px.width) * px.height * px.channels,
            "png::encode: data size mismatch");

    const std::size_t stride = static_cast<std::size_t>(px.width) * px.channels;
    std::vector<std::uint8_t> raw((stride + 1) * px.height);
    for (int y = 0; y < px.height; ++y) {
        raw[y * (stride + 1)] = 0; // filter: none
        std::memcpy(raw.data() + y * (stride + 1) + 1, px.data.data() + y * stride, stride);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zdata(bound);
    if (compress2(zdata.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png::encode: zlib compress failed");
    zdata.resize(bound);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(px.width >> 24);
    ihdr[1] = static_cast<std::uint8_t>(px.width >> 16);
    ihdr[2] = static_cast<std::uint8_t>(px.width >> 8);
    ihdr[3] = static_cast<std::uint8_t>(px.width);
    ihdr[4] = static_cast<std::uint8_t>(px.height >> 24);
    ihdr[5] = static_cast<std::uint8_t>(px.height >> 16);
    ihdr[6] = static_cast<std::uint8_t>(px.height >> 8);
    ihdr[7] = static_cast<std::uint8_t>(px.height);
    ihdr[8] = 8; // bit depth
    ihdr[9] = px.channels == 1 ? 0 : (px.channels == 3 ? 2 : 6);
    ihdr[10] = 0;
    ihdr[11] = 0;
    ihdr[12] = 0;
    detail::append_chunk(out, "IHDR", ihdr, 13);
    detail::append_chunk(out, "IDAT", zdata.data(), zdata.size());
    detail::append_chunk(out, "IEND", nullptr, 0);
    return out;
}

inline Pixels decode(const std::vector<std::uint8_t>& bytes) {
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    require(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0, "png::decode: not a PNG file");

    Pixels px;
    int bit_depth = 0, color_type = -1;
    std::vector<std::uint8_t> zdata;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        std::uint32_t len = detail::get_u32_be(bytes.data() + pos);
        require(pos + 12 + len <= bytes.size(), "png::decode: truncated chunk");
        std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        if (type == "IHDR") {
            require(len == 13, "png::decode: bad IHDR");
            px.width = static_cast<int>(detail::get_u32_be(payload));
            px.height = static_cast<int>(detail::get_u32_be(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            require(payload[12] == 0, "png::decode: interlaced PNG unsupported");
        } else if (type == "IDAT") {
            zdata.insert(zdata.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        } // ancillary chunks skipped
        pos += 12 + len;
    }
    require(bit_depth == 8, "png::decode: only 8-bit PNGs supported");
    require(color_type == 0 || color_type == 2 || color_type == 6,
            "png::decode: unsupported color type (must be gray, RGB or RGBA)");
    px.channels = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);
    require(px.width > 0 && px.height > 0, "png::decode: bad dimensions");

    const std::size_t stride = static_cast<std::size_t>(px.width) * px.channels;
    std::vector<std::uint8_t> raw((stride + 1) * px.height);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    int rc = uncompress(raw.data(), &raw_len, zdata.data(), static_cast<uLong>(zdata.size()));
    require(rc == Z_OK && raw_len == raw.size(), "png::decode: zlib inflate failed");

    px.data.resize(stride * px.height);
    const int bpp = px.channels;
    for (int y = 0; y < px.height; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* cur = px.data.data() + y * stride;
        const std::uint8_t* up = y > 0 ? px.data.data() + (y - 1) * stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? cur[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw IoError("png::decode: unknown filter type");
            }
            cur[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return px;
}

inline void write_file(const std::filesystem::path& path, const Pixels& px) {
    auto bytes = encode(px);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline Pixels read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

} // namespace protag::png
