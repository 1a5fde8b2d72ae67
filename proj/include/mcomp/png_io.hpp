#ifndef MCOMP_PNG_IO_HPP
#define MCOMP_PNG_IO_HPP

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcomp::png {

// Minimal PNG codec: 8-bit gray / RGB / RGBA, non-interlaced. The writer
// emits filter type 0 on every scanline; the reader handles all five filter
// types. Anything else (palette, 16-bit, interlace) is rejected with a clear
// error rather than silently misread.

struct PngImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1, 3 or 4
    std::vector<uint8_t> pixels;  // row-major, interleaved
};

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

inline uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4],
                        const std::vector<uint8_t>& payload) {
    put_u32(out, uint32_t(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc = uint32_t(crc32(0L, out.data() + start, uInt(out.size() - start)));
    put_u32(out, crc);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline std::vector<uint8_t> encode(const PngImage& img) {
    if (img.width <= 0 || img.height <= 0)
        throw std::invalid_argument("png encode: empty image");
    if (img.channels != 1 && img.channels != 3 && img.channels != 4)
        throw std::invalid_argument("png encode: channels must be 1, 3 or 4");
    const size_t stride = size_t(img.width) * img.channels;
    if (img.pixels.size() != stride * img.height)
        throw std::invalid_argument("png encode: pixel buffer size mismatch");

    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), img.pixels.begin() + y * stride,
                   img.pixels.begin() + (y + 1) * stride);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png encode: deflate failed");
    compressed.resize(bound);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    detail::put_u32(ihdr, uint32_t(img.width));
    detail::put_u32(ihdr, uint32_t(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : (img.channels == 3 ? 2 : 6));
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    detail::write_chunk(out, "IHDR", ihdr);
    detail::write_chunk(out, "IDAT", compressed);
    detail::write_chunk(out, "IEND", {});
    return out;
}

inline PngImage decode(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw std::runtime_error("png decode: bad signature");
    PngImage img;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = detail::get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("png decode: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("png decode: bad IHDR length");
            img.width = int(detail::get_u32(payload));
            img.height = int(detail::get_u32(payload + 4));
            const int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8) throw std::runtime_error("png decode: only 8-bit depth supported");
            if (interlace != 0) throw std::runtime_error("png decode: interlaced images unsupported");
            switch (color) {
                case 0: img.channels = 1; break;
                case 2: img.channels = 3; break;
                case 6: img.channels = 4; break;
                default:
                    throw std::runtime_error("png decode: color type " + std::to_string(color) +
                                             " unsupported (gray, RGB, RGBA only)");
            }
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
            break;
        }
        // Ancillary chunks are skipped.
        pos += 12 + len;
    }
    if (!saw_ihdr || !saw_iend || img.width <= 0 || img.height <= 0)
        throw std::runtime_error("png decode: malformed stream");

    const size_t stride = size_t(img.width) * img.channels;
    const size_t raw_size = (stride + 1) * img.height;
    std::vector<uint8_t> raw(raw_size);
    uLongf dst = uLongf(raw_size);
    const int zrc = uncompress(raw.data(), &dst, idat.data(), uLong(idat.size()));
    if (zrc != Z_OK || dst != raw_size)
        throw std::runtime_error("png decode: inflate failed");

    img.pixels.resize(stride * img.height);
    const int bpp = img.channels;  // bytes per pixel at depth 8
    for (int y = 0; y < img.height; ++y) {
        const uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* src = raw.data() + y * (stride + 1) + 1;
        uint8_t* cur = img.pixels.data() + y * stride;
        const uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            const int a = x >= size_t(bpp) ? cur[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= size_t(bpp)) ? up[x - bpp] : 0;
            int v;
            switch (filter) {
                case 0: v = src[x]; break;
                case 1: v = src[x] + a; break;
                case 2: v = src[x] + b; break;
                case 3: v = src[x] + (a + b) / 2; break;
                case 4: v = src[x] + detail::paeth(a, b, c); break;
                default:
                    throw std::runtime_error("png decode: unknown filter type " +
                                             std::to_string(int(filter)));
            }
            cur[x] = uint8_t(v & 0xff);
        }
    }
    return img;
}

inline void write_file(const std::string& path, const PngImage& img) {
    const std::vector<uint8_t> bytes = encode(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("png write: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("png write: short write to " + path);
}

inline PngImage read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("png read: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode(bytes);
}

}  // namespace mcomp::png

#endif
