#include "stssad/io.hpp"

#include <zlib.h>

#include <cstring>

namespace stssad::io {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }
}  // namespace

// ---- Writer / Reader ----

Writer::Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) fail("cannot open " + path + " for writing");
}

void Writer::bytes(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), std::streamsize(n));
}

void Writer::u8(uint8_t v) { bytes(&v, 1); }

void Writer::u32(uint32_t v) {
    uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = uint8_t(v >> (8 * i));
    bytes(b, 4);
}

void Writer::u64(uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = uint8_t(v >> (8 * i));
    bytes(b, 8);
}

void Writer::f64(double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
}

void Writer::f64s(const double* p, size_t n) {
    for (size_t i = 0; i < n; ++i) f64(p[i]);
}

void Writer::close() {
    out_.flush();
    if (!out_) fail("write failed for " + path_);
    out_.close();
}

Reader::Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail("cannot open " + path);
}

void Reader::bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), std::streamsize(n));
    if (size_t(in_.gcount()) != n) fail(path_ + ": truncated file");
}

uint8_t Reader::u8() {
    uint8_t v;
    bytes(&v, 1);
    return v;
}

uint32_t Reader::u32() {
    uint8_t b[4];
    bytes(b, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return v;
}

uint64_t Reader::u64() {
    uint8_t b[8];
    bytes(b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

double Reader::f64() {
    const uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void Reader::f64s(double* p, size_t n) {
    for (size_t i = 0; i < n; ++i) p[i] = f64();
}

bool Reader::at_eof() { return in_.peek() == std::ifstream::traits_type::eof(); }

void write_header(Writer& w, uint32_t kind) {
    w.bytes(kMagic, 8);
    w.u32(kind);
    w.u32(kFormatVersion);
}

void read_header(Reader& r, uint32_t expected_kind) {
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) fail("bad magic: not a recognized binary file");
    const uint32_t kind = r.u32();
    if (kind != expected_kind)
        fail("wrong record kind " + std::to_string(kind) + ", expected " +
             std::to_string(expected_kind));
    const uint32_t version = r.u32();
    if (version != kFormatVersion) fail("unsupported format version " + std::to_string(version));
}

void save_tensor(const std::string& path, const Shape& shape, const std::vector<double>& values) {
    if (shape_size(shape) != int64_t(values.size()))
        fail("save_tensor: " + shape_str(shape) + " does not match " +
             std::to_string(values.size()) + " values");
    Writer w(path);
    write_header(w, kKindTensor);
    w.u32(uint32_t(shape.size()));
    for (int64_t e : shape) w.u64(uint64_t(e));
    w.f64s(values.data(), values.size());
    w.close();
}

std::pair<Shape, std::vector<double>> load_tensor(const std::string& path) {
    Reader r(path);
    read_header(r, kKindTensor);
    const uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) fail(path + ": implausible tensor rank");
    Shape shape(rank);
    for (auto& e : shape) {
        e = int64_t(r.u64());
        if (e <= 0) fail(path + ": non-positive tensor extent");
    }
    std::vector<double> values(static_cast<size_t>(shape_size(shape)));
    r.f64s(values.data(), values.size());
    return {std::move(shape), std::move(values)};
}

// ---- PNG (8-bit grayscale, non-interlaced) ----

namespace {

void be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

void chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    be32(out, uint32_t(data.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), out.data() + start, uInt(4 + data.size()));
    be32(out, uint32_t(crc));
}

}  // namespace

void write_png_gray8(const std::string& path, int64_t width, int64_t height,
                     const std::vector<uint8_t>& pixels) {
    if (width <= 0 || height <= 0) fail("png: non-positive dimensions");
    if (int64_t(pixels.size()) != width * height)
        fail("png: pixel count " + std::to_string(pixels.size()) + " does not match " +
             std::to_string(width) + "x" + std::to_string(height));

    std::vector<uint8_t> raw;
    raw.reserve(size_t((width + 1) * height));
    for (int64_t r = 0; r < height; ++r) {
        raw.push_back(0);  // filter: None
        raw.insert(raw.end(), pixels.begin() + r * width, pixels.begin() + (r + 1) * width);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> deflated(bound);
    if (compress2(deflated.data(), &bound, raw.data(), uLong(raw.size()), 9) != Z_OK)
        fail("png: deflate failed");
    deflated.resize(bound);

    std::vector<uint8_t> ihdr;
    be32(ihdr, uint32_t(width));
    be32(ihdr, uint32_t(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // interlace: none

    std::vector<uint8_t> file = {137, 80, 78, 71, 13, 10, 26, 10};
    chunk(file, "IHDR", ihdr);
    chunk(file, "IDAT", deflated);
    chunk(file, "IEND", {});

    Writer w(path);
    w.bytes(file.data(), file.size());
    w.close();
}

std::pair<std::pair<int64_t, int64_t>, std::vector<uint8_t>> read_png_gray8(
    const std::string& path) {
    Reader r(path);
    uint8_t sig[8];
    r.bytes(sig, 8);
    const uint8_t want[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (std::memcmp(sig, want, 8) != 0) fail(path + ": not a PNG file");

    auto rbe32 = [&] {
        uint8_t b[4];
        r.bytes(b, 4);
        return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
               uint32_t(b[3]);
    };

    int64_t width = 0, height = 0;
    std::vector<uint8_t> idat;
    for (;;) {
        const uint32_t len = rbe32();
        char type[5] = {};
        r.bytes(type, 4);
        std::vector<uint8_t> data(len);
        if (len) r.bytes(data.data(), len);
        const uint32_t crc = rbe32();
        uLong want_crc = crc32(0L, Z_NULL, 0);
        want_crc = crc32(want_crc, reinterpret_cast<const Bytef*>(type), 4);
        if (len) want_crc = crc32(want_crc, data.data(), uInt(len));
        if (crc != uint32_t(want_crc)) fail(path + ": bad chunk checksum");

        if (std::strcmp(type, "IHDR") == 0) {
            if (len != 13) fail(path + ": malformed IHDR");
            width = (int64_t(data[0]) << 24) | (int64_t(data[1]) << 16) | (int64_t(data[2]) << 8) |
                    int64_t(data[3]);
            height = (int64_t(data[4]) << 24) | (int64_t(data[5]) << 16) |
                     (int64_t(data[6]) << 8) | int64_t(data[7]);
            if (data[8] != 8 || data[9] != 0) fail(path + ": only 8-bit grayscale is supported");
            if (data[12] != 0) fail(path + ": interlaced PNG is not supported");
        } else if (std::strcmp(type, "IDAT") == 0) {
            idat.insert(idat.end(), data.begin(), data.end());
        } else if (std::strcmp(type, "IEND") == 0) {
            break;
        }
        // Ancillary chunks are skipped.
    }
    if (width <= 0 || height <= 0) fail(path + ": missing IHDR");

    std::vector<uint8_t> raw(size_t((width + 1) * height));
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
        raw_len != raw.size())
        fail(path + ": corrupt image data");

    // De-filter (grayscale: one byte per pixel).
    std::vector<uint8_t> px(size_t(width * height));
    for (int64_t y = 0; y < height; ++y) {
        const uint8_t filter = raw[size_t(y * (width + 1))];
        const uint8_t* in = raw.data() + y * (width + 1) + 1;
        uint8_t* out = px.data() + y * width;
        const uint8_t* up = y > 0 ? px.data() + (y - 1) * width : nullptr;
        for (int64_t x = 0; x < width; ++x) {
            const int a = x > 0 ? out[x - 1] : 0;
            const int b = up ? up[x] : 0;
            const int c = (x > 0 && up) ? up[x - 1] : 0;
            int v = in[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c, pa = std::abs(p - a), pb = std::abs(p - b),
                              pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: fail(path + ": unsupported scanline filter");
            }
            out[x] = uint8_t(v & 0xff);
        }
    }
    return {{width, height}, std::move(px)};
}

}  // namespace stssad::io
