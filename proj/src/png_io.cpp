#include "gda/png_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "gda/common.hpp"

namespace gda {

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_u32be(out, static_cast<uint32_t>(data.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32be(out, crc);
}

const uint8_t kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> png_encode(const Tensor& img) {
    GDA_CHECK(img.rank() == 3 && img.dim(0) == 3, "png_encode expects [3,H,W]");
    int H = img.dim(1), W = img.dim(2);
    long plane = static_cast<long>(H) * W;

    std::vector<uint8_t> raw(static_cast<size_t>(H) * (1 + 3 * W));
    size_t k = 0;
    for (int y = 0; y < H; ++y) {
        raw[k++] = 0;  // filter: None
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                real v = img.data[c * plane + static_cast<long>(y) * W + x];
                v = std::min(1.0, std::max(0.0, v));
                raw[k++] = static_cast<uint8_t>(std::lround(v * 255.0));
            }
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(bound);
    if (compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("png deflate failed");
    comp.resize(bound);

    std::vector<uint8_t> out(kSig, kSig + 8);
    std::vector<uint8_t> ihdr;
    put_u32be(ihdr, static_cast<uint32_t>(W));
    put_u32be(ihdr, static_cast<uint32_t>(H));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // adaptive filtering
    ihdr.push_back(0);  // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});
    return out;
}

Tensor png_decode(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kSig, 8) != 0)
        throw ParseError("not a png: bad signature");
    size_t pos = 8;
    int W = -1, H = -1;
    std::vector<uint8_t> idat;
    bool done = false;
    while (!done) {
        if (pos + 8 > bytes.size()) throw ParseError("png truncated in chunk header");
        uint32_t len = get_u32be(bytes.data() + pos);
        const uint8_t* type = bytes.data() + pos + 4;
        if (pos + 12 + len > bytes.size()) throw ParseError("png truncated in chunk body");
        const uint8_t* data = bytes.data() + pos + 8;
        uint32_t want_crc = get_u32be(data + len);
        uint32_t got_crc = crc32(0, type, len + 4);
        if (want_crc != got_crc) throw ParseError("png chunk crc mismatch");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw ParseError("png bad IHDR length");
            W = static_cast<int>(get_u32be(data));
            H = static_cast<int>(get_u32be(data + 4));
            if (data[8] != 8 || data[9] != 2)
                throw ParseError("png unsupported format (need 8-bit truecolor)");
            if (data[12] != 0) throw ParseError("png interlacing unsupported");
            if (W <= 0 || H <= 0 || W > 1 << 14 || H > 1 << 14)
                throw ParseError("png unreasonable dimensions");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            done = true;
        }
        pos += 12 + len;
    }
    if (W < 0) throw ParseError("png missing IHDR");
    if (idat.empty()) throw ParseError("png missing IDAT");

    size_t stride = 1 + 3 * static_cast<size_t>(W);
    std::vector<uint8_t> raw(static_cast<size_t>(H) * stride);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    int zr = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
    if (zr != Z_OK || raw_len != raw.size()) throw ParseError("png inflate failed");

    // unfilter in place; prior row starts as implicit zeros
    std::vector<uint8_t> prior(3 * static_cast<size_t>(W), 0);
    Tensor img({3, H, W});
    long plane = static_cast<long>(H) * W;
    for (int y = 0; y < H; ++y) {
        uint8_t filter = raw[y * stride];
        uint8_t* row = raw.data() + y * stride + 1;
        for (int i = 0; i < 3 * W; ++i) {
            int a = i >= 3 ? row[i - 3] : 0;
            int b = prior[i];
            int c = i >= 3 ? prior[i - 3] : 0;
            switch (filter) {
                case 0: break;
                case 1: row[i] = static_cast<uint8_t>(row[i] + a); break;
                case 2: row[i] = static_cast<uint8_t>(row[i] + b); break;
                case 3: row[i] = static_cast<uint8_t>(row[i] + (a + b) / 2); break;
                case 4: row[i] = static_cast<uint8_t>(row[i] + paeth(a, b, c)); break;
                default: throw ParseError("png unknown filter type");
            }
        }
        std::copy(row, row + 3 * W, prior.begin());
        for (int x = 0; x < W; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.data[ch * plane + static_cast<long>(y) * W + x] = row[3 * x + ch] / 255.0;
    }
    return img;
}

void png_save(const std::string& path, const Tensor& img) {
    auto bytes = png_encode(img);
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write: " + tmp);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
        if (!f) throw IoError("short write: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("rename failed: " + path);
}

Tensor png_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open png: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return png_decode(bytes);
}

}  // namespace gda
