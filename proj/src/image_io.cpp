#include <zlib.h>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fpx/image.hpp"

namespace fpx {

namespace {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("unreadable file: " + path.string());
    Bytes bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (!f.good() && !f.eof()) throw std::runtime_error("unreadable file: " + path.string());
    return bytes;
}

void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("unwritable path: " + path.string());
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
        if (!f.good()) throw std::runtime_error("unwritable path: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------- PGM (P5)

bool is_pgm(const Bytes& b) { return b.size() >= 2 && b[0] == 'P' && b[1] == '5'; }

// Reads the next header token, skipping whitespace and '#' comments.
std::string pgm_token(const Bytes& b, std::size_t& pos) {
    while (pos < b.size()) {
        if (std::isspace(b[pos])) {
            ++pos;
        } else if (b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < b.size() && !std::isspace(b[pos])) tok.push_back(static_cast<char>(b[pos++]));
    if (tok.empty()) throw std::runtime_error("corrupt PGM header");
    return tok;
}

Image load_pgm(const Bytes& b, const std::string& name) {
    std::size_t pos = 2;
    const long w = std::stol(pgm_token(b, pos));
    const long h = std::stol(pgm_token(b, pos));
    const long maxval = std::stol(pgm_token(b, pos));
    if (w <= 0 || h <= 0) throw std::runtime_error("zero-dimension image: " + name);
    if (maxval <= 0 || maxval > 65535)
        throw std::runtime_error("unsupported format: PGM maxval out of range in " + name);
    ++pos; // single whitespace after maxval
    const int bytes_per = maxval < 256 ? 1 : 2;
    const std::size_t need = static_cast<std::size_t>(w) * h * bytes_per;
    if (b.size() < pos + need) throw std::runtime_error("corrupt PGM: truncated pixel data in " + name);

    Image img(static_cast<int>(w), static_cast<int>(h));
    const real scale = 1.0 / static_cast<real>(maxval);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
        unsigned v;
        if (bytes_per == 1) {
            v = b[pos + i];
        } else {
            v = (static_cast<unsigned>(b[pos + 2 * i]) << 8) | b[pos + 2 * i + 1];
        }
        img.data[i] = static_cast<real>(v) * scale;
    }
    return img;
}

// --------------------------------------------------------------------- PNG

const std::uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

bool is_png(const Bytes& b) { return b.size() >= 8 && std::memcmp(b.data(), kPngSig, 8) == 0; }

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void put_be32(Bytes& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

Bytes zlib_inflate(const Bytes& in, std::size_t expected) {
    Bytes out(expected);
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw std::runtime_error("zlib init failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || zs.total_out != expected)
        throw std::runtime_error("corrupt PNG: bad compressed stream");
    return out;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

Image load_png(const Bytes& b, const std::string& name) {
    std::size_t pos = 8;
    std::uint32_t width = 0, height = 0;
    int depth = 0, color_type = -1;
    bool seen_ihdr = false, seen_iend = false;
    Bytes idat;

    while (pos + 8 <= b.size() && !seen_iend) {
        const std::uint32_t len = be32(&b[pos]);
        if (pos + 12 + len > b.size()) throw std::runtime_error("corrupt PNG: truncated chunk in " + name);
        const char* type = reinterpret_cast<const char*>(&b[pos + 4]);
        const std::uint8_t* data = &b[pos + 8];
        const std::uint32_t crc_stored = be32(&b[pos + 8 + len]);
        const std::uint32_t crc_calc = static_cast<std::uint32_t>(
            crc32(crc32(0L, &b[pos + 4], 4), data, len));
        if (crc_stored != crc_calc) throw std::runtime_error("corrupt PNG: chunk CRC mismatch in " + name);

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("corrupt PNG: bad IHDR in " + name);
            width = be32(data);
            height = be32(data + 4);
            depth = data[8];
            color_type = data[9];
            if (data[10] != 0 || data[11] != 0)
                throw std::runtime_error("unsupported format: nonstandard PNG compression in " + name);
            if (data[12] != 0)
                throw std::runtime_error("unsupported format: interlaced PNG in " + name);
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            seen_iend = true;
        } // ancillary chunks ignored
        pos += 12 + len;
    }
    if (!seen_ihdr || !seen_iend) throw std::runtime_error("corrupt PNG: missing chunks in " + name);
    if (color_type != 0)
        throw std::runtime_error("unsupported format: PNG is not grayscale in " + name);
    if (depth != 8 && depth != 16)
        throw std::runtime_error("unsupported format: PNG bit depth " + std::to_string(depth) +
                                 " in " + name);
    if (width == 0 || height == 0) throw std::runtime_error("zero-dimension image: " + name);

    const int bpp = depth / 8;
    const std::size_t stride = static_cast<std::size_t>(width) * bpp;
    const Bytes raw = zlib_inflate(idat, (stride + 1) * height);

    // undo per-scanline filters
    Bytes pix(stride * height);
    for (std::uint32_t y = 0; y < height; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = &raw[y * (stride + 1) + 1];
        std::uint8_t* dst = &pix[y * stride];
        const std::uint8_t* up = y > 0 ? &pix[(y - 1) * stride] : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
            const int bb = up ? up[i] : 0;
            const int cc = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += bb; break;
                case 3: v += (a + bb) / 2; break;
                case 4: v += paeth(a, bb, cc); break;
                default: throw std::runtime_error("corrupt PNG: unknown filter in " + name);
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }

    Image img(static_cast<int>(width), static_cast<int>(height));
    const real scale = depth == 8 ? 1.0 / 255.0 : 1.0 / 65535.0;
    for (std::size_t i = 0; i < img.size(); ++i) {
        unsigned v;
        if (bpp == 1) {
            v = pix[i];
        } else {
            v = (static_cast<unsigned>(pix[2 * i]) << 8) | pix[2 * i + 1];
        }
        img.data[i] = static_cast<real>(v) * scale;
    }
    return img;
}

// zlib stream with stored (uncompressed) deflate blocks: output bytes depend
// only on the input, never on the zlib version, which keeps golden files stable.
Bytes zlib_store(const Bytes& raw) {
    Bytes out;
    out.push_back(0x78);
    out.push_back(0x01);
    std::size_t pos = 0;
    do {
        const std::size_t chunk = std::min<std::size_t>(raw.size() - pos, 65535);
        const bool final = pos + chunk == raw.size();
        out.push_back(final ? 1 : 0);
        out.push_back(static_cast<std::uint8_t>(chunk & 0xff));
        out.push_back(static_cast<std::uint8_t>(chunk >> 8));
        out.push_back(static_cast<std::uint8_t>(~chunk & 0xff));
        out.push_back(static_cast<std::uint8_t>((~chunk >> 8) & 0xff));
        out.insert(out.end(), raw.begin() + pos, raw.begin() + pos + chunk);
        pos += chunk;
    } while (pos < raw.size());
    const auto adler = static_cast<std::uint32_t>(adler32(adler32(0L, Z_NULL, 0), raw.data(),
                                                          static_cast<uInt>(raw.size())));
    put_be32(out, adler);
    return out;
}

void append_chunk(Bytes& out, const char* type, const Bytes& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = static_cast<std::uint32_t>(
        crc32(crc32(0L, &out[type_at], 4), data.data(), static_cast<uInt>(data.size())));
    put_be32(out, crc);
}

Bytes encode_png(const Image& img, int depth) {
    const int bpp = depth / 8;
    const std::size_t stride = static_cast<std::size_t>(img.width) * bpp;
    const std::uint32_t maxval = depth == 8 ? 255u : 65535u;

    Bytes raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        std::uint8_t* row = &raw[static_cast<std::size_t>(y) * (stride + 1)];
        row[0] = 0; // filter: none
        for (int x = 0; x < img.width; ++x) {
            const auto q = static_cast<std::uint32_t>(
                std::llround(img.at(y, x) * static_cast<real>(maxval)));
            if (bpp == 1) {
                row[1 + x] = static_cast<std::uint8_t>(q);
            } else {
                row[1 + 2 * x] = static_cast<std::uint8_t>(q >> 8);
                row[1 + 2 * x + 1] = static_cast<std::uint8_t>(q & 0xff);
            }
        }
    }

    Bytes out(kPngSig, kPngSig + 8);
    Bytes ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(static_cast<std::uint8_t>(depth));
    ihdr.push_back(0); // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", zlib_store(raw));
    append_chunk(out, "IEND", {});
    return out;
}

Bytes encode_pgm(const Image& img, int depth) {
    const std::uint32_t maxval = depth == 8 ? 255u : 65535u;
    const std::string header = "P5\n" + std::to_string(img.width) + " " +
                               std::to_string(img.height) + "\n" + std::to_string(maxval) + "\n";
    Bytes out(header.begin(), header.end());
    out.reserve(out.size() + img.size() * (depth / 8));
    for (std::size_t i = 0; i < img.size(); ++i) {
        const auto q =
            static_cast<std::uint32_t>(std::llround(img.data[i] * static_cast<real>(maxval)));
        if (depth == 8) {
            out.push_back(static_cast<std::uint8_t>(q));
        } else {
            out.push_back(static_cast<std::uint8_t>(q >> 8));
            out.push_back(static_cast<std::uint8_t>(q & 0xff));
        }
    }
    return out;
}

} // namespace

Image load_image(const std::filesystem::path& path) {
    const Bytes bytes = read_file(path);
    if (is_pgm(bytes)) return load_pgm(bytes, path.string());
    if (is_png(bytes)) return load_png(bytes, path.string());
    throw std::runtime_error("unsupported format: " + path.string());
}

void save_image(const Image& img, const std::filesystem::path& path, int depth) {
    if (depth != 8 && depth != 16) throw std::invalid_argument("save_image: depth must be 8 or 16");
    img.validate();
    const std::string ext = path.extension().string();
    Bytes bytes;
    if (ext == ".pgm") {
        bytes = encode_pgm(img, depth);
    } else if (ext == ".png") {
        bytes = encode_png(img, depth);
    } else {
        throw std::invalid_argument("save_image: unsupported extension '" + ext + "'");
    }
    write_file_atomic(path, bytes);
}

} // namespace fpx
