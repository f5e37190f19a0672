#include "propot/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "propot/errors.hpp"

namespace propot {

namespace {

uint8_t to_byte(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& s, uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

std::string bmp_bytes(const Image& img) {
    const int64_t w = img.w, h = img.h;
    const int64_t row_bytes = (3 * w + 3) / 4 * 4;
    const uint32_t data_size = static_cast<uint32_t>(row_bytes * h);
    std::string out;
    out.reserve(54 + data_size);
    out += "BM";
    put_u32(out, 54 + data_size);
    put_u32(out, 0);
    put_u32(out, 54);
    put_u32(out, 40);  // BITMAPINFOHEADER
    put_u32(out, static_cast<uint32_t>(w));
    put_u32(out, static_cast<uint32_t>(h));
    put_u16(out, 1);
    put_u16(out, 24);
    put_u32(out, 0);
    put_u32(out, data_size);
    put_u32(out, 2835);
    put_u32(out, 2835);
    put_u32(out, 0);
    put_u32(out, 0);
    // rows bottom-up, BGR, padded to 4 bytes
    for (int64_t y = h - 1; y >= 0; --y) {
        for (int64_t x = 0; x < w; ++x) {
            out.push_back(static_cast<char>(to_byte(img.at(y, x, 2))));
            out.push_back(static_cast<char>(to_byte(img.at(y, x, 1))));
            out.push_back(static_cast<char>(to_byte(img.at(y, x, 0))));
        }
        for (int64_t p = 3 * w; p < row_bytes; ++p) out.push_back('\0');
    }
    return out;
}

void write_bmp(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    std::string bytes = bmp_bytes(img);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("short write: " + path);
}

Image read_bmp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open image: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 54 || bytes[0] != 'B' || bytes[1] != 'M')
        throw DataError("not a BMP file: " + path);
    auto u32 = [&](size_t off) {
        uint32_t v = 0;
        std::memcpy(&v, bytes.data() + off, 4);
        return v;
    };
    auto u16 = [&](size_t off) {
        uint16_t v = 0;
        std::memcpy(&v, bytes.data() + off, 2);
        return v;
    };
    const uint32_t data_off = u32(10);
    const int64_t w = static_cast<int32_t>(u32(18));
    const int64_t h = static_cast<int32_t>(u32(22));
    if (u16(28) != 24 || u32(30) != 0)
        throw DataError("unsupported BMP variant (need uncompressed 24-bit): " + path);
    const int64_t row_bytes = (3 * w + 3) / 4 * 4;
    if (bytes.size() < data_off + static_cast<size_t>(row_bytes * h))
        throw DataError("truncated BMP: " + path);
    Image img(h, w, 3);
    for (int64_t y = 0; y < h; ++y) {
        const char* row = bytes.data() + data_off + (h - 1 - y) * row_bytes;
        for (int64_t x = 0; x < w; ++x) {
            img.at(y, x, 2) = static_cast<uint8_t>(row[3 * x + 0]) / 255.0;
            img.at(y, x, 1) = static_cast<uint8_t>(row[3 * x + 1]) / 255.0;
            img.at(y, x, 0) = static_cast<uint8_t>(row[3 * x + 2]) / 255.0;
        }
    }
    return img;
}

Image downscale(const Image& img, int64_t out_h, int64_t out_w) {
    Image out(out_h, out_w, img.c);
    for (int64_t y = 0; y < out_h; ++y) {
        int64_t y0 = y * img.h / out_h, y1 = std::max(y0 + 1, (y + 1) * img.h / out_h);
        for (int64_t x = 0; x < out_w; ++x) {
            int64_t x0 = x * img.w / out_w, x1 = std::max(x0 + 1, (x + 1) * img.w / out_w);
            for (int64_t ch = 0; ch < img.c; ++ch) {
                double s = 0.0;
                for (int64_t yy = y0; yy < y1; ++yy)
                    for (int64_t xx = x0; xx < x1; ++xx) s += img.at(yy, xx, ch);
                out.at(y, x, ch) = s / static_cast<double>((y1 - y0) * (x1 - x0));
            }
        }
    }
    return out;
}

Image augment(const Image& img, Rng& rng) {
    Image out = img;
    // horizontal flip
    if (rng.uniform() < 0.5) {
        for (int64_t y = 0; y < out.h; ++y)
            for (int64_t x = 0; x < out.w / 2; ++x)
                for (int64_t ch = 0; ch < out.c; ++ch)
                    std::swap(out.at(y, x, ch), out.at(y, out.w - 1 - x, ch));
    }
    // crop with padding: pad by 8 (edge replicate) and crop back at a random offset
    {
        const int64_t pad = 8;
        int64_t oy = rng.uniform_int(2 * pad + 1) - pad;
        int64_t ox = rng.uniform_int(2 * pad + 1) - pad;
        Image shifted(out.h, out.w, out.c);
        for (int64_t y = 0; y < out.h; ++y) {
            int64_t sy = std::clamp(y + oy, int64_t{0}, out.h - 1);
            for (int64_t x = 0; x < out.w; ++x) {
                int64_t sx = std::clamp(x + ox, int64_t{0}, out.w - 1);
                for (int64_t ch = 0; ch < out.c; ++ch) shifted.at(y, x, ch) = out.at(sy, sx, ch);
            }
        }
        out = std::move(shifted);
    }
    // random erasing
    if (rng.uniform() < 0.5) {
        double area = (0.02 + 0.18 * rng.uniform()) * static_cast<double>(out.h * out.w);
        double aspect = 0.3 + 2.7 * rng.uniform();
        int64_t eh = std::clamp<int64_t>(static_cast<int64_t>(std::sqrt(area * aspect)), 1, out.h);
        int64_t ew = std::clamp<int64_t>(static_cast<int64_t>(std::sqrt(area / aspect)), 1, out.w);
        int64_t y0 = rng.uniform_int(out.h - eh + 1);
        int64_t x0 = rng.uniform_int(out.w - ew + 1);
        double fill = rng.uniform();
        for (int64_t y = y0; y < y0 + eh; ++y)
            for (int64_t x = x0; x < x0 + ew; ++x)
                for (int64_t ch = 0; ch < out.c; ++ch) out.at(y, x, ch) = fill;
    }
    return out;
}

}  // namespace propot
