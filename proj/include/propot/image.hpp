#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "propot/rng.hpp"

namespace propot {

// Interleaved HxWxC raster, values in [0, 1]. C is always 3 here.
struct Image {
    int64_t h = 0;
    int64_t w = 0;
    int64_t c = 3;
    std::vector<double> px;

    Image() = default;
    Image(int64_t h_, int64_t w_, int64_t c_ = 3, double fill = 0.0)
        : h(h_), w(w_), c(c_), px(static_cast<size_t>(h_ * w_ * c_), fill) {}

    double& at(int64_t y, int64_t x, int64_t ch) { return px[(y * w + x) * c + ch]; }
    double at(int64_t y, int64_t x, int64_t ch) const { return px[(y * w + x) * c + ch]; }
    int64_t numel() const { return h * w * c; }
};

// Uncompressed 24-bit BMP; the project's only raster format.
void write_bmp(const std::string& path, const Image& img);
Image read_bmp(const std::string& path);
std::string bmp_bytes(const Image& img);  // in-memory encode, used for HTML reports

Image downscale(const Image& img, int64_t out_h, int64_t out_w);  // box filter

// Training-time augmentation: random horizontal flip, random crop with
// padding, random erasing. Deterministic given the rng state.
Image augment(const Image& img, Rng& rng);

}  // namespace propot
