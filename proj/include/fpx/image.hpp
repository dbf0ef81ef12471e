#pragma once

#include <filesystem>
#include <vector>

#include "fpx/tensor.hpp"

namespace fpx {

// Single-channel raster with intensities in [0,1], row-major.
struct Image {
    int width = 0, height = 0;
    std::vector<real> data;

    Image() = default;
    Image(int w, int h, real fill = 0.0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
        if (w <= 0 || h <= 0) throw std::invalid_argument("Image: dimensions must be positive");
    }

    real& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    real at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return data.size(); }

    // Throws unless dimensions are positive, data length matches and every
    // value is finite and inside [0,1].
    void validate() const;
};

// --- file I/O (PGM P5 and grayscale PNG, 8/16-bit) -------------------------

Image load_image(const std::filesystem::path& path);

// Writes v as round(v * (2^depth - 1)), round-half-away-from-zero. Format
// chosen by extension (.pgm / .png). Byte output is deterministic; the file
// is written to a temp name and renamed into place.
void save_image(const Image& img, const std::filesystem::path& path, int depth = 8);

// --- intensity normalization ------------------------------------------------

struct StretchResult {
    Image image;
    bool degenerate = false; // percentiles coincided; image is all zeros
};

// Percentile-based affine normalization: values at or below the lo_pct
// percentile map to 0, at or above hi_pct to 1, linear in between.
// Percentiles are linearly interpolated order statistics.
StretchResult contrast_stretch(const Image& img, real lo_pct, real hi_pct);

// --- sampling ---------------------------------------------------------------

// Bilinear interpolation with clamp-to-edge; exact at integer coordinates.
real bilinear_sample(const Image& img, real x, real y);

Image resize_bilinear(const Image& img, int new_w, int new_h);

// --- tensor bridge ----------------------------------------------------------

Tensor4 image_to_tensor(const Image& img);            // shape (1,1,h,w)
Image tensor_to_image(const Tensor4& t);              // requires n==1, c==1; clamps to [0,1]

// --- small shared filters ---------------------------------------------------

// 3x3 Sobel derivatives, clamp-to-edge borders.
Image sobel_x(const Image& img);
Image sobel_y(const Image& img);

// Separable Gaussian blur, clamp-to-edge. sigma <= 0 returns the input.
Image gaussian_blur(const Image& img, real sigma);
void gaussian_blur_grid(std::vector<real>& grid, int rows, int cols, real sigma);

// Zero-mean normalized correlation in [-1,1]; 0 if either side is constant.
real normalized_correlation(const Image& a, const Image& b);

} // namespace fpx
