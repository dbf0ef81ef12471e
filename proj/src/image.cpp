#include "fpx/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fpx {

void Image::validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("Image: zero-dimension image");
    if (data.size() != static_cast<std::size_t>(width) * height)
        throw std::invalid_argument("Image: data length does not match dimensions");
    for (real v : data)
        if (!(std::isfinite(v) && v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("Image: values must be finite and in [0,1]");
}

namespace {
real percentile(std::vector<real> sorted, real pct) {
    // linear interpolation between order statistics; caller passes sorted data
    const std::size_t m = sorted.size();
    if (m == 1) return sorted[0];
    const real rank = pct / 100.0 * static_cast<real>(m - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, m - 1);
    const real frac = rank - static_cast<real>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}
} // namespace

StretchResult contrast_stretch(const Image& img, real lo_pct, real hi_pct) {
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0))
        throw std::invalid_argument("contrast_stretch: require 0 <= lo_pct < hi_pct <= 100");
    if (img.size() == 0) throw std::invalid_argument("contrast_stretch: empty image");

    std::vector<real> sorted(img.data);
    std::sort(sorted.begin(), sorted.end());
    const real lo = percentile(sorted, lo_pct);
    const real hi = percentile(std::move(sorted), hi_pct);

    StretchResult res;
    res.image = Image(img.width, img.height);
    if (!(hi > lo)) {
        // near-constant crops are legitimate in augmented batches
        res.degenerate = true;
        return res;
    }
    const real scale = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < img.size(); ++i)
        res.image.data[i] = std::clamp((img.data[i] - lo) * scale, 0.0, 1.0);
    return res;
}

real bilinear_sample(const Image& img, real x, real y) {
    const real cx = std::clamp(x, 0.0, static_cast<real>(img.width - 1));
    const real cy = std::clamp(y, 0.0, static_cast<real>(img.height - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const real fx = cx - static_cast<real>(x0);
    const real fy = cy - static_cast<real>(y0);
    const real top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
    const real bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
    return top * (1.0 - fy) + bot * fy;
}

Image resize_bilinear(const Image& img, int new_w, int new_h) {
    if (new_w <= 0 || new_h <= 0) throw std::invalid_argument("resize_bilinear: bad target size");
    if (new_w == img.width && new_h == img.height) return img;
    Image out(new_w, new_h);
    const real sx = static_cast<real>(img.width) / new_w;
    const real sy = static_cast<real>(img.height) / new_h;
    for (int y = 0; y < new_h; ++y)
        for (int x = 0; x < new_w; ++x)
            out.at(y, x) = bilinear_sample(img, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
    return out;
}

Tensor4 image_to_tensor(const Image& img) {
    if (img.width <= 0 || img.height <= 0)
        throw std::invalid_argument("image_to_tensor: empty image");
    Tensor4 t(1, 1, img.height, img.width);
    t.data = img.data;
    return t;
}

Image tensor_to_image(const Tensor4& t) {
    if (t.n != 1 || t.c != 1)
        throw std::invalid_argument("tensor_to_image: need shape (1,1,h,w), got " + t.shape_str());
    Image img(t.w, t.h);
    for (std::size_t i = 0; i < t.numel(); ++i) img.data[i] = std::clamp(t.data[i], 0.0, 1.0);
    return img;
}

namespace {
Image sobel(const Image& img, bool horizontal) {
    // clamp-to-edge 3x3
    Image out(img.width, img.height);
    const int w = img.width, h = img.height;
    auto px = [&](int y, int x) {
        return img.at(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1));
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            real v;
            if (horizontal) {
                v = -px(y - 1, x - 1) + px(y - 1, x + 1) - 2 * px(y, x - 1) + 2 * px(y, x + 1) -
                    px(y + 1, x - 1) + px(y + 1, x + 1);
            } else {
                v = -px(y - 1, x - 1) - 2 * px(y - 1, x) - px(y - 1, x + 1) + px(y + 1, x - 1) +
                    2 * px(y + 1, x) + px(y + 1, x + 1);
            }
            out.at(y, x) = v;
        }
    }
    return out;
}

std::vector<real> gaussian_taps(real sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<real> taps(2 * radius + 1);
    real sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const real v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        taps[i + radius] = v;
        sum += v;
    }
    for (real& t : taps) t /= sum;
    return taps;
}

void blur_1d(const std::vector<real>& src, std::vector<real>& dst, int rows, int cols,
             const std::vector<real>& taps, bool along_x) {
    const int radius = static_cast<int>(taps.size() / 2);
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            real acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                int sy = y, sx = x;
                if (along_x)
                    sx = std::clamp(x + k, 0, cols - 1);
                else
                    sy = std::clamp(y + k, 0, rows - 1);
                acc += taps[k + radius] * src[static_cast<std::size_t>(sy) * cols + sx];
            }
            dst[static_cast<std::size_t>(y) * cols + x] = acc;
        }
    }
}
} // namespace

Image sobel_x(const Image& img) { return sobel(img, true); }
Image sobel_y(const Image& img) { return sobel(img, false); }

void gaussian_blur_grid(std::vector<real>& grid, int rows, int cols, real sigma) {
    if (sigma <= 0.0 || grid.empty()) return;
    const std::vector<real> taps = gaussian_taps(sigma);
    std::vector<real> tmp(grid.size());
    blur_1d(grid, tmp, rows, cols, taps, true);
    blur_1d(tmp, grid, rows, cols, taps, false);
}

Image gaussian_blur(const Image& img, real sigma) {
    if (sigma <= 0.0) return img;
    Image out = img;
    gaussian_blur_grid(out.data, out.height, out.width, sigma);
    return out;
}

real normalized_correlation(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("normalized_correlation: size mismatch");
    const std::size_t m = a.size();
    const real ma = std::accumulate(a.data.begin(), a.data.end(), 0.0) / static_cast<real>(m);
    const real mb = std::accumulate(b.data.begin(), b.data.end(), 0.0) / static_cast<real>(m);
    real num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const real xa = a.data[i] - ma;
        const real xb = b.data[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if (da <= 0.0 || db <= 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

} // namespace fpx
