#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fpx {

using real = double;

// Rank-4 array in (batch, channels, height, width) order, row-major
// contiguous. The unit of every differentiable operation.
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<real> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {
        if (n_ <= 0 || c_ <= 0 || h_ <= 0 || w_ <= 0)
            throw std::invalid_argument("Tensor4: dimensions must be positive");
    }

    std::size_t numel() const { return data.size(); }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix;
    }

    real& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    real at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    real* plane(int in, int ic) { return data.data() + (static_cast<std::size_t>(in) * c + ic) * h * w; }
    const real* plane(int in, int ic) const {
        return data.data() + (static_cast<std::size_t>(in) * c + ic) * h * w;
    }

    bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }

    void fill(real v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

} // namespace fpx
