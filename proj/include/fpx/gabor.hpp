#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fpx/image.hpp"
#include "fpx/tensor.hpp"

namespace fpx::gabor {

// Even-symmetric Gabor: oriented cosine under a Gaussian envelope.
struct GaborParams {
    real theta = 0.0;      // radians, [0, pi)
    real frequency = 0.1;  // cycles/pixel, (0, 0.5]
    real sigma_x = 4.0;    // envelope along the wave, pixels
    real sigma_y = 4.0;    // envelope across the wave, pixels
    int ksize = 11;        // odd

    void validate() const;
};

struct GaborBank {
    std::vector<GaborParams> filters;
    bool dc_free = false;
};

// Wraps any angle into [0, pi); the kernel is invariant under theta -> theta+pi.
real wrap_orientation(real theta);

// k(x,y) = exp(-0.5*((x_t/sx)^2 + (y_t/sy)^2)) * cos(2*pi*f*x_t), centered at
// the kernel midpoint, x_t = x cos(t) + y sin(t), y_t = -x sin(t) + y cos(t).
// dc_free subtracts the mean so the kernel sums to zero.
std::vector<real> gabor_kernel(const GaborParams& p, bool dc_free);

// Cartesian product in deterministic order: size-major, then theta, f, sigma.
// Orientations are wrapped into [0, pi); duplicates are kept.
GaborBank build_bank(std::span<const int> ksizes, std::span<const real> thetas,
                     std::span<const real> freqs, std::span<const real> sigmas,
                     bool dc_free = false);

// Block-wise ridge direction (radians in [0, pi)) plus a coherence measure.
struct OrientationField {
    int block_size = 0;
    int rows = 0, cols = 0;
    std::vector<real> angles;     // rows*cols
    std::vector<real> coherence;  // rows*cols, in [0,1]

    real angle_at(int r, int c) const { return angles[static_cast<std::size_t>(r) * cols + c]; }
    real coherence_at(int r, int c) const {
        return coherence[static_cast<std::size_t>(r) * cols + c];
    }
};

// Block-wise ridge frequency in cycles/pixel; 0 marks an unreliable block.
struct FrequencyField {
    int block_size = 0;
    int rows = 0, cols = 0;
    std::vector<real> freqs;

    real at(int r, int c) const { return freqs[static_cast<std::size_t>(r) * cols + c]; }
};

// Gradient-based least-squares block orientation (3x3 Sobel), smoothed on the
// doubled-angle representation. smooth_sigma is in pixels.
OrientationField estimate_orientation_field(const Image& img, int block_size, real smooth_sigma);

// Projects each block onto the wave direction and measures the mean
// peak-to-peak distance; blocks with fewer than two peaks or a period outside
// [2,32] px are marked 0.
FrequencyField estimate_ridge_frequency(const Image& img, const OrientationField& field,
                                        int block_size);

// Cross-correlation of a single-channel batch against every kernel in the
// bank, zero padded to the input size. Output shape (n, |bank|, h, w).
// Parallel over (batch x filter x rows); accumulation order per output pixel
// is fixed, so results are bit-identical for any worker count.
Tensor4 apply_bank_batched(const Tensor4& x, const GaborBank& bank);

// Plain quadruple-loop reference, sequential by design. Oracle for the
// batched path and the baseline side of the benchmark.
Tensor4 apply_bank_naive(const Tensor4& x, const GaborBank& bank);

struct EnhanceConfig {
    int block_size = 16;
    int ksize = 15;
    real sigma = 4.0;           // Gaussian envelope of the enhancement kernels
    real mask_threshold = 0.1;  // blocks below this coherence pass through

    int orientation_bins = 16;  // theta quantization for the kernel cache
};

// Classical orientation/frequency-driven enhancement: contrast stretch,
// field estimation, per-block Gabor filtering with bilinear interpolation of
// filter responses across block boundaries. Unreliable blocks pass through.
Image enhance_classical(const Image& img, const EnhanceConfig& cfg = {});

struct BenchReport {
    int height = 0, width = 0, n_filters = 0, batch = 0, ksize = 0, reps = 0;
    int threads = 0;                     // workers used by the batched path
    std::vector<real> naive_s;           // per-rep wall times
    std::vector<real> batched_s;
    real naive_median_s = 0.0;
    real batched_median_s = 0.0;
    real speedup = 0.0;
    real max_abs_diff = 0.0;             // batched vs naive on the same input
};

BenchReport bench_bank(int height, int width, int n_filters, int batch, int reps, int ksize = 15,
                       std::uint64_t seed = 7);

} // namespace fpx::gabor
