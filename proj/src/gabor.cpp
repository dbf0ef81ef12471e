#include "fpx/gabor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "fpx/parallel.hpp"
#include "fpx/rng.hpp"

namespace fpx::gabor {

namespace {
constexpr real kPi = std::numbers::pi_v<real>;
}

void GaborParams::validate() const {
    if (ksize <= 0 || ksize % 2 == 0)
        throw std::invalid_argument("GaborParams: ksize must be odd and positive");
    if (!(frequency > 0.0 && frequency <= 0.5))
        throw std::invalid_argument("GaborParams: frequency must be in (0, 0.5]");
    if (!(sigma_x > 0.0 && sigma_y > 0.0))
        throw std::invalid_argument("GaborParams: sigmas must be positive");
}

real wrap_orientation(real theta) {
    real t = std::fmod(theta, kPi);
    if (t < 0.0) t += kPi;
    return t;
}

std::vector<real> gabor_kernel(const GaborParams& p, bool dc_free) {
    p.validate();
    const int r = p.ksize / 2;
    const real ct = std::cos(p.theta), st = std::sin(p.theta);
    std::vector<real> k(static_cast<std::size_t>(p.ksize) * p.ksize);
    for (int y = -r; y <= r; ++y) {
        for (int x = -r; x <= r; ++x) {
            const real xt = x * ct + y * st;
            const real yt = -x * st + y * ct;
            const real env =
                std::exp(-0.5 * (xt * xt / (p.sigma_x * p.sigma_x) + yt * yt / (p.sigma_y * p.sigma_y)));
            k[static_cast<std::size_t>(y + r) * p.ksize + (x + r)] =
                env * std::cos(2.0 * kPi * p.frequency * xt);
        }
    }
    if (dc_free) {
        real mean = 0.0;
        for (real v : k) mean += v;
        mean /= static_cast<real>(k.size());
        for (real& v : k) v -= mean;
    }
    return k;
}

GaborBank build_bank(std::span<const int> ksizes, std::span<const real> thetas,
                     std::span<const real> freqs, std::span<const real> sigmas, bool dc_free) {
    if (ksizes.empty() || thetas.empty() || freqs.empty() || sigmas.empty())
        throw std::invalid_argument("build_bank: empty parameter list");
    GaborBank bank;
    bank.dc_free = dc_free;
    for (int ks : ksizes)
        for (real th : thetas)
            for (real f : freqs)
                for (real s : sigmas) {
                    GaborParams p{wrap_orientation(th), f, s, s, ks};
                    p.validate();
                    bank.filters.push_back(p);
                }
    return bank;
}

// ----------------------------------------------------------- bank application

namespace {

// Correlates one input plane with one kernel over the row range [y0,y1),
// zero padded. Taps are visited in a fixed (ky,kx) order and accumulated into
// a per-row buffer, so every output pixel sees the same summation order
// regardless of how rows are partitioned across workers. The tap-outer inner
// loop is a contiguous multiply-add that the compiler vectorizes.
void correlate_rows(const real* in, real* out, int h, int w, const real* kernel, int ksize, int y0,
                    int y1, real* acc) {
    const int r = ksize / 2;
    for (int y = y0; y < y1; ++y) {
        std::fill(acc, acc + w, 0.0);
        for (int ky = 0; ky < ksize; ++ky) {
            const int iy = y + ky - r;
            if (iy < 0 || iy >= h) continue;
            const real* in_row = in + static_cast<std::size_t>(iy) * w;
            const real* krow = kernel + static_cast<std::size_t>(ky) * ksize;
            for (int kx = 0; kx < ksize; ++kx) {
                const real wgt = krow[kx];
                const int dx = kx - r;
                const int xl = std::max(0, -dx);
                const int xh = std::min(w, w - dx);
                const real* src = in_row + dx;
                real* a = acc;
                for (int x = xl; x < xh; ++x) a[x] += wgt * src[x];
            }
        }
        std::copy(acc, acc + w, out + static_cast<std::size_t>(y) * w);
    }
}

std::vector<std::vector<real>> bank_kernels(const GaborBank& bank) {
    if (bank.filters.empty()) throw std::invalid_argument("apply_bank: empty bank");
    std::vector<std::vector<real>> kernels;
    kernels.reserve(bank.filters.size());
    for (const auto& p : bank.filters) kernels.push_back(gabor_kernel(p, bank.dc_free));
    return kernels;
}

} // namespace

Tensor4 apply_bank_batched(const Tensor4& x, const GaborBank& bank) {
    if (x.c != 1)
        throw std::invalid_argument("apply_bank_batched: input must have one channel, got " +
                                    x.shape_str());
    const auto kernels = bank_kernels(bank);
    const int nf = static_cast<int>(bank.filters.size());
    Tensor4 out(x.n, nf, x.h, x.w);

    // split planes into row chunks so small batches still use all workers
    const int row_chunks = std::max(1, std::min(x.h, (2 * max_threads()) / std::max(1, x.n * nf) + 1));
    const int chunk_h = (x.h + row_chunks - 1) / row_chunks;
    const std::int64_t tasks = static_cast<std::int64_t>(x.n) * nf * row_chunks;

    parallel_for_ranges(tasks, [&](std::int64_t begin, std::int64_t end) {
        std::vector<real> acc(static_cast<std::size_t>(x.w));
        for (std::int64_t t = begin; t < end; ++t) {
            const int chunk = static_cast<int>(t % row_chunks);
            const int j = static_cast<int>((t / row_chunks) % nf);
            const int in = static_cast<int>(t / (static_cast<std::int64_t>(row_chunks) * nf));
            const int y0 = chunk * chunk_h;
            const int y1 = std::min(x.h, y0 + chunk_h);
            if (y0 >= y1) continue;
            correlate_rows(x.plane(in, 0), out.plane(in, j), x.h, x.w, kernels[j].data(),
                           bank.filters[j].ksize, y0, y1, acc.data());
        }
    });
    return out;
}

Tensor4 apply_bank_naive(const Tensor4& x, const GaborBank& bank) {
    if (x.c != 1)
        throw std::invalid_argument("apply_bank_naive: input must have one channel, got " +
                                    x.shape_str());
    const auto kernels = bank_kernels(bank);
    const int nf = static_cast<int>(bank.filters.size());
    Tensor4 out(x.n, nf, x.h, x.w);
    for (int in = 0; in < x.n; ++in) {
        for (int j = 0; j < nf; ++j) {
            const int ks = bank.filters[j].ksize;
            const int r = ks / 2;
            const real* kern = kernels[j].data();
            const real* src = x.plane(in, 0);
            real* dst = out.plane(in, j);
            for (int y = 0; y < x.h; ++y) {
                for (int xx = 0; xx < x.w; ++xx) {
                    real s = 0.0;
                    for (int ky = 0; ky < ks; ++ky) {
                        for (int kx = 0; kx < ks; ++kx) {
                            const int iy = y + ky - r;
                            const int ix = xx + kx - r;
                            if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                            s += src[static_cast<std::size_t>(iy) * x.w + ix] *
                                 kern[static_cast<std::size_t>(ky) * ks + kx];
                        }
                    }
                    dst[static_cast<std::size_t>(y) * x.w + xx] = s;
                }
            }
        }
    }
    return out;
}

// ------------------------------------------------------------- field estimates

OrientationField estimate_orientation_field(const Image& img, int block_size, real smooth_sigma) {
    if (block_size < 4) throw std::invalid_argument("estimate_orientation_field: block_size >= 4");
    if (img.width < block_size || img.height < block_size)
        throw std::invalid_argument("estimate_orientation_field: image smaller than one block");

    const Image gx = sobel_x(img);
    const Image gy = sobel_y(img);

    OrientationField f;
    f.block_size = block_size;
    f.rows = (img.height + block_size - 1) / block_size;
    f.cols = (img.width + block_size - 1) / block_size;
    f.angles.assign(static_cast<std::size_t>(f.rows) * f.cols, 0.0);
    f.coherence.assign(f.angles.size(), 0.0);

    std::vector<real> a(f.angles.size()), b(f.angles.size());
    for (int br = 0; br < f.rows; ++br) {
        for (int bc = 0; bc < f.cols; ++bc) {
            real sxx = 0.0, syy = 0.0, sxy = 0.0;
            const int y1 = std::min(img.height, (br + 1) * block_size);
            const int x1 = std::min(img.width, (bc + 1) * block_size);
            for (int y = br * block_size; y < y1; ++y) {
                for (int x = bc * block_size; x < x1; ++x) {
                    const real dx = gx.at(y, x), dy = gy.at(y, x);
                    sxx += dx * dx;
                    syy += dy * dy;
                    sxy += dx * dy;
                }
            }
            const std::size_t i = static_cast<std::size_t>(br) * f.cols + bc;
            a[i] = sxx - syy;
            b[i] = 2.0 * sxy;
            const real denom = sxx + syy;
            f.coherence[i] = denom > 0.0 ? std::sqrt(a[i] * a[i] + b[i] * b[i]) / denom : 0.0;
        }
    }

    // normalize to unit doubled-angle vectors before smoothing so strong
    // blocks do not dominate their neighbors
    for (std::size_t i = 0; i < a.size(); ++i) {
        const real m = std::hypot(a[i], b[i]);
        if (m > 0.0) {
            a[i] /= m;
            b[i] /= m;
        }
    }
    const real grid_sigma = smooth_sigma / static_cast<real>(block_size);
    if (grid_sigma > 0.0) {
        gaussian_blur_grid(a, f.rows, f.cols, grid_sigma);
        gaussian_blur_grid(b, f.rows, f.cols, grid_sigma);
        gaussian_blur_grid(f.coherence, f.rows, f.cols, grid_sigma);
    }

    for (std::size_t i = 0; i < a.size(); ++i) {
        const real theta_grad = 0.5 * std::atan2(b[i], a[i]);
        f.angles[i] = wrap_orientation(theta_grad + kPi / 2.0);
        f.coherence[i] = std::clamp(f.coherence[i], 0.0, 1.0);
    }
    return f;
}

namespace {

// Mean peak-to-peak distance of the block's oscillation along the wave
// direction; 0 when the block has no usable ridge period.
real block_period(const Image& img, real theta, real cx, real cy, int block_size) {
    const int sig_len = 2 * block_size; // window long enough for >=2 peaks of a 32 px period
    const int avg_width = block_size;
    const real phi = theta + kPi / 2.0; // wave direction, orthogonal to the ridges
    const real ux = std::cos(phi), uy = std::sin(phi);
    const real vx = std::cos(theta), vy = std::sin(theta);

    std::vector<real> sig(static_cast<std::size_t>(sig_len));
    for (int d = 0; d < sig_len; ++d) {
        const real off = static_cast<real>(d) - static_cast<real>(sig_len) / 2.0;
        real acc = 0.0;
        for (int s = 0; s < avg_width; ++s) {
            const real soff = static_cast<real>(s) - static_cast<real>(avg_width) / 2.0;
            acc += bilinear_sample(img, cx + off * ux + soff * vx, cy + off * uy + soff * vy);
        }
        sig[d] = acc / static_cast<real>(avg_width);
    }

    // light [1,2,1] smoothing to suppress single-sample noise peaks
    std::vector<real> sm(sig.size());
    for (int i = 0; i < sig_len; ++i) {
        const real l = sig[std::max(0, i - 1)];
        const real r = sig[std::min(sig_len - 1, i + 1)];
        sm[i] = 0.25 * l + 0.5 * sig[i] + 0.25 * r;
    }

    const real mean = std::accumulate(sm.begin(), sm.end(), 0.0) / static_cast<real>(sig_len);
    std::vector<real> peaks;
    for (int i = 1; i + 1 < sig_len; ++i) {
        if (sm[i] > sm[i - 1] && sm[i] >= sm[i + 1] && sm[i] > mean) {
            // parabolic sub-sample refinement
            const real denom = sm[i - 1] - 2.0 * sm[i] + sm[i + 1];
            real shift = 0.0;
            if (denom < 0.0) shift = std::clamp(0.5 * (sm[i - 1] - sm[i + 1]) / denom, -0.5, 0.5);
            peaks.push_back(static_cast<real>(i) + shift);
        }
    }
    if (peaks.size() < 2) return 0.0;
    return (peaks.back() - peaks.front()) / static_cast<real>(peaks.size() - 1);
}

} // namespace

FrequencyField estimate_ridge_frequency(const Image& img, const OrientationField& field,
                                        int block_size) {
    if (field.block_size != block_size)
        throw std::invalid_argument("estimate_ridge_frequency: field block size mismatch");
    FrequencyField f;
    f.block_size = block_size;
    f.rows = field.rows;
    f.cols = field.cols;
    f.freqs.assign(static_cast<std::size_t>(f.rows) * f.cols, 0.0);

    for (int br = 0; br < f.rows; ++br) {
        for (int bc = 0; bc < f.cols; ++bc) {
            const real cx = (static_cast<real>(bc) + 0.5) * block_size;
            const real cy = (static_cast<real>(br) + 0.5) * block_size;
            const real period =
                block_period(img, field.angle_at(br, bc), cx, cy, block_size);
            if (period >= 2.0 && period <= 32.0)
                f.freqs[static_cast<std::size_t>(br) * f.cols + bc] = 1.0 / period;
        }
    }
    return f;
}

// --------------------------------------------------------- classical pipeline

Image enhance_classical(const Image& img, const EnhanceConfig& cfg) {
    if (img.width < cfg.block_size || img.height < cfg.block_size)
        throw std::invalid_argument("enhance_classical: image smaller than one block");

    const StretchResult stretched = contrast_stretch(img, 0.0, 100.0);
    const Image& work = stretched.image;
    if (stretched.degenerate) return work; // constant input: nothing to enhance

    const int B = cfg.block_size;
    const OrientationField of = estimate_orientation_field(work, B, static_cast<real>(B));
    const FrequencyField ff = estimate_ridge_frequency(work, of, B);

    // quantize (theta, period) per reliable block and build one kernel per
    // distinct pair; ties snap toward the smaller bin index via llround
    const int nbins = cfg.orientation_bins;
    const std::size_t nblocks = of.angles.size();
    std::vector<int> block_kernel(nblocks, -1); // -1: pass through
    std::map<std::pair<int, int>, int> kernel_ids;
    std::vector<GaborParams> params;
    for (std::size_t i = 0; i < nblocks; ++i) {
        const real freq = ff.freqs[i];
        if (freq <= 0.0 || of.coherence[i] < cfg.mask_threshold) continue;
        const int tbin =
            static_cast<int>(std::llround(of.angles[i] / kPi * nbins)) % nbins;
        const int period = std::clamp(static_cast<int>(std::llround(1.0 / freq)), 2, 32);
        const auto key = std::make_pair(tbin, period);
        auto it = kernel_ids.find(key);
        if (it == kernel_ids.end()) {
            GaborParams p;
            p.theta = wrap_orientation(static_cast<real>(tbin) * kPi / nbins);
            p.frequency = 1.0 / static_cast<real>(period);
            p.sigma_x = cfg.sigma;
            p.sigma_y = cfg.sigma;
            p.ksize = cfg.ksize;
            it = kernel_ids.emplace(key, static_cast<int>(params.size())).first;
            params.push_back(p);
        }
        block_kernel[i] = it->second;
    }

    Image out(img.width, img.height);
    if (params.empty()) {
        out = work; // every block unreliable: pass the stretched image through
    } else {
        GaborBank bank{params, /*dc_free=*/true};
        const Tensor4 responses = apply_bank_batched(image_to_tensor(work), bank);

        // per pixel, bilinearly blend the responses of the four surrounding
        // blocks; unreliable blocks contribute the unfiltered pixel
        auto block_value = [&](int br, int bc, int y, int x) -> real {
            const int k = block_kernel[static_cast<std::size_t>(br) * of.cols + bc];
            if (k < 0) return work.at(y, x);
            return responses.at(0, k, y, x);
        };
        for (int y = 0; y < img.height; ++y) {
            const real gy = (static_cast<real>(y) + 0.5) / B - 0.5;
            const int r0 = std::clamp(static_cast<int>(std::floor(gy)), 0, of.rows - 1);
            const int r1 = std::min(r0 + 1, of.rows - 1);
            const real fy = std::clamp(gy - static_cast<real>(r0), 0.0, 1.0);
            for (int x = 0; x < img.width; ++x) {
                const real gx = (static_cast<real>(x) + 0.5) / B - 0.5;
                const int c0 = std::clamp(static_cast<int>(std::floor(gx)), 0, of.cols - 1);
                const int c1 = std::min(c0 + 1, of.cols - 1);
                const real fx = std::clamp(gx - static_cast<real>(c0), 0.0, 1.0);
                const real top = block_value(r0, c0, y, x) * (1.0 - fx) +
                                 block_value(r0, c1, y, x) * fx;
                const real bot = block_value(r1, c0, y, x) * (1.0 - fx) +
                                 block_value(r1, c1, y, x) * fx;
                out.at(y, x) = top * (1.0 - fy) + bot * fy;
            }
        }
    }

    StretchResult final = contrast_stretch(out, 0.0, 100.0);
    return final.image;
}

// ---------------------------------------------------------------- benchmark

BenchReport bench_bank(int height, int width, int n_filters, int batch, int reps, int ksize,
                       std::uint64_t seed) {
    if (height <= 0 || width <= 0 || n_filters <= 0 || batch <= 0 || reps <= 0)
        throw std::invalid_argument("bench_bank: sizes must be positive");

    Rng rng(seed);
    Tensor4 x(batch, 1, height, width);
    for (real& v : x.data) v = rng.uniform();

    GaborBank bank;
    for (int j = 0; j < n_filters; ++j) {
        GaborParams p;
        p.theta = wrap_orientation(static_cast<real>(j) * kPi / n_filters);
        p.frequency = 0.1;
        p.sigma_x = p.sigma_y = 4.0;
        p.ksize = ksize;
        bank.filters.push_back(p);
    }

    BenchReport rep;
    rep.height = height;
    rep.width = width;
    rep.n_filters = n_filters;
    rep.batch = batch;
    rep.ksize = ksize;
    rep.reps = reps;
    rep.threads = max_threads();

    using clock = std::chrono::steady_clock;
    Tensor4 naive_out, batched_out;
    for (int r = 0; r < reps; ++r) {
        auto t0 = clock::now();
        naive_out = apply_bank_naive(x, bank);
        auto t1 = clock::now();
        batched_out = apply_bank_batched(x, bank);
        auto t2 = clock::now();
        rep.naive_s.push_back(std::chrono::duration<real>(t1 - t0).count());
        rep.batched_s.push_back(std::chrono::duration<real>(t2 - t1).count());
    }

    for (std::size_t i = 0; i < naive_out.numel(); ++i)
        rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(naive_out.data[i] - batched_out.data[i]));

    auto median = [](std::vector<real> v) {
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size();
        return m % 2 == 1 ? v[m / 2] : 0.5 * (v[m / 2 - 1] + v[m / 2]);
    };
    rep.naive_median_s = median(rep.naive_s);
    rep.batched_median_s = median(rep.batched_s);
    rep.speedup = rep.batched_median_s > 0.0 ? rep.naive_median_s / rep.batched_median_s : 0.0;
    return rep;
}

} // namespace fpx::gabor
