#include "fpx/gabor_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fpx::diff {

namespace {
constexpr real kPi = std::numbers::pi_v<real>;
constexpr real kTwoPi = 2.0 * kPi;
constexpr real kMinFrequency = 1e-3;
} // namespace

GaborKernelDerivs gabor_kernel_with_derivs(real theta, real freq, real sigma_x, real sigma_y,
                                           int ksize) {
    if (ksize <= 0 || ksize % 2 == 0)
        throw std::invalid_argument("gabor_kernel_with_derivs: ksize must be odd");
    const int r = ksize / 2;
    const real ct = std::cos(theta), st = std::sin(theta);
    const real isx2 = 1.0 / (sigma_x * sigma_x);
    const real isy2 = 1.0 / (sigma_y * sigma_y);
    const std::size_t m = static_cast<std::size_t>(ksize) * ksize;
    GaborKernelDerivs out;
    out.k.resize(m);
    out.d_theta.resize(m);
    out.d_freq.resize(m);
    out.d_log_sx.resize(m);
    out.d_log_sy.resize(m);
    std::size_t i = 0;
    for (int y = -r; y <= r; ++y) {
        for (int x = -r; x <= r; ++x, ++i) {
            const real xt = x * ct + y * st;
            const real yt = -x * st + y * ct;
            const real env = std::exp(-0.5 * (xt * xt * isx2 + yt * yt * isy2));
            const real phase = kTwoPi * freq * xt;
            const real c = std::cos(phase);
            const real s = std::sin(phase);
            out.k[i] = env * c;
            // d(xt)/dtheta = yt, d(yt)/dtheta = -xt
            out.d_theta[i] = env * (xt * yt * (isy2 - isx2) * c - kTwoPi * freq * yt * s);
            out.d_freq[i] = -env * s * kTwoPi * xt;
            out.d_log_sx[i] = env * c * xt * xt * isx2;
            out.d_log_sy[i] = env * c * yt * yt * isy2;
        }
    }
    return out;
}

LearnableGaborLayer::LearnableGaborLayer(int n_filters, int ksize, int attn_se_reduction)
    : n_filters_(n_filters), ksize_(ksize) {
    if (n_filters <= 0) throw std::invalid_argument("LearnableGaborLayer: need >= 1 filter");
    if (ksize <= 0 || ksize % 2 == 0)
        throw std::invalid_argument("LearnableGaborLayer: ksize must be odd");
    theta = ParamTensor(Tensor4(1, 1, 1, n_filters));
    frequency = ParamTensor(Tensor4(1, 1, 1, n_filters));
    log_sigma_x = ParamTensor(Tensor4(1, 1, 1, n_filters));
    log_sigma_y = ParamTensor(Tensor4(1, 1, 1, n_filters));
    mix = ParamTensor(Tensor4(1, 1, 1, n_filters));
    attn = SEAttentionParams(n_filters, attn_se_reduction);
}

void LearnableGaborLayer::init(ParamInit& init) {
    for (int j = 0; j < n_filters_; ++j) {
        theta.value.data[j] = static_cast<real>(static_cast<float>(j * kPi / n_filters_));
        frequency.value.data[j] = static_cast<real>(0.1f);
        log_sigma_x.value.data[j] = static_cast<real>(std::log(4.0f));
        log_sigma_y.value.data[j] = static_cast<real>(std::log(4.0f));
        mix.value.data[j] = static_cast<real>(static_cast<float>(1.0 / n_filters_));
    }
    attn.init(init);
}

gabor::GaborBank LearnableGaborLayer::bank() const {
    gabor::GaborBank b;
    b.dc_free = false;
    for (int j = 0; j < n_filters_; ++j) {
        gabor::GaborParams p;
        p.theta = gabor::wrap_orientation(theta.value.data[j]);
        p.frequency = frequency.value.data[j];
        p.sigma_x = std::exp(log_sigma_x.value.data[j]);
        p.sigma_y = std::exp(log_sigma_y.value.data[j]);
        p.ksize = ksize_;
        b.filters.push_back(p);
    }
    return b;
}

Tensor4 LearnableGaborLayer::forward(const Tensor4& x, GaborLayerCache* cache) const {
    if (x.c != 1)
        throw std::invalid_argument("gabor_layer: input must have one channel, got " +
                                    x.shape_str());
    const int hw = x.h * x.w;

    // per-sample full-range contrast stretch; a positive affine rescale of a
    // non-degenerate sample is absorbed here
    Tensor4 stretched(x.n, 1, x.h, x.w);
    std::vector<real> scales(static_cast<std::size_t>(x.n), 0.0);
    for (int in = 0; in < x.n; ++in) {
        const real* src = x.plane(in, 0);
        const auto [mn_it, mx_it] = std::minmax_element(src, src + hw);
        const real mn = *mn_it, mx = *mx_it;
        real* dst = stretched.plane(in, 0);
        if (mx > mn) {
            const real scale = 1.0 / (mx - mn);
            scales[in] = scale;
            for (int i = 0; i < hw; ++i) dst[i] = (src[i] - mn) * scale;
        } // degenerate sample stays all zeros
    }

    const Tensor4 response = gabor::apply_bank_batched(stretched, bank());
    const Tensor4 attended =
        se_attention_forward(response, attn, cache != nullptr ? &cache->attn : nullptr);

    Tensor4 y(x.n, 1, x.h, x.w);
    for (int in = 0; in < x.n; ++in) {
        real* dst = y.plane(in, 0);
        for (int j = 0; j < n_filters_; ++j) {
            const real m = mix.value.data[j];
            const real* src = attended.plane(in, j);
            for (int i = 0; i < hw; ++i) dst[i] += m * src[i];
        }
    }

    if (cache != nullptr) {
        cache->x_stretched = std::move(stretched);
        cache->stretch_scale = std::move(scales);
        cache->bank_response = response;
        cache->attended = attended;
        cache->valid = true;
    }
    return y;
}

Tensor4 LearnableGaborLayer::backward(GaborLayerCache& cache, const Tensor4& gout) {
    if (!cache.valid) throw std::logic_error("gabor_layer: backward without forward");
    const Tensor4& xs = cache.x_stretched;
    if (gout.n != xs.n || gout.c != 1 || gout.h != xs.h || gout.w != xs.w)
        throw std::invalid_argument("gabor_layer backward: upstream gradient shape mismatch");
    const int hw = xs.h * xs.w;

    // mixing weights
    Tensor4 g_attended(xs.n, n_filters_, xs.h, xs.w);
    for (int in = 0; in < xs.n; ++in) {
        const real* g = gout.plane(in, 0);
        for (int j = 0; j < n_filters_; ++j) {
            const real* att = cache.attended.plane(in, j);
            real* dst = g_attended.plane(in, j);
            const real m = mix.value.data[j];
            real acc = 0.0;
            for (int i = 0; i < hw; ++i) {
                acc += att[i] * g[i];
                dst[i] = m * g[i];
            }
            mix.grad.data[j] += acc;
        }
    }

    const Tensor4 g_response = se_attention_backward(cache.attn, attn, g_attended);

    // bank application is a conv with weights (J,1,ks,ks); its adjoint gives
    // both the kernel gradient and the input gradient
    Tensor4 weights(n_filters_, 1, ksize_, ksize_);
    std::vector<GaborKernelDerivs> derivs;
    derivs.reserve(n_filters_);
    for (int j = 0; j < n_filters_; ++j) {
        derivs.push_back(gabor_kernel_with_derivs(theta.value.data[j], frequency.value.data[j],
                                                  std::exp(log_sigma_x.value.data[j]),
                                                  std::exp(log_sigma_y.value.data[j]), ksize_));
        std::copy(derivs[j].k.begin(), derivs[j].k.end(),
                  weights.data.begin() + static_cast<std::size_t>(j) * ksize_ * ksize_);
    }
    const Conv2dSpec spec{1, 1, ksize_ / 2};
    Tensor4 g_stretched, g_kernels;
    conv2d_backward(xs, weights, spec, g_response, &g_stretched, &g_kernels, nullptr);

    // chain kernel gradients into the scalar parameters
    const std::size_t km = static_cast<std::size_t>(ksize_) * ksize_;
    for (int j = 0; j < n_filters_; ++j) {
        const real* gk = g_kernels.data.data() + static_cast<std::size_t>(j) * km;
        real gt = 0.0, gf = 0.0, gsx = 0.0, gsy = 0.0;
        for (std::size_t i = 0; i < km; ++i) {
            gt += gk[i] * derivs[j].d_theta[i];
            gf += gk[i] * derivs[j].d_freq[i];
            gsx += gk[i] * derivs[j].d_log_sx[i];
            gsy += gk[i] * derivs[j].d_log_sy[i];
        }
        theta.grad.data[j] += gt;
        frequency.grad.data[j] += gf;
        log_sigma_x.grad.data[j] += gsx;
        log_sigma_y.grad.data[j] += gsy;
    }

    // through the per-sample stretch (the min/max pivots are treated as
    // constants, as with any detached normalization statistic)
    Tensor4 gx(xs.n, 1, xs.h, xs.w);
    for (int in = 0; in < xs.n; ++in) {
        const real s = cache.stretch_scale[in];
        const real* g = g_stretched.plane(in, 0);
        real* dst = gx.plane(in, 0);
        for (int i = 0; i < hw; ++i) dst[i] = g[i] * s;
    }
    return gx;
}

void LearnableGaborLayer::project_params() {
    for (int j = 0; j < n_filters_; ++j) {
        frequency.value.data[j] = std::clamp(frequency.value.data[j], kMinFrequency, 0.5);
        theta.value.data[j] = gabor::wrap_orientation(theta.value.data[j]);
    }
}

} // namespace fpx::diff
