#include "fpx/diff_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fpx/parallel.hpp"
#include "fpx/rng.hpp"

namespace fpx::diff {

// --------------------------------------------------------------------- conv2d

int conv_out_dim(int in, int k, const Conv2dSpec& spec) {
    const int eff = spec.dilation * (k - 1) + 1;
    const int num = in + 2 * spec.pad - eff;
    if (num < 0) return 0;
    return num / spec.stride + 1;
}

namespace {
void check_conv_args(const Tensor4& x, const Tensor4& w, const Tensor4& b,
                     const Conv2dSpec& spec) {
    if (w.h % 2 == 0 || w.w % 2 == 0)
        throw std::invalid_argument("conv2d: kernels must be odd, got " + w.shape_str());
    if (x.c != w.c)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(x.c) +
                                    " do not match weight fan-in " + std::to_string(w.c));
    if (b.c != w.n || b.n != 1 || b.h != 1 || b.w != 1)
        throw std::invalid_argument("conv2d: bias must be (1,co,1,1)");
    if (spec.stride < 1 || spec.dilation < 1 || spec.pad < 0)
        throw std::invalid_argument("conv2d: bad stride/dilation/pad");
}
} // namespace

Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w, const Tensor4& b,
                       const Conv2dSpec& spec) {
    check_conv_args(x, w, b, spec);
    const int oh = conv_out_dim(x.h, w.h, spec);
    const int ow = conv_out_dim(x.w, w.w, spec);
    if (oh <= 0 || ow <= 0)
        throw std::invalid_argument("conv2d: kernel does not fit input " + x.shape_str());

    Tensor4 out(x.n, w.n, oh, ow);
    const int s = spec.stride, d = spec.dilation, p = spec.pad;

    parallel_for(static_cast<std::int64_t>(x.n) * w.n, [&](std::int64_t task) {
        const int in = static_cast<int>(task / w.n);
        const int co = static_cast<int>(task % w.n);
        real* dst = out.plane(in, co);
        const real bias = b.data[co];
        for (int i = 0; i < oh * ow; ++i) dst[i] = bias;
        for (int ci = 0; ci < x.c; ++ci) {
            const real* src = x.plane(in, ci);
            for (int ky = 0; ky < w.h; ++ky) {
                for (int kx = 0; kx < w.w; ++kx) {
                    const real wgt = w.at(co, ci, ky, kx);
                    if (wgt == 0.0) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * s - p + ky * d;
                        if (iy < 0 || iy >= x.h) continue;
                        const real* src_row = src + static_cast<std::size_t>(iy) * x.w;
                        real* dst_row = dst + static_cast<std::size_t>(oy) * ow;
                        const int base = kx * d - p;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * s + base;
                            if (ix < 0 || ix >= x.w) continue;
                            dst_row[ox] += wgt * src_row[ix];
                        }
                    }
                }
            }
        }
    });
    return out;
}

void conv2d_backward(const Tensor4& x, const Tensor4& w, const Conv2dSpec& spec,
                     const Tensor4& gout, Tensor4* gx, Tensor4* gw, Tensor4* gb) {
    const int oh = conv_out_dim(x.h, w.h, spec);
    const int ow = conv_out_dim(x.w, w.w, spec);
    if (gout.n != x.n || gout.c != w.n || gout.h != oh || gout.w != ow)
        throw std::invalid_argument("conv2d_backward: upstream gradient shape mismatch");
    const int s = spec.stride, d = spec.dilation, p = spec.pad;

    if (gx != nullptr) {
        *gx = Tensor4(x.n, x.c, x.h, x.w);
        parallel_for(static_cast<std::int64_t>(x.n) * x.c, [&](std::int64_t task) {
            const int in = static_cast<int>(task / x.c);
            const int ci = static_cast<int>(task % x.c);
            real* dst = gx->plane(in, ci);
            for (int co = 0; co < w.n; ++co) {
                const real* g = gout.plane(in, co);
                for (int ky = 0; ky < w.h; ++ky) {
                    for (int kx = 0; kx < w.w; ++kx) {
                        const real wgt = w.at(co, ci, ky, kx);
                        if (wgt == 0.0) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * s - p + ky * d;
                            if (iy < 0 || iy >= x.h) continue;
                            const real* g_row = g + static_cast<std::size_t>(oy) * ow;
                            real* dst_row = dst + static_cast<std::size_t>(iy) * x.w;
                            const int base = kx * d - p;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * s + base;
                                if (ix < 0 || ix >= x.w) continue;
                                dst_row[ix] += wgt * g_row[ox];
                            }
                        }
                    }
                }
            }
        });
    }

    if (gw != nullptr) {
        *gw = Tensor4(w.n, w.c, w.h, w.w);
        parallel_for(static_cast<std::int64_t>(w.n) * w.c, [&](std::int64_t task) {
            const int co = static_cast<int>(task / w.c);
            const int ci = static_cast<int>(task % w.c);
            for (int in = 0; in < x.n; ++in) {
                const real* src = x.plane(in, ci);
                const real* g = gout.plane(in, co);
                for (int ky = 0; ky < w.h; ++ky) {
                    for (int kx = 0; kx < w.w; ++kx) {
                        real acc = 0.0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * s - p + ky * d;
                            if (iy < 0 || iy >= x.h) continue;
                            const real* src_row = src + static_cast<std::size_t>(iy) * x.w;
                            const real* g_row = g + static_cast<std::size_t>(oy) * ow;
                            const int base = kx * d - p;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * s + base;
                                if (ix < 0 || ix >= x.w) continue;
                                acc += src_row[ix] * g_row[ox];
                            }
                        }
                        gw->at(co, ci, ky, kx) += acc;
                    }
                }
            }
        });
    }

    if (gb != nullptr) {
        *gb = Tensor4(1, w.n, 1, 1);
        for (int co = 0; co < w.n; ++co) {
            real acc = 0.0;
            for (int in = 0; in < x.n; ++in) {
                const real* g = gout.plane(in, co);
                for (int i = 0; i < oh * ow; ++i) acc += g[i];
            }
            gb->data[co] = acc;
        }
    }
}

// ----------------------------------------------------------- conv transpose

namespace {
void check_tconv_args(const Tensor4& x, const Tensor4& w, const Tensor4& b, int stride, int pad) {
    if (x.c != w.c)
        throw std::invalid_argument("conv_transpose2d: input channels " + std::to_string(x.c) +
                                    " do not match weight layout " + w.shape_str());
    if (b.c != w.n || b.n != 1 || b.h != 1 || b.w != 1)
        throw std::invalid_argument("conv_transpose2d: bias must be (1,co,1,1)");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv_transpose2d: bad stride/pad");
    if ((x.h - 1) * stride - 2 * pad + w.h <= 0 || (x.w - 1) * stride - 2 * pad + w.w <= 0)
        throw std::invalid_argument("conv_transpose2d: empty output");
}
} // namespace

Tensor4 conv_transpose2d_forward(const Tensor4& x, const Tensor4& w, const Tensor4& b, int stride,
                                 int pad) {
    check_tconv_args(x, w, b, stride, pad);
    const int oh = (x.h - 1) * stride - 2 * pad + w.h;
    const int ow = (x.w - 1) * stride - 2 * pad + w.w;
    Tensor4 out(x.n, w.n, oh, ow);

    parallel_for(static_cast<std::int64_t>(x.n) * w.n, [&](std::int64_t task) {
        const int in = static_cast<int>(task / w.n);
        const int co = static_cast<int>(task % w.n);
        real* dst = out.plane(in, co);
        const real bias = b.data[co];
        for (int i = 0; i < oh * ow; ++i) dst[i] = bias;
        for (int ci = 0; ci < x.c; ++ci) {
            const real* src = x.plane(in, ci);
            for (int ky = 0; ky < w.h; ++ky) {
                for (int kx = 0; kx < w.w; ++kx) {
                    const real wgt = w.at(co, ci, ky, kx);
                    if (wgt == 0.0) continue;
                    for (int iy = 0; iy < x.h; ++iy) {
                        const int oy = iy * stride - pad + ky;
                        if (oy < 0 || oy >= oh) continue;
                        const real* src_row = src + static_cast<std::size_t>(iy) * x.w;
                        real* dst_row = dst + static_cast<std::size_t>(oy) * ow;
                        const int base = kx - pad;
                        for (int ix = 0; ix < x.w; ++ix) {
                            const int ox = ix * stride + base;
                            if (ox < 0 || ox >= ow) continue;
                            dst_row[ox] += wgt * src_row[ix];
                        }
                    }
                }
            }
        }
    });
    return out;
}

void conv_transpose2d_backward(const Tensor4& x, const Tensor4& w, int stride, int pad,
                               const Tensor4& gout, Tensor4* gx, Tensor4* gw, Tensor4* gb) {
    const int oh = (x.h - 1) * stride - 2 * pad + w.h;
    const int ow = (x.w - 1) * stride - 2 * pad + w.w;
    if (gout.n != x.n || gout.c != w.n || gout.h != oh || gout.w != ow)
        throw std::invalid_argument("conv_transpose2d_backward: upstream gradient shape mismatch");

    if (gx != nullptr) {
        *gx = Tensor4(x.n, x.c, x.h, x.w);
        parallel_for(static_cast<std::int64_t>(x.n) * x.c, [&](std::int64_t task) {
            const int in = static_cast<int>(task / x.c);
            const int ci = static_cast<int>(task % x.c);
            real* dst = gx->plane(in, ci);
            for (int co = 0; co < w.n; ++co) {
                const real* g = gout.plane(in, co);
                for (int ky = 0; ky < w.h; ++ky) {
                    for (int kx = 0; kx < w.w; ++kx) {
                        const real wgt = w.at(co, ci, ky, kx);
                        if (wgt == 0.0) continue;
                        for (int iy = 0; iy < x.h; ++iy) {
                            const int oy = iy * stride - pad + ky;
                            if (oy < 0 || oy >= oh) continue;
                            const real* g_row = g + static_cast<std::size_t>(oy) * ow;
                            real* dst_row = dst + static_cast<std::size_t>(iy) * x.w;
                            const int base = kx - pad;
                            for (int ix = 0; ix < x.w; ++ix) {
                                const int ox = ix * stride + base;
                                if (ox < 0 || ox >= ow) continue;
                                dst_row[ix] += wgt * g_row[ox];
                            }
                        }
                    }
                }
            }
        });
    }

    if (gw != nullptr) {
        *gw = Tensor4(w.n, w.c, w.h, w.w);
        parallel_for(static_cast<std::int64_t>(w.n) * w.c, [&](std::int64_t task) {
            const int co = static_cast<int>(task / w.c);
            const int ci = static_cast<int>(task % w.c);
            for (int in = 0; in < x.n; ++in) {
                const real* src = x.plane(in, ci);
                const real* g = gout.plane(in, co);
                for (int ky = 0; ky < w.h; ++ky) {
                    for (int kx = 0; kx < w.w; ++kx) {
                        real acc = 0.0;
                        for (int iy = 0; iy < x.h; ++iy) {
                            const int oy = iy * stride - pad + ky;
                            if (oy < 0 || oy >= oh) continue;
                            const real* src_row = src + static_cast<std::size_t>(iy) * x.w;
                            const real* g_row = g + static_cast<std::size_t>(oy) * ow;
                            const int base = kx - pad;
                            for (int ix = 0; ix < x.w; ++ix) {
                                const int ox = ix * stride + base;
                                if (ox < 0 || ox >= ow) continue;
                                acc += src_row[ix] * g_row[ox];
                            }
                        }
                        gw->at(co, ci, ky, kx) += acc;
                    }
                }
            }
        });
    }

    if (gb != nullptr) {
        *gb = Tensor4(1, w.n, 1, 1);
        for (int co = 0; co < w.n; ++co) {
            real acc = 0.0;
            for (int in = 0; in < x.n; ++in) {
                const real* g = gout.plane(in, co);
                for (int i = 0; i < oh * ow; ++i) acc += g[i];
            }
            gb->data[co] = acc;
        }
    }
}

// ---------------------------------------------------------------- weight norm

namespace {
std::vector<real> channel_norms(const Tensor4& v) {
    const std::size_t fan = static_cast<std::size_t>(v.c) * v.h * v.w;
    std::vector<real> norms(v.n);
    for (int o = 0; o < v.n; ++o) {
        const real* p = v.data.data() + o * fan;
        real acc = 0.0;
        for (std::size_t i = 0; i < fan; ++i) acc += p[i] * p[i];
        norms[o] = std::sqrt(acc);
        if (!(norms[o] > 0.0))
            throw std::invalid_argument("weight_norm: zero-norm output channel " +
                                        std::to_string(o));
    }
    return norms;
}
} // namespace

Tensor4 weight_norm(const Tensor4& v, const Tensor4& g) {
    if (g.c != v.n || g.n != 1 || g.h != 1 || g.w != 1)
        throw std::invalid_argument("weight_norm: gain must be (1,co,1,1)");
    const auto norms = channel_norms(v);
    const std::size_t fan = static_cast<std::size_t>(v.c) * v.h * v.w;
    Tensor4 w = v;
    for (int o = 0; o < v.n; ++o) {
        const real scale = g.data[o] / norms[o];
        real* p = w.data.data() + o * fan;
        for (std::size_t i = 0; i < fan; ++i) p[i] *= scale;
    }
    return w;
}

void weight_norm_backward(const Tensor4& v, const Tensor4& g, const Tensor4& gw, Tensor4* gv,
                          Tensor4* gg) {
    const auto norms = channel_norms(v);
    const std::size_t fan = static_cast<std::size_t>(v.c) * v.h * v.w;
    if (gv != nullptr) *gv = Tensor4(v.n, v.c, v.h, v.w);
    if (gg != nullptr) *gg = Tensor4(1, v.n, 1, 1);
    for (int o = 0; o < v.n; ++o) {
        const real* vp = v.data.data() + o * fan;
        const real* gwp = gw.data.data() + o * fan;
        real dot = 0.0; // <gw, v> per channel
        for (std::size_t i = 0; i < fan; ++i) dot += gwp[i] * vp[i];
        if (gg != nullptr) gg->data[o] += dot / norms[o];
        if (gv != nullptr) {
            const real gain = g.data[o];
            const real inv = 1.0 / norms[o];
            const real inv3 = inv * inv * inv;
            real* gvp = gv->data.data() + o * fan;
            for (std::size_t i = 0; i < fan; ++i)
                gvp[i] += gain * (gwp[i] * inv - dot * vp[i] * inv3);
        }
    }
}

// -------------------------------------------------------------- instance norm

Tensor4 instance_norm_forward(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta,
                              real eps, InstanceNormCache* cache) {
    if (gamma.c != x.c || beta.c != x.c)
        throw std::invalid_argument("instance_norm: gamma/beta must have one entry per channel");
    const int hw = x.h * x.w;
    Tensor4 out(x.n, x.c, x.h, x.w);
    Tensor4 x_hat(x.n, x.c, x.h, x.w);
    std::vector<real> inv_std(static_cast<std::size_t>(x.n) * x.c);

    for (int in = 0; in < x.n; ++in) {
        for (int ci = 0; ci < x.c; ++ci) {
            const real* src = x.plane(in, ci);
            real mean = 0.0;
            for (int i = 0; i < hw; ++i) mean += src[i];
            mean /= hw;
            real var = 0.0;
            for (int i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
            var /= hw; // biased
            const real istd = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(in) * x.c + ci] = istd;
            real* xh = x_hat.plane(in, ci);
            real* dst = out.plane(in, ci);
            const real gm = gamma.data[ci], bt = beta.data[ci];
            for (int i = 0; i < hw; ++i) {
                xh[i] = (src[i] - mean) * istd;
                dst[i] = xh[i] * gm + bt;
            }
        }
    }
    if (cache != nullptr) {
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

Tensor4 instance_norm_backward(const InstanceNormCache& cache, const Tensor4& gamma,
                               const Tensor4& gout, Tensor4* ggamma, Tensor4* gbeta) {
    const Tensor4& xh = cache.x_hat;
    require_same_shape(xh, gout, "instance_norm_backward");
    const int hw = xh.h * xh.w;
    Tensor4 gx(xh.n, xh.c, xh.h, xh.w);
    for (int in = 0; in < xh.n; ++in) {
        for (int ci = 0; ci < xh.c; ++ci) {
            const real* g = gout.plane(in, ci);
            const real* h = xh.plane(in, ci);
            real sum_g = 0.0, sum_gh = 0.0;
            for (int i = 0; i < hw; ++i) {
                sum_g += g[i];
                sum_gh += g[i] * h[i];
            }
            if (ggamma != nullptr) ggamma->data[ci] += sum_gh;
            if (gbeta != nullptr) gbeta->data[ci] += sum_g;
            const real istd = cache.inv_std[static_cast<std::size_t>(in) * xh.c + ci];
            const real k = gamma.data[ci] * istd;
            const real mean_g = sum_g / hw;
            const real mean_gh = sum_gh / hw;
            real* dst = gx.plane(in, ci);
            for (int i = 0; i < hw; ++i) dst[i] = k * (g[i] - mean_g - h[i] * mean_gh);
        }
    }
    return gx;
}

// ------------------------------------------------------------------ pointwise

Tensor4 leaky_relu_forward(const Tensor4& x, real slope) {
    Tensor4 out = x;
    for (real& v : out.data)
        if (v < 0.0) v *= slope;
    return out;
}

Tensor4 leaky_relu_backward(const Tensor4& x, const Tensor4& gout, real slope) {
    require_same_shape(x, gout, "leaky_relu_backward");
    Tensor4 gx = gout;
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (x.data[i] < 0.0) gx.data[i] *= slope;
    return gx;
}

Tensor4 dropout_forward(const Tensor4& x, real p, std::uint64_t seed, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    Tensor4 out = x;
    const real scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = hash01(seed, i) < p ? 0.0 : out.data[i] * scale;
    return out;
}

Tensor4 dropout_backward(const Tensor4& gout, real p, std::uint64_t seed, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return gout;
    Tensor4 gx = gout;
    const real scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < gx.numel(); ++i)
        gx.data[i] = hash01(seed, i) < p ? 0.0 : gx.data[i] * scale;
    return gx;
}

// ------------------------------------------------------------------- SE block

SEBlockParams::SEBlockParams(int channels_, int reduction_) {
    if (channels_ <= 0 || reduction_ <= 0 || channels_ % reduction_ != 0)
        throw std::invalid_argument("SEBlockParams: reduction must divide channels");
    channels = channels_;
    reduction = reduction_;
    const int mid = channels / reduction;
    w1 = ParamTensor(Tensor4(mid, channels, 1, 1));
    b1 = ParamTensor(Tensor4(1, mid, 1, 1));
    w2 = ParamTensor(Tensor4(channels, mid, 1, 1));
    b2 = ParamTensor(Tensor4(1, channels, 1, 1));
}

void SEBlockParams::init(ParamInit& init) {
    init.he_normal(w1.value, channels);
    init.constant(b1.value, 0.0);
    init.he_normal(w2.value, channels / reduction);
    init.constant(b2.value, 0.0);
}

namespace {
real sigmoid(real v) { return 1.0 / (1.0 + std::exp(-v)); }
} // namespace

Tensor4 se_block_forward(const Tensor4& x, const SEBlockParams& p, SEBlockCache* cache) {
    if (x.c != p.channels)
        throw std::invalid_argument("se_block: channel mismatch, input " + x.shape_str());
    const int mid = p.channels / p.reduction;
    const int hw = x.h * x.w;

    std::vector<real> pooled(static_cast<std::size_t>(x.n) * x.c);
    std::vector<real> hidden_pre(static_cast<std::size_t>(x.n) * mid);
    std::vector<real> hidden(hidden_pre.size());
    std::vector<real> gate_pre(pooled.size());
    std::vector<real> gate(pooled.size());

    for (int in = 0; in < x.n; ++in) {
        for (int ci = 0; ci < x.c; ++ci) {
            const real* src = x.plane(in, ci);
            real acc = 0.0;
            for (int i = 0; i < hw; ++i) acc += src[i];
            pooled[static_cast<std::size_t>(in) * x.c + ci] = acc / hw;
        }
        for (int m = 0; m < mid; ++m) {
            real acc = p.b1.value.data[m];
            for (int ci = 0; ci < x.c; ++ci)
                acc += p.w1.value.at(m, ci, 0, 0) * pooled[static_cast<std::size_t>(in) * x.c + ci];
            hidden_pre[static_cast<std::size_t>(in) * mid + m] = acc;
            hidden[static_cast<std::size_t>(in) * mid + m] = acc >= 0.0 ? acc : acc * p.leaky_slope;
        }
        for (int ci = 0; ci < x.c; ++ci) {
            real acc = p.b2.value.data[ci];
            for (int m = 0; m < mid; ++m)
                acc += p.w2.value.at(ci, m, 0, 0) * hidden[static_cast<std::size_t>(in) * mid + m];
            gate_pre[static_cast<std::size_t>(in) * x.c + ci] = acc;
            gate[static_cast<std::size_t>(in) * x.c + ci] = sigmoid(acc);
        }
    }

    Tensor4 out(x.n, x.c, x.h, x.w);
    for (int in = 0; in < x.n; ++in)
        for (int ci = 0; ci < x.c; ++ci) {
            const real s = gate[static_cast<std::size_t>(in) * x.c + ci];
            const real* src = x.plane(in, ci);
            real* dst = out.plane(in, ci);
            for (int i = 0; i < hw; ++i) dst[i] = src[i] * s;
        }

    if (cache != nullptr) {
        cache->x = x;
        cache->pooled = std::move(pooled);
        cache->hidden_pre = std::move(hidden_pre);
        cache->hidden = std::move(hidden);
        cache->gate_pre = std::move(gate_pre);
        cache->gate = std::move(gate);
    }
    return out;
}

Tensor4 se_block_backward(const SEBlockCache& cache, SEBlockParams& p, const Tensor4& gout) {
    const Tensor4& x = cache.x;
    require_same_shape(x, gout, "se_block_backward");
    const int mid = p.channels / p.reduction;
    const int hw = x.h * x.w;
    Tensor4 gx(x.n, x.c, x.h, x.w);

    for (int in = 0; in < x.n; ++in) {
        // gate gradient: sum over space of gout * x
        std::vector<real> ggate(x.c, 0.0);
        for (int ci = 0; ci < x.c; ++ci) {
            const real* g = gout.plane(in, ci);
            const real* src = x.plane(in, ci);
            real acc = 0.0;
            for (int i = 0; i < hw; ++i) acc += g[i] * src[i];
            ggate[ci] = acc;
            // direct path: x * s
            const real s = cache.gate[static_cast<std::size_t>(in) * x.c + ci];
            real* dst = gx.plane(in, ci);
            for (int i = 0; i < hw; ++i) dst[i] = g[i] * s;
        }
        std::vector<real> ggate_pre(x.c);
        for (int ci = 0; ci < x.c; ++ci) {
            const real s = cache.gate[static_cast<std::size_t>(in) * x.c + ci];
            ggate_pre[ci] = ggate[ci] * s * (1.0 - s);
            p.b2.grad.data[ci] += ggate_pre[ci];
        }
        std::vector<real> ghidden(mid, 0.0);
        for (int ci = 0; ci < x.c; ++ci)
            for (int m = 0; m < mid; ++m) {
                p.w2.grad.at(ci, m, 0, 0) +=
                    ggate_pre[ci] * cache.hidden[static_cast<std::size_t>(in) * mid + m];
                ghidden[m] += ggate_pre[ci] * p.w2.value.at(ci, m, 0, 0);
            }
        std::vector<real> gz(x.c, 0.0);
        for (int m = 0; m < mid; ++m) {
            const real pre = cache.hidden_pre[static_cast<std::size_t>(in) * mid + m];
            const real gh = ghidden[m] * (pre >= 0.0 ? 1.0 : p.leaky_slope);
            p.b1.grad.data[m] += gh;
            for (int ci = 0; ci < x.c; ++ci) {
                p.w1.grad.at(m, ci, 0, 0) +=
                    gh * cache.pooled[static_cast<std::size_t>(in) * x.c + ci];
                gz[ci] += gh * p.w1.value.at(m, ci, 0, 0);
            }
        }
        // pooled path spreads evenly over space
        for (int ci = 0; ci < x.c; ++ci) {
            const real add = gz[ci] / hw;
            real* dst = gx.plane(in, ci);
            for (int i = 0; i < hw; ++i) dst[i] += add;
        }
    }
    return gx;
}

// --------------------------------------------------------------- SE attention

SEAttentionParams::SEAttentionParams(int channels_, int se_reduction) {
    channels = channels_;
    se = SEBlockParams(channels_, se_reduction);
    qkv_w = ParamTensor(Tensor4(3 * channels_, channels_, 1, 1));
    qkv_b = ParamTensor(Tensor4(1, 3 * channels_, 1, 1));
    out_w = ParamTensor(Tensor4(channels_, channels_, 1, 1));
    out_b = ParamTensor(Tensor4(1, channels_, 1, 1));
}

void SEAttentionParams::init(ParamInit& init) {
    se.init(init);
    init.he_normal(qkv_w.value, channels);
    init.constant(qkv_b.value, 0.0);
    init.he_normal(out_w.value, channels);
    init.constant(out_b.value, 0.0);
}

Tensor4 se_attention_forward(const Tensor4& x, const SEAttentionParams& p,
                             SEAttentionCache* cache) {
    if (x.c != p.channels)
        throw std::invalid_argument("se_attention: channel mismatch, input " + x.shape_str());
    const int S = x.h * x.w;
    if (S > 4096)
        throw std::invalid_argument(
            "se_attention: spatial footprint h*w must be <= 4096, got " + std::to_string(S));
    const int C = x.c;
    const real scale = 1.0 / std::sqrt(static_cast<real>(C));

    const Tensor4 qkv = conv2d_forward(x, p.qkv_w.value, p.qkv_b.value, {});

    Tensor4 mixed(x.n, C, x.h, x.w);
    std::vector<real> attn;
    if (cache != nullptr) attn.assign(static_cast<std::size_t>(x.n) * S * S, 0.0);

    std::vector<real> row(S);
    for (int in = 0; in < x.n; ++in) {
        // channel-major views: Q[c][s]
        auto q_at = [&](int c, int s) { return qkv.plane(in, c)[s]; };
        auto k_at = [&](int c, int s) { return qkv.plane(in, C + c)[s]; };
        auto v_at = [&](int c, int s) { return qkv.plane(in, 2 * C + c)[s]; };
        for (int qpos = 0; qpos < S; ++qpos) {
            real maxv = -1e300;
            for (int kpos = 0; kpos < S; ++kpos) {
                real dot = 0.0;
                for (int c = 0; c < C; ++c) dot += q_at(c, qpos) * k_at(c, kpos);
                row[kpos] = dot * scale;
                maxv = std::max(maxv, row[kpos]);
            }
            real denom = 0.0;
            for (int kpos = 0; kpos < S; ++kpos) {
                row[kpos] = std::exp(row[kpos] - maxv);
                denom += row[kpos];
            }
            const real inv = 1.0 / denom;
            for (int kpos = 0; kpos < S; ++kpos) row[kpos] *= inv;
            if (cache != nullptr)
                std::copy(row.begin(), row.end(),
                          attn.begin() + (static_cast<std::size_t>(in) * S + qpos) * S);
            for (int c = 0; c < C; ++c) {
                real acc = 0.0;
                for (int kpos = 0; kpos < S; ++kpos) acc += row[kpos] * v_at(c, kpos);
                mixed.plane(in, c)[qpos] = acc;
            }
        }
    }

    const Tensor4 attn_out = conv2d_forward(mixed, p.out_w.value, p.out_b.value, {});
    const Tensor4 se_out = se_block_forward(x, p.se, cache != nullptr ? &cache->se : nullptr);

    Tensor4 y(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < y.numel(); ++i)
        y.data[i] = x.data[i] + se_out.data[i] + attn_out.data[i];

    if (cache != nullptr) {
        cache->x = x;
        cache->qkv = qkv;
        cache->attn = std::move(attn);
        cache->mixed = std::move(mixed);
    }
    return y;
}

Tensor4 se_attention_backward(const SEAttentionCache& cache, SEAttentionParams& p,
                              const Tensor4& gout) {
    const Tensor4& x = cache.x;
    require_same_shape(x, gout, "se_attention_backward");
    const int C = x.c;
    const int S = x.h * x.w;
    const real scale = 1.0 / std::sqrt(static_cast<real>(C));

    // through the output 1x1 conv
    Tensor4 g_mixed, g_out_w, g_out_b;
    conv2d_backward(cache.mixed, p.out_w.value, {}, gout, &g_mixed, &g_out_w, &g_out_b);
    for (std::size_t i = 0; i < g_out_w.numel(); ++i) p.out_w.grad.data[i] += g_out_w.data[i];
    for (std::size_t i = 0; i < g_out_b.numel(); ++i) p.out_b.grad.data[i] += g_out_b.data[i];

    Tensor4 g_qkv(x.n, 3 * C, x.h, x.w);
    std::vector<real> gA(S), gS_row(S);
    for (int in = 0; in < x.n; ++in) {
        auto q_at = [&](int c, int s) { return cache.qkv.plane(in, c)[s]; };
        auto k_at = [&](int c, int s) { return cache.qkv.plane(in, C + c)[s]; };
        auto v_at = [&](int c, int s) { return cache.qkv.plane(in, 2 * C + c)[s]; };
        for (int qpos = 0; qpos < S; ++qpos) {
            const real* a_row = cache.attn.data() + (static_cast<std::size_t>(in) * S + qpos) * S;
            // dL/dA and V gradient
            for (int kpos = 0; kpos < S; ++kpos) {
                real acc = 0.0;
                for (int c = 0; c < C; ++c) acc += g_mixed.plane(in, c)[qpos] * v_at(c, kpos);
                gA[kpos] = acc;
            }
            for (int c = 0; c < C; ++c) {
                const real gm = g_mixed.plane(in, c)[qpos];
                real* gv_plane = g_qkv.plane(in, 2 * C + c);
                for (int kpos = 0; kpos < S; ++kpos) gv_plane[kpos] += a_row[kpos] * gm;
            }
            // softmax backward per row
            real dot = 0.0;
            for (int kpos = 0; kpos < S; ++kpos) dot += a_row[kpos] * gA[kpos];
            for (int kpos = 0; kpos < S; ++kpos) gS_row[kpos] = a_row[kpos] * (gA[kpos] - dot);
            // score = scale * Q.K
            for (int c = 0; c < C; ++c) {
                real gq = 0.0;
                real* gk_plane = g_qkv.plane(in, C + c);
                const real qv = q_at(c, qpos);
                for (int kpos = 0; kpos < S; ++kpos) {
                    gq += gS_row[kpos] * k_at(c, kpos);
                    gk_plane[kpos] += gS_row[kpos] * qv * scale;
                }
                g_qkv.plane(in, c)[qpos] += gq * scale;
            }
        }
    }

    Tensor4 gx_qkv, g_qkv_w, g_qkv_b;
    conv2d_backward(x, p.qkv_w.value, {}, g_qkv, &gx_qkv, &g_qkv_w, &g_qkv_b);
    for (std::size_t i = 0; i < g_qkv_w.numel(); ++i) p.qkv_w.grad.data[i] += g_qkv_w.data[i];
    for (std::size_t i = 0; i < g_qkv_b.numel(); ++i) p.qkv_b.grad.data[i] += g_qkv_b.data[i];

    const Tensor4 gx_se = se_block_backward(cache.se, p.se, gout);

    Tensor4 gx(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < gx.numel(); ++i)
        gx.data[i] = gout.data[i] + gx_se.data[i] + gx_qkv.data[i];
    return gx;
}

// --------------------------------------------------------------- Charbonnier

real charbonnier_loss(const Tensor4& pred, const Tensor4& target, const CharbonnierCfg& cfg,
                      Tensor4* grad_pred) {
    require_same_shape(pred, target, "charbonnier_loss");
    if (!(cfg.eps > 0.0)) throw std::invalid_argument("charbonnier_loss: eps must be positive");
    const std::size_t m = pred.numel();
    const real e2 = cfg.eps * cfg.eps;
    if (grad_pred != nullptr) *grad_pred = Tensor4(pred.n, pred.c, pred.h, pred.w);
    real acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const real d = pred.data[i] - target.data[i];
        const real root = std::sqrt(d * d + e2);
        acc += root;
        if (grad_pred != nullptr) grad_pred->data[i] = d / (static_cast<real>(m) * root);
    }
    return acc / static_cast<real>(m);
}

// ------------------------------------------------------------- gradient check

GradCheckReport grad_check(std::span<real> params, const std::function<real()>& loss,
                           std::span<const real> analytic, real fd_step, real tolerance) {
    if (params.size() != analytic.size())
        throw std::invalid_argument("grad_check: analytic gradient size mismatch");
    GradCheckReport rep;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const real saved = params[i];
        params[i] = saved + fd_step;
        const real up = loss();
        params[i] = saved - fd_step;
        const real down = loss();
        params[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i]))
            throw std::runtime_error("grad_check: non-finite values encountered at index " +
                                     std::to_string(i));
        const real numeric = (up - down) / (2.0 * fd_step);
        const real denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        const real rel = std::abs(analytic[i] - numeric) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.failing_index = static_cast<std::ptrdiff_t>(i);
        }
    }
    rep.pass = rep.max_rel_err <= tolerance;
    return rep;
}

// ----------------------------------------------------------- initialization

void ParamInit::he_normal(Tensor4& t, int fan_in) {
    Rng rng(hash_combine(seed_, counter_++));
    const real stddev = std::sqrt(2.0 / static_cast<real>(std::max(1, fan_in)));
    for (real& v : t.data) v = static_cast<real>(static_cast<float>(rng.normal(0.0, stddev)));
}

void ParamInit::constant(Tensor4& t, real v) {
    const real q = static_cast<real>(static_cast<float>(v));
    t.fill(q);
    ++counter_;
}

void ParamInit::uniform(Tensor4& t, real lo, real hi) {
    Rng rng(hash_combine(seed_, counter_++));
    for (real& v : t.data) v = static_cast<real>(static_cast<float>(rng.uniform(lo, hi)));
}

std::uint64_t ParamInit::fork() { return hash_combine(seed_, counter_++); }

} // namespace fpx::diff
