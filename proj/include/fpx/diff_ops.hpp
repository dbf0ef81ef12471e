#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fpx/tensor.hpp"

namespace fpx::diff {

// Learnable tensor plus its gradient accumulator.
struct ParamTensor {
    Tensor4 value;
    Tensor4 grad;

    ParamTensor() = default;
    explicit ParamTensor(Tensor4 v) : value(std::move(v)), grad(value.n, value.c, value.h, value.w) {}
    void zero_grad() { grad.fill(0.0); }
};

// ------------------------------------------------------------------- conv2d

struct Conv2dSpec {
    int stride = 1;
    int dilation = 1;
    int pad = 0;
};

// Output spatial size for a kernel k under the given spec.
int conv_out_dim(int in, int k, const Conv2dSpec& spec);

// Cross-correlation (no kernel flip). w shape (co, ci, kh, kw), odd kernels;
// bias shape (1, co, 1, 1).
Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w, const Tensor4& b,
                       const Conv2dSpec& spec = {});
void conv2d_backward(const Tensor4& x, const Tensor4& w, const Conv2dSpec& spec,
                     const Tensor4& gout, Tensor4* gx, Tensor4* gw, Tensor4* gb);

// Transpose convolution, w shape (co, ci, kh, kw); out = (in-1)*stride - 2*pad + k.
Tensor4 conv_transpose2d_forward(const Tensor4& x, const Tensor4& w, const Tensor4& b, int stride,
                                 int pad);
void conv_transpose2d_backward(const Tensor4& x, const Tensor4& w, int stride, int pad,
                               const Tensor4& gout, Tensor4* gx, Tensor4* gw, Tensor4* gb);

// -------------------------------------------------------------- weight norm

// w = g * v / ||v||_2, the norm taken over each output channel's fan-in.
// g has one entry per output channel (shape (1,co,1,1)).
Tensor4 weight_norm(const Tensor4& v, const Tensor4& g);
void weight_norm_backward(const Tensor4& v, const Tensor4& g, const Tensor4& gw, Tensor4* gv,
                          Tensor4* gg);

// ------------------------------------------------------------ instance norm

struct InstanceNormCache {
    Tensor4 x_hat;
    std::vector<real> inv_std; // per (n,c)
};

// Per (sample, channel) standardization with biased variance, then gamma/beta
// (each shaped (1,c,1,1)). Degenerates gracefully to beta on constant input.
Tensor4 instance_norm_forward(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta,
                              real eps, InstanceNormCache* cache = nullptr);
Tensor4 instance_norm_backward(const InstanceNormCache& cache, const Tensor4& gamma,
                               const Tensor4& gout, Tensor4* ggamma, Tensor4* gbeta);

// ----------------------------------------------------------------- pointwise

Tensor4 leaky_relu_forward(const Tensor4& x, real slope);
Tensor4 leaky_relu_backward(const Tensor4& x, const Tensor4& gout, real slope);

// Training mode zeroes with probability p and rescales survivors by 1/(1-p);
// the mask is a pure function of (seed, element index), so results do not
// depend on worker count. Eval mode is the identity, bit-exact.
Tensor4 dropout_forward(const Tensor4& x, real p, std::uint64_t seed, bool training);
Tensor4 dropout_backward(const Tensor4& gout, real p, std::uint64_t seed, bool training);

// ------------------------------------------------------------------ SE block

struct SEBlockParams {
    int channels = 0;
    int reduction = 1;
    ParamTensor w1, b1; // C -> C/r
    ParamTensor w2, b2; // C/r -> C
    real leaky_slope = 0.01;

    SEBlockParams() = default;
    SEBlockParams(int channels, int reduction);
    void init(class ParamInit& init);
};

struct SEBlockCache {
    Tensor4 x;
    std::vector<real> pooled, hidden_pre, hidden, gate_pre, gate; // per (n, c) rows
};

// y = x * sigmoid(W2 leaky(W1 avgpool(x) + b1) + b2), gate broadcast over space.
Tensor4 se_block_forward(const Tensor4& x, const SEBlockParams& p, SEBlockCache* cache = nullptr);
Tensor4 se_block_backward(const SEBlockCache& cache, SEBlockParams& p, const Tensor4& gout);

// -------------------------------------------------------------- SE attention

struct SEAttentionParams {
    int channels = 0;
    SEBlockParams se;
    ParamTensor qkv_w, qkv_b; // 1x1 conv, C -> 3C
    ParamTensor out_w, out_b; // 1x1 conv, C -> C

    SEAttentionParams() = default;
    SEAttentionParams(int channels, int se_reduction);
    void init(class ParamInit& init);
};

struct SEAttentionCache {
    Tensor4 x;
    Tensor4 qkv;       // (n, 3C, h, w)
    std::vector<real> attn; // per sample: S x S softmax rows
    Tensor4 mixed;     // softmax(QK)V, before out conv
    SEBlockCache se;
};

// y = x + se_block(x) + out_conv(softmax(Q^T K / sqrt(C)) V). Softmax is over
// key positions for each query position. Enforces h*w <= 4096.
Tensor4 se_attention_forward(const Tensor4& x, const SEAttentionParams& p,
                             SEAttentionCache* cache = nullptr);
Tensor4 se_attention_backward(const SEAttentionCache& cache, SEAttentionParams& p,
                              const Tensor4& gout);

// -------------------------------------------------------------- Charbonnier

struct CharbonnierCfg {
    real eps = 1e-3;
};

// L = mean sqrt((pred-target)^2 + eps^2); optional gradient wrt pred.
real charbonnier_loss(const Tensor4& pred, const Tensor4& target, const CharbonnierCfg& cfg,
                      Tensor4* grad_pred = nullptr);

// ------------------------------------------------------------ gradient check

struct GradCheckReport {
    real max_rel_err = 0.0;
    std::ptrdiff_t failing_index = -1; // worst coordinate
    bool pass = false;
};

// Central finite differences against an analytic gradient. loss() must be a
// pure function of the parameter span, which is perturbed in place and
// restored. rel err = |a-n| / max(|a|,|n|,1e-8).
GradCheckReport grad_check(std::span<real> params, const std::function<real()>& loss,
                           std::span<const real> analytic, real fd_step, real tolerance);

// ----------------------------------------------------------- initialization

// Draws are quantized to float32 so parameters survive the float32 checkpoint
// format bit-exactly.
class ParamInit {
  public:
    explicit ParamInit(std::uint64_t seed) : seed_(seed) {}
    void he_normal(Tensor4& t, int fan_in);
    void constant(Tensor4& t, real v);
    void uniform(Tensor4& t, real lo, real hi);
    std::uint64_t fork(); // independent stream for the next consumer

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

} // namespace fpx::diff
