#pragma once

#include "fpx/diff_ops.hpp"
#include "fpx/gabor.hpp"
#include "fpx/tensor.hpp"

namespace fpx::diff {

// Gabor kernel and its partial derivatives wrt the learnable parameters.
struct GaborKernelDerivs {
    std::vector<real> k, d_theta, d_freq, d_log_sx, d_log_sy;
};
GaborKernelDerivs gabor_kernel_with_derivs(real theta, real freq, real sigma_x, real sigma_y,
                                           int ksize);

struct GaborLayerCache {
    Tensor4 x_stretched;
    std::vector<real> stretch_scale; // per sample; 0 marks a degenerate (constant) sample
    Tensor4 bank_response;           // correlation with the current bank
    Tensor4 attended;                // after SE attention
    SEAttentionCache attn;
    bool valid = false;
};

// Bank of Gabor kernels whose (theta, frequency, log sigmas) are trained, a
// per-sample contrast stretch on the way in, SE attention over the bank
// responses, and learned mixing weights collapsing back to one channel.
class LearnableGaborLayer {
  public:
    LearnableGaborLayer() = default;
    LearnableGaborLayer(int n_filters, int ksize, int attn_se_reduction);

    void init(ParamInit& init);

    int filters() const { return n_filters_; }
    int ksize() const { return ksize_; }

    // Current kernels as a fixed bank (for interop with the filter engine).
    gabor::GaborBank bank() const;

    // x shape (n,1,h,w). Kernels are rebuilt from the current parameters on
    // every call.
    Tensor4 forward(const Tensor4& x, GaborLayerCache* cache = nullptr) const;

    // Accumulates parameter gradients and returns the input gradient.
    Tensor4 backward(GaborLayerCache& cache, const Tensor4& gout);

    // Keeps frequency in (0, 0.5] and theta wrapped; call after each update.
    void project_params();

    ParamTensor theta, frequency, log_sigma_x, log_sigma_y; // each (1,1,1,J)
    ParamTensor mix;                                        // (1,1,1,J)
    SEAttentionParams attn;

  private:
    int n_filters_ = 0;
    int ksize_ = 0;
};

} // namespace fpx::diff
