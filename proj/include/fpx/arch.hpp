#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fpx/diff_ops.hpp"
#include "fpx/gabor_layer.hpp"
#include "fpx/tensor.hpp"

namespace fpx::arch {

using diff::ParamTensor;

struct LayerSpec {
    std::string id;   // R1, E1..E5, CF, M, D1..D4, F, G
    std::string kind;
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    int dilation = 1;
    std::optional<std::string> skip_source;
};

// Channel table and knobs. Defaults reproduce the published architecture;
// the decoder input channels are stated explicitly so the builder can prove
// the concatenation arithmetic instead of deriving it.
struct NetworkConfig {
    std::array<int, 5> encoder_out{32, 64, 128, 256, 512};
    int r1_out = 2048;
    std::vector<int> r1_stages{32, 64, 128}; // pyramid widths before the final projection
    int cf_out = 2560;                       // encoder_out[4] + r1_out
    int m_out = 1024;
    std::array<int, 4> decoder_in{1024, 768, 384, 192};
    std::array<int, 4> decoder_out{512, 256, 128, 64};
    std::map<std::string, std::string> skips{{"D2", "E4"}, {"D3", "E3"}, {"D4", "E2"}};

    int se_reduction = 16;
    real dropout_p = 0.1;
    real leaky_slope = 0.01;
    real instance_norm_eps = 1e-5;

    int gabor_filters = 8;
    int gabor_ksize = 11;
    int gabor_se_reduction = 4;

    std::uint64_t seed = 0x66705821;
};

struct NamedParam {
    std::string layer_id;
    std::string name;
    ParamTensor* param = nullptr;
};

// ------------------------------------------------------------------- blocks

// Weight-normalized conv (dilation 2) + instance norm + leaky ReLU + dropout
// + squeeze-excitation.
struct ConvBlock {
    diff::Conv2dSpec spec;
    ParamTensor v, g, b;
    ParamTensor in_gamma, in_beta;
    diff::SEBlockParams se;
    real leaky_slope = 0.01, dropout_p = 0.1, in_eps = 1e-5;

    Tensor4 forward(const Tensor4& x, bool training, std::uint64_t drop_seed);
    Tensor4 backward(const Tensor4& gout);
    void collect(const std::string& id, std::vector<NamedParam>& out);

    struct Cache {
        Tensor4 x, w, normed;
        diff::InstanceNormCache in;
        diff::SEBlockCache se;
        std::uint64_t drop_seed = 0;
        bool training = false;
    } cache;
};

// Squeeze-excitation on the (possibly concatenated) input + weight-normalized
// transpose conv (x2 upsampling) + instance norm + leaky ReLU + dropout.
struct UpConvBlock {
    int stride = 2, pad = 1;
    diff::SEBlockParams se;
    ParamTensor v, g, b;
    ParamTensor in_gamma, in_beta;
    real leaky_slope = 0.01, dropout_p = 0.1, in_eps = 1e-5;

    Tensor4 forward(const Tensor4& x, bool training, std::uint64_t drop_seed);
    Tensor4 backward(const Tensor4& gout);
    void collect(const std::string& id, std::vector<NamedParam>& out);

    struct Cache {
        Tensor4 se_out, w, normed;
        diff::SEBlockCache se;
        diff::InstanceNormCache in;
        std::uint64_t drop_seed = 0;
        bool training = false;
    } cache;
};

// Two conv + instance norm + leaky stages with SE attention in between.
struct DenseBlock {
    ParamTensor w1, b1, in1_gamma, in1_beta;
    diff::SEAttentionParams attn;
    ParamTensor w2, b2, in2_gamma, in2_beta;
    real leaky_slope = 0.01, in_eps = 1e-5;

    Tensor4 forward(const Tensor4& x, bool training);
    Tensor4 backward(const Tensor4& gout);
    void collect(const std::string& id, std::vector<NamedParam>& out);

    struct Cache {
        Tensor4 x, n1, attn_in, attn_out, n2;
        diff::InstanceNormCache in1, in2;
        diff::SEAttentionCache attn;
    } cache;
};

// Pluggable feature extractor stand-in: a strided random-projection pyramid
// emitting the contracted channel count at the deepest encoder grid.
struct R1Stub {
    std::vector<ParamTensor> ws, bs; // one stride-2 conv per stage
    real leaky_slope = 0.01;

    Tensor4 forward(const Tensor4& x, int target_h, int target_w, bool training);
    Tensor4 backward(const Tensor4& gout);
    void collect(const std::string& id, std::vector<NamedParam>& out);

    struct Cache {
        std::vector<Tensor4> inputs, pre_act;
        bool resized = false;
        int pre_h = 0, pre_w = 0;
    } cache;
};

// Plain conv + sigmoid.
struct FinalConv {
    ParamTensor w, b;

    Tensor4 forward(const Tensor4& x, bool training);
    Tensor4 backward(const Tensor4& gout);
    void collect(const std::string& id, std::vector<NamedParam>& out);

    struct Cache {
        Tensor4 x, y;
    } cache;
};

// ------------------------------------------------------------------ network

struct ShapeReport {
    struct Entry {
        std::string id;
        int in_c = 0, out_c = 0;
        int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
    };
    std::vector<Entry> entries;

    const Entry& at(const std::string& id) const;
};

struct ParamCountReport {
    struct Entry {
        std::string id;
        long long params = 0;
    };
    std::vector<Entry> entries; // one per layer id, CF included with 0
    long long total = 0;        // all trainable parameters
    long long r1_stub = 0;      // counted separately
};

class Network {
  public:
    NetworkConfig cfg;
    std::vector<LayerSpec> specs;

    R1Stub r1;
    std::array<ConvBlock, 5> enc;
    DenseBlock m;
    std::array<UpConvBlock, 4> dec;
    FinalConv f;
    diff::LearnableGaborLayer g;

    // Eval mode (training=false) is the deterministic reference path:
    // dropout is the identity and no caches are retained.
    Tensor4 forward(const Tensor4& x, bool training = false, std::uint64_t dropout_seed = 0);

    // Requires a preceding forward(training=true).
    void backward(const Tensor4& loss_grad);

    std::vector<NamedParam> params();
    void zero_grad();
    void sgd_step(real lr); // plain gradient descent + parameter reprojection

  private:
    bool has_cache_ = false;
    struct GraphCache {
        Tensor4 enc_out[5];
        Tensor4 r1_out, cf, m_out;
        Tensor4 dec_out[4];
        Tensor4 f_out;
        diff::GaborLayerCache gabor;
    } gc_;
};

Network build_network(const NetworkConfig& cfg = {});

// Symbolic shape walk; throws on any mismatch (message includes the layer id)
// and on spatial sizes not divisible by 16.
ShapeReport validate_shapes(const Network& net, int n, int h, int w);

ParamCountReport count_params(Network& net);

// Checkpoint: magic, format version, embedded config, then layer records
// keyed by id with named float32 parameter tensors. See the README byte
// layout. Round-trips are bit-exact because parameters are float32-valued.
void save_checkpoint(Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

} // namespace fpx::arch
