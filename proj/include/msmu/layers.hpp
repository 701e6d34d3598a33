#pragma once

// Reusable network layers: plain and deformable convolution wrappers,
// channel layer norm, residual blocks, the attention gates, and the dilated
// reparameterized block (DRB) with its merge-to-dense-kernel equivalence.

#include "msmu/ssm.hpp"
#include "msmu/tensor.hpp"

namespace msmu {

using ParamList = std::vector<Tensor>;

namespace detail {

inline void reg_param(ParamList& out, Tensor& t, const std::string& name) {
    t.set_name(name);
    out.push_back(t);
}

}  // namespace detail

// -------------------- primitive layers --------------------

struct Conv2d {
    Tensor w, b;
    int stride = 1, padding = 0, dilation = 1;

    Conv2d() = default;
    Conv2d(int cin, int cout, int k, int stride_, int padding_, Rng& rng, int dilation_ = 1,
           bool bias = true)
        : stride(stride_), padding(padding_), dilation(dilation_) {
        w = he_normal({cout, cin, k, k}, static_cast<long long>(cin) * k * k, rng);
        if (bias) b = Tensor::zeros({cout}, true);
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, padding, dilation); }

    void collect(ParamList& out, const std::string& prefix) {
        detail::reg_param(out, w, prefix + ".w");
        if (b.defined()) detail::reg_param(out, b, prefix + ".b");
    }
};

struct ConvTranspose2d {
    Tensor w, b;
    int stride = 2;

    ConvTranspose2d() = default;
    ConvTranspose2d(int cin, int cout, int k, int stride_, Rng& rng) : stride(stride_) {
        w = he_normal({cin, cout, k, k}, static_cast<long long>(cin) * k * k, rng);
        b = Tensor::zeros({cout}, true);
    }

    Tensor forward(const Tensor& x) const { return conv_transpose2d(x, w, b, stride); }

    void collect(ParamList& out, const std::string& prefix) {
        detail::reg_param(out, w, prefix + ".w");
        detail::reg_param(out, b, prefix + ".b");
    }
};

// Layer norm over the channel axis of [B,C,H,W] (per-pixel token norm).
struct LayerNormChannels {
    Tensor gain, shift;

    LayerNormChannels() = default;
    explicit LayerNormChannels(int channels) {
        gain = Tensor::full({channels}, 1.0, true);
        shift = Tensor::zeros({channels}, true);
    }

    Tensor forward(const Tensor& x) const {
        SequenceView v = image_to_sequence(x);
        v.tokens = layer_norm(v.tokens, gain, shift);
        return sequence_to_image(v);
    }

    void collect(ParamList& out, const std::string& prefix) {
        detail::reg_param(out, gain, prefix + ".gain");
        detail::reg_param(out, shift, prefix + ".shift");
    }
};

// 3x3 deformable convolution; the offset field comes from a dedicated
// zero-initialized 3x3 conv over the input, so a fresh layer is exactly a
// plain convolution.
struct DeformConv2d {
    Tensor w, b;
    Conv2d offset_conv;

    DeformConv2d() = default;
    DeformConv2d(int cin, int cout, Rng& rng) {
        w = he_normal({cout, cin, 3, 3}, static_cast<long long>(cin) * 9, rng);
        b = Tensor::zeros({cout}, true);
        offset_conv = Conv2d(cin, 18, 3, 1, 1, rng);
        for (auto& v : offset_conv.w.data()) v = 0.0;
    }

    Tensor forward(const Tensor& x) const {
        return deformable_conv2d(x, w, offset_conv.forward(x), b);
    }

    void collect(ParamList& out, const std::string& prefix) {
        detail::reg_param(out, w, prefix + ".w");
        detail::reg_param(out, b, prefix + ".b");
        offset_conv.collect(out, prefix + ".offset");
    }
};

// conv3x3 -> relu -> conv3x3 (+ 1x1 projection skip when widths differ) -> relu
struct ResBlock {
    Conv2d conv1, conv2;
    Conv2d proj;
    bool has_proj = false;

    ResBlock() = default;
    ResBlock(int cin, int cout, Rng& rng) {
        conv1 = Conv2d(cin, cout, 3, 1, 1, rng);
        conv2 = Conv2d(cout, cout, 3, 1, 1, rng);
        if (cin != cout) {
            proj = Conv2d(cin, cout, 1, 1, 0, rng);
            has_proj = true;
        }
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = conv2.forward(relu(conv1.forward(x)));
        Tensor skip = has_proj ? proj.forward(x) : x;
        return relu(add(h, skip));
    }

    void collect(ParamList& out, const std::string& prefix) {
        conv1.collect(out, prefix + ".conv1");
        conv2.collect(out, prefix + ".conv2");
        if (has_proj) proj.collect(out, prefix + ".proj");
    }
};

// -------------------- attention --------------------

// A = sigmoid(conv1x1(relu(conv1x1(x) + x))); out = A (*) x. Width preserved.
struct AttentionGate {
    Conv2d conv1, conv2;

    AttentionGate() = default;
    AttentionGate(int channels, Rng& rng) {
        conv1 = Conv2d(channels, channels, 1, 1, 0, rng);
        conv2 = Conv2d(channels, channels, 1, 1, 0, rng);
    }

    Tensor gate(const Tensor& x) const {
        return sigmoid(conv2.forward(relu(add(conv1.forward(x), x))));
    }

    Tensor forward(const Tensor& x) const { return mul(gate(x), x); }

    void collect(ParamList& out, const std::string& prefix) {
        conv1.collect(out, prefix + ".conv1");
        conv2.collect(out, prefix + ".conv2");
    }
};

// Channel gate (global average pool -> bottleneck MLP -> sigmoid) followed by
// spatial gate (channel mean/max stack -> 7x7 conv -> sigmoid).
struct DualAttention {
    Conv2d fc1, fc2;
    Conv2d spatial;

    DualAttention() = default;
    DualAttention(int channels, Rng& rng) {
        const int hidden = std::max(1, channels / 4);
        fc1 = Conv2d(channels, hidden, 1, 1, 0, rng);
        fc2 = Conv2d(hidden, channels, 1, 1, 0, rng);
        spatial = Conv2d(2, 1, 7, 1, 3, rng);
    }

    Tensor forward(const Tensor& x) const {
        Tensor cg = sigmoid(fc2.forward(relu(fc1.forward(global_avg_pool(x)))));
        Tensor h = mul(x, cg);
        Tensor sg = sigmoid(spatial.forward(concat_channels({channel_mean(h), channel_max(h)})));
        return mul(h, sg);
    }

    void collect(ParamList& out, const std::string& prefix) {
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
        spatial.collect(out, prefix + ".spatial");
    }
};

// -------------------- dilated reparameterized block --------------------

// One parallel branch: dilated conv (no bias) + per-channel affine.
struct DrbBranch {
    Tensor w;       // [cout, cin, ks, ks]
    Tensor scale;   // [cout]
    Tensor bias;    // [cout]
    int ks = 0, dilation = 1;
};

// A dense large_k x large_k conv plus smaller dilated branches whose
// equivalent receptive field fits inside large_k; branch outputs are
// affine-normalized per channel and summed. merge() folds everything into one
// dense kernel by zero-interleaving the dilated weights.
struct Drb {
    int cin = 0, cout = 0, large_k = 0;
    std::vector<DrbBranch> branches;

    Drb() = default;
    Drb(int cin_, int cout_, int large_k_, Rng& rng) : cin(cin_), cout(cout_), large_k(large_k_) {
        check(large_k % 2 == 1, "drb: even kernel sizes are rejected, got ", large_k);
        check(large_k == 3 || large_k == 5 || large_k == 7 || large_k == 9,
              "drb: large kernel must be one of {3,5,7,9}, got ", large_k);
        std::vector<std::pair<int, int>> plan;  // (ks, dilation)
        switch (large_k) {
            case 9: plan = {{9, 1}, {5, 2}, {3, 4}}; break;
            case 7: plan = {{7, 1}, {3, 3}, {3, 2}}; break;
            case 5: plan = {{5, 1}, {3, 2}}; break;
            default: plan = {{3, 1}}; break;
        }
        for (auto [ks, dil] : plan) {
            DrbBranch br;
            br.ks = ks;
            br.dilation = dil;
            br.w = he_normal({cout, cin, ks, ks},
                             static_cast<long long>(cin) * large_k * large_k, rng);
            br.scale = Tensor::full({cout}, 1.0, true);
            br.bias = Tensor::zeros({cout}, true);
            branches.push_back(std::move(br));
        }
    }

    Tensor forward(const Tensor& x) const {
        Tensor acc;
        for (const DrbBranch& br : branches) {
            const int pad = br.dilation * (br.ks - 1) / 2;
            Tensor h = conv2d(x, br.w, {}, 1, pad, br.dilation);
            Tensor sc = reshape(br.scale, {1, cout, 1, 1});
            Tensor bi = reshape(br.bias, {1, cout, 1, 1});
            h = add(mul(h, sc), bi);
            acc = acc.defined() ? add(acc, h) : h;
        }
        return acc;
    }

    // Equivalent single dense kernel + bias: scale folds into the weights,
    // dilated taps zero-interleave into the large kernel.
    std::pair<Tensor, Tensor> merge() const {
        Tensor wm = Tensor::zeros({cout, cin, large_k, large_k});
        Tensor bm = Tensor::zeros({cout});
        const int center = (large_k - 1) / 2;
        for (const DrbBranch& br : branches) {
            for (int co = 0; co < cout; ++co) {
                const double s = br.scale.data()[static_cast<size_t>(co)];
                bm.data()[static_cast<size_t>(co)] += br.bias.data()[static_cast<size_t>(co)];
                for (int ci = 0; ci < cin; ++ci)
                    for (int u = 0; u < br.ks; ++u)
                        for (int v = 0; v < br.ks; ++v) {
                            const int uu = center + (u - (br.ks - 1) / 2) * br.dilation;
                            const int vv = center + (v - (br.ks - 1) / 2) * br.dilation;
                            wm.data()[((static_cast<long long>(co) * cin + ci) * large_k + uu) *
                                          large_k +
                                      vv] +=
                                s * br.w.data()[((static_cast<long long>(co) * cin + ci) * br.ks + u) *
                                                    br.ks +
                                                v];
                        }
            }
        }
        return {wm, bm};
    }

    Tensor forward_merged(const Tensor& x) const {
        auto [wm, bm] = merge();
        return conv2d(x, wm, bm, 1, (large_k - 1) / 2, 1);
    }

    void collect(ParamList& out, const std::string& prefix) {
        for (size_t i = 0; i < branches.size(); ++i) {
            const std::string base = prefix + ".branch" + std::to_string(i);
            detail::reg_param(out, branches[i].w, base + ".w");
            detail::reg_param(out, branches[i].scale, base + ".scale");
            detail::reg_param(out, branches[i].bias, base + ".bias");
        }
    }
};

// Three sequential DRB layers with descending kernels (9, 7, 5).
struct Msdrb {
    Drb drb9, drb7, drb5;

    Msdrb() = default;
    Msdrb(int channels, Rng& rng)
        : drb9(channels, channels, 9, rng),
          drb7(channels, channels, 7, rng),
          drb5(channels, channels, 5, rng) {}

    Tensor forward(const Tensor& x) const {
        return drb5.forward(relu(drb7.forward(relu(drb9.forward(x)))));
    }

    void collect(ParamList& out, const std::string& prefix) {
        drb9.collect(out, prefix + ".drb9");
        drb7.collect(out, prefix + ".drb7");
        drb5.collect(out, prefix + ".drb5");
    }
};

// Shared chain of three sequential 3x3 deformable convolutions; the taps
// after conv 1, 2, 3 carry effective receptive fields 3, 5, 7.
struct DeformChain {
    DeformConv2d conv1, conv2, conv3;

    DeformChain() = default;
    DeformChain(int channels, Rng& rng)
        : conv1(channels, channels, rng), conv2(channels, channels, rng),
          conv3(channels, channels, rng) {}

    std::array<Tensor, 3> taps(const Tensor& x) const {
        Tensor t1 = relu(conv1.forward(x));
        Tensor t2 = relu(conv2.forward(t1));
        Tensor t3 = relu(conv3.forward(t2));
        return {t1, t2, t3};
    }

    void collect(ParamList& out, const std::string& prefix) {
        conv1.collect(out, prefix + ".conv1");
        conv2.collect(out, prefix + ".conv2");
        conv3.collect(out, prefix + ".conv3");
    }
};

}  // namespace msmu
