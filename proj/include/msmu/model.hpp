#pragma once

// DB-MSMUNet assembly: Stem, four multi-scale Mamba encoder stages, the Edge
// Enhancement Path and Multi-layer Decoder dual decoders, auxiliary deep
// supervision heads, and the ablation switches that drop each piece.
//
// Stage grid (input H x W, base width C'):
//   level 0 (stem) : H/4,  C'
//   level 1        : H/4,  2C'   (stage 1 widens without downsampling)
//   level 2        : H/8,  4C'
//   level 3        : H/16, 8C'
//   level 4        : H/32, 16C'
// so a 224 input with C' = 32 yields (56,56,64) -> (28,28,128) ->
// (14,14,256) -> (7,7,512).

#include <array>
#include <map>
#include <optional>

#include "msmu/layers.hpp"

namespace msmu {

struct ModelConfig {
    int base_width = 16;  // C'
    int stem_factor = 4;
    int stages = 4;
    int mamba_layers = 2;  // blocks per branch
    int state_size = 8;    // N
    double ads_alpha = 0.6;
    double ads_beta = 0.3;
    double ads_gamma = 0.1;
    bool use_eep = true;
    bool use_mld = true;
    bool use_ads = true;
    bool multiscale_mamba = true;
    int num_classes = 1;

    void validate() const {
        check(stages == 4, "model config: reference architecture requires stages = 4, got ", stages);
        check(stem_factor == 4, "model config: stem factor must be 4, got ", stem_factor);
        check(base_width >= 2 && base_width % 2 == 0,
              "model config: branch width 2*C'/4 must be integral, so C' must be even; got C' = ",
              base_width);
        check(mamba_layers >= 1, "model config: mamba_layers must be >= 1");
        check(state_size >= 1, "model config: state_size must be >= 1");
        check(num_classes == 1 || num_classes == 2,
              "model config: num_classes must be 1 or 2, got ", num_classes);
        check(std::abs(ads_alpha + ads_beta + ads_gamma - 1.0) < 1e-9,
              "model config: ads weights must sum to 1, got ",
              ads_alpha + ads_beta + ads_gamma);
    }

    int width(int level) const { return (1 << level) * base_width; }
    // spatial divisor relative to the input image
    int divisor(int level) const { return level == 0 ? stem_factor : stem_factor * (1 << (level - 1)); }
    int min_multiple() const { return stem_factor * (1 << (stages - 2 + 1)); }  // 4 * 8 = 32
    // MLD working width per level, capped so deep levels stay affordable
    int mld_width(int level) const { return std::min(width(level), 8 * base_width); }
};

// Encoder feature with its mandated shape contract.
struct StageFeature {
    Tensor tensor;
    int level = 0;
};

inline StageFeature make_stage_feature(Tensor t, int level, const ModelConfig& cfg, int in_h,
                                       int in_w) {
    check(t.rank() == 4, "stage feature must be [B,C,H,W]");
    const int want_c = cfg.width(level);
    const int want_h = in_h / cfg.divisor(level);
    const int want_w = in_w / cfg.divisor(level);
    check(t.dim(1) == want_c && t.dim(2) == want_h && t.dim(3) == want_w,
          "stage feature level ", level, " violates the shape law: got ", shape_str(t.shape()),
          ", want channels ", want_c, " and spatial ", want_h, "x", want_w);
    return {std::move(t), level};
}

struct ModelOutputs {
    Tensor area_logits;             // [B, num_classes, H, W]
    Tensor edge_prob;               // [B, 1, H, W], defined iff EEP is on
    std::vector<Tensor> aux_area;   // shallowest to deepest, empty unless ADS
    std::vector<Tensor> aux_edge;   // shallowest to deepest, empty unless ADS and EEP
};

// Foreground probability from class logits: sigmoid for one class, softmax
// foreground for two (sigmoid of the logit difference).
inline Tensor foreground_prob(const Tensor& logits) {
    check(logits.rank() == 4, "foreground_prob: logits must be [B,C,H,W]");
    if (logits.dim(1) == 1) return sigmoid(logits);
    check(logits.dim(1) == 2, "foreground_prob: expected 1 or 2 classes, got ", logits.dim(1));
    return sigmoid(sub(slice_channels(logits, 1, 2), slice_channels(logits, 0, 1)));
}

// -------------------- stem --------------------

// 4x4 stride-4 patchify conv to C' channels, then channel layer norm.
struct Stem {
    Conv2d conv;
    LayerNormChannels norm;

    Stem() = default;
    Stem(const ModelConfig& cfg, Rng& rng)
        : conv(1, cfg.base_width, 4, 4, 0, rng), norm(cfg.base_width) {}

    Tensor forward(const Tensor& image) const { return norm.forward(conv.forward(image)); }

    void collect(ParamList& out, const std::string& prefix) {
        conv.collect(out, prefix + ".conv");
        norm.collect(out, prefix + ".norm");
    }
};

// -------------------- MSMM encoder stage --------------------

// Patch merge, then either the multi-scale arrangement (1x1 reduce -> shared
// deformable chain tapped at receptive fields 3/5/7 -> one two-layer Mamba
// branch per tap, plus a residual local branch, concatenated back to full
// width) or the single-path ablation (full-width Mamba only).
struct MsmmStage {
    int index = 0;  // consumes level index, emits level index+1
    bool multiscale = true;
    Conv2d entry;
    Conv2d reduce;
    DeformChain chain;
    std::array<std::vector<MambaBlock>, 3> branches;
    ResBlock local;
    std::vector<MambaBlock> single_path;

    MsmmStage() = default;
    MsmmStage(int index_, const ModelConfig& cfg, Rng& rng)
        : index(index_), multiscale(cfg.multiscale_mamba) {
        const int win = cfg.width(index);
        const int wout = cfg.width(index + 1);
        entry = index == 0 ? Conv2d(win, wout, 3, 1, 1, rng) : Conv2d(win, wout, 2, 2, 0, rng);
        if (multiscale) {
            const int cb = wout / 4;
            reduce = Conv2d(wout, cb, 1, 1, 0, rng);
            chain = DeformChain(cb, rng);
            MambaOptions mo;
            mo.width = cb;
            mo.state_size = cfg.state_size;
            for (auto& branch : branches)
                for (int l = 0; l < cfg.mamba_layers; ++l) branch.emplace_back(mo, rng);
            local = ResBlock(wout, cb, rng);
        } else {
            MambaOptions mo;
            mo.width = wout;
            mo.state_size = cfg.state_size;
            for (int l = 0; l < cfg.mamba_layers; ++l) single_path.emplace_back(mo, rng);
        }
    }

    static Tensor run_blocks(const std::vector<MambaBlock>& blocks, const Tensor& map) {
        SequenceView v = image_to_sequence(map);
        for (const MambaBlock& blk : blocks) v.tokens = blk.forward(v.tokens);
        return sequence_to_image(v);
    }

    Tensor forward(const Tensor& x) const {
        Tensor merged = entry.forward(x);
        if (!multiscale) return run_blocks(single_path, merged);
        Tensor reduced = reduce.forward(merged);
        auto taps = chain.taps(reduced);
        Tensor local_feat = local.forward(merged);
        std::vector<Tensor> parts = {local_feat};
        for (int j = 0; j < 3; ++j) parts.push_back(run_blocks(branches[static_cast<size_t>(j)], taps[static_cast<size_t>(j)]));
        return concat_channels(parts);
    }

    void collect(ParamList& out, const std::string& prefix) {
        entry.collect(out, prefix + ".entry");
        if (multiscale) {
            reduce.collect(out, prefix + ".reduce");
            chain.collect(out, prefix + ".deform");
            for (int j = 0; j < 3; ++j)
                for (size_t l = 0; l < branches[static_cast<size_t>(j)].size(); ++l)
                    branches[static_cast<size_t>(j)][l].collect_params(
                        out, prefix + ".branch" + std::to_string(j) + ".mamba" + std::to_string(l));
            local.collect(out, prefix + ".local");
        } else {
            for (size_t l = 0; l < single_path.size(); ++l)
                single_path[l].collect_params(out, prefix + ".mamba" + std::to_string(l));
        }
    }
};

// -------------------- Edge Enhancement Path --------------------

// Top-down refinement from level 4 to level 1 with attention-gated laterals;
// edge heads on the three shallowest refined maps.
struct Eep {
    bool with_ads = true;
    std::array<AttentionGate, 4> gates;           // levels 1..4
    ResBlock top;                                 // level 4
    std::array<Conv2d, 3> proj;                   // level i+1 -> i, i = 3,2,1
    std::array<ResBlock, 3> res_up, res_lat;      // levels 3,2,1
    Conv2d head1;                                 // level-1 edge head (always)
    Conv2d head2, head3;                          // aux heads (ADS only)

    Eep() = default;
    Eep(const ModelConfig& cfg, Rng& rng) : with_ads(cfg.use_ads) {
        for (int i = 1; i <= 4; ++i)
            gates[static_cast<size_t>(i - 1)] = AttentionGate(cfg.width(i), rng);
        top = ResBlock(cfg.width(4), cfg.width(4), rng);
        for (int i = 3; i >= 1; --i) {
            proj[static_cast<size_t>(i - 1)] = Conv2d(cfg.width(i + 1), cfg.width(i), 1, 1, 0, rng);
            res_up[static_cast<size_t>(i - 1)] = ResBlock(cfg.width(i), cfg.width(i), rng);
            res_lat[static_cast<size_t>(i - 1)] = ResBlock(cfg.width(i), cfg.width(i), rng);
        }
        head1 = Conv2d(cfg.width(1), 1, 1, 1, 0, rng);
        if (with_ads) {
            head2 = Conv2d(cfg.width(2), 1, 1, 1, 0, rng);
            head3 = Conv2d(cfg.width(3), 1, 1, 1, 0, rng);
        }
    }

    // returns (edge_prob at input resolution, aux edge maps shallowest-first)
    std::pair<Tensor, std::vector<Tensor>> forward(const std::vector<StageFeature>& feats) const {
        check(feats.size() == 4, "eep: expected features for levels 1..4, got ", feats.size());
        Tensor r = top.forward(gates[3].forward(feats[3].tensor));
        std::array<Tensor, 4> refined;
        refined[3] = r;
        for (int i = 3; i >= 1; --i) {
            Tensor up = upsample_bilinear(proj[static_cast<size_t>(i - 1)].forward(r), 2);
            Tensor lat = gates[static_cast<size_t>(i - 1)].forward(feats[static_cast<size_t>(i - 1)].tensor);
            r = add(res_up[static_cast<size_t>(i - 1)].forward(up),
                    res_lat[static_cast<size_t>(i - 1)].forward(lat));
            refined[static_cast<size_t>(i - 1)] = r;
        }
        Tensor logits1 = head1.forward(refined[0]);
        Tensor edge_prob = sigmoid(upsample_bilinear(logits1, 4));
        std::vector<Tensor> aux;
        if (with_ads) {
            aux.push_back(sigmoid(logits1));
            aux.push_back(sigmoid(head2.forward(refined[1])));
            aux.push_back(sigmoid(head3.forward(refined[2])));
        }
        return {edge_prob, aux};
    }

    void collect(ParamList& out, const std::string& prefix) {
        for (int i = 1; i <= 4; ++i)
            gates[static_cast<size_t>(i - 1)].collect(out, prefix + ".gate" + std::to_string(i));
        top.collect(out, prefix + ".top");
        for (int i = 1; i <= 3; ++i) {
            proj[static_cast<size_t>(i - 1)].collect(out, prefix + ".proj" + std::to_string(i));
            res_up[static_cast<size_t>(i - 1)].collect(out, prefix + ".res_up" + std::to_string(i));
            res_lat[static_cast<size_t>(i - 1)].collect(out, prefix + ".res_lat" + std::to_string(i));
        }
    }

    void collect_heads(ParamList& out, const std::string& prefix) {
        head1.collect(out, prefix + ".edge_head1");
        if (with_ads) {
            head2.collect(out, prefix + ".edge_head2");
            head3.collect(out, prefix + ".edge_head3");
        }
    }
};

// -------------------- Multi-layer Decoder --------------------

// Per level: dual attention -> 3x3 DRB -> MSDRB (DRB 9/7/5) -> 1x1 to the
// common width 2C' -> upsample to level-1 resolution; fused by concat + 1x1.
struct Mld {
    bool with_ads = true;
    int common_width = 0;
    std::array<DualAttention, 4> att;
    std::array<Drb, 4> drb3;
    std::array<Msdrb, 4> msdrb;
    std::array<Conv2d, 4> proj;
    Conv2d fuse;
    std::array<Conv2d, 3> aux_heads;

    Mld() = default;
    Mld(const ModelConfig& cfg, Rng& rng) : with_ads(cfg.use_ads), common_width(2 * cfg.base_width) {
        for (int i = 1; i <= 4; ++i) {
            const size_t k = static_cast<size_t>(i - 1);
            const int wi = cfg.width(i);
            const int ui = cfg.mld_width(i);
            att[k] = DualAttention(wi, rng);
            drb3[k] = Drb(wi, ui, 3, rng);
            msdrb[k] = Msdrb(ui, rng);
            proj[k] = Conv2d(ui, common_width, 1, 1, 0, rng);
        }
        fuse = Conv2d(4 * common_width, cfg.num_classes, 1, 1, 0, rng);
        if (with_ads)
            for (int i = 1; i <= 3; ++i)
                aux_heads[static_cast<size_t>(i - 1)] =
                    Conv2d(common_width, cfg.num_classes, 1, 1, 0, rng);
    }

    std::pair<Tensor, std::vector<Tensor>> forward(const std::vector<StageFeature>& feats) const {
        check(feats.size() == 4, "mld: expected features for levels 1..4, got ", feats.size());
        std::vector<Tensor> fused_inputs;
        std::vector<Tensor> aux;
        for (int i = 1; i <= 4; ++i) {
            const size_t k = static_cast<size_t>(i - 1);
            Tensor d = att[k].forward(feats[k].tensor);
            d = msdrb[k].forward(relu(drb3[k].forward(d)));
            d = proj[k].forward(d);
            d = upsample_bilinear(d, 1 << (i - 1));
            if (with_ads && i <= 3) aux.push_back(aux_heads[k].forward(d));
            fused_inputs.push_back(d);
        }
        Tensor area = upsample_bilinear(fuse.forward(concat_channels(fused_inputs)), 4);
        return {area, aux};
    }

    void collect(ParamList& out, const std::string& prefix) {
        for (int i = 1; i <= 4; ++i) {
            const size_t k = static_cast<size_t>(i - 1);
            att[k].collect(out, prefix + ".att" + std::to_string(i));
            drb3[k].collect(out, prefix + ".drb3_" + std::to_string(i));
            msdrb[k].collect(out, prefix + ".msdrb" + std::to_string(i));
            proj[k].collect(out, prefix + ".proj" + std::to_string(i));
        }
    }

    void collect_heads(ParamList& out, const std::string& prefix) {
        fuse.collect(out, prefix + ".fuse");
        if (with_ads)
            for (int i = 1; i <= 3; ++i)
                aux_heads[static_cast<size_t>(i - 1)].collect(out,
                                                              prefix + ".area_head" + std::to_string(i));
    }
};

// Plain U-shaped fallback for the MLD ablation: transpose-conv ladder with
// skip additions.
struct FallbackDecoder {
    bool with_ads = true;
    std::array<ConvTranspose2d, 3> up;  // level i+1 -> i
    std::array<ResBlock, 3> res;
    Conv2d head;
    std::array<Conv2d, 3> aux_heads;

    FallbackDecoder() = default;
    FallbackDecoder(const ModelConfig& cfg, Rng& rng) : with_ads(cfg.use_ads) {
        for (int i = 3; i >= 1; --i) {
            up[static_cast<size_t>(i - 1)] = ConvTranspose2d(cfg.width(i + 1), cfg.width(i), 2, 2, rng);
            res[static_cast<size_t>(i - 1)] = ResBlock(cfg.width(i), cfg.width(i), rng);
        }
        head = Conv2d(cfg.width(1), cfg.num_classes, 1, 1, 0, rng);
        if (with_ads)
            for (int i = 1; i <= 3; ++i)
                aux_heads[static_cast<size_t>(i - 1)] =
                    Conv2d(cfg.width(i), cfg.num_classes, 1, 1, 0, rng);
    }

    std::pair<Tensor, std::vector<Tensor>> forward(const std::vector<StageFeature>& feats) const {
        check(feats.size() == 4, "decoder: expected features for levels 1..4, got ", feats.size());
        std::array<Tensor, 4> ladder;
        Tensor y = feats[3].tensor;
        ladder[3] = y;
        for (int i = 3; i >= 1; --i) {
            const size_t k = static_cast<size_t>(i - 1);
            y = res[k].forward(add(up[k].forward(y), feats[k].tensor));
            ladder[k] = y;
        }
        Tensor area = upsample_bilinear(head.forward(ladder[0]), 4);
        std::vector<Tensor> aux;
        if (with_ads)
            for (int i = 1; i <= 3; ++i)
                aux.push_back(aux_heads[static_cast<size_t>(i - 1)].forward(ladder[static_cast<size_t>(i - 1)]));
        return {area, aux};
    }

    void collect(ParamList& out, const std::string& prefix) {
        for (int i = 1; i <= 3; ++i) {
            up[static_cast<size_t>(i - 1)].collect(out, prefix + ".up" + std::to_string(i));
            res[static_cast<size_t>(i - 1)].collect(out, prefix + ".res" + std::to_string(i));
        }
    }

    void collect_heads(ParamList& out, const std::string& prefix) {
        head.collect(out, prefix + ".area_head");
        if (with_ads)
            for (int i = 1; i <= 3; ++i)
                aux_heads[static_cast<size_t>(i - 1)].collect(out,
                                                              prefix + ".area_head" + std::to_string(i));
    }
};

// -------------------- full model --------------------

class Model {
public:
    explicit Model(const ModelConfig& cfg, uint64_t seed = 42) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        stem_ = Stem(cfg_, rng);
        for (int i = 0; i < 4; ++i) stages_.emplace_back(i, cfg_, rng);
        if (cfg_.use_eep) eep_.emplace(cfg_, rng);
        if (cfg_.use_mld)
            mld_.emplace(cfg_, rng);
        else
            fallback_.emplace(cfg_, rng);
        build_param_groups();
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<StageFeature> encode(const Tensor& image) const {
        check(image.rank() == 4 && image.dim(1) == 1, "model: input must be [B,1,H,W], got ",
              shape_str(image.shape()));
        const int h = image.dim(2), w = image.dim(3);
        const int m = cfg_.min_multiple();
        check(h % m == 0 && w % m == 0 && h >= m && w >= m,
              "model: input size ", h, "x", w, " must be a positive multiple of ", m);
        std::vector<StageFeature> feats;
        StageFeature cur = make_stage_feature(stem_.forward(image), 0, cfg_, h, w);
        for (int i = 0; i < 4; ++i) {
            cur = make_stage_feature(stages_[static_cast<size_t>(i)].forward(cur.tensor), i + 1,
                                     cfg_, h, w);
            feats.push_back(cur);
        }
        return feats;
    }

    ModelOutputs forward(const Tensor& image) const {
        std::vector<StageFeature> feats = encode(image);
        ModelOutputs out;
        if (cfg_.use_mld) {
            auto [area, aux] = mld_->forward(feats);
            out.area_logits = area;
            out.aux_area = std::move(aux);
        } else {
            auto [area, aux] = fallback_->forward(feats);
            out.area_logits = area;
            out.aux_area = std::move(aux);
        }
        if (cfg_.use_eep) {
            auto [edge, aux] = eep_->forward(feats);
            out.edge_prob = edge;
            out.aux_edge = std::move(aux);
        }
        return out;
    }

    // named (group, parameters) pairs: stem, stage1..4, eep, mld/decoder, heads
    const std::vector<std::pair<std::string, ParamList>>& param_groups() const { return groups_; }

    ParamList params() const {
        ParamList all;
        for (const auto& [name, list] : groups_) all.insert(all.end(), list.begin(), list.end());
        return all;
    }

    long long param_count() const {
        long long total = 0;
        for (const auto& [name, list] : groups_)
            for (const Tensor& t : list) total += t.size();
        return total;
    }

private:
    void build_param_groups() {
        auto group = [&](const std::string& name) -> ParamList& {
            groups_.emplace_back(name, ParamList{});
            return groups_.back().second;
        };
        stem_.collect(group("stem"), "stem");
        for (int i = 0; i < 4; ++i)
            stages_[static_cast<size_t>(i)].collect(group("stage" + std::to_string(i + 1)),
                                                    "stage" + std::to_string(i + 1));
        if (eep_) eep_->collect(group("eep"), "eep");
        if (mld_) mld_->collect(group("mld"), "mld");
        if (fallback_) fallback_->collect(group("decoder"), "decoder");
        ParamList& heads = group("heads");
        if (eep_) eep_->collect_heads(heads, "eep");
        if (mld_) mld_->collect_heads(heads, "mld");
        if (fallback_) fallback_->collect_heads(heads, "decoder");
    }

    ModelConfig cfg_;
    Stem stem_;
    std::vector<MsmmStage> stages_;
    std::optional<Eep> eep_;
    std::optional<Mld> mld_;
    std::optional<FallbackDecoder> fallback_;
    std::vector<std::pair<std::string, ParamList>> groups_;
};

}  // namespace msmu
