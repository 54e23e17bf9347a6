#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsanet/conv.hpp"
#include "dsanet/ops.hpp"
#include "dsanet/params.hpp"

namespace dsanet {

enum class Ablation { Full, MinipOnly, SequenceOnly };

inline std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::MinipOnly: return "minip-only";
        case Ablation::SequenceOnly: return "sequence-only";
        default: return "none";
    }
}

inline Ablation ablation_from_name(const std::string& s) {
    if (s == "minip-only") return Ablation::MinipOnly;
    if (s == "sequence-only") return Ablation::SequenceOnly;
    if (s == "none" || s.empty()) return Ablation::Full;
    throw UsageError("unknown ablation: " + s);
}

struct ModelConfig {
    int base_channels = 8;
    int levels = 5;
    int frames = 8;
    int num_classes = 3;
    int tf_layers = 4;
    int tf_heads = 4;
    double mlp_ratio = 4.0;
    int patch = 64;
    Ablation ablation = Ablation::Full;

    std::int64_t bottleneck_channels() const {
        return static_cast<std::int64_t>(base_channels) << (levels - 1);
    }
    int spatial_divisor() const { return 1 << (levels - 1); }

    void validate() const {
        DSANET_CHECK(levels >= 4 && levels <= 5, ConfigError,
                     "levels must be 4 or 5 (three supervision heads), got ", levels);
        DSANET_CHECK(base_channels >= 1 && frames >= 1 && num_classes >= 2, ConfigError,
                     "invalid model config");
        DSANET_CHECK(bottleneck_channels() % tf_heads == 0, ConfigError, "tf_heads=", tf_heads,
                     " must divide the bottleneck channel count ", bottleneck_channels());
        DSANET_CHECK(patch % spatial_divisor() == 0, ConfigError, "patch ", patch,
                     " must be divisible by ", spatial_divisor());
        DSANET_CHECK((patch / spatial_divisor()) % 2 == 0, ConfigError,
                     "bottleneck spatial size must be even for the fusion module; patch ", patch,
                     " with levels ", levels, " gives ", patch / spatial_divisor());
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"base_channels", c.base_channels},
                       {"levels", c.levels},
                       {"frames", c.frames},
                       {"num_classes", c.num_classes},
                       {"tf_layers", c.tf_layers},
                       {"tf_heads", c.tf_heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"patch", c.patch},
                       {"ablation", ablation_name(c.ablation)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.levels = j.value("levels", c.levels);
    c.frames = j.value("frames", c.frames);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.tf_layers = j.value("tf_layers", c.tf_layers);
    c.tf_heads = j.value("tf_heads", c.tf_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.patch = j.value("patch", c.patch);
    c.ablation = ablation_from_name(j.value("ablation", std::string("none")));
}

// Collects every attention map produced during one forward pass; tests use it
// for row-normalization and uniformity assertions.
template <typename T>
struct AttnProbe {
    bool store_tensors = false;
    struct Record {
        std::string tag;
        Shape shape;
        double max_row_sum_err;
        Tensor<T> attn;  // only populated when store_tensors
    };
    std::vector<Record> records;

    void add(const std::string& tag, const Tensor<T>& attn) {
        const std::int64_t L = attn.shape().back();
        const std::int64_t rows = attn.numel() / L;
        const T* p = attn.data();
        double worst = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::int64_t i = 0; i < L; ++i) s += static_cast<double>(p[r * L + i]);
            worst = std::max(worst, std::abs(s - 1.0));
        }
        records.push_back(
            {tag, attn.shape(), worst, store_tensors ? attn.clone() : Tensor<T>()});
    }
    double max_row_sum_err() const {
        double m = 0.0;
        for (const auto& r : records) m = std::max(m, r.max_row_sum_err);
        return m;
    }
};

template <typename T>
struct EncoderState {
    std::vector<Tensor<T>> skips;  // shallowest first; skips[i] has base<<i channels
    Tensor<T> bottleneck;
};

template <typename T>
struct ModelOutput {
    Tensor<T> logits_full;
    Tensor<T> logits_half;
    Tensor<T> logits_quarter;
};

// conv3x3 -> GroupNorm -> GELU, twice
template <typename T>
struct DoubleConv {
    Tensor<T> w0, b0, g0, be0;
    Tensor<T> w1, b1, g1, be1;
    std::int64_t groups = 1;

    void init(ParameterStore<T>& ps, const std::string& prefix, std::int64_t c_in,
              std::int64_t c_out) {
        groups = ops::default_groups(c_out);
        w0 = ps.add(prefix + ".conv0.weight", {c_out, c_in, 3, 3}, Init::KaimingUniform,
                    c_in * 9);
        b0 = ps.add(prefix + ".conv0.bias", {c_out}, Init::Zeros);
        g0 = ps.add(prefix + ".gn0.gamma", {c_out}, Init::Ones);
        be0 = ps.add(prefix + ".gn0.beta", {c_out}, Init::Zeros);
        w1 = ps.add(prefix + ".conv1.weight", {c_out, c_out, 3, 3}, Init::KaimingUniform,
                    c_out * 9);
        b1 = ps.add(prefix + ".conv1.bias", {c_out}, Init::Zeros);
        g1 = ps.add(prefix + ".gn1.gamma", {c_out}, Init::Ones);
        be1 = ps.add(prefix + ".gn1.beta", {c_out}, Init::Zeros);
    }

    Tensor<T> forward(Tape<T>& t, const Tensor<T>& x) const {
        Tensor<T> y = ops::conv2d(t, x, w0, b0, 1, 1);
        y = ops::gelu(t, ops::group_norm(t, y, groups, g0, be0));
        y = ops::conv2d(t, y, w1, b1, 1, 1);
        return ops::gelu(t, ops::group_norm(t, y, groups, g1, be1));
    }
};

// Five-layer branch: one stem block then maxpool+double-conv per level, each
// halving H,W and doubling C. The first levels-1 outputs feed skips.
template <typename T>
struct EncoderBranch {
    DoubleConv<T> stem;
    std::vector<DoubleConv<T>> down;

    void init(ParameterStore<T>& ps, const std::string& prefix, std::int64_t c_in,
              std::int64_t base, int levels) {
        stem.init(ps, prefix + ".lvl0", c_in, base);
        down.resize(static_cast<std::size_t>(levels - 1));
        for (int i = 0; i < levels - 1; ++i)
            down[static_cast<std::size_t>(i)].init(ps, prefix + ".lvl" + std::to_string(i + 1),
                                                   base << i, base << (i + 1));
    }

    EncoderState<T> forward(Tape<T>& t, const Tensor<T>& x) const {
        EncoderState<T> st;
        Tensor<T> y = stem.forward(t, x);
        for (const auto& block : down) {
            st.skips.push_back(y);
            y = block.forward(t, ops::maxpool2d(t, y));
        }
        st.bottleneck = y;
        return st;
    }
};

// multi-head self-attention over the middle axis of [G, L, c]
template <typename T>
struct Msa {
    Tensor<T> wqkv, bqkv, wo, bo;
    std::int64_t heads = 1, channels = 1;

    void init(ParameterStore<T>& ps, const std::string& prefix, std::int64_t c,
              std::int64_t n_heads) {
        heads = n_heads;
        channels = c;
        wqkv = ps.add(prefix + ".wqkv", {3 * c, c}, Init::KaimingUniform, c);
        bqkv = ps.add(prefix + ".bqkv", {3 * c}, Init::Zeros);
        wo = ps.add(prefix + ".wo", {c, c}, Init::KaimingUniform, c);
        bo = ps.add(prefix + ".bo", {c}, Init::Zeros);
    }

    Tensor<T> forward(Tape<T>& t, const Tensor<T>& x, AttnProbe<T>* probe,
                      const std::string& tag) const {
        const std::int64_t G = x.dim(0), L = x.dim(1), c = channels, dh = c / heads;
        Tensor<T> qkv = ops::linear(t, x, wqkv, bqkv);  // [G, L, 3c]
        ops::ViewSpec split{{G, L, 3, heads, dh}, {2, 0, 3, 1, 4}, {3, G * heads, L, dh}};
        Tensor<T> packed = ops::view(t, qkv, split);
        Tensor<T> q = ops::reshape(t, ops::narrow(t, packed, 0, 0, 1), {G * heads, L, dh});
        Tensor<T> k = ops::reshape(t, ops::narrow(t, packed, 0, 1, 1), {G * heads, L, dh});
        Tensor<T> v = ops::reshape(t, ops::narrow(t, packed, 0, 2, 1), {G * heads, L, dh});
        const T scal = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor<T> attn = ops::softmax(t, ops::bmm(t, q, k, true, scal), 2);
        if (probe) probe->add(tag, attn);
        Tensor<T> o = ops::bmm(t, attn, v);  // [G*heads, L, dh]
        ops::ViewSpec merge{{G, heads, L, dh}, {0, 2, 1, 3}, {G, L, c}};
        return ops::linear(t, ops::view(t, o, merge), wo, bo);
    }
};

// One TF layer: learnable position code over T, temporal MSA, spatial MSA,
// two-linear MLP; pre-norm residuals throughout. Input/output layout (Bhw)xTxc.
template <typename T>
struct TfLayer {
    Tensor<T> pos;  // [T, c]
    Tensor<T> ln_t_g, ln_t_b, ln_s_g, ln_s_b, ln_m_g, ln_m_b;
    Msa<T> attn_t, attn_s;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    void init(ParameterStore<T>& ps, const std::string& prefix, std::int64_t T_frames,
              std::int64_t c, std::int64_t heads, double mlp_ratio) {
        pos = ps.add(prefix + ".pos", {T_frames, c}, Init::Normal0p02);
        ln_t_g = ps.add(prefix + ".ln_t.gamma", {c}, Init::Ones);
        ln_t_b = ps.add(prefix + ".ln_t.beta", {c}, Init::Zeros);
        ln_s_g = ps.add(prefix + ".ln_s.gamma", {c}, Init::Ones);
        ln_s_b = ps.add(prefix + ".ln_s.beta", {c}, Init::Zeros);
        ln_m_g = ps.add(prefix + ".ln_m.gamma", {c}, Init::Ones);
        ln_m_b = ps.add(prefix + ".ln_m.beta", {c}, Init::Zeros);
        attn_t.init(ps, prefix + ".attn_t", c, heads);
        attn_s.init(ps, prefix + ".attn_s", c, heads);
        const auto hidden = static_cast<std::int64_t>(mlp_ratio * static_cast<double>(c));
        mlp_w1 = ps.add(prefix + ".mlp.w1", {hidden, c}, Init::KaimingUniform, c);
        mlp_b1 = ps.add(prefix + ".mlp.b1", {hidden}, Init::Zeros);
        mlp_w2 = ps.add(prefix + ".mlp.w2", {c, hidden}, Init::KaimingUniform, hidden);
        mlp_b2 = ps.add(prefix + ".mlp.b2", {c}, Init::Zeros);
    }

    Tensor<T> forward(Tape<T>& t, Tensor<T> x, std::int64_t B, std::int64_t h, std::int64_t w,
                      std::int64_t T_frames, std::int64_t c, AttnProbe<T>* probe,
                      const std::string& tag) const {
        x = ops::add_bcast(t, x, ops::reshape(t, pos, {1, T_frames, c}));
        Tensor<T> nt = ops::layer_norm(t, x, ln_t_g, ln_t_b);
        x = ops::add(t, x, attn_t.forward(t, nt, probe, tag + ".temporal"));

        ops::ViewSpec to_spatial{{B, h, w, T_frames, c}, {0, 3, 1, 2, 4}, {B * T_frames, h * w, c}};
        Tensor<T> xs = ops::view(t, x, to_spatial);
        Tensor<T> ns = ops::layer_norm(t, xs, ln_s_g, ln_s_b);
        xs = ops::add(t, xs, attn_s.forward(t, ns, probe, tag + ".spatial"));

        Tensor<T> nm = ops::layer_norm(t, xs, ln_m_g, ln_m_b);
        Tensor<T> m = ops::gelu(t, ops::linear(t, nm, mlp_w1, mlp_b1));
        m = ops::linear(t, m, mlp_w2, mlp_b2);
        xs = ops::add(t, xs, m);

        return ops::reshape(t, ops::view(t, xs, to_spatial.inverse()), {B * h * w, T_frames, c});
    }
};

template <typename T>
struct TemporalFormer {
    std::vector<TfLayer<T>> layers;

    void init(ParameterStore<T>& ps, const std::string& prefix, int n_layers,
              std::int64_t T_frames, std::int64_t c, std::int64_t heads, double mlp_ratio) {
        layers.resize(static_cast<std::size_t>(n_layers));
        for (int i = 0; i < n_layers; ++i)
            layers[static_cast<std::size_t>(i)].init(ps, prefix + ".layer" + std::to_string(i),
                                                     T_frames, c, heads, mlp_ratio);
    }

    // F_s: [(B T), c, h, w] -> [B, c, h, w] with T collapsed by max
    Tensor<T> forward(Tape<T>& t, const Tensor<T>& f_s, std::int64_t B,
                      AttnProbe<T>* probe) const {
        const std::int64_t BT = f_s.dim(0), c = f_s.dim(1), h = f_s.dim(2), w = f_s.dim(3);
        DSANET_CHECK(BT % B == 0, DimensionError, "temporalformer: leading dim ", BT,
                     " not a multiple of batch ", B);
        const std::int64_t T_frames = BT / B;
        ops::ViewSpec to_tokens{{B, T_frames, c, h, w}, {0, 3, 4, 1, 2}, {B * h * w, T_frames, c}};
        Tensor<T> x = ops::view(t, f_s, to_tokens);
        for (std::size_t i = 0; i < layers.size(); ++i)
            x = layers[i].forward(t, x, B, h, w, T_frames, c, probe,
                                  "tf.layer" + std::to_string(i));
        ops::ViewSpec restore{{B, h, w, T_frames, c}, {0, 3, 4, 1, 2}, {B, T_frames, c, h, w}};
        Tensor<T> y = ops::pool_over_axis(t, ops::view(t, x, restore), 1, ops::PoolMode::Max,
                                          T_frames);
        return ops::reshape(t, y, {B, c, h, w});
    }
};

// Bottleneck fusion: pooled Q/K/V through one shared 1x1 conv, per-position
// weights from channel-contracted QK with 1/sqrt(c) scaling, summed weights
// modulate both V streams, then upsample and add onto concat(F_s, F_m).
template <typename T>
struct StfModule {
    Tensor<T> wqkv, bqkv;  // [3c, c, 1, 1]

    void init(ParameterStore<T>& ps, const std::string& prefix, std::int64_t c) {
        wqkv = ps.add(prefix + ".qkv.weight", {3 * c, c, 1, 1}, Init::KaimingUniform, c);
        bqkv = ps.add(prefix + ".qkv.bias", {3 * c}, Init::Zeros);
    }

    static Tensor<T> position_weights(Tape<T>& t, const Tensor<T>& q, const Tensor<T>& k,
                                      std::int64_t c) {
        // sum over channels of q*k, scaled by 1/sqrt(c): mean * c / sqrt(c)
        Tensor<T> prod = ops::mul(t, q, k);
        Tensor<T> m = ops::pool_over_axis(t, prod, 1, ops::PoolMode::Mean, c);
        m = ops::scale(t, m, static_cast<T>(std::sqrt(static_cast<double>(c))));
        return ops::softmax(t, m, 2);  // [B, 1, P]
    }

    Tensor<T> forward(Tape<T>& t, const Tensor<T>& f_m, const Tensor<T>& f_s,
                      AttnProbe<T>* probe) const {
        DSANET_CHECK(f_m.shape() == f_s.shape(), DimensionError, "stf: branch shape mismatch ",
                     shape_str(f_m.shape()), " vs ", shape_str(f_s.shape()));
        const std::int64_t B = f_m.dim(0), c = f_m.dim(1), h = f_m.dim(2), w = f_m.dim(3);
        DSANET_CHECK(h % 2 == 0 && w % 2 == 0, DimensionError,
                     "stf: h and w must be even, got ", h, "x", w);
        Tensor<T> pm = ops::maxpool2d(t, f_m);
        Tensor<T> ps_ = ops::maxpool2d(t, f_s);
        const std::int64_t P = (h / 2) * (w / 2);

        Tensor<T> qkv_m = ops::reshape(t, ops::conv2d(t, pm, wqkv, bqkv, 1, 0), {B, 3 * c, P});
        Tensor<T> qkv_s = ops::reshape(t, ops::conv2d(t, ps_, wqkv, bqkv, 1, 0), {B, 3 * c, P});
        Tensor<T> q_m = ops::narrow(t, qkv_m, 1, 0, c);
        Tensor<T> k_m = ops::narrow(t, qkv_m, 1, c, c);
        Tensor<T> v_m = ops::narrow(t, qkv_m, 1, 2 * c, c);
        Tensor<T> q_s = ops::narrow(t, qkv_s, 1, 0, c);
        Tensor<T> k_s = ops::narrow(t, qkv_s, 1, c, c);
        Tensor<T> v_s = ops::narrow(t, qkv_s, 1, 2 * c, c);

        Tensor<T> alpha_i = position_weights(t, q_m, k_m, c);
        Tensor<T> alpha_s = position_weights(t, q_s, k_s, c);
        if (probe) {
            probe->add("stf.alpha_i", alpha_i);
            probe->add("stf.alpha_s", alpha_s);
        }
        Tensor<T> alpha = ops::add(t, alpha_i, alpha_s);

        Tensor<T> enh_m = ops::mul_bcast(t, v_m, alpha);
        Tensor<T> enh_s = ops::mul_bcast(t, v_s, alpha);
        Tensor<T> cat = ops::concat<T>(t, {enh_s, enh_m}, 1);  // pair s/m with the residual order
        cat = ops::reshape(t, cat, {B, 2 * c, h / 2, w / 2});
        Tensor<T> up = ops::upsample2d(t, cat, 2, ops::UpsampleMode::Nearest);
        Tensor<T> residual = ops::concat<T>(t, {f_s, f_m}, 1);
        return ops::add(t, up, residual);
    }
};

template <typename T>
struct DecoderStage {
    Tensor<T> up_w, up_b;  // transposed conv 2x2 stride 2
    DoubleConv<T> conv;
};

template <typename T>
struct Decoder {
    std::vector<DecoderStage<T>> stages;  // deepest first
    Tensor<T> head_full_w, head_full_b;
    Tensor<T> head_half_w, head_half_b;
    Tensor<T> head_quarter_w, head_quarter_b;

    void init(ParameterStore<T>& ps, const std::string& prefix, std::int64_t base, int levels,
              std::int64_t num_classes) {
        const int n = levels - 1;
        stages.resize(static_cast<std::size_t>(n));
        std::int64_t in_ch = 2 * (base << (levels - 1));  // fused bottleneck
        for (int i = 0; i < n; ++i) {
            const std::int64_t out_ch = base << (levels - 2 - i);
            const std::int64_t skip_ch = 2 * out_ch;
            auto& st = stages[static_cast<std::size_t>(i)];
            const std::string p = prefix + ".stage" + std::to_string(i);
            st.up_w = ps.add(p + ".up.weight", {in_ch, out_ch, 2, 2}, Init::KaimingUniform,
                             in_ch * 4);
            st.up_b = ps.add(p + ".up.bias", {out_ch}, Init::Zeros);
            st.conv.init(ps, p, out_ch + skip_ch, out_ch);
            in_ch = out_ch;
        }
        auto head = [&](const std::string& name, std::int64_t c_in, Tensor<T>& w, Tensor<T>& b) {
            w = ps.add(prefix + ".head_" + name + ".weight", {num_classes, c_in, 1, 1},
                       Init::KaimingUniform, c_in);
            b = ps.add(prefix + ".head_" + name + ".bias", {num_classes}, Init::Zeros);
        };
        head("full", base, head_full_w, head_full_b);
        head("half", base << 1, head_half_w, head_half_b);
        head("quarter", base << 2, head_quarter_w, head_quarter_b);
    }

    // fused_skips ordered deepest first
    ModelOutput<T> forward(Tape<T>& t, Tensor<T> x,
                           const std::vector<Tensor<T>>& fused_skips) const {
        DSANET_CHECK(fused_skips.size() == stages.size(), DimensionError, "decoder expects ",
                     stages.size(), " skips, got ", fused_skips.size());
        const int n = static_cast<int>(stages.size());
        std::vector<Tensor<T>> outs;
        for (int i = 0; i < n; ++i) {
            const auto& st = stages[static_cast<std::size_t>(i)];
            x = ops::conv_transpose2d(t, x, st.up_w, st.up_b, 2);
            const Tensor<T>& skip = fused_skips[static_cast<std::size_t>(i)];
            DSANET_CHECK(skip.dim(2) == x.dim(2) && skip.dim(3) == x.dim(3), DimensionError,
                         "decoder skip spatial mismatch at stage ", i, ": ",
                         shape_str(skip.shape()), " vs ", shape_str(x.shape()));
            x = st.conv.forward(t, ops::concat<T>(t, {x, skip}, 1));
            outs.push_back(x);
        }
        ModelOutput<T> out;
        out.logits_full = ops::conv2d(t, outs[static_cast<std::size_t>(n - 1)], head_full_w,
                                      head_full_b, 1, 0);
        out.logits_half = ops::conv2d(t, outs[static_cast<std::size_t>(n - 2)], head_half_w,
                                      head_half_b, 1, 0);
        out.logits_quarter = ops::conv2d(t, outs[static_cast<std::size_t>(n - 3)], head_quarter_w,
                                         head_quarter_b, 1, 0);
        return out;
    }
};

// Collapse the folded T axis of a [(B T), c, h, w] tensor by max.
template <typename T>
Tensor<T> collapse_frames_max(Tape<T>& t, const Tensor<T>& x, std::int64_t batch) {
    const std::int64_t BT = x.dim(0);
    DSANET_CHECK(BT % batch == 0, DimensionError, "collapse_frames_max: ", BT,
                 " not divisible by batch ", batch);
    const std::int64_t T_frames = BT / batch;
    Tensor<T> v = ops::reshape(t, x, {batch, T_frames, x.dim(1), x.dim(2), x.dim(3)});
    v = ops::pool_over_axis(t, v, 1, ops::PoolMode::Max, T_frames);
    return ops::reshape(t, v, {batch, x.dim(1), x.dim(2), x.dim(3)});
}

// Temporal skip collapsed over T by max, then channel-concatenated with the
// spatial skip: [(B T),c,h,w] + [B,c,h,w] -> [B,2c,h,w].
template <typename T>
Tensor<T> fuse_skips(Tape<T>& t, const Tensor<T>& teb_skip, const Tensor<T>& seb_skip) {
    const std::int64_t B = seb_skip.dim(0);
    Tensor<T> pooled = collapse_frames_max(t, teb_skip, B);
    DSANET_CHECK(pooled.shape() == seb_skip.shape(), DimensionError,
                 "fuse_skips: branch shapes differ: ", shape_str(pooled.shape()), " vs ",
                 shape_str(seb_skip.shape()));
    return ops::concat<T>(t, {pooled, seb_skip}, 1);
}

template <typename T>
class DsaNet {
public:
    DsaNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
        cfg_.validate();
        const std::int64_t base = cfg_.base_channels;
        const std::int64_t c = cfg_.bottleneck_channels();
        if (cfg_.ablation != Ablation::SequenceOnly) seb_.init(ps_, "seb", 1, base, cfg_.levels);
        if (cfg_.ablation != Ablation::MinipOnly) {
            teb_.init(ps_, "teb", 1, base, cfg_.levels);
            if (cfg_.ablation == Ablation::Full) {
                tf_.init(ps_, "tf", cfg_.tf_layers, cfg_.frames, c, cfg_.tf_heads,
                         cfg_.mlp_ratio);
                stf_.init(ps_, "stf", c);
            }
        }
        dec_.init(ps_, "dec", base, cfg_.levels, cfg_.num_classes);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return ps_; }
    const ParameterStore<T>& params() const { return ps_; }

    EncoderState<T> seb_forward(Tape<T>& t, const Tensor<T>& minip) const {
        check_minip(minip);
        return seb_.forward(t, minip);
    }

    // seq folded to [(B T), 1, H, W] internally
    EncoderState<T> teb_forward(Tape<T>& t, const Tensor<T>& seq) const {
        check_seq(seq);
        const std::int64_t B = seq.dim(0), T_frames = seq.dim(1);
        Tensor<T> folded =
            ops::reshape(t, seq, {B * T_frames, seq.dim(2), seq.dim(3), seq.dim(4)});
        return teb_.forward(t, folded);
    }

    Tensor<T> temporalformer_forward(Tape<T>& t, const Tensor<T>& f_s, std::int64_t batch,
                                     AttnProbe<T>* probe = nullptr) const {
        return tf_.forward(t, f_s, batch, probe);
    }

    Tensor<T> stf_forward(Tape<T>& t, const Tensor<T>& f_m, const Tensor<T>& f_s,
                          AttnProbe<T>* probe = nullptr) const {
        return stf_.forward(t, f_m, f_s, probe);
    }

    ModelOutput<T> decoder_forward(Tape<T>& t, const Tensor<T>& bottleneck,
                                   const std::vector<Tensor<T>>& skips_deepest_first) const {
        return dec_.forward(t, bottleneck, skips_deepest_first);
    }

    ModelOutput<T> forward(Tape<T>& t, const Tensor<T>& seq, const Tensor<T>& minip,
                           AttnProbe<T>* probe = nullptr) const {
        const std::int64_t B = minip.dim(0);
        std::vector<Tensor<T>> fused;  // shallowest first, reversed before decoding
        Tensor<T> bottleneck;

        switch (cfg_.ablation) {
            case Ablation::Full: {
                EncoderState<T> sm = seb_forward(t, minip);
                EncoderState<T> ss = teb_forward(t, seq);
                for (std::size_t i = 0; i < sm.skips.size(); ++i)
                    fused.push_back(fuse_skips(t, ss.skips[i], sm.skips[i]));
                Tensor<T> f_s = tf_.forward(t, ss.bottleneck, B, probe);
                bottleneck = stf_.forward(t, sm.bottleneck, f_s, probe);
                break;
            }
            case Ablation::MinipOnly: {
                EncoderState<T> sm = seb_forward(t, minip);
                for (const auto& s : sm.skips) fused.push_back(ops::concat<T>(t, {s, s}, 1));
                bottleneck = ops::concat<T>(t, {sm.bottleneck, sm.bottleneck}, 1);
                break;
            }
            case Ablation::SequenceOnly: {
                EncoderState<T> ss = teb_forward(t, seq);
                for (const auto& s : ss.skips) {
                    Tensor<T> pooled = collapse_frames_max(t, s, B);
                    fused.push_back(ops::concat<T>(t, {pooled, pooled}, 1));
                }
                Tensor<T> pooled = collapse_frames_max(t, ss.bottleneck, B);
                bottleneck = ops::concat<T>(t, {pooled, pooled}, 1);
                break;
            }
        }
        std::vector<Tensor<T>> deepest_first(fused.rbegin(), fused.rend());
        return dec_.forward(t, bottleneck, deepest_first);
    }

private:
    void check_minip(const Tensor<T>& minip) const {
        DSANET_CHECK(minip.rank() == 4 && minip.dim(1) == 1, DimensionError,
                     "minip input must be [B,1,H,W], got ", shape_str(minip.shape()));
        const int div = cfg_.spatial_divisor();
        DSANET_CHECK(minip.dim(2) % div == 0 && minip.dim(3) % div == 0, DimensionError,
                     "spatial size ", minip.dim(2), "x", minip.dim(3), " not divisible by ", div);
    }
    void check_seq(const Tensor<T>& seq) const {
        DSANET_CHECK(seq.rank() == 5 && seq.dim(2) == 1, DimensionError,
                     "sequence input must be [B,T,1,H,W], got ", shape_str(seq.shape()));
        DSANET_CHECK(seq.dim(1) == cfg_.frames, DimensionError, "sequence has ", seq.dim(1),
                     " frames, config expects ", cfg_.frames);
        const int div = cfg_.spatial_divisor();
        DSANET_CHECK(seq.dim(3) % div == 0 && seq.dim(4) % div == 0, DimensionError,
                     "spatial size ", seq.dim(3), "x", seq.dim(4), " not divisible by ", div);
    }

    ModelConfig cfg_;
    ParameterStore<T> ps_;
    EncoderBranch<T> seb_, teb_;
    TemporalFormer<T> tf_;
    StfModule<T> stf_;
    Decoder<T> dec_;
};

}  // namespace dsanet
