#include <catch2/catch_amalgamated.hpp>

#include "dsanet/loss.hpp"
#include "dsanet/model.hpp"

using namespace dsanet;
using Catch::Approx;

namespace {

template <typename T>
Tensor<T> rand_seq(const ModelConfig& cfg, std::int64_t B, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor<T>::uniform({B, cfg.frames, 1, cfg.patch, cfg.patch}, rng, T(-1), T(1));
}

template <typename T>
Tensor<T> rand_minip(const ModelConfig& cfg, std::int64_t B, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor<T>::uniform({B, 1, cfg.patch, cfg.patch}, rng, T(-1), T(1));
}

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.base_channels = 4;
    cfg.levels = 4;
    cfg.frames = 4;
    cfg.patch = 16;
    cfg.tf_layers = 2;
    return cfg;
}

void zero_param(DsaNet<double>& model, const std::string& name) {
    auto* p = model.params().find(name);
    REQUIRE(p != nullptr);
    std::fill(p->tensor.values().begin(), p->tensor.values().end(), 0.0);
}

}  // namespace

TEST_CASE("seb_forward shape ledger at base 8, 64x64") {
    ModelConfig cfg;  // defaults: base 8, levels 5, patch 64
    DsaNet<float> model(cfg, 1);
    Tape<float> t(false);
    Tensor<float> minip = rand_minip<float>(cfg, 1, 2);
    EncoderState<float> st = model.seb_forward(t, minip);
    REQUIRE(st.skips.size() == 4);
    const std::int64_t chans[4] = {8, 16, 32, 64};
    const std::int64_t sizes[4] = {64, 32, 16, 8};
    for (int i = 0; i < 4; ++i)
        REQUIRE(st.skips[static_cast<std::size_t>(i)].shape() ==
                Shape{1, chans[i], sizes[i], sizes[i]});
    REQUIRE(st.bottleneck.shape() == Shape{1, 128, 4, 4});
}

TEST_CASE("seb_forward stays finite on zero input") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<float> model(cfg, 3);
    Tape<float> t(false);
    Tensor<float> z = Tensor<float>::zeros({1, 1, cfg.patch, cfg.patch});
    EncoderState<float> st = model.seb_forward(t, z);
    REQUIRE(st.bottleneck.all_finite());
    for (const auto& s : st.skips) REQUIRE(s.all_finite());
}

TEST_CASE("encoder forward is bitwise deterministic") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<float> model(cfg, 4);
    Tape<float> t(false);
    Tensor<float> minip = rand_minip<float>(cfg, 1, 5);
    EncoderState<float> a = model.seb_forward(t, minip);
    EncoderState<float> b = model.seb_forward(t, minip);
    REQUIRE(a.bottleneck.values() == b.bottleneck.values());
}

TEST_CASE("teb_forward folds T into the batch axis") {
    ModelConfig cfg;
    DsaNet<float> model(cfg, 6);
    Tape<float> t(false);
    Tensor<float> seq = rand_seq<float>(cfg, 1, 7);
    EncoderState<float> st = model.teb_forward(t, seq);
    REQUIRE(st.bottleneck.shape() == Shape{8, 128, 4, 4});
    REQUIRE(st.skips[0].shape() == Shape{8, 8, 64, 64});
}

TEST_CASE("teb_forward with T=1 degenerates to a SEB-shaped pass") {
    ModelConfig cfg = tiny_cfg();
    cfg.frames = 1;
    DsaNet<float> model(cfg, 8);
    Tape<float> t(false);
    Rng rng(9);
    Tensor<float> seq = Tensor<float>::uniform({1, 1, 1, 16, 16}, rng, -1.f, 1.f);
    EncoderState<float> st = model.teb_forward(t, seq);
    REQUIRE(st.bottleneck.shape() == Shape{1, 32, 2, 2});
}

TEST_CASE("teb_forward does not mix batch items") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<float> model(cfg, 10);
    Tape<float> t(false);
    Tensor<float> a = rand_seq<float>(cfg, 1, 11);
    Tensor<float> b = rand_seq<float>(cfg, 1, 12);
    Tensor<float> ab = Tensor<float>::zeros({2, cfg.frames, 1, cfg.patch, cfg.patch});
    std::copy(a.values().begin(), a.values().end(), ab.values().begin());
    std::copy(b.values().begin(), b.values().end(), ab.values().begin() + a.numel());
    Tensor<float> ba = Tensor<float>::zeros(ab.shape());
    std::copy(b.values().begin(), b.values().end(), ba.values().begin());
    std::copy(a.values().begin(), a.values().end(), ba.values().begin() + b.numel());

    EncoderState<float> st_ab = model.teb_forward(t, ab);
    EncoderState<float> st_ba = model.teb_forward(t, ba);
    const std::int64_t half = st_ab.bottleneck.numel() / 2;
    for (std::int64_t i = 0; i < half; ++i) {
        REQUIRE(st_ab.bottleneck[i] == st_ba.bottleneck[half + i]);
        REQUIRE(st_ab.bottleneck[half + i] == st_ba.bottleneck[i]);
    }
}

TEST_CASE("fuse_skips collapses T by max and concatenates") {
    Tape<float> t(false);
    const std::int64_t B = 2, T = 4, c = 3, h = 2, w = 2;
    Rng rng(13);
    Tensor<float> frame = Tensor<float>::uniform({B, c, h, w}, rng, -1.f, 1.f);
    Tensor<float> teb = Tensor<float>::zeros({B * T, c, h, w});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t f = 0; f < T; ++f)
            std::copy(frame.values().begin() + b * c * h * w,
                      frame.values().begin() + (b + 1) * c * h * w,
                      teb.values().begin() + (b * T + f) * c * h * w);
    Tensor<float> seb = Tensor<float>::uniform({B, c, h, w}, rng, -1.f, 1.f);
    Tensor<float> fused = fuse_skips(t, teb, seb);
    REQUIRE(fused.shape() == Shape{B, 2 * c, h, w});
    // constant across T: the collapsed half equals the single frame's features
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < c * h * w; ++i)
            REQUIRE(fused[b * 2 * c * h * w + i] == frame[b * c * h * w + i]);

    SECTION("non-max frames do not affect max-dominated cells") {
        Tensor<float> teb2 = Tensor<float>::zeros({1 * T, 1, 2, 2});
        for (std::int64_t f = 0; f < T; ++f)
            for (std::int64_t i = 0; i < 4; ++i)
                teb2[f * 4 + i] = static_cast<float>(f);  // frame T-1 dominates everywhere
        Tensor<float> seb2 = Tensor<float>::zeros({1, 1, 2, 2});
        Tensor<float> base = fuse_skips(t, teb2, seb2);
        teb2[0] = -5.f;  // perturb a non-max frame
        Tensor<float> after = fuse_skips(t, teb2, seb2);
        REQUIRE(base.values() == after.values());
    }
}

TEST_CASE("temporalformer: identical frames give uniform temporal attention") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<double> model(cfg, 14);
    Tape<double> t(false);
    const std::int64_t B = 1, T = cfg.frames, c = cfg.bottleneck_channels(), h = 2, w = 2;
    Rng rng(15);
    Tensor<double> one = Tensor<double>::uniform({1, c, h, w}, rng, -1.0, 1.0);
    Tensor<double> f_s = Tensor<double>::zeros({B * T, c, h, w});
    for (std::int64_t f = 0; f < T; ++f)
        std::copy(one.values().begin(), one.values().end(),
                  f_s.values().begin() + f * c * h * w);

    AttnProbe<double> probe;
    probe.store_tensors = true;
    Tensor<double> out = model.temporalformer_forward(t, f_s, B, &probe);
    REQUIRE(out.shape() == Shape{B, c, h, w});
    REQUIRE(probe.max_row_sum_err() < 1e-6);

    bool found_temporal = false;
    for (const auto& rec : probe.records) {
        if (rec.tag.find("layer0.temporal") == std::string::npos) continue;
        found_temporal = true;
        const double uniform = 1.0 / static_cast<double>(T);
        for (std::int64_t i = 0; i < rec.attn.numel(); ++i)
            REQUIRE(rec.attn[i] == Approx(uniform).margin(1e-12));
    }
    REQUIRE(found_temporal);
}

TEST_CASE("temporalformer with zeroed position codes is frame-permutation invariant") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<double> model(cfg, 16);
    const std::int64_t B = 1, T = cfg.frames, c = cfg.bottleneck_channels(), h = 2, w = 2;
    Rng rng(17);
    Tensor<double> f_s = Tensor<double>::uniform({B * T, c, h, w}, rng, -1.0, 1.0);

    // frame permutation (reversal) of the folded T axis
    Tensor<double> f_perm = Tensor<double>::zeros(f_s.shape());
    const std::int64_t fsz = c * h * w;
    for (std::int64_t f = 0; f < T; ++f)
        std::copy(f_s.values().begin() + f * fsz, f_s.values().begin() + (f + 1) * fsz,
                  f_perm.values().begin() + (T - 1 - f) * fsz);

    Tape<double> t(false);
    Tensor<double> with_pos_a = model.temporalformer_forward(t, f_s, B);
    Tensor<double> with_pos_b = model.temporalformer_forward(t, f_perm, B);
    double dev_learned = 0.0;
    for (std::int64_t i = 0; i < with_pos_a.numel(); ++i)
        dev_learned = std::max(dev_learned, std::abs(with_pos_a[i] - with_pos_b[i]));
    REQUIRE(dev_learned > 1e-9);  // learned codes break the symmetry

    for (int l = 0; l < cfg.tf_layers; ++l)
        zero_param(model, "tf.layer" + std::to_string(l) + ".pos");
    Tensor<double> a = model.temporalformer_forward(t, f_s, B);
    Tensor<double> b = model.temporalformer_forward(t, f_perm, B);
    for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == Approx(b[i]).margin(1e-12));
}

TEST_CASE("tf layer reduces to the identity when attention, mlp and pos are zeroed") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<double> model(cfg, 18);
    for (int l = 0; l < cfg.tf_layers; ++l) {
        const std::string p = "tf.layer" + std::to_string(l);
        zero_param(model, p + ".pos");
        zero_param(model, p + ".attn_t.wo");
        zero_param(model, p + ".attn_t.bo");
        zero_param(model, p + ".attn_s.wo");
        zero_param(model, p + ".attn_s.bo");
        zero_param(model, p + ".mlp.w2");
        zero_param(model, p + ".mlp.b2");
    }
    const std::int64_t B = 1, c = cfg.bottleneck_channels(), h = 2, w = 2;
    Rng rng(19);
    Tensor<double> f_s = Tensor<double>::uniform({B * cfg.frames, c, h, w}, rng, -1.0, 1.0);
    Tape<double> t(false);
    Tensor<double> out = model.temporalformer_forward(t, f_s, B);
    // all sublayers pass through, so the result is the plain max over T
    Tensor<double> expect = collapse_frames_max(t, f_s, B);
    REQUIRE(out.values() == expect.values());
}

TEST_CASE("stf: identical inputs give identical weight matrices") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<double> model(cfg, 20);
    const std::int64_t c = cfg.bottleneck_channels();
    Rng rng(21);
    Tensor<double> f = Tensor<double>::uniform({2, c, 4, 4}, rng, -1.0, 1.0);
    Tape<double> t(false);
    AttnProbe<double> probe;
    probe.store_tensors = true;
    Tensor<double> out = model.stf_forward(t, f, f, &probe);
    REQUIRE(out.shape() == Shape{2, 2 * c, 4, 4});
    REQUIRE(probe.records.size() == 2);
    REQUIRE(probe.records[0].attn.values() == probe.records[1].attn.values());
    REQUIRE(probe.max_row_sum_err() < 1e-6);
}

TEST_CASE("stf reduces to concat(F_s, F_m) when the attention path is zeroed") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<double> model(cfg, 22);
    const std::int64_t c = cfg.bottleneck_channels();
    // zero the V-producing rows of the shared projection
    auto* w = model.params().find("stf.qkv.weight");
    auto* b = model.params().find("stf.qkv.bias");
    REQUIRE(w != nullptr);
    std::fill(w->tensor.values().begin() + 2 * c * c, w->tensor.values().end(), 0.0);
    std::fill(b->tensor.values().begin() + 2 * c, b->tensor.values().end(), 0.0);

    Rng rng(23);
    Tensor<double> f_m = Tensor<double>::uniform({1, c, 4, 4}, rng, -1.0, 1.0);
    Tensor<double> f_s = Tensor<double>::uniform({1, c, 4, 4}, rng, -1.0, 1.0);
    Tape<double> t(false);
    Tensor<double> out = model.stf_forward(t, f_m, f_s);
    Tensor<double> expect = ops::concat<double>(t, {f_s, f_m}, 1);
    REQUIRE(out.values() == expect.values());
}

TEST_CASE("stf rejects odd spatial size") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<double> model(cfg, 24);
    const std::int64_t c = cfg.bottleneck_channels();
    Tape<double> t(false);
    Tensor<double> f = Tensor<double>::zeros({1, c, 3, 3});
    REQUIRE_THROWS_AS(model.stf_forward(t, f, f), DimensionError);
}

TEST_CASE("dsanet_forward produces the documented head shapes") {
    ModelConfig cfg;  // base 8, levels 5, frames 8, patch 64, 4 TF layers
    DsaNet<float> model(cfg, 25);
    Tape<float> t(false);
    AttnProbe<float> probe;
    ModelOutput<float> out =
        model.forward(t, rand_seq<float>(cfg, 1, 26), rand_minip<float>(cfg, 1, 27), &probe);
    REQUIRE(out.logits_full.shape() == Shape{1, 3, 64, 64});
    REQUIRE(out.logits_half.shape() == Shape{1, 3, 32, 32});
    REQUIRE(out.logits_quarter.shape() == Shape{1, 3, 16, 16});
    REQUIRE(out.logits_full.all_finite());
    REQUIRE(out.logits_half.all_finite());
    REQUIRE(out.logits_quarter.all_finite());
    REQUIRE(probe.max_row_sum_err() < 1e-6);
}

TEST_CASE("duplicate batch items produce identical outputs") {
    ModelConfig cfg = tiny_cfg();
    DsaNet<float> model(cfg, 28);
    Tensor<float> seq1 = rand_seq<float>(cfg, 1, 29);
    Tensor<float> minip1 = rand_minip<float>(cfg, 1, 30);
    Tensor<float> seq2 = Tensor<float>::zeros({2, cfg.frames, 1, cfg.patch, cfg.patch});
    Tensor<float> minip2 = Tensor<float>::zeros({2, 1, cfg.patch, cfg.patch});
    for (int copy = 0; copy < 2; ++copy) {
        std::copy(seq1.values().begin(), seq1.values().end(),
                  seq2.values().begin() + copy * seq1.numel());
        std::copy(minip1.values().begin(), minip1.values().end(),
                  minip2.values().begin() + copy * minip1.numel());
    }
    Tape<float> t(false);
    ModelOutput<float> out = model.forward(t, seq2, minip2);
    const std::int64_t half = out.logits_full.numel() / 2;
    for (std::int64_t i = 0; i < half; ++i)
        REQUIRE(out.logits_full[i] == out.logits_full[half + i]);
}

TEST_CASE("minip-only ablation ignores the sequence entirely") {
    ModelConfig cfg = tiny_cfg();
    cfg.ablation = Ablation::MinipOnly;
    DsaNet<float> model(cfg, 31);
    Tensor<float> minip = rand_minip<float>(cfg, 1, 32);
    Tape<float> t(false);
    ModelOutput<float> a = model.forward(t, rand_seq<float>(cfg, 1, 33), minip);
    ModelOutput<float> b = model.forward(t, rand_seq<float>(cfg, 1, 34), minip);
    REQUIRE(a.logits_full.values() == b.logits_full.values());
    REQUIRE(a.logits_full.shape() == Shape{1, 3, 16, 16});
    // no temporal parameters registered in this variant
    REQUIRE(model.params().find("teb.lvl0.conv0.weight") == nullptr);
    REQUIRE(model.params().find("tf.layer0.pos") == nullptr);
}

TEST_CASE("sequence-only ablation ignores the minip input") {
    ModelConfig cfg = tiny_cfg();
    cfg.ablation = Ablation::SequenceOnly;
    DsaNet<float> model(cfg, 35);
    Tensor<float> seq = rand_seq<float>(cfg, 1, 36);
    Tape<float> t(false);
    ModelOutput<float> a = model.forward(t, seq, rand_minip<float>(cfg, 1, 37));
    ModelOutput<float> b = model.forward(t, seq, rand_minip<float>(cfg, 1, 38));
    REQUIRE(a.logits_full.values() == b.logits_full.values());
}

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_cfg();
    cfg.tf_heads = 5;  // does not divide 32
    REQUIRE_THROWS_AS((DsaNet<float>(cfg, 1)), ConfigError);
    ModelConfig bad = tiny_cfg();
    bad.levels = 6;
    REQUIRE_THROWS_AS((DsaNet<float>(bad, 1)), ConfigError);
    ModelConfig cfg16 = tiny_cfg();
    cfg16.levels = 5;  // 16/16 = 1x1 bottleneck, odd for the fusion module
    REQUIRE_THROWS_AS((DsaNet<float>(cfg16, 1)), ConfigError);
}

TEST_CASE("model config json round trip") {
    ModelConfig cfg = tiny_cfg();
    cfg.ablation = Ablation::SequenceOnly;
    nlohmann::json j = cfg;
    ModelConfig back = j.get<ModelConfig>();
    REQUIRE(back.base_channels == cfg.base_channels);
    REQUIRE(back.levels == cfg.levels);
    REQUIRE(back.frames == cfg.frames);
    REQUIRE(back.patch == cfg.patch);
    REQUIRE(back.ablation == cfg.ablation);
}

TEST_CASE("shape suite across config grid with normalized attention") {
    for (int base : {4, 8}) {
        for (int frames : {4, 8}) {
            for (int hw : {32, 64}) {
                ModelConfig cfg;
                cfg.base_channels = base;
                cfg.levels = 5;
                cfg.frames = frames;
                cfg.patch = hw;
                cfg.tf_layers = 2;
                DsaNet<float> model(cfg, 40);
                Tape<float> t(false);
                AttnProbe<float> probe;
                ModelOutput<float> out = model.forward(
                    t, rand_seq<float>(cfg, 1, 41), rand_minip<float>(cfg, 1, 42), &probe);
                REQUIRE(out.logits_full.shape() == Shape{1, 3, hw, hw});
                REQUIRE(out.logits_half.shape() == Shape{1, 3, hw / 2, hw / 2});
                REQUIRE(out.logits_quarter.shape() == Shape{1, 3, hw / 4, hw / 4});
                REQUIRE(probe.max_row_sum_err() < 1e-6);
            }
        }
    }
}
