#pragma once

// Two-stream disentanglement network. Each modality runs a ResNet-50-style
// encoder (stem + first three stages), the streams are recalibrated by a
// fusion block after every stage, and per-modality decoders emit additive
// spoof traces through a scaled tanh. Live counterparts follow from
// input = live + trace.

#include <array>
#include <string>
#include <vector>

#include "polytrace/fusion.hpp"
#include "polytrace/nn.hpp"

namespace polytrace {

enum class FusionMode { full, concat, none };
enum class ModalityMode { both, rgb, dep };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::full: return "full";
    case FusionMode::concat: return "concat";
    default: return "none";
  }
}
inline const char* to_string(ModalityMode m) {
  switch (m) {
    case ModalityMode::both: return "both";
    case ModalityMode::rgb: return "rgb";
    default: return "dep";
  }
}
inline FusionMode fusion_mode_from(const std::string& s) {
  if (s == "full") return FusionMode::full;
  if (s == "concat") return FusionMode::concat;
  if (s == "none") return FusionMode::none;
  throw ConfigError("unknown fusion mode: " + s);
}
inline ModalityMode modality_mode_from(const std::string& s) {
  if (s == "both") return ModalityMode::both;
  if (s == "rgb") return ModalityMode::rgb;
  if (s == "dep") return ModalityMode::dep;
  throw ConfigError("unknown modality mode: " + s);
}

struct GeneratorConfig {
  double width_mult = 0.25;
  FusionMode fusion = FusionMode::full;
  ModalityMode modality = ModalityMode::both;
  int reduction = 8;       // fusion MLP reduction ratio
  int decoder_blocks = 3;  // residual blocks at the bottleneck
};

template <class R>
struct GeneratorOutput {
  ag::Var<R> input_rgb, input_dep;
  ag::Var<R> trace_rgb, trace_dep;    // [B,3,H,W], [B,1,H,W], range [-2,2]
  ag::Var<R> live_rgb, live_dep;      // clamp(input - trace, -1, 1)
  ag::Var<R> logit_rgb, logit_dep;    // [B,1] intermediate head logits
  ag::Var<R> center_rgb, center_dep;  // pooled 3rd-upsampling features [B,D]
};

// ---------------------------------------------------------------------------

template <class R>
struct Encoder {
  nn::Conv2d<R> stem;
  nn::BatchNorm2d<R> stem_bn;
  std::vector<nn::Bottleneck<R>> stage1, stage2, stage3;

  Encoder() = default;
  Encoder(int in_ch, double mult, Rng& rng) {
    const int c64 = scaled_ch(64, mult), c128 = scaled_ch(128, mult);
    const int c256 = scaled_ch(256, mult), c512 = scaled_ch(512, mult);
    const int c1024 = scaled_ch(1024, mult);
    stem = nn::Conv2d<R>(in_ch, c64, 7, 2, 3, false, rng);
    stem_bn = nn::BatchNorm2d<R>(c64);
    stage1.emplace_back(c64, c64, c256, 1, rng);
    for (int i = 1; i < 3; ++i) stage1.emplace_back(c256, c64, c256, 1, rng);
    stage2.emplace_back(c256, c128, c512, 2, rng);
    for (int i = 1; i < 4; ++i) stage2.emplace_back(c512, c128, c512, 1, rng);
    stage3.emplace_back(c512, c256, c1024, 2, rng);
    for (int i = 1; i < 6; ++i) stage3.emplace_back(c1024, c256, c1024, 1, rng);
  }

  ag::Var<R> forward_stem(const ag::Var<R>& x, bool training) {
    auto y = ag::relu(stem_bn.forward(stem.forward(x), training));
    return ag::maxpool2d(y, 3, 2, 1);
  }

  static ag::Var<R> run_stage(std::vector<nn::Bottleneck<R>>& stage, const ag::Var<R>& x,
                              bool training) {
    auto y = x;
    for (auto& b : stage) y = b.forward(y, training);
    return y;
  }

  void collect(nn::ParamSet<R>& ps, const std::string& p) {
    stem.collect(ps, p + ".stem");
    stem_bn.collect(ps, p + ".stem_bn");
    for (std::size_t i = 0; i < stage1.size(); ++i)
      stage1[i].collect(ps, p + ".s1b" + std::to_string(i));
    for (std::size_t i = 0; i < stage2.size(); ++i)
      stage2[i].collect(ps, p + ".s2b" + std::to_string(i));
    for (std::size_t i = 0; i < stage3.size(); ++i)
      stage3[i].collect(ps, p + ".s3b" + std::to_string(i));
  }
};

template <class R>
struct Decoder {
  std::vector<nn::Bottleneck<R>> res;
  nn::ConvTranspose2d<R> up1, up2, up3, up4;
  nn::BatchNorm2d<R> up1_bn, up2_bn, up3_bn, up4_bn;
  nn::Conv2d<R> merge1, merge2;
  nn::BatchNorm2d<R> merge1_bn, merge2_bn;
  nn::Conv2d<R> trace_conv;

  Decoder() = default;
  Decoder(int out_ch, double mult, int n_res, Rng& rng) {
    const int c1024 = scaled_ch(1024, mult), c512 = scaled_ch(512, mult);
    const int c256 = scaled_ch(256, mult), c128 = scaled_ch(128, mult);
    const int c64 = scaled_ch(64, mult), c32 = scaled_ch(32, mult);
    for (int i = 0; i < n_res; ++i) res.emplace_back(c1024, c256, c1024, 1, rng);
    up1 = nn::ConvTranspose2d<R>(c1024, c256, 4, 2, 1, false, rng);
    up1_bn = nn::BatchNorm2d<R>(c256);
    merge1 = nn::Conv2d<R>(c256 + c512, c256, 1, 1, 0, false, rng);
    merge1_bn = nn::BatchNorm2d<R>(c256);
    up2 = nn::ConvTranspose2d<R>(c256, c128, 4, 2, 1, false, rng);
    up2_bn = nn::BatchNorm2d<R>(c128);
    merge2 = nn::Conv2d<R>(c128 + c256, c128, 1, 1, 0, false, rng);
    merge2_bn = nn::BatchNorm2d<R>(c128);
    up3 = nn::ConvTranspose2d<R>(c128, c64, 4, 2, 1, false, rng);
    up3_bn = nn::BatchNorm2d<R>(c64);
    up4 = nn::ConvTranspose2d<R>(c64, c32, 4, 2, 1, false, rng);
    up4_bn = nn::BatchNorm2d<R>(c32);
    trace_conv = nn::Conv2d<R>(c32, out_ch, 3, 1, 1, true, rng);
    // start with visible trace amplitude: the synthesis/consistency loop
    // needs nonzero traces to bootstrap at short schedules
    for (auto& v : trace_conv.w->value.data) v *= R(3);
  }

  // bottleneck at /16 with skips from /8 and /4; center features are pooled
  // from the 3rd up-sampling output, after both skip connections.
  struct Out {
    ag::Var<R> trace, center;
  };
  Out forward(const ag::Var<R>& bottleneck, const ag::Var<R>& skip8,
              const ag::Var<R>& skip4, bool training) {
    auto d = bottleneck;
    for (auto& b : res) d = b.forward(d, training);
    d = ag::relu(up1_bn.forward(up1.forward(d), training));
    d = ag::relu(merge1_bn.forward(merge1.forward(ag::concat_channels(d, skip8)), training));
    d = ag::relu(up2_bn.forward(up2.forward(d), training));
    d = ag::relu(merge2_bn.forward(merge2.forward(ag::concat_channels(d, skip4)), training));
    auto d3 = ag::relu(up3_bn.forward(up3.forward(d), training));
    Out out;
    out.center = ag::global_avgpool(d3);
    auto d4 = ag::relu(up4_bn.forward(up4.forward(d3), training));
    out.trace = ag::tanh_scaled(trace_conv.forward(d4), R(2));
    return out;
  }

  void collect(nn::ParamSet<R>& ps, const std::string& p) {
    for (std::size_t i = 0; i < res.size(); ++i)
      res[i].collect(ps, p + ".res" + std::to_string(i));
    up1.collect(ps, p + ".up1");
    up1_bn.collect(ps, p + ".up1_bn");
    merge1.collect(ps, p + ".merge1");
    merge1_bn.collect(ps, p + ".merge1_bn");
    up2.collect(ps, p + ".up2");
    up2_bn.collect(ps, p + ".up2_bn");
    merge2.collect(ps, p + ".merge2");
    merge2_bn.collect(ps, p + ".merge2_bn");
    up3.collect(ps, p + ".up3");
    up3_bn.collect(ps, p + ".up3_bn");
    up4.collect(ps, p + ".up4");
    up4_bn.collect(ps, p + ".up4_bn");
    trace_conv.collect(ps, p + ".trace");
  }
};

// ---------------------------------------------------------------------------

template <class R>
struct Generator {
  GeneratorConfig cfg;
  Encoder<R> enc_rgb, enc_dep;
  std::array<FusionBlock<R>, 3> fuse_full;
  std::array<ConcatFusion<R>, 3> fuse_concat;
  Decoder<R> dec_rgb, dec_dep;
  nn::Linear<R> head_rgb, head_dep;

  Generator() = default;
  // Every component draws from its own seed stream, so weights of shared
  // components are identical across fusion/modality modes at equal seed.
  Generator(const GeneratorConfig& c, std::uint64_t seed) : cfg(c) {
    {
      Rng r(mix_seed(seed, "generator.encoder_rgb"));
      enc_rgb = Encoder<R>(3, cfg.width_mult, r);
    }
    {
      Rng r(mix_seed(seed, "generator.encoder_dep"));
      enc_dep = Encoder<R>(1, cfg.width_mult, r);
    }
    const int stage_ch[3] = {scaled_ch(256, cfg.width_mult), scaled_ch(512, cfg.width_mult),
                             scaled_ch(1024, cfg.width_mult)};
    if (cfg.fusion == FusionMode::full) {
      Rng r(mix_seed(seed, "generator.fusion_full"));
      for (int i = 0; i < 3; ++i) fuse_full[i] = FusionBlock<R>(stage_ch[i], cfg.reduction, r);
    } else if (cfg.fusion == FusionMode::concat) {
      Rng r(mix_seed(seed, "generator.fusion_concat"));
      for (int i = 0; i < 3; ++i) fuse_concat[i] = ConcatFusion<R>(stage_ch[i], r);
    }
    {
      Rng r(mix_seed(seed, "generator.decoder_rgb"));
      dec_rgb = Decoder<R>(3, cfg.width_mult, cfg.decoder_blocks, r);
    }
    {
      Rng r(mix_seed(seed, "generator.decoder_dep"));
      dec_dep = Decoder<R>(1, cfg.width_mult, cfg.decoder_blocks, r);
    }
    {
      Rng r(mix_seed(seed, "generator.heads"));
      head_rgb = nn::Linear<R>(stage_ch[2], 1, r);
      head_dep = nn::Linear<R>(stage_ch[2], 1, r);
    }
  }

  bool uses_rgb() const { return cfg.modality != ModalityMode::dep; }
  bool uses_dep() const { return cfg.modality != ModalityMode::rgb; }
  bool fused() const { return cfg.modality == ModalityMode::both && cfg.fusion != FusionMode::none; }

  static void check_input(const Tensor<R>& t, int ch, const char* name) {
    require(t.rank() == 4 && t.dim(1) == ch, std::string(name) + ": bad shape");
    require(t.dim(2) == t.dim(3) && t.dim(2) >= 32 && is_pow2(t.dim(2)),
            std::string(name) + ": spatial size must be a power of two >= 32");
  }

  GeneratorOutput<R> forward(const Tensor<R>& rgb, const Tensor<R>& dep, bool training) {
    GeneratorOutput<R> out;
    if (uses_rgb()) {
      check_input(rgb, 3, "rgb input");
      out.input_rgb = ag::constant(rgb);
    }
    if (uses_dep()) {
      check_input(dep, 1, "depth input");
      out.input_dep = ag::constant(dep);
    }
    if (uses_rgb() && uses_dep())
      require(rgb.dim(0) == dep.dim(0) && rgb.dim(2) == dep.dim(2) &&
                  rgb.dim(3) == dep.dim(3),
              "rgb/depth batch shape mismatch");

    ag::Var<R> e_rgb, e_dep;
    ag::Var<R> skip4_rgb, skip4_dep, skip8_rgb, skip8_dep;

    if (uses_rgb()) e_rgb = enc_rgb.forward_stem(out.input_rgb, training);
    if (uses_dep()) e_dep = enc_dep.forward_stem(out.input_dep, training);

    for (int stage = 0; stage < 3; ++stage) {
      if (uses_rgb())
        e_rgb = Encoder<R>::run_stage(stage == 0   ? enc_rgb.stage1
                                      : stage == 1 ? enc_rgb.stage2
                                                   : enc_rgb.stage3,
                                      e_rgb, training);
      if (uses_dep())
        e_dep = Encoder<R>::run_stage(stage == 0   ? enc_dep.stage1
                                      : stage == 1 ? enc_dep.stage2
                                                   : enc_dep.stage3,
                                      e_dep, training);
      if (fused()) {
        if (cfg.fusion == FusionMode::full)
          std::tie(e_rgb, e_dep) = fuse_full[stage].forward(e_rgb, e_dep);
        else
          std::tie(e_rgb, e_dep) = fuse_concat[stage].forward(e_rgb, e_dep);
      }
      // skips carry post-fusion features
      if (stage == 0) {
        skip4_rgb = e_rgb;
        skip4_dep = e_dep;
      } else if (stage == 1) {
        skip8_rgb = e_rgb;
        skip8_dep = e_dep;
      }
    }

    if (uses_rgb()) {
      out.logit_rgb = head_rgb.forward(ag::global_avgpool(e_rgb));
      auto d = dec_rgb.forward(e_rgb, skip8_rgb, skip4_rgb, training);
      out.trace_rgb = d.trace;
      out.center_rgb = d.center;
      out.live_rgb = ag::clamp(ag::sub(out.input_rgb, out.trace_rgb), R(-1), R(1));
    }
    if (uses_dep()) {
      out.logit_dep = head_dep.forward(ag::global_avgpool(e_dep));
      auto d = dec_dep.forward(e_dep, skip8_dep, skip4_dep, training);
      out.trace_dep = d.trace;
      out.center_dep = d.center;
      out.live_dep = ag::clamp(ag::sub(out.input_dep, out.trace_dep), R(-1), R(1));
    }
    return out;
  }

  void collect(nn::ParamSet<R>& ps) {
    if (uses_rgb()) enc_rgb.collect(ps, "gen.enc_rgb");
    if (uses_dep()) enc_dep.collect(ps, "gen.enc_dep");
    if (fused()) {
      for (int i = 0; i < 3; ++i) {
        if (cfg.fusion == FusionMode::full)
          fuse_full[i].collect(ps, "gen.fuse" + std::to_string(i));
        else
          fuse_concat[i].collect(ps, "gen.cfuse" + std::to_string(i));
      }
    }
    if (uses_rgb()) {
      dec_rgb.collect(ps, "gen.dec_rgb");
      head_rgb.collect(ps, "gen.head_rgb");
    }
    if (uses_dep()) {
      dec_dep.collect(ps, "gen.dec_dep");
      head_dep.collect(ps, "gen.head_dep");
    }
  }
};

}  // namespace polytrace
