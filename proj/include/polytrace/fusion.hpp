#pragma once

// Cross-modality feature recalibration. Channel gates select informative
// channels of each stream from the jointly pooled descriptor, gated features
// are exchanged additively, and a two-way spatial softmax re-weights the
// recalibrated maps. Both streams stay separate; nothing collapses to a
// single fused map.

#include <utility>

#include "polytrace/nn.hpp"

namespace polytrace {

using ag::Var;

// Intermediates of one fusion pass, kept for inspection and tests.
template <class R>
struct FusionTensors {
  Var<R> gate0, gate1;      // channel gates in (0,1), [B,C]
  Var<R> gated0, gated1;    // gated features
  Var<R> rec0, rec1;        // cross-recalibrated features
  Var<R> maps;              // [B,2,h,w], softmax over the two maps
  Var<R> out0, out1;        // aggregated outputs
};

// Parameters are organized as two per-modality halves. Each half's MLP and
// spatial row read the concatenated descriptor with its own modality first,
// which makes fuse(f_a, f_b, {A,B}) == swap(fuse(f_b, f_a, {B,A})) exact.
template <class R>
struct FusionBlock {
  int channels = 0;
  int hidden = 0;
  nn::Linear<R> mlp1[2];     // 2C -> hidden
  nn::Linear<R> mlp2[2];     // hidden -> C
  nn::Conv2d<R> spatial[2];  // 1x1, 2C -> 1 map

  FusionBlock() = default;
  FusionBlock(int c, int reduction, Rng& rng) : channels(c) {
    hidden = std::max(1, c / reduction);
    for (int m = 0; m < 2; ++m) {
      mlp1[m] = nn::Linear<R>(2 * c, hidden, rng);
      mlp2[m] = nn::Linear<R>(hidden, c, rng);
      spatial[m] = nn::Conv2d<R>(2 * c, 1, 1, 1, 0, true, rng);
    }
  }

  FusionTensors<R> forward_detailed(const Var<R>& f0, const Var<R>& f1) const {
    require(f0->value.shape == f1->value.shape, "fuse: shape mismatch");
    require(f0->value.shape.size() == 4 && f0->value.shape[1] == channels,
            "fuse: channel count mismatch");

    FusionTensors<R> t;
    auto p0 = ag::global_avgpool(f0);
    auto p1 = ag::global_avgpool(f1);
    t.gate0 = ag::sigmoid(
        mlp2[0].forward(ag::relu(mlp1[0].forward(ag::concat_cols(p0, p1)))));
    t.gate1 = ag::sigmoid(
        mlp2[1].forward(ag::relu(mlp1[1].forward(ag::concat_cols(p1, p0)))));

    t.gated0 = ag::channel_scale(f0, t.gate0);
    t.gated1 = ag::channel_scale(f1, t.gate1);

    // Each stream borrows the other's gated feature.
    t.rec0 = ag::add(t.gated1, f0);
    t.rec1 = ag::add(t.gated0, f1);

    auto s0 = spatial[0].forward(ag::concat_channels(t.rec0, t.rec1));
    auto s1 = spatial[1].forward(ag::concat_channels(t.rec1, t.rec0));
    t.maps = ag::softmax_channels(ag::concat_channels(s0, s1));

    t.out0 = ag::spatial_scale(t.rec0, ag::slice_channels(t.maps, 0, 1));
    t.out1 = ag::spatial_scale(t.rec1, ag::slice_channels(t.maps, 1, 1));
    return t;
  }

  // Returns the pair of enhanced per-modality features, same shapes as input.
  std::pair<Var<R>, Var<R>> forward(const Var<R>& f0, const Var<R>& f1) const {
    auto t = forward_detailed(f0, f1);
    return {t.out0, t.out1};
  }

  void collect(nn::ParamSet<R>& ps, const std::string& p) {
    static const char* half[2] = {".m0", ".m1"};
    for (int m = 0; m < 2; ++m) {
      mlp1[m].collect(ps, p + half[m] + ".mlp1");
      mlp2[m].collect(ps, p + half[m] + ".mlp2");
      spatial[m].collect(ps, p + half[m] + ".spatial");
    }
  }
};

// Table-4 style "Feature Concat." baseline: per-modality 1x1 convolution over
// the concatenated streams. Initialized near identity so early training
// behaves like independent branches with a learnable cross term.
template <class R>
struct ConcatFusion {
  int channels = 0;
  nn::Conv2d<R> mix[2];  // 1x1, 2C -> C

  ConcatFusion() = default;
  ConcatFusion(int c, Rng& rng) : channels(c) {
    for (int m = 0; m < 2; ++m) {
      mix[m] = nn::Conv2d<R>(2 * c, c, 1, 1, 0, true, rng);
      for (auto& v : mix[m].w->value.data) v *= R(0.1);
      for (int oc = 0; oc < c; ++oc) mix[m].w->value[(oc * 2 * c) + oc] += R(1);
    }
  }

  std::pair<Var<R>, Var<R>> forward(const Var<R>& f0, const Var<R>& f1) const {
    require(f0->value.shape == f1->value.shape, "concat fusion: shape mismatch");
    auto o0 = mix[0].forward(ag::concat_channels(f0, f1));
    auto o1 = mix[1].forward(ag::concat_channels(f1, f0));
    return {o0, o1};
  }

  void collect(nn::ParamSet<R>& ps, const std::string& p) {
    mix[0].collect(ps, p + ".m0.mix");
    mix[1].collect(ps, p + ".m1.mix");
  }
};

}  // namespace polytrace
