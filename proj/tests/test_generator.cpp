#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "polytrace/generator.hpp"

using namespace polytrace;

namespace {

Tensor<double> rand_img(int b, int c, int s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t({b, c, s, s});
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

GeneratorConfig small_cfg(FusionMode f = FusionMode::full,
                          ModalityMode m = ModalityMode::both) {
  GeneratorConfig c;
  c.width_mult = 0.125;
  c.fusion = f;
  c.modality = m;
  return c;
}

}  // namespace

TEST_CASE("forward emits contract shapes on a 64x64 batch of 4") {
  Generator<double> gen(small_cfg(), 7);
  auto rgb = rand_img(4, 3, 64, 1);
  auto dep = rand_img(4, 1, 64, 2);
  auto out = gen.forward(rgb, dep, false);
  CHECK(out.trace_rgb->value.shape == std::vector<int>({4, 3, 64, 64}));
  CHECK(out.trace_dep->value.shape == std::vector<int>({4, 1, 64, 64}));
  CHECK(out.logit_rgb->value.shape == std::vector<int>({4, 1}));
  CHECK(out.logit_dep->value.shape == std::vector<int>({4, 1}));
  CHECK(out.live_rgb->value.shape == rgb.shape);
  CHECK(out.live_dep->value.shape == dep.shape);
  // trace range bounded by the scaled tanh
  for (auto v : out.trace_rgb->value.data) {
    CHECK(v >= -2.0);
    CHECK(v <= 2.0);
  }
}

TEST_CASE("live + trace reproduces the input wherever no clamping occurred") {
  Generator<double> gen(small_cfg(), 8);
  auto rgb = rand_img(2, 3, 32, 3);
  auto dep = rand_img(2, 1, 32, 4);
  auto out = gen.forward(rgb, dep, false);
  for (std::int64_t i = 0; i < rgb.numel(); ++i) {
    const double resid = rgb[i] - out.trace_rgb->value[i];
    if (resid > -1.0 && resid < 1.0)
      CHECK(std::abs(out.live_rgb->value[i] + out.trace_rgb->value[i] - rgb[i]) < 1e-12);
    else
      CHECK(std::abs(out.live_rgb->value[i]) == 1.0);
  }
}

TEST_CASE("rgb-only mode leaves depth outputs absent") {
  Generator<double> gen(small_cfg(FusionMode::none, ModalityMode::rgb), 9);
  auto rgb = rand_img(2, 3, 32, 5);
  auto out = gen.forward(rgb, Tensor<double>(), false);
  CHECK(out.trace_rgb);
  CHECK_FALSE(out.trace_dep);
  CHECK_FALSE(out.live_dep);
  CHECK_FALSE(out.logit_dep);
}

TEST_CASE("dep-only output is invariant to rgb contents") {
  Generator<double> gen(small_cfg(FusionMode::none, ModalityMode::dep), 10);
  auto dep = rand_img(2, 1, 32, 6);
  auto out1 = gen.forward(rand_img(2, 3, 32, 7), dep, false);
  auto out2 = gen.forward(rand_img(2, 3, 32, 8), dep, false);
  CHECK(max_abs_diff(out1.trace_dep->value, out2.trace_dep->value) == 0.0);
  CHECK(max_abs_diff(out1.logit_dep->value, out2.logit_dep->value) == 0.0);
}

TEST_CASE("fusion modes produce pairwise different outputs at equal seed") {
  auto rgb = rand_img(2, 3, 32, 11);
  auto dep = rand_img(2, 1, 32, 12);
  Generator<double> full(small_cfg(FusionMode::full), 77);
  Generator<double> concat(small_cfg(FusionMode::concat), 77);
  Generator<double> none(small_cfg(FusionMode::none), 77);
  auto a = full.forward(rgb, dep, false);
  auto b = concat.forward(rgb, dep, false);
  auto c = none.forward(rgb, dep, false);
  CHECK(max_abs_diff(a.trace_rgb->value, b.trace_rgb->value) > 0.0);
  CHECK(max_abs_diff(a.trace_rgb->value, c.trace_rgb->value) > 0.0);
  CHECK(max_abs_diff(b.trace_rgb->value, c.trace_rgb->value) > 0.0);
  // shared components are seeded identically: encoders start equal
  CHECK(max_abs_diff(full.enc_rgb.stem.w->value, none.enc_rgb.stem.w->value) == 0.0);
}

TEST_CASE("same seed and input give bit-identical outputs") {
  auto rgb = rand_img(2, 3, 32, 13);
  auto dep = rand_img(2, 1, 32, 14);
  Generator<double> g1(small_cfg(), 123);
  Generator<double> g2(small_cfg(), 123);
  auto o1 = g1.forward(rgb, dep, false);
  auto o2 = g2.forward(rgb, dep, false);
  CHECK(max_abs_diff(o1.trace_rgb->value, o2.trace_rgb->value) == 0.0);
  CHECK(max_abs_diff(o1.trace_dep->value, o2.trace_dep->value) == 0.0);
  CHECK(max_abs_diff(o1.logit_rgb->value, o2.logit_rgb->value) == 0.0);
}

TEST_CASE("non-conforming input sizes are rejected") {
  Generator<double> gen(small_cfg(), 15);
  CHECK_THROWS_AS(gen.forward(rand_img(1, 3, 16, 1), rand_img(1, 1, 16, 2), false),
                  ContractError);
  Tensor<double> odd({1, 3, 48, 48}, 0.0);
  Tensor<double> oddd({1, 1, 48, 48}, 0.0);
  CHECK_THROWS_AS(gen.forward(odd, oddd, false), ContractError);
}

TEST_CASE("center features come from the post-skip upsampling stage") {
  Generator<double> gen(small_cfg(), 16);
  auto out = gen.forward(rand_img(2, 3, 32, 17), rand_img(2, 1, 32, 18), false);
  // pooled feature width equals the decoder's 3rd-stage channel count
  CHECK(out.center_rgb->value.shape ==
        std::vector<int>({2, scaled_ch(64, 0.125)}));
  CHECK(out.center_dep->value.shape ==
        std::vector<int>({2, scaled_ch(64, 0.125)}));
}
