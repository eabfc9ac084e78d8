#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "polytrace/adversary.hpp"

using namespace polytrace;
using ag::Var;

namespace {

Var<double> img(int b, int c, int s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t({b, c, s, s});
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return ag::leaf<double>(std::move(t), false);
}

}  // namespace

TEST_CASE("two scales on 64x64 input yield 8x8 and 4x4 maps") {
  DiscriminatorBank<double> bank(0.25, 2, 31);
  auto maps = bank.score(Modality::rgb, Domain::live, img(3, 3, 64, 1));
  REQUIRE(maps.size() == 2);
  CHECK(maps[0]->value.shape == std::vector<int>({3, 1, 8, 8}));
  CHECK(maps[1]->value.shape == std::vector<int>({3, 1, 4, 4}));
  auto dmaps = bank.score(Modality::dep, Domain::spoof, img(2, 1, 64, 2));
  CHECK(dmaps[0]->value.shape == std::vector<int>({2, 1, 8, 8}));
}

TEST_CASE("zero weights give zero score maps") {
  DiscriminatorBank<double> bank(0.25, 2, 32);
  nn::ParamSet<double> ps;
  bank.collect(ps);
  for (auto& [_, p] : ps.params) p->value.fill(0.0);
  auto maps = bank.score(Modality::rgb, Domain::live, img(2, 3, 64, 3));
  for (const auto& m : maps)
    for (auto v : m->value.data) CHECK(v == 0.0);
}

TEST_CASE("channel mismatch is rejected") {
  DiscriminatorBank<double> bank(0.25, 2, 33);
  CHECK_THROWS_AS(bank.score(Modality::rgb, Domain::live, img(1, 1, 64, 4)),
                  ContractError);
  CHECK_THROWS_AS(bank.score(Modality::dep, Domain::live, img(1, 3, 64, 5)),
                  ContractError);
}

TEST_CASE("patch property: a far-away pixel leaves a score cell unchanged") {
  DiscriminatorBank<double> bank(0.25, 2, 34);
  auto x = img(1, 3, 64, 6);
  auto maps0 = bank.score(Modality::rgb, Domain::live, x);
  const double corner = maps0[0]->value.at(0, 0, 7, 7);
  const double near = maps0[0]->value.at(0, 0, 0, 0);

  // perturb input pixel (0,0); receptive field of the 7-layer stack is far
  // smaller than the 56px offset to cell (7,7)
  auto x2 = ag::leaf<double>(x->value, false);
  x2->value.at(0, 0, 0, 0) = -x2->value.at(0, 0, 0, 0) + 0.5;
  auto maps1 = bank.score(Modality::rgb, Domain::live, x2);
  CHECK(maps1[0]->value.at(0, 0, 7, 7) == corner);
  CHECK(maps1[0]->value.at(0, 0, 0, 0) != near);
}

TEST_CASE("domain separation: mutating live weights leaves spoof scores fixed") {
  DiscriminatorBank<double> bank(0.25, 2, 35);
  auto x = img(2, 3, 64, 7);
  auto before = bank.score(Modality::rgb, Domain::spoof, x);
  Tensor<double> b0 = before[0]->value;

  nn::ParamSet<double> live_ps;
  bank.collect_domain(live_ps, Domain::live);
  CHECK(!live_ps.params.empty());
  for (auto& [_, p] : live_ps.params)
    for (auto& v : p->value.data) v += 0.37;

  auto after = bank.score(Modality::rgb, Domain::spoof, x);
  CHECK(max_abs_diff(b0, after[0]->value) == 0.0);

  auto live_after = bank.score(Modality::rgb, Domain::live, x);
  (void)live_after;  // changed weights must still run
}

TEST_CASE("reduced two-layer discriminator passes the finite-difference check") {
  Rng rng(36);
  auto x = ag::leaf<double>(gradcheck::random_tensor({1, 3, 8, 8}, rng, 0.5), true);
  nn::Conv2d<double> c1(3, 2, 3, 2, 1, true, rng);
  nn::Conv2d<double> c2(2, 1, 3, 2, 1, true, rng);
  std::vector<Var<double>> inputs = {x, c1.w, c1.b, c2.w, c2.b};
  auto res = gradcheck::check(
      [&] {
        auto y = c2.forward(ag::leaky_relu(c1.forward(x), 0.2));
        return ag::mean_sq_shift(y, 1.0);
      },
      inputs);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("batch dimension is preserved per map") {
  DiscriminatorBank<double> bank(0.25, 2, 37);
  for (int b : {1, 3, 5}) {
    auto maps = bank.score(Modality::dep, Domain::live, img(b, 1, 64, 8 + b));
    for (const auto& m : maps) CHECK(m->value.dim(0) == b);
  }
}
