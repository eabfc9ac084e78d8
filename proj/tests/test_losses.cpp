#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "polytrace/losses.hpp"

using namespace polytrace;
using ag::Var;
using gradcheck::random_tensor;

namespace {

Var<double> cvar(std::vector<int> shape, double fill, bool rg = false) {
  return ag::leaf<double>(Tensor<double>(std::move(shape), fill), rg);
}

Var<double> rvar(std::vector<int> shape, std::uint64_t seed, double scale = 1.0,
                 bool rg = true) {
  Rng rng(seed);
  return ag::leaf<double>(gradcheck::random_tensor(std::move(shape), rng, scale), rg);
}

}  // namespace

TEST_CASE("generator adversarial loss values") {
  auto zeros = cvar({2, 1, 4, 4}, 0.0);
  auto half = cvar({2, 1, 4, 4}, 0.5);
  auto ones = cvar({2, 1, 2, 2}, 1.0);
  CHECK(loss_adv_generator<double>({zeros}, {zeros})->value[0] == 0.0);
  CHECK(loss_adv_generator<double>({half}, {})->value[0] == doctest::Approx(0.25));
  CHECK(loss_adv_generator<double>({ones}, {ones})->value[0] == doctest::Approx(1.0));
  CHECK_THROWS_AS(loss_adv_generator<double>({}, {}), ContractError);
}

TEST_CASE("discriminator adversarial loss values") {
  auto zeros = cvar({2, 1, 4, 4}, 0.0);
  auto half = cvar({2, 1, 4, 4}, 0.5);
  auto ones = cvar({2, 1, 4, 4}, 1.0);
  // perfect: recon->1, real live->0, synth->1, real spoof->0
  CHECK(loss_adv_discriminator<double>({zeros}, {ones}, {zeros}, {ones})->value[0] ==
        0.0);
  CHECK(loss_adv_discriminator<double>({half}, {half}, {half}, {half})->value[0] ==
        doctest::Approx(1.0));
  CHECK(loss_adv_discriminator<double>({zeros}, {zeros}, {zeros}, {zeros})->value[0] ==
        doctest::Approx(2.0));
}

TEST_CASE("lsgan pair: constant-score discriminator optimum sits at 1/2") {
  // one "parameter": the constant score theta emitted for every input
  double best_theta = -1, best_loss = 1e9;
  for (int k = 0; k <= 100; ++k) {
    const double theta = k / 100.0;
    auto s = cvar({2, 1, 2, 2}, theta);
    const double l =
        loss_adv_discriminator<double>({s}, {s}, {s}, {s})->value[0];
    if (l < best_loss) {
      best_loss = l;
      best_theta = theta;
    }
  }
  CHECK(best_theta == doctest::Approx(0.5));
}

TEST_CASE("adversarial losses pass the finite-difference check") {
  auto a = rvar({1, 1, 3, 3}, 41);
  auto b = rvar({1, 1, 2, 2}, 42);
  CHECK(gradcheck::check([&] { return loss_adv_generator<double>({a}, {b}); }, {a, b})
            .max_rel_err < 1e-3);
  auto c = rvar({1, 1, 3, 3}, 43);
  auto d = rvar({1, 1, 3, 3}, 44);
  CHECK(gradcheck::check(
            [&] { return loss_adv_discriminator<double>({a}, {b}, {c}, {d}); },
            {a, b, c, d})
            .max_rel_err < 1e-3);
}

TEST_CASE("identity loss: reduction, zero case, frozen embedder") {
  // declared reduction: mean over elements; an all-ones difference gives 1
  auto e1 = cvar({2, 8}, 0.0, true);
  auto e2 = cvar({2, 8}, 1.0);
  CHECK(ag::mse(e1, e2)->value[0] == doctest::Approx(1.0));

  IdentityEmbedder<double> emb(5);
  auto x = rvar({2, 3, 32, 32}, 45, 0.5, false);
  CHECK(loss_identity(emb, x, x)->value[0] == 0.0);

  // embedder params stay frozen: gradient flows to the recon input only
  nn::ParamSet<double> ps;
  emb.collect(ps);
  const auto digest_before = ps.digest();
  auto recon = rvar({2, 3, 32, 32}, 46, 0.5, true);
  auto loss = loss_identity(emb, x, recon);
  ag::backward(loss);
  CHECK(recon->grad_alloc);
  for (auto& [_, p] : ps.params) CHECK_FALSE(p->grad_alloc);
  CHECK(ps.digest() == digest_before);
}

TEST_CASE("identity loss gradient through the embedder") {
  // small instance and step keep finite differences away from relu kinks
  IdentityEmbedder<double> emb(6);
  auto x = rvar({1, 3, 8, 8}, 47, 0.5, false);
  auto recon = rvar({1, 3, 8, 8}, 48, 0.5, true);
  auto res = gradcheck::check([&] { return loss_identity(emb, x, recon); }, {recon},
                              1e-5);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("intensity loss values") {
  const double lam = 1e-4;
  SUBCASE("live zeros") {
    auto tr = cvar({1, 3, 2, 2}, 0.0, true);
    auto td = cvar({1, 1, 2, 2}, 0.0, true);
    CHECK(loss_intensity(tr, td, {0}, lam)->value[0] == 0.0);
  }
  SUBCASE("live constant 0.5") {
    auto tr = cvar({1, 3, 2, 2}, 0.5, true);
    auto td = cvar({1, 1, 2, 2}, 0.5, true);
    CHECK(loss_intensity(tr, td, {0}, lam)->value[0] == doctest::Approx(0.5));
  }
  SUBCASE("spoof constant 0.5") {
    auto tr = cvar({1, 3, 2, 2}, 0.5, true);
    auto td = cvar({1, 1, 2, 2}, 0.5, true);
    CHECK(loss_intensity(tr, td, {1}, lam)->value[0] == doctest::Approx(5e-5));
  }
  SUBCASE("spoof-only batch, constant 1") {
    auto tr = cvar({2, 3, 2, 2}, 1.0, true);
    auto td = cvar({2, 1, 2, 2}, 1.0, true);
    CHECK(loss_intensity(tr, td, {1, 1}, lam)->value[0] == doctest::Approx(1e-4));
  }
  SUBCASE("mixed batch adds group means") {
    auto tr = ag::leaf<double>(Tensor<double>({2, 3, 1, 1}), true);
    auto td = ag::leaf<double>(Tensor<double>({2, 1, 1, 1}), true);
    tr->value.data = {0.4, 0.4, 0.4, -0.8, 0.8, 0.8};
    td->value.data = {0.4, 0.8};
    CHECK(loss_intensity(tr, td, {0, 1}, lam)->value[0] ==
          doctest::Approx(0.4 + lam * 0.8));
  }
  SUBCASE("gradients") {
    auto tr = rvar({3, 3, 2, 2}, 49, 0.5);
    auto td = rvar({3, 1, 2, 2}, 50, 0.5);
    auto res = gradcheck::check(
        [&] { return loss_intensity(tr, td, {0, 1, 0}, lam); }, {tr, td});
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("center loss values and update rule") {
  SUBCASE("feature equals its center: zero loss, center fixed") {
    CenterState<double> st;
    st.center[0][0] = Tensor<double>({2});
    st.center[0][0].data = {0.5, -0.5};
    st.ready[0][0] = true;
    auto x = ag::leaf<double>(Tensor<double>({1, 2}), true);
    x->value.data = {0.5, -0.5};
    auto l = loss_center_modality(x, {0}, st, 0);
    CHECK(l->value[0] == 0.0);
    update_centers(x->value, {0}, st, 0);
    CHECK(st.center[0][0][0] == 0.5);
    CHECK(st.center[0][0][1] == -0.5);
  }
  SUBCASE("single sample x=(1,0), c=(0,0): one-modality loss is 1/2") {
    CenterState<double> st;
    st.center[0][1] = Tensor<double>({2}, 0.0);
    st.ready[0][1] = true;
    auto x = ag::leaf<double>(Tensor<double>({1, 2}), true);
    x->value.data = {1.0, 0.0};
    CHECK(loss_center_modality(x, {1}, st, 0)->value[0] == doctest::Approx(0.5));
  }
  SUBCASE("update with rate 1 and one sample moves the center onto it") {
    CenterState<double> st;
    st.update_rate = 1.0;
    st.center[1][0] = Tensor<double>({3});
    st.center[1][0].data = {0.2, -0.7, 0.9};
    st.ready[1][0] = true;
    Tensor<double> x({1, 3});
    x.data = {-0.3, 0.4, 0.1};
    update_centers(x, {0}, st, 1);
    for (int j = 0; j < 3; ++j) CHECK(st.center[1][0][j] == doctest::Approx(x[j]));
  }
  SUBCASE("rate 1 on a single-class batch lands on the batch mean") {
    CenterState<double> st;
    st.update_rate = 1.0;
    st.center[0][1] = Tensor<double>({1});
    st.center[0][1].data = {5.0};
    st.ready[0][1] = true;
    Tensor<double> x({4, 1});
    x.data = {1.0, 2.0, 3.0, 4.0};
    update_centers(x, {1, 1, 1, 1}, st, 0);
    CHECK(st.center[0][1][0] == doctest::Approx(2.5));
  }
  SUBCASE("uninitialized centers snap to the first batch's class means") {
    CenterState<double> st;
    auto x = ag::leaf<double>(Tensor<double>({2, 2}), true);
    x->value.data = {1.0, 3.0, -1.0, -3.0};
    auto l = loss_center_modality(x, {0, 1}, st, 0);
    CHECK(l->value[0] == 0.0);  // centers equal the single member of each class
    CHECK(st.ready[0][0]);
    CHECK(st.ready[0][1]);
    CHECK(st.center[0][0][0] == 1.0);
    CHECK(st.center[0][1][1] == -3.0);
  }
  SUBCASE("gradients (centers constant)") {
    CenterState<double> st;
    st.center[0][0] = Tensor<double>({3}, 0.1);
    st.center[0][1] = Tensor<double>({3}, -0.2);
    st.ready[0][0] = st.ready[0][1] = true;
    auto x = rvar({4, 3}, 51);
    auto res = gradcheck::check(
        [&] { return loss_center_modality(x, {0, 1, 1, 0}, st, 0); }, {x});
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("bce values and gradients") {
  auto big = ag::leaf<double>(Tensor<double>({1, 1}, 40.0), true);
  CHECK(loss_bce(big, {1})->value[0] == doctest::Approx(0.0).epsilon(1e-6));
  auto zero = ag::leaf<double>(Tensor<double>({2, 1}, 0.0), true);
  CHECK(loss_bce(zero, {0, 1})->value[0] == doctest::Approx(std::log(2.0)));
  // confidently wrong: clamped, finite
  auto anti = ag::leaf<double>(Tensor<double>({1, 1}, -40.0), true);
  const double l = loss_bce(anti, {1})->value[0];
  CHECK(std::isfinite(l));
  CHECK(l == doctest::Approx(-std::log(1e-7)));
  auto nan = ag::leaf<double>(Tensor<double>({1, 1}, std::nan("")), true);
  CHECK_THROWS_AS(loss_bce(nan, {1}), NumericError);

  auto z = rvar({5, 1}, 52);
  auto res =
      gradcheck::check([&] { return loss_bce(z, {0, 1, 1, 0, 1}); }, {z});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("consistency loss values and gradients") {
  auto t = rvar({2, 3, 2, 2}, 53, 0.5, false);
  auto td = rvar({2, 1, 2, 2}, 54, 0.5, false);
  CHECK(loss_consistency<double>(t, t, td, td)->value[0] == 0.0);

  auto off = ag::leaf<double>(t->value.map([](double v) { return v + 0.1; }), true);
  auto offd = ag::leaf<double>(td->value.map([](double v) { return v + 0.1; }), true);
  CHECK(loss_consistency<double>(off, t, offd, td)->value[0] == doctest::Approx(0.01));

  auto r1 = rvar({2, 3, 2, 2}, 55, 0.5);
  auto r2 = rvar({2, 1, 2, 2}, 56, 0.5);
  auto res = gradcheck::check(
      [&] { return loss_consistency<double>(r1, t, r2, td); }, {r1, r2});
  CHECK(res.max_rel_err < 1e-3);

  auto bad = rvar({2, 3, 4, 4}, 57);
  CHECK_THROWS_AS(loss_consistency<double>(bad, t, r2, td), ContractError);
}

TEST_CASE("generator-step aggregate with published defaults") {
  LossWeights w;
  GeneratorLossParts<double> parts;
  parts.adv = cvar({1}, 1.0);
  parts.intensity = cvar({1}, 1.0);
  parts.heads = cvar({1}, 1.0);
  parts.identity = cvar({1}, 1.0);
  parts.classifier = cvar({1}, 1.0);
  parts.center = cvar({1}, 1.0);
  CHECK(total_generator_loss(parts, w)->value[0] == doctest::Approx(212.25));

  LossWeights zero;
  zero.alpha1 = zero.alpha2 = zero.alpha3 = zero.alpha4 = zero.alpha5 = zero.alpha6 = 0;
  CHECK(total_generator_loss(parts, zero)->value[0] == 0.0);

  GeneratorLossParts<double> zparts;
  zparts.adv = cvar({1}, 0.0);
  zparts.intensity = cvar({1}, 0.0);
  zparts.heads = cvar({1}, 0.0);
  zparts.identity = cvar({1}, 0.0);
  zparts.classifier = cvar({1}, 0.0);
  zparts.center = cvar({1}, 0.0);
  CHECK(total_generator_loss(zparts, w)->value[0] == 0.0);
}
