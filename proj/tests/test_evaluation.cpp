#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "polytrace/evaluation.hpp"
#include "polytrace/training.hpp"

using namespace polytrace;

namespace {

std::vector<ScoredSample> make_scores(const std::vector<double>& live,
                                      const std::vector<double>& spoof,
                                      AttackType attack = AttackType::print) {
  std::vector<ScoredSample> out;
  for (double s : live) out.push_back({s, 0, AttackType::none});
  for (double s : spoof) out.push_back({s, 1, attack});
  return out;
}

// independent counting oracle
EvalReport counting_oracle(const std::vector<ScoredSample>& test, double thr) {
  EvalReport r;
  r.threshold = thr;
  int nl = 0, ns = 0, le = 0, se = 0;
  for (auto& s : test) {
    if (s.label == 0) {
      nl++;
      if (s.score >= thr) le++;
    } else {
      ns++;
      if (s.score < thr) se++;
    }
  }
  r.n_live = nl;
  r.n_spoof = ns;
  if (nl) r.bpcer = 100.0 * le / nl;
  if (ns) r.apcer = 100.0 * se / ns;
  if (r.apcer && r.bpcer) r.acer = (*r.apcer + *r.bpcer) / 2;
  return r;
}

}  // namespace

TEST_CASE("find_threshold: one admissible false accept out of 100") {
  std::vector<double> live;
  for (int i = 1; i <= 100; ++i) live.push_back(i / 100.0);
  auto scores = make_scores(live, {0.99, 1.0});
  const double t = find_threshold(scores, 1.0);
  CHECK(t == doctest::Approx(1.0));
  int fa = 0;
  for (double s : live) fa += (s >= t);
  CHECK(fa == 1);  // exactly the 1.00 sample
}

TEST_CASE("find_threshold: separated scores sit just above the top live") {
  auto scores = make_scores({0.05, 0.1, 0.2}, {0.8, 0.9, 0.95});
  const double t = find_threshold(scores, 1.0);
  CHECK(t == std::nextafter(0.2, 1.0));
  // BPCER constraint satisfied on its own input
  int fa = 0;
  for (auto& s : scores)
    if (s.label == 0) fa += (s.score >= t);
  CHECK(fa == 0);
}

TEST_CASE("find_threshold: degenerate target accepts everything") {
  auto scores = make_scores({0.4, 0.6}, {0.7});
  CHECK(find_threshold(scores, 100.0) == 0.0);
}

TEST_CASE("find_threshold: no live samples is a contract violation") {
  auto scores = make_scores({}, {0.5, 0.6});
  CHECK_THROWS_AS(find_threshold(scores, 1.0), ContractError);
}

TEST_CASE("find_threshold always satisfies its constraint (random sweeps)") {
  Rng rng(71);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> live, spoof;
    const int nl = 1 + static_cast<int>(rng.below(20));
    const int ns = static_cast<int>(rng.below(20));
    for (int i = 0; i < nl; ++i) live.push_back(rng.uniform());
    for (int i = 0; i < ns; ++i) spoof.push_back(rng.uniform());
    const double target = rng.uniform(0.0, 20.0);
    auto scores = make_scores(live, spoof);
    const double t = find_threshold(scores, target);
    int fa = 0;
    for (double s : live) fa += (s >= t);
    CHECK(100.0 * fa / nl <= target);
  }
}

TEST_CASE("compute_metrics equals the counting oracle on random lists") {
  Rng rng(72);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> live, spoof;
    for (int i = 0; i < 25; ++i) live.push_back(rng.uniform());
    for (int i = 0; i < 25; ++i) spoof.push_back(rng.uniform());
    auto scores = make_scores(live, spoof);
    const double thr = rng.uniform();
    auto a = compute_metrics(scores, thr);
    auto b = counting_oracle(scores, thr);
    CHECK(*a.apcer == *b.apcer);
    CHECK(*a.bpcer == *b.bpcer);
    CHECK(*a.acer == *b.acer);
    CHECK(*a.acer == (*a.apcer + *a.bpcer) / 2.0);  // exact identity
  }
}

TEST_CASE("threshold monotonicity") {
  Rng rng(73);
  std::vector<double> live, spoof;
  for (int i = 0; i < 40; ++i) live.push_back(rng.uniform());
  for (int i = 0; i < 40; ++i) spoof.push_back(rng.uniform());
  auto scores = make_scores(live, spoof);
  double prev_bpcer = 1e9, prev_apcer = -1;
  for (double t = 0.0; t <= 1.001; t += 0.01) {
    auto r = compute_metrics(scores, t);
    CHECK(*r.bpcer <= prev_bpcer);
    CHECK(*r.apcer >= prev_apcer);
    prev_bpcer = *r.bpcer;
    prev_apcer = *r.apcer;
  }
}

TEST_CASE("published-table arithmetic: 0.39/0.14 rounds to 0.27") {
  // 10000 spoofs with 39 misses, 10000 lives with 14 false accepts
  std::vector<ScoredSample> scores;
  for (int i = 0; i < 10000; ++i) scores.push_back({i < 14 ? 0.9 : 0.1, 0, AttackType::none});
  for (int i = 0; i < 10000; ++i)
    scores.push_back({i < 39 ? 0.1 : 0.9, 1, AttackType::print});
  auto r = compute_metrics(scores, 0.5);
  CHECK(*r.apcer == doctest::Approx(0.39));
  CHECK(*r.bpcer == doctest::Approx(0.14));
  CHECK(*r.acer == doctest::Approx(0.265));
  CHECK(fmt2(*r.acer) == "0.27");  // half-up rounding to two decimals
  CHECK(round2(0.265) == doctest::Approx(0.27));
}

TEST_CASE("zero errors give all-zero metrics") {
  auto scores = make_scores({0.1, 0.2}, {0.8, 0.9});
  auto r = compute_metrics(scores, 0.5);
  CHECK(*r.apcer == 0.0);
  CHECK(*r.bpcer == 0.0);
  CHECK(*r.acer == 0.0);
}

TEST_CASE("single-class test set marks the other side absent") {
  std::vector<ScoredSample> only_live = make_scores({0.1, 0.9}, {});
  auto r = compute_metrics(only_live, 0.5);
  CHECK(r.bpcer.has_value());
  CHECK_FALSE(r.apcer.has_value());
  CHECK_FALSE(r.acer.has_value());
  CHECK(report_to_text(r).find("apcer: absent") != std::string::npos);
}

TEST_CASE("per-attack breakdown") {
  std::vector<ScoredSample> scores;
  scores.push_back({0.1, 0, AttackType::none});
  scores.push_back({0.2, 1, AttackType::print});   // miss
  scores.push_back({0.9, 1, AttackType::print});
  scores.push_back({0.9, 1, AttackType::glasses});
  auto r = compute_metrics(scores, 0.5);
  REQUIRE(r.per_attack_apcer.size() == 2);
  for (auto& [a, v] : r.per_attack_apcer) {
    if (a == AttackType::print) CHECK(v == doctest::Approx(50.0));
    if (a == AttackType::glasses) CHECK(v == doctest::Approx(0.0));
  }
}

TEST_CASE("aggregate mean and std match a hand calculation") {
  std::vector<double> acers = {19.0, 0.5, 2.3, 0.7};
  auto [mean, sd] = aggregate_mean_std(acers);
  // direct arithmetic, the spreadsheet way (sample std, n-1)
  const double m = (19.0 + 0.5 + 2.3 + 0.7) / 4.0;
  double var = 0;
  for (double v : acers) var += (v - m) * (v - m);
  var /= 3.0;
  CHECK(mean == doctest::Approx(m));
  CHECK(sd == doctest::Approx(std::sqrt(var)));
}

TEST_CASE("classifier phi shapes and contract") {
  ClassifierPhi<double> phi(4, 0.25, 91);
  Rng rng(74);
  Tensor<double> stack({3, 4, 64, 64});
  for (auto& v : stack.data) v = rng.uniform(-2.0, 2.0);
  auto logits = phi.forward(ag::constant(stack));
  CHECK(logits->value.shape == std::vector<int>({3, 1}));
  Tensor<double> bad({3, 3, 64, 64}, 0.0);
  CHECK_THROWS_AS(phi.forward(ag::constant(bad)), ContractError);
}

TEST_CASE("scoring, protocol evaluation, and rendering on a tiny model") {
  SynthConfig sc;
  sc.n_identities = 2;
  sc.n_per_identity = 2;
  sc.image_size = 32;
  sc.seed = 5;
  auto corpus = std::make_shared<const std::vector<RgbdSample<double>>>(
      generate_corpus<double>(sc));
  auto split = make_split(corpus, {Protocol::loo, AttackType::mask}, 9);

  ModelConfig mc;
  mc.gen.width_mult = 0.125;
  mc.seed = 55;
  Models<double> models(mc);

  // scores lie in (0,1) and are deterministic per sample
  std::vector<int> all;
  for (int i = 0; i < static_cast<int>(corpus->size()); ++i) all.push_back(i);
  auto s1 = score_samples(models.gen, models.phi, *corpus, all, 8);
  auto s2 = score_samples(models.gen, models.phi, *corpus, all, 3);
  REQUIRE(s1.size() == corpus->size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i].score > 0.0);
    CHECK(s1[i].score < 1.0);
    CHECK(s1[i].score == doctest::Approx(s2[i].score).epsilon(1e-12));
  }

  auto report = evaluate_protocol(models.gen, models.phi, split);
  CHECK(report.protocol == "loo");
  REQUIRE(report.holdout.has_value());
  CHECK(*report.holdout == AttackType::mask);
  if (report.acer) CHECK(*report.acer == (*report.apcer + *report.bpcer) / 2.0);
  for (auto& [a, _] : report.per_attack_apcer) CHECK(a == AttackType::mask);

  // rendering: 8 panels per sample; live panel equals clamp(input - trace)
  namespace fs = std::filesystem;
  const std::string dir =
      (fs::temp_directory_path() / "polytrace_render_test").string();
  fs::remove_all(dir);
  const int n = render_traces(models.gen, models.phi, *corpus, {0, 5}, dir);
  CHECK(n == 2);
  int files = 0;
  for (auto& e : fs::directory_iterator(dir)) {
    (void)e;
    ++files;
  }
  CHECK(files == 16);

  auto fwd = models.gen.forward(stack_rgb(*corpus, {0}), stack_dep(*corpus, {0}), false);
  auto live_img = read_image<double>(dir + "/sample_000000_rgb_live.ppm");
  for (std::int64_t i = 0; i < live_img.numel(); ++i)
    CHECK(static_cast<int>(live_img[i]) ==
          to_u8(fwd.live_rgb->value[i], -1.0, 1.0));
}

TEST_CASE("renormalization guards the degenerate constant trace") {
  Tensor<double> flat({1, 4, 4}, 0.37);
  auto rn = renormalize(flat);
  for (auto v : rn.data) CHECK(v == 0.0);  // maps to mid-gray 128
  CHECK(to_u8(0.0, -1.0, 1.0) == 128);
  CHECK(to_u8(0.0, -2.0, 2.0) == 128);  // raw zero trace panel value
}

TEST_CASE("csv row shape") {
  EvalReport r;
  r.protocol = "loo";
  r.holdout = AttackType::glasses;
  r.threshold = 0.75;
  r.apcer = 1.0;
  r.bpcer = 0.5;
  r.acer = 0.75;
  r.n_live = 10;
  r.n_spoof = 20;
  CHECK(report_csv_header() == "protocol,holdout,threshold,apcer,bpcer,acer,n_live,n_spoof");
  CHECK(report_to_csv(r) == "loo,glasses,0.75,1.00,0.50,0.75,10,20");
}
