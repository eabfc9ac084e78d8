#pragma once

// Per-mini-batch training: (1) generator step on the full objective with
// in-graph spoof synthesis, (2) discriminator step on detached images,
// (3) consistency step regenerating the injected traces. All per-iteration
// randomness (batch sampling, live pairing, trace mixing) derives from
// hash(seed, iteration, phase), so resumed runs replay exactly.

#include <functional>
#include <string>
#include <vector>

#include "polytrace/adversary.hpp"
#include "polytrace/evaluation.hpp"
#include "polytrace/losses.hpp"

namespace polytrace {

struct TrainConfig {
  int batch_size = 4;
  double learning_rate = 5e-5;
  int iterations = 2000;
  std::uint64_t seed = 1;
  LossWeights weights;
  double center_update_rate = 0.5;
  bool stop_trace_grad_for_classifier = false;
  double mix_probability = 0.5;
  int checkpoint_every = 500;
};

struct ModelConfig {
  GeneratorConfig gen;
  int n_scales = 2;
  // Discriminator channel widths are fixed by their own declared layout and
  // do not shrink with the generator's width multiplier; the classifier does.
  double disc_width_mult = 1.0;
  std::uint64_t seed = 1;
};

template <class R>
struct SpoofTrace {
  Tensor<R> rgb, dep;  // same shapes as the inputs
};

template <class R>
struct SynthesizedSpoof {
  Tensor<R> image_rgb, image_dep;  // clamp(live + trace, -1, 1)
};

// clamp(live + trace) per modality, plain tensor math (detached path).
template <class R>
SynthesizedSpoof<R> synthesize_spoof(const RgbdSample<R>& live, const SpoofTrace<R>& trace) {
  SynthesizedSpoof<R> out;
  if (!trace.rgb.empty()) {
    require(trace.rgb.same_shape(live.rgb), "synthesize_spoof: rgb shape mismatch");
    out.image_rgb = Tensor<R>(live.rgb.shape);
    for (std::int64_t i = 0; i < live.rgb.numel(); ++i)
      out.image_rgb[i] = std::clamp(live.rgb[i] + trace.rgb[i], R(-1), R(1));
  }
  if (!trace.dep.empty()) {
    require(trace.dep.same_shape(live.depth), "synthesize_spoof: depth shape mismatch");
    out.image_dep = Tensor<R>(live.depth.shape);
    for (std::int64_t i = 0; i < live.depth.numel(); ++i)
      out.image_dep[i] = std::clamp(live.depth[i] + trace.dep[i], R(-1), R(1));
  }
  return out;
}

// beta * a + (1 - beta) * b per modality.
template <class R>
SpoofTrace<R> mix_traces(const SpoofTrace<R>& a, const SpoofTrace<R>& b, double beta) {
  require(beta >= 0.0 && beta <= 1.0, "mix_traces: beta out of [0,1]");
  SpoofTrace<R> out;
  auto mix = [&](const Tensor<R>& ta, const Tensor<R>& tb, Tensor<R>& to) {
    if (ta.empty() && tb.empty()) return;
    require(ta.shape == tb.shape, "mix_traces: shape mismatch");
    to = Tensor<R>(ta.shape);
    for (std::int64_t i = 0; i < ta.numel(); ++i)
      to[i] = static_cast<R>(beta) * ta[i] + static_cast<R>(1.0 - beta) * tb[i];
  };
  mix(a.rgb, b.rgb, out.rgb);
  mix(a.dep, b.dep, out.dep);
  return out;
}

// ---------------------------------------------------------------------------

template <class R>
struct Models {
  Generator<R> gen;
  DiscriminatorBank<R> bank;
  ClassifierPhi<R> phi;
  IdentityEmbedder<R> embedder;
  CenterState<R> centers;

  Models() = default;
  explicit Models(const ModelConfig& mc)
      : gen(mc.gen, mc.seed),
        bank(mc.disc_width_mult, mc.n_scales, mc.seed),
        phi(phi_channels(mc.gen.modality), mc.gen.width_mult, mc.seed),
        embedder(mc.seed) {}

  static int phi_channels(ModalityMode m) {
    return m == ModalityMode::both ? 4 : (m == ModalityMode::rgb ? 3 : 1);
  }

  // generator step parameter group: generator + fusion + heads + classifier
  nn::ParamSet<R> generator_params() {
    nn::ParamSet<R> ps;
    gen.collect(ps);
    phi.collect(ps);
    return ps;
  }
  nn::ParamSet<R> discriminator_params() {
    nn::ParamSet<R> ps;
    bank.collect(ps);
    return ps;
  }
};

struct StepReport {
  double l_g = 0, l_d = 0, l_intensity = 0, l_e = 0, l_id = 0, l_cls = 0, l_center = 0,
         l_consistency = 0, total = 0;
};

inline std::string step_report_header() {
  return "iteration,L_G,L_D,L_intensity,L_e,L_id,L_cls,L_center,L_consistency,total";
}

inline std::string step_report_csv(std::int64_t iteration, const StepReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                static_cast<long long>(iteration), r.l_g, r.l_d, r.l_intensity, r.l_e,
                r.l_id, r.l_cls, r.l_center, r.l_consistency, r.total);
  return buf;
}

// ---------------------------------------------------------------------------

template <class R>
class Trainer {
 public:
  Trainer(Models<R>& models, const DatasetSplit<R>& split, const TrainConfig& cfg)
      : models_(models), split_(split), cfg_(cfg), opt_g_(cfg.learning_rate),
        opt_d_(cfg.learning_rate) {
    require(cfg.batch_size >= 2, "batch_size must be >= 2 (one live and one spoof)");
    require(!split.train.empty(), "empty train partition");
    models_.centers.update_rate = cfg.center_update_rate;
    g_params_ = models_.generator_params();
    d_params_ = models_.discriminator_params();
    opt_g_.attach(g_params_);
    opt_d_.attach(d_params_);
    bool has_live = false, has_spoof = false;
    for (int i : split_.train) {
      ((*split_.corpus)[i].label == 0 ? has_live : has_spoof) = true;
    }
    require(has_live && has_spoof, "train partition needs live and spoof samples");
  }

  const nn::ParamSet<R>& generator_params() const { return g_params_; }
  const nn::ParamSet<R>& discriminator_params() const { return d_params_; }
  nn::Adam<R>& generator_optimizer() { return opt_g_; }
  nn::Adam<R>& discriminator_optimizer() { return opt_d_; }

  // Deterministic batch for an iteration; guaranteed >= 1 live and 1 spoof.
  std::vector<int> sample_batch(std::int64_t iter) const {
    Rng rng(mix_seed(mix_seed(cfg_.seed, "batch"), static_cast<std::uint64_t>(iter)));
    std::vector<int> pool = split_.train;
    const int B = std::min<int>(cfg_.batch_size, static_cast<int>(pool.size()));
    for (int i = 0; i < B; ++i) {
      const std::int64_t j = i + rng.below(static_cast<std::int64_t>(pool.size()) - i);
      std::swap(pool[i], pool[j]);
    }
    std::vector<int> batch(pool.begin(), pool.begin() + B);
    const auto& corpus = *split_.corpus;
    auto count = [&](int label) {
      int c = 0;
      for (int i : batch) c += corpus[i].label == label;
      return c;
    };
    for (int label : {0, 1}) {
      if (count(label) > 0) continue;
      std::vector<int> of_label;
      for (int i : split_.train)
        if (corpus[i].label == label) of_label.push_back(i);
      batch[0] = of_label[rng.below(static_cast<std::int64_t>(of_label.size()))];
    }
    return batch;
  }

  // Intermediate tensors handed between phases (all detached).
  struct PhaseCache {
    std::vector<int> batch;
    std::vector<int> labels;
    std::vector<int> live_pos, spoof_pos;  // positions within the batch
    Tensor<R> recon_rgb, recon_dep;
    Tensor<R> synth_rgb, synth_dep;
    Tensor<R> trace_rgb, trace_dep;
  };

  PhaseCache generator_step(std::int64_t iter, const std::vector<int>& batch,
                            StepReport& report) {
    const auto& corpus = *split_.corpus;
    PhaseCache cache;
    cache.batch = batch;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      cache.labels.push_back(corpus[batch[k]].label);
      (corpus[batch[k]].label == 0 ? cache.live_pos : cache.spoof_pos)
          .push_back(static_cast<int>(k));
    }
    require(!cache.live_pos.empty() && !cache.spoof_pos.empty(),
            "batch must contain live and spoof samples");

    opt_g_.zero_grad();
    Tensor<R> rgb, dep;
    if (models_.gen.uses_rgb()) rgb = stack_rgb(corpus, batch);
    if (models_.gen.uses_dep()) dep = stack_dep(corpus, batch);
    auto fwd = models_.gen.forward(rgb, dep, true);

    // pair every spoof trace with a uniformly drawn live sample of the batch
    Rng pair_rng(mix_seed(mix_seed(cfg_.seed, "pair"), static_cast<std::uint64_t>(iter)));
    std::vector<int> spoof_sel = cache.spoof_pos;
    std::vector<int> live_sel;
    for (std::size_t j = 0; j < spoof_sel.size(); ++j)
      live_sel.push_back(
          cache.live_pos[pair_rng.below(static_cast<std::int64_t>(cache.live_pos.size()))]);

    ag::Var<R> synth_rgb, synth_dep;
    if (models_.gen.uses_rgb()) {
      auto live_base = ag::gather_rows(fwd.input_rgb, live_sel);
      auto traces = ag::gather_rows(fwd.trace_rgb, spoof_sel);
      synth_rgb = ag::clamp(ag::add(live_base, traces), R(-1), R(1));
    }
    if (models_.gen.uses_dep()) {
      auto live_base = ag::gather_rows(fwd.input_dep, live_sel);
      auto traces = ag::gather_rows(fwd.trace_dep, spoof_sel);
      synth_dep = ag::clamp(ag::add(live_base, traces), R(-1), R(1));
    }

    std::vector<ag::Var<R>> recon_maps, synth_maps;
    auto append = [](std::vector<ag::Var<R>>& into, std::vector<ag::Var<R>> maps) {
      for (auto& m : maps) into.push_back(std::move(m));
    };
    if (models_.gen.uses_rgb()) {
      append(recon_maps, models_.bank.score(Modality::rgb, Domain::live, fwd.live_rgb));
      append(synth_maps, models_.bank.score(Modality::rgb, Domain::spoof, synth_rgb));
    }
    if (models_.gen.uses_dep()) {
      append(recon_maps, models_.bank.score(Modality::dep, Domain::live, fwd.live_dep));
      append(synth_maps, models_.bank.score(Modality::dep, Domain::spoof, synth_dep));
    }

    GeneratorLossParts<R> parts;
    parts.adv = loss_adv_generator(recon_maps, synth_maps);
    parts.intensity =
        loss_intensity(fwd.trace_rgb, fwd.trace_dep, cache.labels, cfg_.weights.lambda_t);
    {
      std::vector<ag::Var<R>> head_losses;
      if (fwd.logit_rgb) head_losses.push_back(loss_bce(fwd.logit_rgb, cache.labels));
      if (fwd.logit_dep) head_losses.push_back(loss_bce(fwd.logit_dep, cache.labels));
      parts.heads = ag::mean_of(head_losses);
    }
    parts.identity =
        models_.gen.uses_rgb()
            ? loss_identity(models_.embedder, fwd.input_rgb, fwd.live_rgb)
            : ag::constant(Tensor<R>({1}, R(0)));
    parts.classifier = loss_bce(
        models_.phi.forward(trace_stack_of(fwd, cfg_.stop_trace_grad_for_classifier)),
        cache.labels);
    parts.center = loss_center(fwd.center_rgb, fwd.center_dep, cache.labels,
                               models_.centers);

    auto total = total_generator_loss(parts, cfg_.weights);
    ag::backward(total);
    opt_g_.step();

    report.l_g = parts.adv->value[0];
    report.l_intensity = parts.intensity->value[0];
    report.l_e = parts.heads->value[0];
    report.l_id = parts.identity->value[0];
    report.l_cls = parts.classifier->value[0];
    report.l_center = parts.center->value[0];
    report.total = total->value[0];

    if (models_.gen.uses_rgb()) {
      cache.recon_rgb = fwd.live_rgb->value;
      cache.synth_rgb = synth_rgb->value;
      cache.trace_rgb = fwd.trace_rgb->value;
    }
    if (models_.gen.uses_dep()) {
      cache.recon_dep = fwd.live_dep->value;
      cache.synth_dep = synth_dep->value;
      cache.trace_dep = fwd.trace_dep->value;
    }
    return cache;
  }

  void discriminator_step(std::int64_t iter, const PhaseCache& cache, StepReport& report) {
    (void)iter;
    const auto& corpus = *split_.corpus;
    opt_d_.zero_grad();

    std::vector<int> live_idx, spoof_idx;
    for (std::size_t k = 0; k < cache.batch.size(); ++k)
      (cache.labels[k] == 0 ? live_idx : spoof_idx).push_back(cache.batch[k]);

    std::vector<ag::Var<R>> real_live, recon, real_spoof, synth;
    auto append = [](std::vector<ag::Var<R>>& into, std::vector<ag::Var<R>> maps) {
      for (auto& m : maps) into.push_back(std::move(m));
    };
    if (models_.gen.uses_rgb()) {
      append(real_live, models_.bank.score(Modality::rgb, Domain::live,
                                           ag::constant(stack_rgb(corpus, live_idx))));
      append(recon, models_.bank.score(Modality::rgb, Domain::live,
                                       ag::constant(cache.recon_rgb)));
      append(real_spoof, models_.bank.score(Modality::rgb, Domain::spoof,
                                            ag::constant(stack_rgb(corpus, spoof_idx))));
      append(synth, models_.bank.score(Modality::rgb, Domain::spoof,
                                       ag::constant(cache.synth_rgb)));
    }
    if (models_.gen.uses_dep()) {
      append(real_live, models_.bank.score(Modality::dep, Domain::live,
                                           ag::constant(stack_dep(corpus, live_idx))));
      append(recon, models_.bank.score(Modality::dep, Domain::live,
                                       ag::constant(cache.recon_dep)));
      append(real_spoof, models_.bank.score(Modality::dep, Domain::spoof,
                                            ag::constant(stack_dep(corpus, spoof_idx))));
      append(synth, models_.bank.score(Modality::dep, Domain::spoof,
                                       ag::constant(cache.synth_dep)));
    }

    auto l_d = loss_adv_discriminator(real_live, recon, real_spoof, synth);
    auto weighted = ag::weighted_sum<R>({l_d}, {cfg_.weights.alpha7});
    ag::backward(weighted);
    opt_d_.step();
    report.l_d = l_d->value[0];
  }

  void consistency_step(std::int64_t iter, const PhaseCache& cache, StepReport& report) {
    const auto& corpus = *split_.corpus;
    opt_g_.zero_grad();
    Rng rng(mix_seed(mix_seed(cfg_.seed, "consistency"), static_cast<std::uint64_t>(iter)));

    const int S = static_cast<int>(cache.spoof_pos.size());
    const bool rgb_on = models_.gen.uses_rgb(), dep_on = models_.gen.uses_dep();

    auto trace_of = [&](int pos) {
      SpoofTrace<R> t;
      const std::int64_t row_rgb = rgb_on ? cache.trace_rgb.numel() / cache.batch.size() : 0;
      const std::int64_t row_dep = dep_on ? cache.trace_dep.numel() / cache.batch.size() : 0;
      if (rgb_on) {
        t.rgb = Tensor<R>({cache.trace_rgb.dim(1), cache.trace_rgb.dim(2),
                           cache.trace_rgb.dim(3)});
        std::memcpy(t.rgb.ptr(), cache.trace_rgb.ptr() + pos * row_rgb,
                    sizeof(R) * row_rgb);
      }
      if (dep_on) {
        t.dep = Tensor<R>({cache.trace_dep.dim(1), cache.trace_dep.dim(2),
                           cache.trace_dep.dim(3)});
        std::memcpy(t.dep.ptr(), cache.trace_dep.ptr() + pos * row_dep,
                    sizeof(R) * row_dep);
      }
      return t;
    };

    // fresh live bases; traces mixed with probability mix_probability
    std::vector<Tensor<R>> synth_rgb_rows, synth_dep_rows, target_rgb_rows, target_dep_rows;
    for (int j = 0; j < S; ++j) {
      SpoofTrace<R> target = trace_of(cache.spoof_pos[j]);
      if (S > 1 && rng.coin(cfg_.mix_probability)) {
        int other = j;
        while (other == j)
          other = static_cast<int>(rng.below(S));
        target = mix_traces(target, trace_of(cache.spoof_pos[other]), rng.uniform());
      }
      const int live_batch_pos =
          cache.live_pos[rng.below(static_cast<std::int64_t>(cache.live_pos.size()))];
      const auto& live = corpus[cache.batch[live_batch_pos]];
      auto synth = synthesize_spoof(live, target);
      if (rgb_on) {
        synth_rgb_rows.push_back(std::move(synth.image_rgb));
        target_rgb_rows.push_back(std::move(target.rgb));
      }
      if (dep_on) {
        synth_dep_rows.push_back(std::move(synth.image_dep));
        target_dep_rows.push_back(std::move(target.dep));
      }
    }

    auto stack_rows = [](const std::vector<Tensor<R>>& rows) {
      Tensor<R> out({static_cast<int>(rows.size()), rows[0].dim(0), rows[0].dim(1),
                     rows[0].dim(2)});
      for (std::size_t k = 0; k < rows.size(); ++k)
        std::memcpy(out.ptr() + static_cast<std::int64_t>(k) * rows[k].numel(),
                    rows[k].ptr(), sizeof(R) * rows[k].numel());
      return out;
    };

    Tensor<R> synth_rgb, synth_dep;
    if (rgb_on) synth_rgb = stack_rows(synth_rgb_rows);
    if (dep_on) synth_dep = stack_rows(synth_dep_rows);
    auto fwd = models_.gen.forward(synth_rgb, synth_dep, true);

    auto l_cons = loss_consistency(
        fwd.trace_rgb, rgb_on ? ag::constant(stack_rows(target_rgb_rows)) : ag::Var<R>(),
        fwd.trace_dep, dep_on ? ag::constant(stack_rows(target_dep_rows)) : ag::Var<R>());
    auto weighted = ag::weighted_sum<R>({l_cons}, {cfg_.weights.alpha8});
    ag::backward(weighted);
    opt_g_.step();
    report.l_consistency = l_cons->value[0];
  }

  StepReport train_step(std::int64_t iter) {
    StepReport report;
    auto batch = sample_batch(iter);
    auto cache = generator_step(iter, batch, report);
    discriminator_step(iter, cache, report);
    consistency_step(iter, cache, report);
    check_finite(report, iter);
    return report;
  }

  static void check_finite(const StepReport& r, std::int64_t iter) {
    const std::pair<const char*, double> terms[] = {
        {"L_G", r.l_g},       {"L_D", r.l_d},
        {"L_intensity", r.l_intensity}, {"L_e", r.l_e},
        {"L_id", r.l_id},     {"L_cls", r.l_cls},
        {"L_center", r.l_center},       {"L_consistency", r.l_consistency},
        {"total", r.total}};
    for (const auto& [name, v] : terms)
      if (!std::isfinite(v))
        throw NumericError("non-finite " + std::string(name) + " at iteration " +
                           std::to_string(iter));
  }

 private:
  Models<R>& models_;
  DatasetSplit<R> split_;
  TrainConfig cfg_;
  nn::Adam<R> opt_g_, opt_d_;
  nn::ParamSet<R> g_params_, d_params_;
};

// Runs train_step from `start_iteration` to cfg.iterations. on_step fires
// after each step; save_checkpoint (optional) fires every checkpoint_every
// iterations and at the end.
template <class R>
void fit(Trainer<R>& trainer, const TrainConfig& cfg, std::int64_t start_iteration,
         const std::function<void(std::int64_t, const StepReport&)>& on_step,
         const std::function<void(std::int64_t)>& save_checkpoint = {}) {
  for (std::int64_t iter = start_iteration; iter < cfg.iterations; ++iter) {
    StepReport r = trainer.train_step(iter);
    if (on_step) on_step(iter, r);
    if (save_checkpoint && cfg.checkpoint_every > 0 &&
        ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations))
      save_checkpoint(iter + 1);
  }
  if (save_checkpoint && cfg.iterations == start_iteration)
    save_checkpoint(start_iteration);  // iterations=0: persist initial state
}

}  // namespace polytrace
