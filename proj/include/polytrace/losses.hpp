#pragma once

// Training objectives. Every expectation reduces by MEAN over batch and
// elements, so the published loss weights transfer across resolutions.
// Label convention throughout: live = 0, spoof = 1.
//
// LSGAN targets are taken literally from the adversarial formulation:
// discriminators push real samples toward 0 and generated ones toward 1;
// the generator pushes its outputs' scores toward 0.

#include <string>
#include <vector>

#include "polytrace/nn.hpp"

namespace polytrace {

using ag::Var;

// Generator-step weights alpha1..alpha6, discriminator alpha7, consistency
// alpha8, and the spoof-trace intensity factor lambda_t.
struct LossWeights {
  double alpha1 = 0.25;  // adversarial (generator side)
  double alpha2 = 100.0; // intensity
  double alpha3 = 1.0;   // intermediate-head cross entropy
  double alpha4 = 100.0; // identity consistency
  double alpha5 = 1.0;   // final-classifier cross entropy
  double alpha6 = 10.0;  // center
  double alpha7 = 1.0;   // adversarial (discriminator side)
  double alpha8 = 1.0;   // consistency supervision
  double lambda_t = 1e-4;
};

// ---------------------------------------------------------------------------
// Adversarial pair.

// Mean of squared scores pooled over every map (patches, scales, modalities,
// batch) of both the reconstructed-live and synthesized-spoof groups.
template <class R>
Var<R> loss_adv_generator(const std::vector<Var<R>>& recon_maps,
                          const std::vector<Var<R>>& synth_maps) {
  std::vector<Var<R>> terms;
  for (const auto& m : recon_maps) terms.push_back(ag::mean_sq_shift(m, R(0)));
  for (const auto& m : synth_maps) terms.push_back(ag::mean_sq_shift(m, R(0)));
  require(!terms.empty(), "loss_adv_generator: empty score list");
  return ag::mean_of(terms);
}

// Sum of the four group terms; each group averages its maps' mean squared
// distance to the group target (real -> 0, generated -> 1).
template <class R>
Var<R> loss_adv_discriminator(const std::vector<Var<R>>& real_live_maps,
                              const std::vector<Var<R>>& recon_maps,
                              const std::vector<Var<R>>& real_spoof_maps,
                              const std::vector<Var<R>>& synth_maps) {
  auto group = [](const std::vector<Var<R>>& maps, R target) {
    require(!maps.empty(), "loss_adv_discriminator: empty score list");
    std::vector<Var<R>> terms;
    for (const auto& m : maps) terms.push_back(ag::mean_sq_shift(m, target));
    return ag::mean_of(terms);
  };
  return ag::weighted_sum<R>({group(recon_maps, R(1)), group(real_live_maps, R(0)),
                              group(synth_maps, R(1)), group(real_spoof_maps, R(0))},
                             {1.0, 1.0, 1.0, 1.0});
}

// ---------------------------------------------------------------------------
// Identity consistency.

// Frozen identity embedder. Face recognizers are trained to ignore
// illumination, color casts, and fine texture; this stand-in gets the same
// invariances structurally: aggressive average pooling suppresses
// high-frequency texture, per-channel standardization removes global casts,
// then a frozen random conv projection maps the remaining geometry to a
// unit-norm vector. Importable weights can replace the random init;
// parameters never require grad, so gradients only flow to the input.
template <class R>
struct IdentityEmbedder {
  nn::Conv2d<R> c1, c2;
  nn::Linear<R> fc;
  int dim = 32;

  IdentityEmbedder() = default;
  explicit IdentityEmbedder(std::uint64_t seed) {
    Rng rng(mix_seed(seed, "identity_embedder"));
    c1 = nn::Conv2d<R>(3, 16, 3, 1, 1, true, rng);
    c2 = nn::Conv2d<R>(16, 32, 3, 2, 1, true, rng);
    fc = nn::Linear<R>(32, dim, rng);
    nn::ParamSet<R> ps;
    collect(ps);
    for (auto& [_, p] : ps.params) p->requires_grad = false;
  }

  Var<R> embed(const Var<R>& rgb) const {
    auto y = rgb;
    while (y->value.dim(2) > 8) y = ag::avgpool2x(y);  // blur texture away
    y = ag::standardize_channels(y);                   // drop casts and gains
    y = ag::relu(c1.forward(y));
    y = ag::relu(c2.forward(y));
    return ag::l2_normalize_rows(fc.forward(ag::global_avgpool(y)));
  }

  void collect(nn::ParamSet<R>& ps) {
    c1.collect(ps, "embedder.c1");
    c2.collect(ps, "embedder.c2");
    fc.collect(ps, "embedder.fc");
  }
};

// Elementwise-mean squared embedding difference (||e||^2 / dim per sample,
// averaged over the batch).
template <class R>
Var<R> loss_identity(const IdentityEmbedder<R>& embedder, const Var<R>& input_rgb,
                     const Var<R>& recon_rgb) {
  require(input_rgb->value.same_shape(recon_rgb->value), "loss_identity: shape mismatch");
  return ag::mse(embedder.embed(input_rgb), embedder.embed(recon_rgb));
}

// ---------------------------------------------------------------------------
// Intensity: live traces get the full penalty, spoof traces lambda_t of it.
// Per sample the trace magnitude is the mean |T| over both modalities'
// elements; a batch missing one class contributes 0 for that class.
template <class R>
Var<R> loss_intensity(const Var<R>& trace_rgb, const Var<R>& trace_dep,
                      const std::vector<int>& labels, double lambda_t) {
  require(trace_rgb || trace_dep, "loss_intensity: no traces");
  const Var<R>& any = trace_rgb ? trace_rgb : trace_dep;
  const int B = any->value.dim(0);
  require(static_cast<int>(labels.size()) == B, "loss_intensity: label count");
  if (trace_rgb && trace_dep)
    require(trace_dep->value.dim(0) == B, "loss_intensity: batch mismatch");

  std::int64_t per_sample = 0;
  if (trace_rgb) per_sample += trace_rgb->value.numel() / B;
  if (trace_dep) per_sample += trace_dep->value.numel() / B;

  int n_live = 0, n_spoof = 0;
  for (int y : labels) (y == 0 ? n_live : n_spoof)++;

  auto sample_mean_abs = [&](const Var<R>& t, int i) {
    const std::int64_t row = t->value.numel() / B;
    const R* p = t->value.ptr() + static_cast<std::int64_t>(i) * row;
    R s = 0;
    for (std::int64_t k = 0; k < row; ++k) s += std::abs(p[k]);
    return s;
  };

  R value = 0;
  for (int i = 0; i < B; ++i) {
    R m = 0;
    if (trace_rgb) m += sample_mean_abs(trace_rgb, i);
    if (trace_dep) m += sample_mean_abs(trace_dep, i);
    m /= static_cast<R>(per_sample);
    value += (labels[i] == 0 ? m / static_cast<R>(std::max(n_live, 1))
                             : static_cast<R>(lambda_t) * m /
                                   static_cast<R>(std::max(n_spoof, 1)));
  }

  Tensor<R> out({1});
  out[0] = value;
  std::vector<Var<R>> parents;
  if (trace_rgb) parents.push_back(trace_rgb);
  if (trace_dep) parents.push_back(trace_dep);
  return ag::op_node<R>(
      std::move(out), std::move(parents),
      [trace_rgb, trace_dep, labels, lambda_t, B, per_sample, n_live,
       n_spoof](ag::Node<R>& n) {
        auto scatter = [&](const Var<R>& t) {
          if (!t || !t->requires_grad) return;
          Tensor<R>& dt = ag::grad_of(t);
          const std::int64_t row = t->value.numel() / B;
          for (int i = 0; i < B; ++i) {
            const R coef =
                n.grad[0] *
                (labels[i] == 0
                     ? R(1) / (static_cast<R>(std::max(n_live, 1)) * per_sample)
                     : static_cast<R>(lambda_t) /
                           (static_cast<R>(std::max(n_spoof, 1)) * per_sample));
            const R* p = t->value.ptr() + static_cast<std::int64_t>(i) * row;
            R* d = dt.ptr() + static_cast<std::int64_t>(i) * row;
            for (std::int64_t k = 0; k < row; ++k) {
              if (p[k] > R(0))
                d[k] += coef;
              else if (p[k] < R(0))
                d[k] -= coef;
            }
          }
        };
        scatter(trace_rgb);
        scatter(trace_dep);
      });
}

// ---------------------------------------------------------------------------
// Center loss on pooled decoder features, one live and one spoof center per
// modality. Returns the loss term for one modality; centers are treated as
// constants for the gradient and updated afterwards via update_centers.

template <class R>
struct CenterState {
  Tensor<R> center[2][2];       // [modality][class]
  bool ready[2][2] = {{false, false}, {false, false}};
  double update_rate = 0.5;
};

// 1/(2B) * sum_i ||x_i - c_{y_i}||^2 for one modality. Initializes missing
// centers to the batch class means first.
template <class R>
Var<R> loss_center_modality(const Var<R>& feats, const std::vector<int>& labels,
                            CenterState<R>& state, int modality) {
  const int B = feats->value.dim(0), D = feats->value.dim(1);
  require(static_cast<int>(labels.size()) == B, "loss_center: label count");

  for (int cls = 0; cls < 2; ++cls) {
    if (state.ready[modality][cls]) continue;
    int cnt = 0;
    Tensor<R> mean({D}, R(0));
    for (int i = 0; i < B; ++i) {
      if (labels[i] != cls) continue;
      ++cnt;
      for (int j = 0; j < D; ++j) mean[j] += feats->value.at(i, j);
    }
    if (cnt > 0) {
      for (int j = 0; j < D; ++j) mean[j] /= static_cast<R>(cnt);
      state.center[modality][cls] = std::move(mean);
      state.ready[modality][cls] = true;
    }
  }

  // gathered per-sample centers, constant w.r.t. the graph
  Tensor<R> gathered({B, D}, R(0));
  for (int i = 0; i < B; ++i) {
    if (!state.ready[modality][labels[i]]) continue;
    for (int j = 0; j < D; ++j)
      gathered.at(i, j) = state.center[modality][labels[i]][j];
  }

  R value = 0;
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < D; ++j) {
      const R d = feats->value.at(i, j) - gathered.at(i, j);
      value += d * d;
    }
  value /= static_cast<R>(2 * B);

  Tensor<R> out({1});
  out[0] = value;
  auto centers = std::make_shared<Tensor<R>>(std::move(gathered));
  return ag::op_node<R>(std::move(out), {feats}, [feats, centers, B, D](ag::Node<R>& n) {
    if (!feats->requires_grad) return;
    Tensor<R>& df = ag::grad_of(feats);
    const R g = n.grad[0] / static_cast<R>(B);
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < D; ++j)
        df.at(i, j) += g * (feats->value.at(i, j) - centers->at(i, j));
  });
}

// Standard center update: c_j <- c_j - rate * mean_{i: y_i = j}(c_j - x_i).
// With rate 1 and a single-class batch the center lands on the batch mean.
template <class R>
void update_centers(const Tensor<R>& feats, const std::vector<int>& labels,
                    CenterState<R>& state, int modality) {
  const int B = feats.dim(0), D = feats.dim(1);
  for (int cls = 0; cls < 2; ++cls) {
    if (!state.ready[modality][cls]) continue;
    int cnt = 0;
    std::vector<R> delta(static_cast<std::size_t>(D), R(0));
    for (int i = 0; i < B; ++i) {
      if (labels[i] != cls) continue;
      ++cnt;
      for (int j = 0; j < D; ++j)
        delta[j] += state.center[modality][cls][j] - feats.at(i, j);
    }
    if (cnt == 0) continue;
    for (int j = 0; j < D; ++j)
      state.center[modality][cls][j] -=
          static_cast<R>(state.update_rate) * delta[j] / static_cast<R>(cnt);
  }
}

// Combined center loss over the available modalities; updates centers with
// the current (detached) features after the loss is formed.
template <class R>
Var<R> loss_center(const Var<R>& feats_rgb, const Var<R>& feats_dep,
                   const std::vector<int>& labels, CenterState<R>& state) {
  std::vector<Var<R>> parts;
  if (feats_rgb) parts.push_back(loss_center_modality(feats_rgb, labels, state, 0));
  if (feats_dep) parts.push_back(loss_center_modality(feats_dep, labels, state, 1));
  require(!parts.empty(), "loss_center: no features");
  auto total = ag::weighted_sum<R>(parts, std::vector<double>(parts.size(), 1.0));
  if (feats_rgb) update_centers(feats_rgb->value, labels, state, 0);
  if (feats_dep) update_centers(feats_dep->value, labels, state, 1);
  return total;
}

// ---------------------------------------------------------------------------
// Binary cross entropy on logits, mean over the batch. The epsilon clamp
// guards the log; the gradient keeps the unsaturated (sigma(z) - y) form.
template <class R>
Var<R> loss_bce(const Var<R>& logits, const std::vector<int>& labels, double eps = 1e-7) {
  const int B = logits->value.dim(0);
  require(logits->value.numel() == B, "loss_bce: one logit per sample expected");
  require(static_cast<int>(labels.size()) == B, "loss_bce: label count");

  R value = 0;
  for (int i = 0; i < B; ++i) {
    const double z = static_cast<double>(logits->value[i]);
    if (!std::isfinite(z)) throw NumericError("loss_bce: non-finite logit");
    const double p = std::min(1.0 - eps, std::max(eps, 1.0 / (1.0 + std::exp(-z))));
    value -= static_cast<R>(labels[i] == 1 ? std::log(p) : std::log(1.0 - p));
  }
  value /= static_cast<R>(B);

  Tensor<R> out({1});
  out[0] = value;
  return ag::op_node<R>(std::move(out), {logits}, [logits, labels, B](ag::Node<R>& n) {
    if (!logits->requires_grad) return;
    Tensor<R>& dl = ag::grad_of(logits);
    for (int i = 0; i < B; ++i) {
      const R p = R(1) / (R(1) + std::exp(-logits->value[i]));
      dl[i] += n.grad[0] * (p - static_cast<R>(labels[i])) / static_cast<R>(B);
    }
  });
}

// ---------------------------------------------------------------------------
// Consistency: MSE between regenerated and injected traces, pooled over all
// elements of both modalities.
template <class R>
Var<R> loss_consistency(const Var<R>& regen_rgb, const Var<R>& target_rgb,
                        const Var<R>& regen_dep, const Var<R>& target_dep) {
  std::vector<Var<R>> parts;
  std::vector<double> weights;
  double total = 0;
  if (regen_rgb) {
    require(regen_rgb->value.same_shape(target_rgb->value),
            "loss_consistency: rgb shape mismatch");
    parts.push_back(ag::mse(regen_rgb, target_rgb));
    weights.push_back(static_cast<double>(regen_rgb->value.numel()));
    total += weights.back();
  }
  if (regen_dep) {
    require(regen_dep->value.same_shape(target_dep->value),
            "loss_consistency: dep shape mismatch");
    parts.push_back(ag::mse(regen_dep, target_dep));
    weights.push_back(static_cast<double>(regen_dep->value.numel()));
    total += weights.back();
  }
  require(!parts.empty(), "loss_consistency: no traces");
  for (auto& w : weights) w /= total;
  return ag::weighted_sum<R>(parts, weights);
}

// ---------------------------------------------------------------------------
// Generator-step aggregate.
template <class R>
struct GeneratorLossParts {
  Var<R> adv, intensity, heads, identity, classifier, center;
};

template <class R>
Var<R> total_generator_loss(const GeneratorLossParts<R>& p, const LossWeights& w) {
  return ag::weighted_sum<R>(
      {p.adv, p.intensity, p.heads, p.identity, p.classifier, p.center},
      {w.alpha1, w.alpha2, w.alpha3, w.alpha4, w.alpha5, w.alpha6});
}

}  // namespace polytrace
