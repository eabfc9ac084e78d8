#pragma once

// Final classifier over concatenated traces, BPCER-anchored thresholding,
// APCER/BPCER/ACER reports, and trace visualization.

#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include "polytrace/data.hpp"
#include "polytrace/generator.hpp"

namespace polytrace {

// Fully-convolutional classifier: five stride-2 convs over the trace stack
// (3 rgb + 1 depth channels in the default mode), pooled to a scalar logit.
template <class R>
struct ClassifierPhi {
  std::vector<nn::Conv2d<R>> convs;
  nn::Linear<R> fc;
  int in_ch = 4;

  ClassifierPhi() = default;
  ClassifierPhi(int in_channels, double width_mult, std::uint64_t seed)
      : in_ch(in_channels) {
    Rng rng(mix_seed(seed, "classifier_phi"));
    const int base[5] = {32, 64, 128, 128, 128};
    int prev = in_channels;
    for (int i = 0; i < 5; ++i) {
      const int ch = scaled_ch(base[i], width_mult);
      convs.emplace_back(prev, ch, 3, 2, 1, true, rng);
      prev = ch;
    }
    fc = nn::Linear<R>(prev, 1, rng);
  }

  ag::Var<R> forward(const ag::Var<R>& trace_stack) const {
    require(trace_stack->value.rank() == 4 && trace_stack->value.dim(1) == in_ch,
            "classifier: trace channel count mismatch");
    auto y = trace_stack;
    for (const auto& c : convs) y = ag::relu(c.forward(y));
    return fc.forward(ag::global_avgpool(y));
  }

  void collect(nn::ParamSet<R>& ps) {
    for (std::size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(ps, "phi.c" + std::to_string(i));
    fc.collect(ps, "phi.fc");
  }
};

// ---------------------------------------------------------------------------

struct ScoredSample {
  double score = 0;  // sigma(phi(traces)), higher = more spoof-like
  int label = 0;
  AttackType attack = AttackType::none;
};

struct EvalReport {
  double threshold = 0;
  std::optional<double> apcer, bpcer, acer;  // percentages
  std::vector<std::pair<AttackType, double>> per_attack_apcer;
  int n_live = 0, n_spoof = 0;
  std::string protocol = "grandtest";
  std::optional<AttackType> holdout;
};

// Percentages are reported to two decimals, rounding half-up.
inline double round2(double v) { return std::floor(v * 100.0 + 0.5) / 100.0; }

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", round2(v));
  return buf;
}

// Smallest threshold, anchored on the live scores, whose BPCER does not
// exceed the target. When every anchored value fails, the boundary just
// above the highest live score is returned.
inline double find_threshold(const std::vector<ScoredSample>& validation,
                             double target_bpcer = 1.0) {
  std::vector<double> lives;
  for (const auto& s : validation)
    if (s.label == 0) lives.push_back(s.score);
  require(!lives.empty(), "find_threshold: validation set has no live samples");

  std::vector<double> candidates = lives;
  candidates.push_back(0.0);
  candidates.push_back(std::nextafter(*std::max_element(lives.begin(), lives.end()),
                                      std::numeric_limits<double>::infinity()));
  std::sort(candidates.begin(), candidates.end());

  for (double t : candidates) {
    int fa = 0;
    for (double s : lives) fa += (s >= t);
    if (100.0 * fa / static_cast<double>(lives.size()) <= target_bpcer) return t;
  }
  return candidates.back();  // unreachable: the top candidate admits no live
}

// APCER = % spoofs scored below the threshold, BPCER = % lives at or above
// it, ACER their mean. A single-class test set leaves the missing side (and
// ACER) absent.
inline EvalReport compute_metrics(const std::vector<ScoredSample>& test,
                                  double threshold) {
  require(!test.empty(), "compute_metrics: empty test set");
  EvalReport r;
  r.threshold = threshold;
  int live_err = 0, spoof_err = 0;
  std::map<AttackType, std::pair<int, int>> per_attack;  // errors, total
  for (const auto& s : test) {
    if (s.label == 0) {
      ++r.n_live;
      live_err += (s.score >= threshold);
    } else {
      ++r.n_spoof;
      const bool miss = s.score < threshold;
      spoof_err += miss;
      auto& [e, n] = per_attack[s.attack];
      e += miss;
      ++n;
    }
  }
  if (r.n_live > 0) r.bpcer = 100.0 * live_err / r.n_live;
  if (r.n_spoof > 0) r.apcer = 100.0 * spoof_err / r.n_spoof;
  if (r.apcer && r.bpcer) r.acer = (*r.apcer + *r.bpcer) / 2.0;
  for (const auto& [a, en] : per_attack)
    r.per_attack_apcer.emplace_back(a, 100.0 * en.first / en.second);
  return r;
}

inline std::string report_to_text(const EvalReport& r) {
  std::ostringstream os;
  os << "eval_report:\n";
  os << "  protocol: " << r.protocol << "\n";
  if (r.holdout) os << "  holdout: " << to_string(*r.holdout) << "\n";
  os << "  threshold: " << r.threshold << "\n";
  os << "  apcer: " << (r.apcer ? fmt2(*r.apcer) : "absent") << "\n";
  os << "  bpcer: " << (r.bpcer ? fmt2(*r.bpcer) : "absent") << "\n";
  os << "  acer: " << (r.acer ? fmt2(*r.acer) : "absent") << "\n";
  os << "  n_live: " << r.n_live << "\n";
  os << "  n_spoof: " << r.n_spoof << "\n";
  os << "  per_attack_apcer:\n";
  for (const auto& [a, v] : r.per_attack_apcer)
    os << "    " << to_string(a) << ": " << fmt2(v) << "\n";
  return os.str();
}

inline std::string report_csv_header() {
  return "protocol,holdout,threshold,apcer,bpcer,acer,n_live,n_spoof";
}

inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << r.protocol << "," << (r.holdout ? to_string(*r.holdout) : "") << ","
     << r.threshold << "," << (r.apcer ? fmt2(*r.apcer) : "") << ","
     << (r.bpcer ? fmt2(*r.bpcer) : "") << "," << (r.acer ? fmt2(*r.acer) : "") << ","
     << r.n_live << "," << r.n_spoof;
  return os.str();
}

// mean and sample (n-1) standard deviation, as in the LOO summary column
inline std::pair<double, double> aggregate_mean_std(const std::vector<double>& values) {
  require(!values.empty(), "aggregate: no values");
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  var = values.size() > 1 ? var / static_cast<double>(values.size() - 1) : 0.0;
  return {mean, std::sqrt(var)};
}

// ---------------------------------------------------------------------------
// Scoring.

template <class R>
Tensor<R> stack_rgb(const std::vector<RgbdSample<R>>& corpus, const std::vector<int>& idx) {
  const auto& first = corpus[idx[0]].rgb;
  Tensor<R> out({static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
  const std::int64_t row = first.numel();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::memcpy(out.ptr() + static_cast<std::int64_t>(k) * row, corpus[idx[k]].rgb.ptr(),
                sizeof(R) * row);
  return out;
}

template <class R>
Tensor<R> stack_dep(const std::vector<RgbdSample<R>>& corpus, const std::vector<int>& idx) {
  const auto& first = corpus[idx[0]].depth;
  Tensor<R> out({static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
  const std::int64_t row = first.numel();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::memcpy(out.ptr() + static_cast<std::int64_t>(k) * row, corpus[idx[k]].depth.ptr(),
                sizeof(R) * row);
  return out;
}

template <class R>
ag::Var<R> trace_stack_of(const GeneratorOutput<R>& fwd, bool detach_traces = false) {
  auto pick = [&](const ag::Var<R>& v) { return detach_traces ? ag::detach(v) : v; };
  if (fwd.trace_rgb && fwd.trace_dep)
    return ag::concat_channels(pick(fwd.trace_rgb), pick(fwd.trace_dep));
  return pick(fwd.trace_rgb ? fwd.trace_rgb : fwd.trace_dep);
}

// sigma(phi(T_rgb || T_dep)) per sample, batched, inference mode.
template <class R>
std::vector<ScoredSample> score_samples(Generator<R>& gen, const ClassifierPhi<R>& phi,
                                        const std::vector<RgbdSample<R>>& corpus,
                                        const std::vector<int>& indices,
                                        int batch_size = 16) {
  require(!indices.empty(), "score_samples: nothing to score");
  ag::NoGradGuard ng;
  std::vector<ScoredSample> out;
  for (std::size_t at = 0; at < indices.size(); at += batch_size) {
    std::vector<int> chunk(indices.begin() + at,
                           indices.begin() + std::min(indices.size(),
                                                      at + static_cast<std::size_t>(batch_size)));
    Tensor<R> rgb, dep;
    if (gen.uses_rgb()) rgb = stack_rgb(corpus, chunk);
    if (gen.uses_dep()) dep = stack_dep(corpus, chunk);
    auto fwd = gen.forward(rgb, dep, false);
    auto logits = phi.forward(trace_stack_of(fwd));
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      ScoredSample s;
      s.score = 1.0 / (1.0 + std::exp(-static_cast<double>(logits->value[k])));
      s.label = corpus[chunk[k]].label;
      s.attack = corpus[chunk[k]].attack;
      out.push_back(s);
    }
  }
  return out;
}

template <class R>
EvalReport evaluate_protocol(Generator<R>& gen, const ClassifierPhi<R>& phi,
                             const DatasetSplit<R>& split, double target_bpcer = 1.0) {
  auto val_scores = score_samples(gen, phi, *split.corpus, split.validation);
  const double threshold = find_threshold(val_scores, target_bpcer);
  auto test_scores = score_samples(gen, phi, *split.corpus, split.test);
  EvalReport r = compute_metrics(test_scores, threshold);
  r.protocol = split.protocol.protocol == Protocol::loo ? "loo" : "grandtest";
  if (split.protocol.protocol == Protocol::loo) r.holdout = split.protocol.holdout;
  return r;
}

// ---------------------------------------------------------------------------
// Trace visualization. Per sample: input, raw trace ([-2,2] mapped to 8-bit),
// per-image min-max re-normalized trace, and reconstructed live counterpart,
// for each modality.

template <class R>
Tensor<R> renormalize(const Tensor<R>& t) {
  R lo = t[0], hi = t[0];
  for (auto v : t.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (static_cast<double>(hi - lo) < 1e-12) return Tensor<R>(t.shape, R(0));  // mid gray
  Tensor<R> out(t.shape);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    out[i] = R(-1) + R(2) * (t[i] - lo) / (hi - lo);
  return out;
}

template <class R>
Tensor<R> slice_sample(const Tensor<R>& batch, int k) {
  Tensor<R> out({batch.dim(1), batch.dim(2), batch.dim(3)});
  std::memcpy(out.ptr(), batch.ptr() + static_cast<std::int64_t>(k) * out.numel(),
              sizeof(R) * out.numel());
  return out;
}

template <class R>
int render_traces(Generator<R>& gen, const ClassifierPhi<R>& phi,
                  const std::vector<RgbdSample<R>>& corpus, const std::vector<int>& indices,
                  const std::string& out_dir) {
  (void)phi;
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  {
    std::ofstream probe(out_dir + "/.write_probe");
    if (!probe) throw IoError("output directory is not writable: " + out_dir);
  }
  fs::remove(out_dir + "/.write_probe", ec);
  if (indices.empty()) return 0;

  ag::NoGradGuard ng;
  int written = 0;
  for (int idx : indices) {
    Tensor<R> rgb, dep;
    std::vector<int> one = {idx};
    if (gen.uses_rgb()) rgb = stack_rgb(corpus, one);
    if (gen.uses_dep()) dep = stack_dep(corpus, one);
    auto fwd = gen.forward(rgb, dep, false);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "sample_%06d", corpus[idx].sample_id);
    const std::string base = out_dir + "/" + stem;
    if (gen.uses_rgb()) {
      write_image(base + "_rgb_input.ppm", slice_sample(fwd.input_rgb->value, 0));
      write_image(base + "_rgb_trace_raw.ppm", slice_sample(fwd.trace_rgb->value, 0), -2.0,
                  2.0);
      write_image(base + "_rgb_trace_renorm.ppm",
                  renormalize(slice_sample(fwd.trace_rgb->value, 0)));
      write_image(base + "_rgb_live.ppm", slice_sample(fwd.live_rgb->value, 0));
    }
    if (gen.uses_dep()) {
      write_image(base + "_dep_input.pgm", slice_sample(fwd.input_dep->value, 0));
      write_image(base + "_dep_trace_raw.pgm", slice_sample(fwd.trace_dep->value, 0), -2.0,
                  2.0);
      write_image(base + "_dep_trace_renorm.pgm",
                  renormalize(slice_sample(fwd.trace_dep->value, 0)));
      write_image(base + "_dep_live.pgm", slice_sample(fwd.live_dep->value, 0));
    }
    ++written;
  }
  return written;
}

}  // namespace polytrace
