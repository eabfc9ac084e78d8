#pragma once

// Procedural synthetic RGB-D face/attack corpus with planted additive traces,
// protocol splitters, and a manifest-driven loader for external image pairs.
//
// Samples are pure functions of (seed, identity, slot): each identity has a
// deterministic base face; spoofs are clamp(base + trace) with the planted
// trace stored as exactly (sample - base); live samples get a small smooth
// illumination field so they are not byte-duplicates of the base.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "polytrace/image_io.hpp"
#include "polytrace/rng.hpp"

namespace polytrace {

enum class AttackType { none, print, replay, mask, glasses };

inline const char* to_string(AttackType a) {
  switch (a) {
    case AttackType::none: return "none";
    case AttackType::print: return "print";
    case AttackType::replay: return "replay";
    case AttackType::mask: return "mask";
    default: return "glasses";
  }
}

inline AttackType attack_from(const std::string& s) {
  if (s == "none") return AttackType::none;
  if (s == "print") return AttackType::print;
  if (s == "replay") return AttackType::replay;
  if (s == "mask") return AttackType::mask;
  if (s == "glasses") return AttackType::glasses;
  throw ConfigError("unknown attack type: " + s);
}

template <class R>
struct RgbdSample {
  Tensor<R> rgb;    // [3,H,W] in [-1,1]
  Tensor<R> depth;  // [1,H,W] in [-1,1]
  int label = 0;    // 0 live, 1 spoof
  AttackType attack = AttackType::none;
  int identity_id = 0;
  int sample_id = 0;
  bool has_planted = false;
  Tensor<R> planted_rgb, planted_dep;
};

struct SynthConfig {
  int n_identities = 16;
  int n_per_identity = 4;  // samples per identity for live and for each attack
  std::vector<AttackType> attack_types = {AttackType::print, AttackType::replay,
                                          AttackType::mask, AttackType::glasses};
  int image_size = 64;
  std::uint64_t seed = 1;
};

// ---------------------------------------------------------------------------
// Base face geometry, drawn once per identity.

struct FaceParams {
  double cx, cy;          // face center (pixels)
  double rx, ry;          // face radii
  double bg[3];           // background color
  double skin[3];         // face color
  double shade;           // vertical shading strength
  double eye_dx, eye_dy;  // eye offsets relative to radii
  double eye_r;           // eye radius
  double eye_depthc;      // eye darkening
  double depth_bg;        // flat background depth
  double depth_amp;       // bump amplitude
};

inline FaceParams draw_face_params(std::uint64_t corpus_seed, int identity, int size) {
  Rng rng(mix_seed(mix_seed(corpus_seed, "identity"), static_cast<std::uint64_t>(identity)));
  FaceParams p;
  p.cx = size * (0.5 + rng.uniform(-0.04, 0.04));
  p.cy = size * (0.5 + rng.uniform(-0.04, 0.04));
  p.rx = size * rng.uniform(0.28, 0.36);
  p.ry = p.rx * rng.uniform(0.95, 1.18);
  for (int c = 0; c < 3; ++c) p.bg[c] = rng.uniform(-0.85, -0.45);
  const double lum = rng.uniform(0.05, 0.55);
  p.skin[0] = lum + rng.uniform(0.05, 0.25);
  p.skin[1] = lum + rng.uniform(-0.05, 0.10);
  p.skin[2] = lum + rng.uniform(-0.25, -0.05);
  p.shade = rng.uniform(0.05, 0.2);
  p.eye_dx = rng.uniform(0.35, 0.45);
  p.eye_dy = rng.uniform(0.25, 0.38);
  p.eye_r = rng.uniform(0.10, 0.15);
  p.eye_depthc = rng.uniform(0.3, 0.5);
  p.depth_bg = -0.85;
  p.depth_amp = rng.uniform(0.8, 1.05);
  return p;
}

// Renders the identity base face (rgb [3,S,S], depth [1,S,S]). Double math
// internally; cast at the end.
template <class R>
void render_base_face(const FaceParams& p, int S, Tensor<R>& rgb, Tensor<R>& depth) {
  rgb = Tensor<R>({3, S, S});
  depth = Tensor<R>({1, S, S});
  const double ex[2] = {p.cx - p.eye_dx * p.rx, p.cx + p.eye_dx * p.rx};
  const double ey = p.cy - p.eye_dy * p.ry;
  const double er = p.eye_r * p.rx;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double nx = (x - p.cx) / p.rx, ny = (y - p.cy) / p.ry;
      const double rn = std::sqrt(nx * nx + ny * ny);
      const double w = 1.0 / (1.0 + std::exp((rn - 1.0) * 10.0));  // smooth blob edge
      double eyes = 0;
      for (double cx2 : ex) {
        const double d2 = ((x - cx2) * (x - cx2) + (y - ey) * (y - ey)) / (er * er);
        eyes += std::exp(-d2);
      }
      const double mouth_d2 =
          ((x - p.cx) * (x - p.cx) / (0.25 * p.rx * p.rx) +
           (y - (p.cy + 0.5 * p.ry)) * (y - (p.cy + 0.5 * p.ry)) / (0.02 * p.ry * p.ry));
      const double mouth = std::exp(-mouth_d2);
      const double shade = 1.0 - p.shade * ny;
      for (int c = 0; c < 3; ++c) {
        double v = p.bg[c] + (p.skin[c] * shade - p.bg[c]) * w;
        v -= p.eye_depthc * eyes + 0.25 * mouth;
        rgb[(static_cast<std::int64_t>(c) * S + y) * S + x] =
            static_cast<R>(std::clamp(v, -1.0, 1.0));
      }
      double d = p.depth_bg;
      if (rn < 1.0) {
        d += p.depth_amp * std::sqrt(1.0 - rn * rn);
        d += 0.08 * std::exp(-(nx * nx + ny * ny) / 0.02);  // nose
        d -= 0.05 * eyes;
      }
      depth[static_cast<std::int64_t>(y) * S + x] = static_cast<R>(std::clamp(d, -1.0, 1.0));
    }
}

// ---------------------------------------------------------------------------
// Attack traces (double precision [3,S,S] / [1,S,S], |T| <= 0.8 by
// construction so the additive model stays exact on most pixels).

inline void render_trace(AttackType a, const FaceParams& p, int S, Rng& rng,
                         const Tensor<double>& base_dep, Tensor<double>& t_rgb,
                         Tensor<double>& t_dep) {
  t_rgb = Tensor<double>({3, S, S}, 0.0);
  t_dep = Tensor<double>({1, S, S}, 0.0);
  auto flatten_depth = [&](double gamma) {
    for (std::int64_t i = 0; i < t_dep.numel(); ++i)
      t_dep[i] = gamma * (p.depth_bg - base_dep[i]);
  };
  switch (a) {
    case AttackType::print: {
      double cast[3];
      for (double& c : cast) c = (rng.coin(0.5) ? 1 : -1) * rng.uniform(0.2, 0.4);
      for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(S) * S; ++i)
          t_rgb[c * S * S + i] = cast[c];
      flatten_depth(rng.uniform(0.55, 0.7));
      break;
    }
    case AttackType::replay: {
      // coarse moire: periods of 8..21 px survive the encoder's /4 stem
      const double amp = rng.uniform(0.18, 0.35);
      const double freq = rng.uniform(3.0, 8.0);
      const double theta = rng.uniform(0.0, 3.14159265358979323846);
      const double phase[3] = {rng.uniform(0, 6.283), rng.uniform(0, 6.283),
                               rng.uniform(0, 6.283)};
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x) {
            const double u = (x * std::cos(theta) + y * std::sin(theta)) / S;
            t_rgb[(static_cast<std::int64_t>(c) * S + y) * S + x] =
                amp * std::sin(2 * 3.14159265358979323846 * freq * u + phase[c]);
          }
      flatten_depth(rng.uniform(0.5, 0.65));
      break;
    }
    case AttackType::mask: {
      double amp[3];
      const double base_amp = (rng.coin(0.5) ? 1 : -1) * rng.uniform(0.25, 0.45);
      for (int c = 0; c < 3; ++c) amp[c] = base_amp * rng.uniform(0.8, 1.2);
      const double sigma = rng.uniform(0.12, 0.22);
      const double damp = rng.uniform(0.2, 0.35);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double nx = (x - p.cx) / p.rx, ny = (y - p.cy) / p.ry;
          const double rn = std::sqrt(nx * nx + ny * ny);
          const double ring = std::exp(-(rn - 1.0) * (rn - 1.0) / (sigma * sigma));
          for (int c = 0; c < 3; ++c)
            t_rgb[(static_cast<std::int64_t>(c) * S + y) * S + x] = amp[c] * ring;
          t_dep[static_cast<std::int64_t>(y) * S + x] = damp * ring;
        }
      break;
    }
    case AttackType::glasses: {
      const double amp = -rng.uniform(0.4, 0.6);
      const double damp = rng.uniform(0.25, 0.45);
      const double ex[2] = {p.cx - p.eye_dx * p.rx, p.cx + p.eye_dx * p.rx};
      const double ey = p.cy - p.eye_dy * p.ry;
      const double gr = rng.uniform(2.2, 3.0) * p.eye_r * p.rx;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double m = 0;
          for (double cx2 : ex) {
            const double d2 =
                ((x - cx2) * (x - cx2) + (y - ey) * (y - ey)) / (gr * gr);
            m = std::max(m, std::exp(-d2 * d2));  // flat-top lens
          }
          // bridge bar between the lenses
          if (std::abs(y - ey) < 0.25 * gr && x > ex[0] && x < ex[1]) m = std::max(m, 0.8);
          t_rgb[(static_cast<std::int64_t>(0) * S + y) * S + x] = amp * m;
          t_rgb[(static_cast<std::int64_t>(1) * S + y) * S + x] = amp * m;
          t_rgb[(static_cast<std::int64_t>(2) * S + y) * S + x] = amp * m;
          t_dep[static_cast<std::int64_t>(y) * S + x] = damp * m;
        }
      break;
    }
    default:
      break;
  }
}

// ---------------------------------------------------------------------------

template <class R>
std::vector<RgbdSample<R>> generate_corpus(const SynthConfig& cfg) {
  if (cfg.image_size < 32 || !is_pow2(cfg.image_size))
    throw ConfigError("image_size must be a power of two >= 32");
  if (cfg.n_identities < 2) throw ConfigError("n_identities must be >= 2");
  if (cfg.n_per_identity < 1) throw ConfigError("n_per_identity must be >= 1");
  if (cfg.attack_types.empty()) throw ConfigError("attack set must not be empty");
  for (auto a : cfg.attack_types)
    if (a == AttackType::none) throw ConfigError("attack set cannot contain 'none'");

  const int S = cfg.image_size;
  std::vector<RgbdSample<R>> corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.n_identities) * cfg.n_per_identity *
                 (1 + cfg.attack_types.size()));

  int sample_id = 0;
  for (int id = 0; id < cfg.n_identities; ++id) {
    const FaceParams fp = draw_face_params(cfg.seed, id, S);
    Tensor<double> base_rgb, base_dep;
    render_base_face(fp, S, base_rgb, base_dep);

    // Per-sample capture model: smooth illumination field plus bounded
    // pixel noise, applied to every sample so the live-content
    // distribution matches between real and reconstructed images. For
    // spoofs the planted trace stores exactly sample - clean base.
    auto capture = [&](std::uint64_t sid, const Tensor<double>* t_rgb,
                       const Tensor<double>* t_dep) {
      Rng rng(mix_seed(mix_seed(cfg.seed, "capture"), sid));
      const double a = rng.uniform(0.0, 0.05);
      const double u = rng.uniform(0.5, 2.0), v = rng.uniform(0.5, 2.0);
      const double phi = rng.uniform(0.0, 6.283);
      RgbdSample<R> s;
      s.rgb = Tensor<R>({3, S, S});
      s.depth = Tensor<R>({1, S, S});
      if (t_rgb) {
        s.planted_rgb = Tensor<R>({3, S, S});
        s.planted_dep = Tensor<R>({1, S, S});
        s.has_planted = true;
      }
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double field =
              a * std::sin(2 * 3.14159265358979323846 * (u * x + v * y) / S + phi);
          for (int c = 0; c < 3; ++c) {
            const std::int64_t at = (static_cast<std::int64_t>(c) * S + y) * S + x;
            const double noise = rng.uniform(-0.025, 0.025);
            const double sam = std::clamp(
                base_rgb[at] + field + noise + (t_rgb ? (*t_rgb)[at] : 0.0), -1.0, 1.0);
            s.rgb[at] = static_cast<R>(sam);
            if (t_rgb) s.planted_rgb[at] = s.rgb[at] - static_cast<R>(base_rgb[at]);
          }
          const std::int64_t at = static_cast<std::int64_t>(y) * S + x;
          const double noise = rng.uniform(-0.02, 0.02);
          const double sam = std::clamp(
              base_dep[at] + 0.2 * field + noise + (t_dep ? (*t_dep)[at] : 0.0), -1.0,
              1.0);
          s.depth[at] = static_cast<R>(sam);
          if (t_dep) s.planted_dep[at] = s.depth[at] - static_cast<R>(base_dep[at]);
        }
      s.identity_id = id;
      return s;
    };

    for (int k = 0; k < cfg.n_per_identity; ++k) {
      RgbdSample<R> s = capture(static_cast<std::uint64_t>(sample_id), nullptr, nullptr);
      s.label = 0;
      s.attack = AttackType::none;
      s.sample_id = sample_id++;
      corpus.push_back(std::move(s));
    }

    for (AttackType a : cfg.attack_types) {
      for (int k = 0; k < cfg.n_per_identity; ++k) {
        Rng rng(mix_seed(mix_seed(cfg.seed, "trace"), static_cast<std::uint64_t>(sample_id)));
        Tensor<double> t_rgb, t_dep;
        render_trace(a, fp, S, rng, base_dep, t_rgb, t_dep);
        RgbdSample<R> s = capture(static_cast<std::uint64_t>(sample_id), &t_rgb, &t_dep);
        s.label = 1;
        s.attack = a;
        s.sample_id = sample_id++;
        corpus.push_back(std::move(s));
      }
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Protocol splits.

enum class Protocol { grandtest, loo };

struct ProtocolSpec {
  Protocol protocol = Protocol::grandtest;
  AttackType holdout = AttackType::none;  // for loo
};

struct SplitRatios {
  double train = 0.6, val = 0.2, test = 0.2;
};

template <class R>
struct DatasetSplit {
  std::shared_ptr<const std::vector<RgbdSample<R>>> corpus;
  std::vector<int> train, validation, test;
  ProtocolSpec protocol;
};

template <class R>
DatasetSplit<R> make_split(std::shared_ptr<const std::vector<RgbdSample<R>>> corpus,
                           const ProtocolSpec& spec, std::uint64_t seed,
                           const SplitRatios& ratios = {}) {
  require(corpus && !corpus->empty(), "make_split: empty corpus");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");

  // group indices: lives, then spoofs per attack type
  std::vector<int> lives;
  std::vector<std::pair<AttackType, std::vector<int>>> spoof_groups;
  for (int i = 0; i < static_cast<int>(corpus->size()); ++i) {
    const auto& s = (*corpus)[i];
    if (s.label == 0) {
      lives.push_back(i);
    } else {
      auto it = std::find_if(spoof_groups.begin(), spoof_groups.end(),
                             [&](const auto& g) { return g.first == s.attack; });
      if (it == spoof_groups.end()) {
        spoof_groups.push_back({s.attack, {i}});
      } else {
        it->second.push_back(i);
      }
    }
  }

  if (spec.protocol == Protocol::loo) {
    const bool present = std::any_of(spoof_groups.begin(), spoof_groups.end(),
                                     [&](const auto& g) { return g.first == spec.holdout; });
    if (spec.holdout == AttackType::none || !present)
      throw ConfigError(std::string("loo holdout attack type not present in corpus: ") +
                        to_string(spec.holdout));
  }

  DatasetSplit<R> out;
  out.corpus = corpus;
  out.protocol = spec;

  // three-way split with every partition non-empty when the group allows it
  auto three_way = [&](std::vector<int> idx, std::uint64_t stream) {
    Rng rng(mix_seed(seed, stream));
    rng.shuffle(idx.begin(), idx.end());
    const int n = static_cast<int>(idx.size());
    int n_tr = static_cast<int>(std::lround(ratios.train * n));
    int n_va = static_cast<int>(std::lround(ratios.val * n));
    if (n >= 3) {
      n_tr = std::max(1, std::min(n_tr, n - 2));
      n_va = std::max(1, std::min(n_va, n - n_tr - 1));
    }
    for (int i = 0; i < n; ++i) {
      if (i < n_tr)
        out.train.push_back(idx[i]);
      else if (i < n_tr + n_va)
        out.validation.push_back(idx[i]);
      else
        out.test.push_back(idx[i]);
    }
  };

  auto two_way = [&](std::vector<int> idx, std::uint64_t stream) {
    Rng rng(mix_seed(seed, stream));
    rng.shuffle(idx.begin(), idx.end());
    const int n = static_cast<int>(idx.size());
    const double tr_frac = ratios.train / (ratios.train + ratios.val);
    int n_tr = static_cast<int>(std::lround(tr_frac * n));
    if (n >= 2) n_tr = std::max(1, std::min(n_tr, n - 1));
    for (int i = 0; i < n; ++i)
      (i < n_tr ? out.train : out.validation).push_back(idx[i]);
  };

  three_way(lives, fnv1a64("lives", 5));
  for (auto& [attack, idx] : spoof_groups) {
    const std::uint64_t stream = fnv1a64(to_string(attack), std::strlen(to_string(attack)));
    if (spec.protocol == Protocol::grandtest) {
      three_way(idx, stream);
    } else if (attack == spec.holdout) {
      for (int i : idx) out.test.push_back(i);
    } else {
      two_way(idx, stream);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: manifest + image pairs (+ raw planted traces for synthetics).
// Manifest row: rgb_path <TAB> depth_path <TAB> label <TAB> attack <TAB> identity_id

template <class R>
void save_corpus(const std::vector<RgbdSample<R>>& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream man(dir + "/manifest.tsv");
  if (!man) throw IoError("cannot write manifest under: " + dir);
  for (const auto& s : corpus) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "sample_%06d", s.sample_id);
    const std::string rgb_rel = std::string(stem) + "_rgb.ppm";
    const std::string dep_rel = std::string(stem) + "_dep.pgm";
    write_image(dir + "/" + rgb_rel, s.rgb);
    write_image(dir + "/" + dep_rel, s.depth);
    if (s.has_planted) {
      write_tensor_file(dir + "/" + stem + "_trace_rgb.tns", s.planted_rgb);
      write_tensor_file(dir + "/" + stem + "_trace_dep.tns", s.planted_dep);
    }
    man << rgb_rel << '\t' << dep_rel << '\t' << s.label << '\t' << to_string(s.attack)
        << '\t' << s.identity_id << '\n';
  }
  if (!man) throw IoError("short manifest write under: " + dir);
}

// Loads pre-cropped external image pairs listed in a manifest. Pixels are
// resized to `image_size` and mapped by v/127.5 - 1; no planted traces.
template <class R>
std::vector<RgbdSample<R>> load_external(const std::string& root,
                                         const std::string& manifest_path,
                                         int image_size) {
  std::ifstream man(manifest_path);
  if (!man) throw DataError("cannot open manifest: " + manifest_path);
  std::vector<RgbdSample<R>> out;
  std::string line;
  int row = 0, sample_id = 0;
  while (std::getline(man, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 5)
      throw DataError("manifest row " + std::to_string(row) +
                      ": expected 5 tab-separated fields, got " +
                      std::to_string(cols.size()));
    RgbdSample<R> s;
    const std::string rgb_path =
        cols[0].front() == '/' ? cols[0] : root + "/" + cols[0];
    const std::string dep_path =
        cols[1].front() == '/' ? cols[1] : root + "/" + cols[1];
    try {
      auto rgb8 = read_image<R>(rgb_path);
      require(rgb8.dim(0) == 3, "rgb image must have 3 channels");
      auto dep8 = read_image<R>(dep_path);
      require(dep8.dim(0) == 1, "depth image must have 1 channel");
      s.rgb = resize_bilinear(rgb8, image_size, image_size)
                  .map([](R v) { return static_cast<R>(v / R(127.5) - R(1)); });
      s.depth = resize_bilinear(dep8, image_size, image_size)
                    .map([](R v) { return static_cast<R>(v / R(127.5) - R(1)); });
    } catch (const std::exception& e) {
      throw DataError("manifest row " + std::to_string(row) + " (" + cols[0] + "): " +
                      e.what());
    }
    try {
      s.label = std::stoi(cols[2]);
      require(s.label == 0 || s.label == 1, "label must be 0 or 1");
      s.attack = attack_from(cols[3]);
      s.identity_id = std::stoi(cols[4]);
      require((s.label == 0) == (s.attack == AttackType::none),
              "label/attack_type combination is inconsistent");
    } catch (const std::exception& e) {
      throw DataError("manifest row " + std::to_string(row) + ": " + e.what());
    }
    s.sample_id = sample_id++;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace polytrace
