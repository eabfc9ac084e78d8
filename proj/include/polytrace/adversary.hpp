#pragma once

// Multi-scale patch discriminators: one per (modality, domain, scale).
// Live-domain discriminators judge reconstructed vs. real live images;
// spoof-domain ones judge synthesized vs. real spoof images. 7 conv layers,
// 3 of them stride-2, so a 64px input yields an 8x8 patch score map.

#include <string>
#include <vector>

#include "polytrace/nn.hpp"

namespace polytrace {

enum class Modality { rgb, dep };
enum class Domain { live, spoof };

inline const char* to_string(Modality m) { return m == Modality::rgb ? "rgb" : "dep"; }
inline const char* to_string(Domain d) { return d == Domain::live ? "live" : "spoof"; }

template <class R>
struct PatchDiscriminator {
  std::vector<nn::Conv2d<R>> convs;

  PatchDiscriminator() = default;
  PatchDiscriminator(int in_ch, double width_mult, Rng& rng) {
    const int base[7] = {32, 64, 64, 128, 128, 128, 1};
    const int stride[7] = {1, 2, 1, 2, 1, 2, 1};
    int prev = in_ch;
    for (int i = 0; i < 7; ++i) {
      const int ch = (i == 6) ? 1 : scaled_ch(base[i], width_mult);
      convs.emplace_back(prev, ch, 3, stride[i], 1, true, rng);
      prev = ch;
    }
  }

  ag::Var<R> forward(const ag::Var<R>& x) const {
    auto y = x;
    for (std::size_t i = 0; i + 1 < convs.size(); ++i)
      y = ag::leaky_relu(convs[i].forward(y), R(0.2));
    return convs.back().forward(y);  // raw patch scores
  }

  void collect(nn::ParamSet<R>& ps, const std::string& p) const {
    for (std::size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(ps, p + ".c" + std::to_string(i));
  }
};

template <class R>
struct DiscriminatorBank {
  int n_scales = 2;
  double width_mult = 0.25;
  // indexed [modality][domain][scale]
  std::vector<PatchDiscriminator<R>> discs;

  DiscriminatorBank() = default;
  DiscriminatorBank(double mult, int scales, std::uint64_t seed)
      : n_scales(scales), width_mult(mult) {
    require(n_scales >= 1, "DiscriminatorBank: need at least one scale");
    for (int m = 0; m < 2; ++m)
      for (int d = 0; d < 2; ++d)
        for (int s = 0; s < n_scales; ++s) {
          Rng rng(mix_seed(seed, "disc." + std::string(m == 0 ? "rgb" : "dep") + "." +
                                     (d == 0 ? "live" : "spoof") + ".s" +
                                     std::to_string(s)));
          discs.emplace_back(m == 0 ? 3 : 1, mult, rng);
        }
  }

  int index(Modality m, Domain d, int scale) const {
    return (static_cast<int>(m) * 2 + static_cast<int>(d)) * n_scales + scale;
  }

  // One raw patch score map per scale; coarser scales see 2x average-pooled
  // copies of the input.
  std::vector<ag::Var<R>> score(Modality m, Domain d, const ag::Var<R>& images) const {
    const int want = m == Modality::rgb ? 3 : 1;
    require(images->value.rank() == 4 && images->value.dim(1) == want,
            "discriminator: channel count does not match modality");
    std::vector<ag::Var<R>> maps;
    auto cur = images;
    for (int s = 0; s < n_scales; ++s) {
      if (s > 0) cur = ag::avgpool2x(cur);
      maps.push_back(discs[index(m, d, s)].forward(cur));
    }
    return maps;
  }

  void collect(nn::ParamSet<R>& ps) {
    for (int m = 0; m < 2; ++m)
      for (int d = 0; d < 2; ++d)
        for (int s = 0; s < n_scales; ++s)
          discs[index(static_cast<Modality>(m), static_cast<Domain>(d), s)].collect(
              ps, std::string("disc.") + (m == 0 ? "rgb" : "dep") + "." +
                      (d == 0 ? "live" : "spoof") + ".s" + std::to_string(s));
  }

  // Parameters of one domain only (for the domain-separation property).
  void collect_domain(nn::ParamSet<R>& ps, Domain d) {
    for (int m = 0; m < 2; ++m)
      for (int s = 0; s < n_scales; ++s)
        discs[index(static_cast<Modality>(m), d, s)].collect(
            ps, std::string("disc.") + (m == 0 ? "rgb" : "dep") + "." + to_string(d) +
                    ".s" + std::to_string(s));
  }
};

}  // namespace polytrace
