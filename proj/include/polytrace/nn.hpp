#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "polytrace/ops.hpp"
#include "polytrace/rng.hpp"

namespace polytrace::nn {

using ag::Var;

// Named parameters and buffers of a module tree, in registration order.
// The order is the serialization and digest order, so it must be stable.
template <class R>
struct ParamSet {
  std::vector<std::pair<std::string, Var<R>>> params;
  std::vector<std::pair<std::string, Tensor<R>*>> buffers;

  void add(const std::string& name, const Var<R>& p) {
    if (p) params.emplace_back(name, p);
  }
  void add_buffer(const std::string& name, Tensor<R>* t) { buffers.emplace_back(name, t); }

  void zero_grad() const {
    for (const auto& [_, p] : params) ag::clear_grad(p);
  }

  std::uint64_t digest(bool include_buffers = true) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, p] : params) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(p->value.ptr(), sizeof(R) * p->value.data.size(), h);
    }
    if (include_buffers)
      for (const auto& [name, t] : buffers) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t->ptr(), sizeof(R) * t->data.size(), h);
      }
    return h;
  }
};

template <class R>
Var<R> make_param(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor<R> t(std::move(shape));
  if (stddev > 0) {
    for (auto& v : t.data) v = static_cast<R>(rng.normal() * stddev);
  }
  return ag::leaf<R>(std::move(t), true);
}

// ---------------------------------------------------------------------------

template <class R>
struct Conv2d {
  Var<R> w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int stride_, int pad_, bool bias, Rng& rng)
      : stride(stride_), pad(pad_) {
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    w = make_param<R>({cout, cin, k, k}, rng, std);
    if (bias) b = make_param<R>({cout}, rng, 0.0);
  }

  Var<R> forward(const Var<R>& x) const { return ag::conv2d(x, w, b, stride, pad); }

  void collect(ParamSet<R>& ps, const std::string& p) const {
    ps.add(p + ".w", w);
    if (b) ps.add(p + ".b", b);
  }
};

template <class R>
struct ConvTranspose2d {
  Var<R> w, b;
  int stride = 2, pad = 1;

  ConvTranspose2d() = default;
  ConvTranspose2d(int cin, int cout, int k, int stride_, int pad_, bool bias, Rng& rng)
      : stride(stride_), pad(pad_) {
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    w = make_param<R>({cin, cout, k, k}, rng, std);
    if (bias) b = make_param<R>({cout}, rng, 0.0);
  }

  Var<R> forward(const Var<R>& x) const {
    return ag::conv_transpose2d(x, w, b, stride, pad);
  }

  void collect(ParamSet<R>& ps, const std::string& p) const {
    ps.add(p + ".w", w);
    if (b) ps.add(p + ".b", b);
  }
};

template <class R>
struct Linear {
  Var<R> w, b;

  Linear() = default;
  Linear(int in, int out, Rng& rng) {
    w = make_param<R>({out, in}, rng, std::sqrt(1.0 / in));
    b = make_param<R>({out}, rng, 0.0);
  }

  Var<R> forward(const Var<R>& x) const { return ag::linear(x, w, b); }

  void collect(ParamSet<R>& ps, const std::string& p) const {
    ps.add(p + ".w", w);
    ps.add(p + ".b", b);
  }
};

template <class R>
struct BatchNorm2d {
  Var<R> gamma, beta;
  Tensor<R> running_mean, running_var;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int c) {
    gamma = ag::leaf<R>(Tensor<R>({c}, R(1)), true);
    beta = ag::leaf<R>(Tensor<R>({c}, R(0)), true);
    running_mean = Tensor<R>({c}, R(0));
    running_var = Tensor<R>({c}, R(1));
  }

  Var<R> forward(const Var<R>& x, bool training) {
    return ag::batchnorm2d(x, gamma, beta, &running_mean, &running_var, training);
  }

  void collect(ParamSet<R>& ps, const std::string& p) {
    ps.add(p + ".gamma", gamma);
    ps.add(p + ".beta", beta);
    ps.add_buffer(p + ".running_mean", &running_mean);
    ps.add_buffer(p + ".running_var", &running_var);
  }
};

// ResNet bottleneck: 1x1 down, 3x3 (carries the stride), 1x1 up, projection
// shortcut when shape changes.
template <class R>
struct Bottleneck {
  Conv2d<R> c1, c2, c3, proj;
  BatchNorm2d<R> n1, n2, n3, nproj;
  bool has_proj = false;

  Bottleneck() = default;
  Bottleneck(int cin, int cmid, int cout, int stride, Rng& rng) {
    c1 = Conv2d<R>(cin, cmid, 1, 1, 0, false, rng);
    n1 = BatchNorm2d<R>(cmid);
    c2 = Conv2d<R>(cmid, cmid, 3, stride, 1, false, rng);
    n2 = BatchNorm2d<R>(cmid);
    c3 = Conv2d<R>(cmid, cout, 1, 1, 0, false, rng);
    n3 = BatchNorm2d<R>(cout);
    has_proj = (cin != cout) || (stride != 1);
    if (has_proj) {
      proj = Conv2d<R>(cin, cout, 1, stride, 0, false, rng);
      nproj = BatchNorm2d<R>(cout);
    }
  }

  Var<R> forward(const Var<R>& x, bool training) {
    auto y = ag::relu(n1.forward(c1.forward(x), training));
    y = ag::relu(n2.forward(c2.forward(y), training));
    y = n3.forward(c3.forward(y), training);
    auto sc = has_proj ? nproj.forward(proj.forward(x), training) : x;
    return ag::relu(ag::add(y, sc));
  }

  void collect(ParamSet<R>& ps, const std::string& p) {
    c1.collect(ps, p + ".c1");
    n1.collect(ps, p + ".n1");
    c2.collect(ps, p + ".c2");
    n2.collect(ps, p + ".n2");
    c3.collect(ps, p + ".c3");
    n3.collect(ps, p + ".n3");
    if (has_proj) {
      proj.collect(ps, p + ".proj");
      nproj.collect(ps, p + ".nproj");
    }
  }
};

// ---------------------------------------------------------------------------
// Adam with bias correction. Parameters whose grad buffer was never touched
// by the last backward pass are skipped, so phase-local updates stay local.
template <class R>
struct Adam {
  double lr;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  struct Slot {
    std::string name;
    Var<R> param;
    Tensor<R> m, v;
    std::int64_t t = 0;
  };
  std::vector<Slot> slots;

  explicit Adam(double lr_ = 5e-5) : lr(lr_) {}

  void attach(const ParamSet<R>& ps) {
    for (const auto& [name, p] : ps.params) {
      Slot s;
      s.name = name;
      s.param = p;
      s.m = Tensor<R>::zeros(p->value.shape);
      s.v = Tensor<R>::zeros(p->value.shape);
      slots.push_back(std::move(s));
    }
  }

  void step() {
    for (auto& s : slots) {
      if (!s.param->grad_alloc) continue;
      s.t += 1;
      const R b1 = static_cast<R>(beta1), b2 = static_cast<R>(beta2);
      const R bc1 = R(1) - static_cast<R>(std::pow(beta1, static_cast<double>(s.t)));
      const R bc2 = R(1) - static_cast<R>(std::pow(beta2, static_cast<double>(s.t)));
      const R a = static_cast<R>(lr);
      const R e = static_cast<R>(eps);
      Tensor<R>& g = s.param->grad;
      Tensor<R>& p = s.param->value;
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        s.m[i] = b1 * s.m[i] + (R(1) - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (R(1) - b2) * g[i] * g[i];
        const R mh = s.m[i] / bc1;
        const R vh = s.v[i] / bc2;
        p[i] -= a * mh / (std::sqrt(vh) + e);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots) ag::clear_grad(s.param);
  }
};

}  // namespace polytrace::nn
