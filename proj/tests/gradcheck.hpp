#pragma once

// Central finite-difference gradient checking, double precision.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "polytrace/ops.hpp"
#include "polytrace/rng.hpp"

namespace gradcheck {

using polytrace::Tensor;
using polytrace::ag::Var;

struct Result {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::string where;
};

// f: rebuilds the scalar loss from the current values of `inputs`.
// Checks d loss / d input against central differences for every element of
// every input. rel err uses a denominator floored at `floor_den` to keep
// near-zero gradients comparable.
inline Result check(const std::function<Var<double>()>& f,
                    const std::vector<Var<double>>& inputs, double step = 1e-4,
                    double floor_den = 1e-6) {
  Result res;

  auto loss = f();
  for (const auto& in : inputs) polytrace::ag::clear_grad(in);
  polytrace::ag::backward(loss);

  std::vector<Tensor<double>> analytic;
  for (const auto& in : inputs)
    analytic.push_back(in->grad_alloc ? in->grad : Tensor<double>::zeros(in->value.shape));

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k]->value;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + step;
      const double fp = f()->value[0];
      t[i] = orig - step;
      const double fm = f()->value[0];
      t[i] = orig;
      const double num = (fp - fm) / (2 * step);
      const double ana = analytic[k][i];
      const double rel =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor_den});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_analytic = ana;
        res.worst_numeric = num;
        res.where = "input " + std::to_string(k) + " elem " + std::to_string(i);
      }
    }
  }
  return res;
}

inline Tensor<double> random_tensor(std::vector<int> shape, polytrace::Rng& rng,
                                    double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

}  // namespace gradcheck
