#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vdial/ops.hpp"
#include "vdial/rng.hpp"

namespace vdial::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * scale;
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Keeps entries at least `gap` away from zero so kinks (ReLU) are not
/// straddled by a finite-difference step.
inline Tensor away_from_zero(Rng& rng, Shape shape, double gap = 0.05) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double m = gap + std::abs(rng.normal());
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  std::string worst;
};

/// Relative error as |a − n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central finite differences (step h) of L = Σ w ⊙ f(inputs) with fixed
/// random weights w, against the tape's gradients for every input element.
inline GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                  std::vector<Tensor> inputs, Rng& rng, double h = 1e-5, double floor = 1e-6) {
  Tensor probe;
  {
    NoGradGuard no_grad;
    probe = f(inputs);
  }
  std::vector<double> weights(probe.numel());
  for (double& w : weights) w = rng.normal();
  auto objective = [&](const Tensor& y) {
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) total += weights[i] * y[i];
    return total;
  };

  for (auto& in : inputs) in.zero_grad();
  {
    Tape tape;
    const Tensor y = f(inputs);
    const Tensor w = Tensor::from(y.shape(), weights);
    tape.backward(sum(mul(y, w)));
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    Tensor& in = inputs[which];
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double saved = in[i];
      in[i] = saved + h;
      const double plus = objective(f(inputs));
      in[i] = saved - h;
      const double minus = objective(f(inputs));
      in[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double err = relative_error(a, numeric, floor);
      result.max_abs_grad = std::max(result.max_abs_grad, std::abs(a));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = "input " + std::to_string(which) + "[" + std::to_string(i) + "] analytic " +
                       std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

struct GradCase {
  std::string name;
  /// Builds inputs from a seeded rng and returns the function under test.
  std::function<std::pair<std::vector<Tensor>, std::function<Tensor(const std::vector<Tensor>&)>>(Rng&)> make;
};

/// Every differentiable primitive, each on small random shapes.
inline std::vector<GradCase> primitive_grad_cases() {
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  using Made = std::pair<std::vector<Tensor>, Fn>;
  auto dims = [](Rng& rng, int lo, int hi) { return static_cast<std::size_t>(rng.between(lo, hi)); };
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [=](Rng& r) {
                     const auto m = dims(r, 1, 4), k = dims(r, 1, 4), n = dims(r, 1, 4);
                     return Made{{random_tensor(r, {m, k}), random_tensor(r, {k, n})},
                                 [](const auto& in) { return matmul(in[0], in[1]); }};
                   }});
  cases.push_back({"transpose", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 4)})},
                                 [](const auto& in) { return transpose(in[0]); }};
                   }});
  cases.push_back({"reshape", [=](Rng& r) {
                     const auto a = dims(r, 1, 4), b = dims(r, 1, 4);
                     return Made{{random_tensor(r, {a, b})}, [a, b](const auto& in) { return reshape(in[0], {b, a}); }};
                   }});
  cases.push_back({"add", [=](Rng& r) {
                     const Shape s{dims(r, 1, 4), dims(r, 1, 4)};
                     return Made{{random_tensor(r, s), random_tensor(r, s)}, [](const auto& in) { return add(in[0], in[1]); }};
                   }});
  cases.push_back({"sub", [=](Rng& r) {
                     const Shape s{dims(r, 1, 4), dims(r, 1, 4)};
                     return Made{{random_tensor(r, s), random_tensor(r, s)}, [](const auto& in) { return sub(in[0], in[1]); }};
                   }});
  cases.push_back({"mul", [=](Rng& r) {
                     const Shape s{dims(r, 1, 4), dims(r, 1, 4)};
                     return Made{{random_tensor(r, s), random_tensor(r, s)}, [](const auto& in) { return mul(in[0], in[1]); }};
                   }});
  cases.push_back({"scale", [=](Rng& r) {
                     const double c = r.uniform(-2.0, 2.0);
                     return Made{{random_tensor(r, {dims(r, 1, 5)})}, [c](const auto& in) { return scale(in[0], c); }};
                   }});
  cases.push_back({"add_bias", [=](Rng& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                     return Made{{random_tensor(r, {m, n}), random_tensor(r, {n})},
                                 [](const auto& in) { return add_bias(in[0], in[1]); }};
                   }});
  cases.push_back({"relu", [=](Rng& r) {
                     return Made{{away_from_zero(r, {dims(r, 1, 4), dims(r, 1, 4)})}, [](const auto& in) { return relu(in[0]); }};
                   }});
  cases.push_back({"gelu", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 4)}, 2.0)}, [](const auto& in) { return gelu(in[0]); }};
                   }});
  cases.push_back({"tanh", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 4)})}, [](const auto& in) { return tanh(in[0]); }};
                   }});
  cases.push_back({"sum", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 4)})}, [](const auto& in) { return sum(in[0]); }};
                   }});
  cases.push_back({"dot", [=](Rng& r) {
                     const Shape s{dims(r, 1, 6)};
                     return Made{{random_tensor(r, s), random_tensor(r, s)}, [](const auto& in) { return dot(in[0], in[1]); }};
                   }});
  cases.push_back({"mean_rows", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 4)})}, [](const auto& in) { return mean_rows(in[0]); }};
                   }});
  cases.push_back({"softmax_lastdim", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 5)}, 2.0)},
                                 [](const auto& in) { return softmax_lastdim(in[0]); }};
                   }});
  cases.push_back({"layer_norm", [=](Rng& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 2, 6);
                     return Made{{random_tensor(r, {m, n}), random_tensor(r, {n}), random_tensor(r, {n})},
                                 [](const auto& in) { return layer_norm(in[0], in[1], in[2], 1e-5); }};
                   }});
  cases.push_back({"cross_entropy_logits", [=](Rng& r) {
                     const auto t = dims(r, 2, 5), v = dims(r, 2, 6);
                     std::vector<int> targets(t);
                     std::vector<bool> ignore(t);
                     for (std::size_t i = 0; i < t; ++i) {
                       targets[i] = static_cast<int>(r.below(v));
                       ignore[i] = i > 0 && r.bernoulli(0.3);
                     }
                     return Made{{random_tensor(r, {t, v}, 2.0)}, [targets, ignore](const auto& in) {
                                   return cross_entropy_logits(in[0], targets, ignore);
                                 }};
                   }});
  cases.push_back({"gather_rows", [=](Rng& r) {
                     const auto rows = dims(r, 2, 5), n = dims(r, 1, 4);
                     std::vector<int> idx(dims(r, 1, 6));
                     for (int& i : idx) i = static_cast<int>(r.below(rows));
                     return Made{{random_tensor(r, {rows, n})}, [idx](const auto& in) { return gather_rows(in[0], idx); }};
                   }});
  cases.push_back({"slice_rows", [=](Rng& r) {
                     const auto rows = dims(r, 2, 6);
                     const auto b = r.below(rows);
                     const auto e = b + 1 + r.below(rows - b);
                     return Made{{random_tensor(r, {rows, dims(r, 1, 4)})},
                                 [b, e](const auto& in) { return slice_rows(in[0], b, e); }};
                   }});
  cases.push_back({"concat_rows", [=](Rng& r) {
                     const auto n = dims(r, 1, 4);
                     return Made{{random_tensor(r, {dims(r, 1, 3), n}), random_tensor(r, {dims(r, 1, 3), n})},
                                 [](const auto& in) { return concat_rows({in[0], in[1]}); }};
                   }});
  cases.push_back({"concat_cols", [=](Rng& r) {
                     const auto m = dims(r, 1, 4);
                     return Made{{random_tensor(r, {m, dims(r, 1, 3)}), random_tensor(r, {m, dims(r, 1, 3)})},
                                 [](const auto& in) { return concat_cols({in[0], in[1]}); }};
                   }});
  cases.push_back({"conv3d", [=](Rng& r) {
                     const auto cin = dims(r, 1, 2), cout = dims(r, 1, 3);
                     const auto kt = dims(r, 1, 2), kh = dims(r, 1, 3);
                     Conv3dGeometry geo{{dims(r, 1, 2), dims(r, 1, 2), dims(r, 1, 2)}, {r.below(2), r.below(2), r.below(2)}};
                     return Made{{random_tensor(r, {dims(r, 2, 3), dims(r, 3, 4), dims(r, 3, 4), cin}),
                                  random_tensor(r, {kt, kh, kh, cin, cout}), random_tensor(r, {cout})},
                                 [geo](const auto& in) { return conv3d(in[0], in[1], in[2], geo); }};
                   }});
  cases.push_back({"spatial_avg_pool", [=](Rng& r) {
                     return Made{{random_tensor(r, {dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)})},
                                 [](const auto& in) { return spatial_avg_pool(in[0]); }};
                   }});
  cases.push_back({"attention", [=](Rng& r) {
                     const std::size_t heads = dims(r, 1, 2);
                     const auto d = heads * dims(r, 1, 3), lq = dims(r, 1, 4), lk = dims(r, 1, 4);
                     std::vector<bool> mask(lk, true);
                     for (std::size_t j = 1; j < lk; ++j) mask[j] = !r.bernoulli(0.3);
                     const bool causal = lq == lk && r.bernoulli(0.5);
                     return Made{{random_tensor(r, {lq, d}), random_tensor(r, {lk, d}), random_tensor(r, {lk, d})},
                                 [heads, mask, causal](const auto& in) {
                                   return attention(in[0], in[1], in[2], heads, mask, causal);
                                 }};
                   }});
  return cases;
}

}  // namespace vdial::testing
