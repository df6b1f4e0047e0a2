#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "vdial/rng.hpp"
#include "vdial/tensor.hpp"

namespace vdial {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Insertion-ordered registry of every learnable tensor of a model.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor tensor) {
    require(!index_.contains(name), ErrorKind::InvalidArgument, "duplicate parameter " + name);
    tensor.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({std::move(name), tensor});
    return tensor;
  }

  Tensor normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.normal() * stddev;
    return add(name, Tensor::from(std::move(shape), std::move(data)));
  }

  Tensor constant(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::full(std::move(shape), value));
  }

  const std::vector<NamedParam>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::InvalidArgument, "unknown parameter " + name);
    return params_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& p : params_)
      if (p.tensor.requires_grad()) out.push_back(p.tensor);
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  /// FNV-1a over the raw parameter bytes, for "weights untouched" checks.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_)
      for (double v : p.tensor.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xFF;
          h *= 1099511628211ULL;
        }
      }
    return h;
  }

 private:
  std::vector<NamedParam> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers are keyed by position in the parameter list passed to
/// adam_step, which must therefore be the same list on every call.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update over `params`, then zeroes their grads.
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  for (const Tensor& p : params)
    require(p.has_grad(), ErrorKind::MissingGrad, "parameter of shape " + shape_string(p.shape()) + " has no gradient");
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  require(state.first_moment.size() == params.size(), ErrorKind::ShapeMismatch,
          "Adam state tracks " + std::to_string(state.first_moment.size()) + " tensors, got " +
              std::to_string(params.size()));
  ++state.step;
  const auto& c = state.config;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    require(m.size() == p.numel(), ErrorKind::ShapeMismatch, "Adam moment size mismatch");
    auto values = p.data();
    auto grads = p.mutable_grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
      grads[j] = 0.0;
    }
  }
}

}  // namespace vdial
