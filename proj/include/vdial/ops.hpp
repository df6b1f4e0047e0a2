#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "vdial/tensor.hpp"

namespace vdial {

namespace kernels {

/// C[M×N] (+)= A[M×K] · B[K×N]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[K×N] += Aᵀ · B with A[M×K], B[M×N]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* __restrict brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* __restrict crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[M×N] += A[M×K] · Bᵀ with B[N×K]
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c, true);
}

}  // namespace kernels

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
          std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline void check_matrix(const Tensor& a, const char* op) {
  require(a.rank() == 2, ErrorKind::ShapeMismatch, std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_matrix(a, "matmul");
  detail::check_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::ShapeMismatch,
          "matmul inner dimensions differ: " + shape_string(a.shape()) + " · " + shape_string(b.shape()));
  std::vector<double> out(m * n);
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result({m, n}, std::move(out), needs_grad({&a, &b}), [&] {
    return [a, b, m, n, k](detail::Node& self) {
      if (auto ga = grad_target(a); !ga.empty()) kernels::gemm_nt(m, k, n, self.grad.data(), b.data().data(), ga.data());
      if (auto gb = grad_target(b); !gb.empty()) kernels::gemm_tn(m, n, k, a.data().data(), self.grad.data(), gb.data());
    };
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::check_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return make_result({n, m}, std::move(out), needs_grad({&a}), [&] {
    return [a, m, n](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    };
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorKind::ShapeMismatch,
          "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), needs_grad({&a}), [&] {
    return [a](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    };
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), needs_grad({&a, &b}), [&] {
    return [a, b](detail::Node& self) {
      for (const Tensor* t : {&a, &b}) {
        auto g = grad_target(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), needs_grad({&a, &b}), [&] {
    return [a, b](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
      auto gb = grad_target(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), needs_grad({&a, &b}), [&] {
    return [a, b](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * b[i];
      auto gb = grad_target(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * a[i];
    };
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_result(a.shape(), std::move(out), needs_grad({&a}), [&] {
    return [a, factor](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
    };
  });
}

/// x[r, :] + bias for every row r; bias has cols(x) elements.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  require(bias.numel() == n, ErrorKind::ShapeMismatch,
          "add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  std::vector<double> out(x.numel());
  const std::size_t rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + bias[j];
  return make_result(x.shape(), std::move(out), needs_grad({&x, &bias}), [&] {
    return [x, bias, rows, n](detail::Node& self) {
      auto gx = grad_target(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
      auto gb = grad_target(bias);
      if (!gb.empty())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[r * n + j];
    };
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return make_result(a.shape(), std::move(out), needs_grad({&a}), [&] {
    return [a](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (a[i] > 0.0) ga[i] += self.grad[i];
    };
  });
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }
  return make_result(a.shape(), std::move(out), needs_grad({&a}), [&] {
    return [a](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double x = a[i];
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        ga[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      }
    };
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  return make_result(a.shape(), std::move(out), needs_grad({&a}), [&] {
    return [a](detail::Node& self) {
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double t = std::tanh(a[i]);
        ga[i] += self.grad[i] * (1.0 - t * t);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({}, {total}, needs_grad({&a}), [&] {
    return [a](detail::Node& self) {
      auto ga = grad_target(a);
      for (double& g : ga) g += self.grad[0];
    };
  });
}

/// Inner product of two equally sized tensors, as a scalar.
inline Tensor dot(const Tensor& a, const Tensor& b) {
  require(a.numel() == b.numel(), ErrorKind::ShapeMismatch,
          "dot: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double total = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) total += a[i] * b[i];
  return make_result({}, {total}, needs_grad({&a, &b}), [&] {
    return [a, b](detail::Node& self) {
      const double g = self.grad[0];
      auto ga = grad_target(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * b[i];
      auto gb = grad_target(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * a[i];
    };
  });
}

/// Mean over rows: [R×C] -> [1×C].
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t rows = a.rows(), n = a.cols();
  require(rows > 0, ErrorKind::ShapeMismatch, "mean_rows of an empty tensor");
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[r * n + j];
  for (double& v : out) v /= static_cast<double>(rows);
  return make_result({1, n}, std::move(out), needs_grad({&a}), [&] {
    return [a, rows, n](detail::Node& self) {
      auto ga = grad_target(a);
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += self.grad[j] * inv;
    };
  });
}

/// Softmax over the last axis, stabilized by subtracting the slice maximum.
inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  require(n >= 1, ErrorKind::ShapeMismatch, "softmax over an empty last dimension");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  Tensor result = make_result(x.shape(), std::move(out), needs_grad({&x}), [&] {
    return [x, rows, n](detail::Node& self) {
      auto gx = grad_target(x);
      const auto& y = self.value;
      for (std::size_t r = 0; r < rows; ++r) {
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += self.grad[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - inner);
      }
    };
  });
  return result;
}

/// Per-row normalization to zero mean and unit (biased) variance, then affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t n = x.cols(), rows = x.rows();
  require(gamma.numel() == n && beta.numel() == n, ErrorKind::ShapeMismatch,
          "layer_norm: gamma/beta must have " + std::to_string(n) + " elements");
  std::vector<double> out(x.numel()), normed(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normed[r * n + j] = (in[j] - mean) * inv_std[r];
      out[r * n + j] = gamma[j] * normed[r * n + j] + beta[j];
    }
  }
  return make_result(x.shape(), std::move(out), needs_grad({&x, &gamma, &beta}), [&] {
    return [x, gamma, beta, rows, n, normed = std::move(normed), inv_std = std::move(inv_std)](detail::Node& self) {
      auto gx = grad_target(x);
      auto gg = grad_target(gamma);
      auto gb = grad_target(beta);
      std::vector<double> dnorm(n);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = self.grad.data() + r * n;
        const double* xh = normed.data() + r * n;
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!gg.empty()) gg[j] += dy[j] * xh[j];
          if (!gb.empty()) gb[j] += dy[j];
          dnorm[j] = dy[j] * gamma[j];
          sum_d += dnorm[j];
          sum_dx += dnorm[j] * xh[j];
        }
        if (gx.empty()) continue;
        const double k = inv_std[r] / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
          gx[r * n + j] += k * (static_cast<double>(n) * dnorm[j] - sum_d - xh[j] * sum_dx);
      }
    };
  });
}

/// Mean token cross-entropy of `logits` [T×V] against `targets`, skipping
/// positions flagged in `ignore` (empty `ignore` means none ignored).
inline Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                                   const std::vector<bool>& ignore = {}) {
  const std::size_t v = logits.cols(), t = logits.rows();
  require(targets.size() == t, ErrorKind::ShapeMismatch,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(t) + " rows");
  require(ignore.empty() || ignore.size() == t, ErrorKind::ShapeMismatch, "cross_entropy: ignore mask length");
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < t; ++i) {
    if (!ignore.empty() && ignore[i]) continue;
    require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < v, ErrorKind::IndexOutOfVocab,
            "target id " + std::to_string(targets[i]) + " outside vocabulary of " + std::to_string(v));
    active.push_back(i);
  }
  require(!active.empty(), ErrorKind::EmptyLossSet, "every position is ignored");
  std::vector<double> probs(active.size() * v);
  double loss = 0.0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const double* row = logits.data().data() + active[a] * v;
    const double mx = *std::max_element(row, row + v);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += (probs[a * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[a * v + j] /= total;
    loss += (mx + std::log(total)) - row[targets[active[a]]];
  }
  const double inv = 1.0 / static_cast<double>(active.size());
  std::vector<int> picked;
  for (std::size_t i : active) picked.push_back(targets[i]);
  return make_result({}, {loss * inv}, needs_grad({&logits}), [&] {
    return [logits, v, inv, active = std::move(active), picked = std::move(picked),
            probs = std::move(probs)](detail::Node& self) {
      auto g = grad_target(logits);
      const double up = self.grad[0] * inv;
      for (std::size_t a = 0; a < active.size(); ++a) {
        double* row = g.data() + active[a] * v;
        for (std::size_t j = 0; j < v; ++j) row[j] += up * probs[a * v + j];
        row[picked[a]] -= up;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Indexing and assembly
// ---------------------------------------------------------------------------

/// Rows of `table` selected by `indices` (also used for embedding lookup).
inline Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  const std::size_t n = table.cols(), rows = table.rows();
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < rows, ErrorKind::IndexOutOfVocab,
            "row index " + std::to_string(idx[i]) + " outside table of " + std::to_string(rows) + " rows");
    std::copy_n(table.data().data() + idx[i] * n, n, out.data() + i * n);
  }
  return make_result({idx.size(), n}, std::move(out), needs_grad({&table}), [&] {
    return [table, n, idx = std::move(idx)](detail::Node& self) {
      auto g = grad_target(table);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
    };
  });
}

inline Tensor embedding(const Tensor& table, std::span<const int> ids) { return gather_rows(table, ids); }

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.cols();
  require(begin <= end && end <= x.rows(), ErrorKind::ShapeMismatch,
          "slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_string(x.shape()));
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  return make_result({end - begin, n}, std::move(out), needs_grad({&x}), [&] {
    return [x, begin, n](detail::Node& self) {
      auto g = grad_target(x);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
    };
  });
}

/// Stack matrices vertically; all parts share the column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::ShapeMismatch, "concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::vector<double> out;
  bool record = false;
  for (const Tensor& p : parts) {
    require(p.cols() == n, ErrorKind::ShapeMismatch,
            "concat_rows: column mismatch " + shape_string(p.shape()) + " vs " + std::to_string(n));
    out.insert(out.end(), p.data().begin(), p.data().end());
    record = record || needs_grad({&p});
  }
  const std::size_t rows = out.size() / std::max<std::size_t>(n, 1);
  return make_result({rows, n}, std::move(out), record, [&] {
    return [parts](detail::Node& self) {
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        auto g = grad_target(p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
        offset += p.numel();
      }
    };
  });
}

/// Join matrices side by side; all parts share the row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::ShapeMismatch, "concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  bool record = false;
  for (const Tensor& p : parts) {
    require(p.rows() == rows, ErrorKind::ShapeMismatch,
            "concat_cols: row mismatch " + shape_string(p.shape()) + " vs " + std::to_string(rows));
    total += p.cols();
    record = record || needs_grad({&p});
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t n = p.cols();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.data().data() + r * n, n, out.data() + r * total + offset);
    offset += n;
  }
  return make_result({rows, total}, std::move(out), record, [&] {
    return [parts, rows, total](detail::Node& self) {
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        const std::size_t n = p.cols();
        auto g = grad_target(p);
        if (!g.empty())
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * total + off + j];
        off += n;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Video
// ---------------------------------------------------------------------------

struct Conv3dGeometry {
  std::array<std::size_t, 3> stride{1, 1, 1};   // time, height, width
  std::array<std::size_t, 3> padding{0, 0, 0};  // zero padding on both sides

  static std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - kernel) / stride + 1;
  }
};

/// 3D convolution over a channels-last clip.
/// x: [T, H, W, Cin]; weight: [kt, kh, kw, Cin, Cout]; bias: [Cout].
inline Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dGeometry& geo) {
  require(x.rank() == 4 && weight.rank() == 5, ErrorKind::ShapeMismatch,
          "conv3d expects [T,H,W,C] input and [kt,kh,kw,Cin,Cout] weight");
  const std::size_t t = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const std::size_t kt = weight.dim(0), kh = weight.dim(1), kw = weight.dim(2), cout = weight.dim(4);
  require(weight.dim(3) == cin, ErrorKind::ShapeMismatch,
          "conv3d channel mismatch: input " + shape_string(x.shape()) + ", weight " + shape_string(weight.shape()));
  require(bias.numel() == cout, ErrorKind::ShapeMismatch, "conv3d bias size");
  require(t + 2 * geo.padding[0] >= kt && h + 2 * geo.padding[1] >= kh && w + 2 * geo.padding[2] >= kw,
          ErrorKind::ShapeMismatch, "conv3d kernel larger than padded input " + shape_string(x.shape()));
  const std::size_t ot = Conv3dGeometry::out_extent(t, kt, geo.stride[0], geo.padding[0]);
  const std::size_t oh = Conv3dGeometry::out_extent(h, kh, geo.stride[1], geo.padding[1]);
  const std::size_t ow = Conv3dGeometry::out_extent(w, kw, geo.stride[2], geo.padding[2]);
  const std::size_t positions = ot * oh * ow;
  const std::size_t patch = kt * kh * kw * cin;

  // Source offset of every (output position, patch element); -1 marks padding.
  std::vector<long> source(positions * patch, -1);
  std::vector<double> cols(positions * patch, 0.0);
  for (std::size_t a = 0; a < ot; ++a)
    for (std::size_t b = 0; b < oh; ++b)
      for (std::size_t c = 0; c < ow; ++c) {
        const std::size_t pos = (a * oh + b) * ow + c;
        std::size_t q = 0;
        for (std::size_t dt = 0; dt < kt; ++dt)
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long ti = static_cast<long>(a * geo.stride[0] + dt) - static_cast<long>(geo.padding[0]);
              const long yi = static_cast<long>(b * geo.stride[1] + dy) - static_cast<long>(geo.padding[1]);
              const long xi = static_cast<long>(c * geo.stride[2] + dx) - static_cast<long>(geo.padding[2]);
              const bool inside = ti >= 0 && yi >= 0 && xi >= 0 && ti < static_cast<long>(t) &&
                                  yi < static_cast<long>(h) && xi < static_cast<long>(w);
              for (std::size_t ci = 0; ci < cin; ++ci, ++q) {
                if (!inside) continue;
                const long src = ((ti * static_cast<long>(h) + yi) * static_cast<long>(w) + xi) * static_cast<long>(cin) +
                                 static_cast<long>(ci);
                source[pos * patch + q] = src;
                cols[pos * patch + q] = x[static_cast<std::size_t>(src)];
              }
            }
      }
  std::vector<double> out(positions * cout);
  kernels::gemm_nn(positions, cout, patch, cols.data(), weight.data().data(), out.data(), false);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t o = 0; o < cout; ++o) out[p * cout + o] += bias[o];

  return make_result({ot, oh, ow, cout}, std::move(out), needs_grad({&x, &weight, &bias}), [&] {
    return [x, weight, bias, positions, patch, cout, source = std::move(source),
            cols = std::move(cols)](detail::Node& self) {
      if (auto gw = grad_target(weight); !gw.empty())
        kernels::gemm_tn(positions, cout, patch, cols.data(), self.grad.data(), gw.data());
      if (auto gb = grad_target(bias); !gb.empty())
        for (std::size_t p = 0; p < positions; ++p)
          for (std::size_t o = 0; o < cout; ++o) gb[o] += self.grad[p * cout + o];
      if (auto gx = grad_target(x); !gx.empty()) {
        std::vector<double> dcols(positions * patch, 0.0);
        kernels::gemm_nt(positions, patch, cout, self.grad.data(), weight.data().data(), dcols.data());
        for (std::size_t i = 0; i < dcols.size(); ++i)
          if (source[i] >= 0) gx[static_cast<std::size_t>(source[i])] += dcols[i];
      }
    };
  });
}

/// Global average over the spatial axes: [T, H, W, C] -> [T, C].
inline Tensor spatial_avg_pool(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch, "spatial_avg_pool expects [T,H,W,C]");
  const std::size_t t = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  std::vector<double> out(t * c, 0.0);
  for (std::size_t a = 0; a < t; ++a)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) out[a * c + k] += x[(a * hw + p) * c + k];
  const double inv = 1.0 / static_cast<double>(hw);
  for (double& v : out) v *= inv;
  return make_result({t, c}, std::move(out), needs_grad({&x}), [&] {
    return [x, t, hw, c, inv](detail::Node& self) {
      auto g = grad_target(x);
      for (std::size_t a = 0; a < t; ++a)
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t k = 0; k < c; ++k) g[(a * hw + p) * c + k] += self.grad[a * c + k] * inv;
    };
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention on already projected inputs.
///
/// q: [Lq×d], k/v: [Lk×d], heads split the columns evenly. Keys with
/// `key_mask[j] == false` (and, when `causal`, keys j > i) receive zero
/// weight. Rows with no admissible key produce zeros. When `probs_out` is
/// given it receives the [heads×Lq×Lk] attention weights.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const std::vector<bool>& key_mask = {}, bool causal = false,
                        std::vector<double>* probs_out = nullptr) {
  detail::check_matrix(q, "attention");
  detail::check_matrix(k, "attention");
  detail::check_matrix(v, "attention");
  const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
  require(k.dim(1) == d && v.dim(1) == d && v.dim(0) == lk, ErrorKind::ShapeMismatch,
          "attention q/k/v shapes " + shape_string(q.shape()) + " " + shape_string(k.shape()) + " " +
              shape_string(v.shape()));
  require(heads >= 1 && d % heads == 0, ErrorKind::HeadsDivisibility,
          "model dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  require(key_mask.empty() || key_mask.size() == lk, ErrorKind::ShapeMismatch, "attention key mask length");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto admissible = [&](std::size_t i, std::size_t j) {
    return (key_mask.empty() || key_mask[j]) && (!causal || j <= i);
  };
  std::vector<char> allowed(lq * lk);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < lk; ++j) allowed[i * lk + j] = admissible(i, j) ? 1 : 0;

  std::vector<double> probs(heads * lq * lk, 0.0);
  std::vector<double> out(lq * d, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t hh = 0; hh < heads; ++hh) {
    const std::size_t off = hh * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      double* prow = probs.data() + (hh * lq + i) * lk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (!allowed[i * lk + j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qd[i * d + off + c] * kd[j * d + off + c];
        prow[j] = s * sc;
        mx = std::max(mx, prow[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double total = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        prow[j] = allowed[i * lk + j] ? std::exp(prow[j] - mx) : 0.0;
        total += prow[j];
      }
      double* orow = out.data() + i * d + off;
      for (std::size_t j = 0; j < lk; ++j) {
        prow[j] /= total;
        if (prow[j] == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += prow[j] * vd[j * d + off + c];
      }
    }
  }
  if (probs_out) *probs_out = probs;
  return make_result({lq, d}, std::move(out), needs_grad({&q, &k, &v}), [&] {
    return [q, k, v, heads, lq, lk, d, dh, sc, probs = std::move(probs)](detail::Node& self) {
      auto gq = grad_target(q);
      auto gk = grad_target(k);
      auto gv = grad_target(v);
      const double* go = self.grad.data();
      std::vector<double> dp(lk);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t off = hh * dh;
        for (std::size_t i = 0; i < lq; ++i) {
          const double* prow = probs.data() + (hh * lq + i) * lk;
          double inner = 0.0;
          for (std::size_t j = 0; j < lk; ++j) {
            if (prow[j] == 0.0) {
              dp[j] = 0.0;
              continue;
            }
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += go[i * d + off + c] * v[j * d + off + c];
            dp[j] = s;
            inner += s * prow[j];
            if (!gv.empty())
              for (std::size_t c = 0; c < dh; ++c) gv[j * d + off + c] += prow[j] * go[i * d + off + c];
          }
          for (std::size_t j = 0; j < lk; ++j) {
            if (prow[j] == 0.0) continue;
            const double ds = prow[j] * (dp[j] - inner) * sc;
            if (!gq.empty())
              for (std::size_t c = 0; c < dh; ++c) gq[i * d + off + c] += ds * k[j * d + off + c];
            if (!gk.empty())
              for (std::size_t c = 0; c < dh; ++c) gk[j * d + off + c] += ds * q[i * d + off + c];
          }
        }
      }
    };
  });
}

}  // namespace vdial
