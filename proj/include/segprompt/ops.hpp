#pragma once

// Differentiable operations over segprompt::Tensor. Every op computes its
// forward result eagerly and, when an input requires grad, records a
// backward rule on the current thread's GradTape.

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "segprompt/tensor.hpp"

namespace segprompt {

using detail::TensorImpl;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
  }
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Restricted broadcasting: equal shapes, a scalar operand, or one shape
// being a trailing suffix of the other.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  if (is_suffix(b.shape(), a.shape())) return a.shape();
  if (is_suffix(a.shape(), b.shape())) return b.shape();
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                       shape_str(b.shape()));
}

// Under the suffix rule the smaller operand repeats with period numel, so
// flat index i maps to i % numel for both operands.
template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  Shape shape = broadcast_shape(a, b, name);
  const std::size_t n = shape_numel(shape);
  const std::size_t na = a.numel(), nb = b.numel();
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i % na], bd[i % nb]);
  }
  auto ai = a.impl(), bi = b.impl();
  return make_result(std::move(shape), std::move(out), {a, b},
                     [ai, bi, n, na, nb, da, db](const TensorImpl& o) {
                       const auto& g = o.grad;
                       if (ai->requires_grad) {
                         auto& ga = ai->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i % na] += g[i] * da(ai->data[i % na], bi->data[i % nb]);
                       }
                       if (bi->requires_grad) {
                         auto& gb = bi->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i % nb] += g[i] * db(ai->data[i % na], bi->data[i % nb]);
                       }
                     });
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [ai, deriv](const TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * deriv(ai->data[i]);
  });
}

// c[m x n] += a[m x k] * b[k x n], all row-major.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

/// GELU, tanh approximation.
inline Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return detail::unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x) {
        const double t = std::tanh(k * (x + c * x * x * x));
        const double du = k * (1.0 + 3.0 * c * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

enum class ElementwiseOp { add, sub, mul, scale, gelu, relu, tanh };

/// Single entry point over the elementwise family. `b` is ignored by the
/// unary ops; `factor` is only read by scale.
inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = {},
                          double factor = 1.0) {
  switch (op) {
    case ElementwiseOp::add: return add(a, b);
    case ElementwiseOp::sub: return sub(a, b);
    case ElementwiseOp::mul: return mul(a, b);
    case ElementwiseOp::scale: return scale(a, factor);
    case ElementwiseOp::gelu: return gelu(a);
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::tanh: return tanh(a);
  }
  throw ConfigError("unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Reductions and views

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ai = a.impl();
  return detail::make_result({1}, {s}, {a}, [ai](const TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (auto& v : ga) v += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto ai = a.impl();
  return detail::make_result(std::move(shape),
                             std::vector<double>(a.data().begin(), a.data().end()), {a},
                             [ai](const TensorImpl& o) {
                               auto& ga = ai->grad_buffer();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
                             });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto ad = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  auto ai = a.impl();
  return detail::make_result({n, m}, std::move(out), {a}, [ai, m, n](const TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += o.grad[j * m + i];
  });
}

/// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  if (begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t cols = a.dim(1);
  const auto ad = a.data();
  std::vector<double> out(ad.begin() + begin * cols, ad.begin() + end * cols);
  auto ai = a.impl();
  return detail::make_result({end - begin, cols}, std::move(out), {a},
                             [ai, begin, cols](const TensorImpl& o) {
                               auto& ga = ai->grad_buffer();
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 ga[begin * cols + i] += o.grad[i];
                             });
}

/// Stacks rank-2 tensors with equal column counts; undefined tensors are
/// skipped (zero-row parts).
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::vector<Tensor> present;
  for (const auto& p : parts)
    if (p.defined()) present.push_back(p);
  if (present.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t cols = present.front().rank() == 2 ? present.front().dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& p : present) {
    if (p.rank() != 2 || p.dim(1) != cols) {
      throw DimensionError("concat_rows: part " + shape_str(p.shape()) + " does not match width " +
                           std::to_string(cols));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : present) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<detail::ImplPtr> impls;
  for (const auto& p : present) impls.push_back(p.impl());
  return detail::make_result({rows, cols}, std::move(out), present, [impls](const TensorImpl& o) {
    std::size_t offset = 0;
    for (const auto& pi : impls) {
      const std::size_t n = pi->data.size();
      if (pi->requires_grad) {
        auto& gp = pi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gp[i] += o.grad[offset + i];
      }
      offset += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](const TensorImpl& o) {
    if (ai->requires_grad)
      detail::gemm_nt(o.grad.data(), bi->data.data(), ai->grad_buffer().data(), m, n, k);
    if (bi->requires_grad)
      detail::gemm_tn(ai->data.data(), o.grad.data(), bi->grad_buffer().data(), k, m, n);
  });
}

/// y = x W^T + b for x[n x in], W[out x in], b[out] (b may be undefined).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (b.defined() && b.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  std::vector<double> out(n * out_dim, 0.0);
  if (b.defined()) {
    const auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) std::copy(bd.begin(), bd.end(), out.begin() + i * out_dim);
  }
  detail::gemm_nt(x.data().data(), w.data().data(), out.data(), n, in, out_dim);
  auto xi = x.impl(), wi = w.impl();
  detail::ImplPtr bi = b.defined() ? b.impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_result(
      {n, out_dim}, std::move(out), inputs, [xi, wi, bi, n, in, out_dim](const TensorImpl& o) {
        const auto& g = o.grad;
        if (xi->requires_grad)
          detail::gemm_nn(g.data(), wi->data.data(), xi->grad_buffer().data(), n, out_dim, in);
        if (wi->requires_grad)
          detail::gemm_tn(g.data(), xi->data.data(), wi->grad_buffer().data(), out_dim, n, in);
        if (bi && bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g[i * out_dim + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Softmax along `axis`, with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= z;
    }
  }
  auto xi = x.impl();
  return detail::make_result(s, std::move(y), {x}, [xi, outer, inner, len](const TensorImpl& o) {
    auto& gx = xi->grad_buffer();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j)
          dot += o.grad[base + j * inner] * o.data[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

/// Row-wise layer normalisation of x[n x d] with affine gamma[d], beta[d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xd.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gd[j] + bd[j];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result(
      {n, d}, std::move(out), {x, gamma, beta}, [xi, gi, bi, xhat, inv_std, n, d](const TensorImpl& o) {
        const auto& g = o.grad;
        if (gi->requires_grad) {
          auto& gg = gi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * (*xhat)[i * d + j];
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[i * d + j] * gi->data[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[i * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[i * d + j] * gi->data[j];
              gx[i * d + j] += (*inv_std)[i] * (dh - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

/// Per-head attention probabilities softmax(Q_h K_h^T / sqrt(d_h)) for
/// q, k [n x d]; returned flat as heads x n x n.
inline std::vector<double> attention_probs(const Tensor& q, const Tensor& k, std::size_t heads) {
  const std::size_t n = q.dim(0), d = q.dim(1), dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qd = q.data();
  const auto kd = k.data();
  std::vector<double> p(heads * n * n);
  for (std::size_t h = 0; h < heads; ++h) {
    double* ph = p.data() + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = qd.data() + i * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const double* kj = kd.data() + j * d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= sc;
        ph[i * n + j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        ph[i * n + j] = std::exp(ph[i * n + j] - mx);
        z += ph[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) ph[i * n + j] /= z;
    }
  }
  return p;
}

/// Multi-head scaled dot-product attention over already-projected q, k, v
/// [n x d]; heads are contiguous column blocks of width d / heads. Returns
/// the concatenated head outputs [n x d] (no output projection).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  detail::require_rank(q, 2, "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " must agree");
  }
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  auto probs = std::make_shared<std::vector<double>>(attention_probs(q, k, heads));
  const auto vd = v.data();
  std::vector<double> out(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* ph = probs->data() + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      double* oi = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < n; ++j) {
        const double pij = ph[i * n + j];
        const double* vj = vd.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
      }
    }
  }
  auto qi = q.impl(), ki = k.impl(), vi = v.impl();
  return detail::make_result(
      {n, d}, std::move(out), {q, k, v}, [qi, ki, vi, probs, n, d, dh, heads](const TensorImpl& o) {
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        const auto& g = o.grad;
        std::vector<double> ds(n * n);
        for (std::size_t h = 0; h < heads; ++h) {
          const double* ph = probs->data() + h * n * n;
          if (vi->requires_grad) {
            auto& gv = vi->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
              const double* gi = g.data() + i * d + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                const double pij = ph[i * n + j];
                double* gvj = gv.data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += pij * gi[c];
              }
            }
          }
          if (!qi->requires_grad && !ki->requires_grad) continue;
          for (std::size_t i = 0; i < n; ++i) {
            const double* gi = g.data() + i * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double* vj = vi->data.data() + j * d + h * dh;
              double dp = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dp += gi[c] * vj[c];
              ds[i * n + j] = dp;
              dot += dp * ph[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j)
              ds[i * n + j] = ph[i * n + j] * (ds[i * n + j] - dot) * sc;
          }
          if (qi->requires_grad) {
            auto& gq = qi->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
              double* gqi = gq.data() + i * d + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                const double s = ds[i * n + j];
                const double* kj = ki->data.data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += s * kj[c];
              }
            }
          }
          if (ki->requires_grad) {
            auto& gk = ki->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
              const double* qrow = qi->data.data() + i * d + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                const double s = ds[i * n + j];
                double* gkj = gk.data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += s * qrow[c];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial ops on C x H x W tensors

enum class ConvAlgo { naive, im2col };

struct Conv2dGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, pad, out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                      std::size_t pad) {
  if (x.size() != 3 || w.size() != 4 || x[0] != w[1]) {
    throw DimensionError("conv2d: input " + shape_str(x) + " incompatible with kernel " +
                         shape_str(w));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  Conv2dGeometry g{x[0], x[1], x[2], w[0], w[2], w[3], stride, pad, 0, 0};
  const auto span_h = static_cast<long long>(g.h + 2 * pad) - static_cast<long long>(g.kh);
  const auto span_w = static_cast<long long>(g.w + 2 * pad) - static_cast<long long>(g.kw);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<long long>(stride) != 0 ||
      span_w % static_cast<long long>(stride) != 0) {
    throw ConfigError("conv2d: input " + shape_str(x) + " with kernel " + shape_str(w) +
                      ", stride " + std::to_string(stride) + ", padding " + std::to_string(pad) +
                      " gives a non-integral output size");
  }
  g.out_h = static_cast<std::size_t>(span_h) / stride + 1;
  g.out_w = static_cast<std::size_t>(span_w) / stride + 1;
  return g;
}

namespace detail {

// Column matrix [c_in*kh*kw x out_h*out_w]; zero where the window hits padding.
inline std::vector<double> im2col(const double* x, const Conv2dGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  std::vector<double> col(g.c_in * g.kh * g.kw * cols, 0.0);
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* crow = col.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
          if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long long ix =
                static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
            if (ix < 0 || ix >= static_cast<long long>(g.w)) continue;
            crow[oy * g.out_w + ox] = x[(c * g.h + iy) * g.w + ix];
          }
        }
      }
  return col;
}

inline void col2im_add(const double* col, double* gx, const Conv2dGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* crow = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
          if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long long ix =
                static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
            if (ix < 0 || ix >= static_cast<long long>(g.w)) continue;
            gx[(c * g.h + iy) * g.w + ix] += crow[oy * g.out_w + ox];
          }
        }
      }
}

template <class Fn>
void for_each_tap(const Conv2dGeometry& g, Fn fn) {
  for (std::size_t co = 0; co < g.c_out; ++co)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox)
        for (std::size_t ci = 0; ci < g.c_in; ++ci)
          for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const long long iy =
                  static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
              const long long ix =
                  static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long long>(g.h) ||
                  ix >= static_cast<long long>(g.w))
                continue;
              const std::size_t out_idx = (co * g.out_h + oy) * g.out_w + ox;
              const std::size_t in_idx = (ci * g.h + static_cast<std::size_t>(iy)) * g.w +
                                         static_cast<std::size_t>(ix);
              const std::size_t w_idx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
              fn(out_idx, in_idx, w_idx);
            }
}

}  // namespace detail

/// 2-D cross-correlation of x[C_in x H x W] with w[C_out x C_in x kh x kw]
/// and optional bias[C_out]. The naive path is the reference for im2col.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t pad, ConvAlgo algo = ConvAlgo::im2col) {
  const auto g = conv2d_geometry(x.shape(), w.shape(), stride, pad);
  if (bias.defined() && bias.numel() != g.c_out) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.c_out) + " output channels");
  }
  const std::size_t cols = g.out_h * g.out_w;
  const std::size_t kdim = g.c_in * g.kh * g.kw;
  std::vector<double> out(g.c_out * cols, 0.0);
  if (bias.defined()) {
    for (std::size_t co = 0; co < g.c_out; ++co)
      std::fill(out.begin() + co * cols, out.begin() + (co + 1) * cols, bias[co]);
  }
  auto xi = x.impl(), wi = w.impl();
  detail::ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);

  auto bias_backward = [bi, g, cols](const TensorImpl& o) {
    if (bi && bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t co = 0; co < g.c_out; ++co)
        for (std::size_t p = 0; p < cols; ++p) gb[co] += o.grad[co * cols + p];
    }
  };

  if (algo == ConvAlgo::naive) {
    const auto xd = x.data();
    const auto wd = w.data();
    detail::for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t wi_) {
      out[oi] += wd[wi_] * xd[ii];
    });
    return detail::make_result({g.c_out, g.out_h, g.out_w}, std::move(out), inputs,
                               [xi, wi, g, bias_backward](const TensorImpl& o) {
                                 bias_backward(o);
                                 const bool gx_on = xi->requires_grad, gw_on = wi->requires_grad;
                                 double* gx = gx_on ? xi->grad_buffer().data() : nullptr;
                                 double* gw = gw_on ? wi->grad_buffer().data() : nullptr;
                                 detail::for_each_tap(g, [&](std::size_t oi, std::size_t ii,
                                                             std::size_t wi_) {
                                   if (gx_on) gx[ii] += wi->data[wi_] * o.grad[oi];
                                   if (gw_on) gw[wi_] += xi->data[ii] * o.grad[oi];
                                 });
                               });
  }

  auto col = std::make_shared<std::vector<double>>(detail::im2col(x.data().data(), g));
  detail::gemm_nn(w.data().data(), col->data(), out.data(), g.c_out, kdim, cols);
  return detail::make_result(
      {g.c_out, g.out_h, g.out_w}, std::move(out), inputs,
      [xi, wi, col, g, cols, kdim, bias_backward](const TensorImpl& o) {
        bias_backward(o);
        if (wi->requires_grad)
          detail::gemm_nt(o.grad.data(), col->data(), wi->grad_buffer().data(), g.c_out, cols, kdim);
        if (xi->requires_grad) {
          std::vector<double> dcol(kdim * cols, 0.0);
          detail::gemm_tn(wi->data.data(), o.grad.data(), dcol.data(), kdim, g.c_out, cols);
          detail::col2im_add(dcol.data(), xi->grad_buffer().data(), g);
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                     ConvAlgo algo = ConvAlgo::im2col) {
  return conv2d(x, w, Tensor{}, stride, pad, algo);
}

/// Bin [lo, hi) for output cell i of n over an input extent of len:
/// lo = floor(i*len/n), hi = ceil((i+1)*len/n).
inline std::pair<std::size_t, std::size_t> adaptive_bin(std::size_t i, std::size_t n,
                                                        std::size_t len) {
  return {(i * len) / n, ((i + 1) * len + n - 1) / n};
}

inline Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 3, "adaptive_avg_pool");
  if (out_h == 0 || out_w == 0) throw ConfigError("adaptive_avg_pool: output size must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h > h || out_w > w) {
    throw ConfigError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " exceeds input " + shape_str(x.shape()));
  }
  const auto xd = x.data();
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto [y0, y1] = adaptive_bin(i, out_h, h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto [x0, x1] = adaptive_bin(j, out_w, w);
        double s = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) s += xd[(ch * h + y) * w + xx];
        out[(ch * out_h + i) * out_w + j] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  auto xi = x.impl();
  return detail::make_result({c, out_h, out_w}, std::move(out), {x},
                             [xi, c, h, w, out_h, out_w](const TensorImpl& o) {
                               auto& gx = xi->grad_buffer();
                               for (std::size_t ch = 0; ch < c; ++ch)
                                 for (std::size_t i = 0; i < out_h; ++i) {
                                   const auto [y0, y1] = adaptive_bin(i, out_h, h);
                                   for (std::size_t j = 0; j < out_w; ++j) {
                                     const auto [x0, x1] = adaptive_bin(j, out_w, w);
                                     const double share =
                                         o.grad[(ch * out_h + i) * out_w + j] /
                                         static_cast<double>((y1 - y0) * (x1 - x0));
                                     for (std::size_t y = y0; y < y1; ++y)
                                       for (std::size_t xx = x0; xx < x1; ++xx)
                                         gx[(ch * h + y) * w + xx] += share;
                                   }
                                 }
                             });
}

/// y[c,:,:] = gamma[c] * x[c,:,:] + beta[c].
inline Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  detail::require_rank(x, 3, "channel_affine");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("channel_affine: parameters do not match " + std::to_string(c) +
                         " channels");
  }
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p)
      out[ch * plane + p] = gamma[ch] * xd[ch * plane + p] + beta[ch];
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta},
                             [xi, gi, bi, c, plane](const TensorImpl& o) {
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 double sg = 0.0, sb = 0.0;
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const double gv = o.grad[ch * plane + p];
                                   sg += gv * xi->data[ch * plane + p];
                                   sb += gv;
                                 }
                                 if (gi->requires_grad) gi->grad_buffer()[ch] += sg;
                                 if (bi->requires_grad) bi->grad_buffer()[ch] += sb;
                                 if (xi->requires_grad) {
                                   auto& gx = xi->grad_buffer();
                                   for (std::size_t p = 0; p < plane; ++p)
                                     gx[ch * plane + p] += gi->data[ch] * o.grad[ch * plane + p];
                                 }
                               }
                             });
}

/// Non-overlapping p x p patches of x[C x H x W] as rows
/// [(H/p)*(W/p) x C*p*p]; patches in row-major grid order, each patch
/// flattened channel-major like a conv kernel.
inline Tensor patches(const Tensor& x, std::size_t p) {
  detail::require_rank(x, 3, "patches");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw DimensionError("patches: image " + shape_str(x.shape()) + " not divisible into " +
                         std::to_string(p) + "x" + std::to_string(p) + " patches");
  }
  const std::size_t gh = h / p, gw = w / p, width = c * p * p;
  const auto xd = x.data();
  std::vector<double> out(gh * gw * width);
  auto index = [=](std::size_t patch, std::size_t k) {
    const std::size_t py = patch / gw, px = patch % gw;
    const std::size_t ch = k / (p * p), dy = (k / p) % p, dx = k % p;
    return (ch * h + py * p + dy) * w + px * p + dx;
  };
  for (std::size_t t = 0; t < gh * gw; ++t)
    for (std::size_t k = 0; k < width; ++k) out[t * width + k] = xd[index(t, k)];
  auto xi = x.impl();
  return detail::make_result({gh * gw, width}, std::move(out), {x},
                             [xi, index, gh, gw, width](const TensorImpl& o) {
                               auto& gx = xi->grad_buffer();
                               for (std::size_t t = 0; t < gh * gw; ++t)
                                 for (std::size_t k = 0; k < width; ++k)
                                   gx[index(t, k)] += o.grad[t * width + k];
                             });
}

}  // namespace segprompt
