#include "gistlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace gistlab::ops {
namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

template <typename T>
std::size_t last_extent(const char* op, const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError(std::string(op) + ": empty last axis in " + shape_string(x.shape()));
  }
  return x.shape().back();
}

template <typename T>
void check_finite(const char* op, std::span<const T> values) {
  for (T v : values) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN in input");
  }
}

template <typename T>
void check_temperature(const char* op, T temperature) {
  if (!(temperature > T(0))) {
    throw ParameterError(std::string(op) + ": temperature must be positive, got " +
                         std::to_string(static_cast<double>(temperature)));
  }
}

// c[m x n] += a[m x k] . b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k x n] += a[m x k]^T . g[m x n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

// c[m x n] += a[m x k] . b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::vector<T>& scratch) {
  scratch.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
  gemm_nn(a, scratch.data(), c, m, k, n);
}

template <typename T>
T normal_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T normal_pdf(T x) {
  return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

// Row-wise log-softmax of z / temperature into out.
template <typename T>
void log_softmax_rows(std::span<const T> z, std::size_t k, T temperature, std::vector<T>& out) {
  const std::size_t rows = z.size() / k;
  out.resize(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * k;
    T* o = out.data() + r * k;
    T mx = zr[0] / temperature;
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, zr[i] / temperature);
    T acc = 0;
    for (std::size_t i = 0; i < k; ++i) acc += std::exp(zr[i] / temperature - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t i = 0; i < k; ++i) o[i] = zr[i] / temperature - lse;
  }
}

}  // namespace

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return tape.record("add", out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    for (const Tensor<T>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  return tape.record("sub", out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  return tape.record("mul", out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      auto y = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  return tape.record("scale", out, {a}, [a, out, factor]() mutable {
    auto g = out.grad();
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = last_extent("add_bias", x);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] + bv[i % n];
  return tape.record("add_bias", out, {x, bias}, [x, bias, out, n]() mutable {
    auto g = out.grad();
    if (x.requires_grad()) {
      auto gx = x.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  return tape.record("sum", out, {x}, [x, out]() mutable {
    const T g = out.grad()[0];
    for (T& v : x.grad_accumulator()) v += g;
  });
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  auto out = Tensor<T>::scalar(acc * inv);
  return tape.record("mean", out, {x}, [x, out, inv]() mutable {
    const T g = out.grad()[0] * inv;
    for (T& v : x.grad_accumulator()) v += g;
  });
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  return tape.record("reshape", out, {x}, [x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor<T>::zeros({m, n});
  gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  return tape.record("matmul", out, {a, b}, [a, b, out, m, k, n]() mutable {
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      std::vector<T> scratch;
      gemm_nt(g, b.data().data(), a.grad_accumulator().data(), m, n, k, scratch);
    }
    if (b.requires_grad()) gemm_tn(a.data().data(), g, b.grad_accumulator().data(), m, k, n);
  });
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t in = weight.dim(0), outd = weight.dim(1), rows = x.size() / in;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = outd;
  auto out = Tensor<T>::zeros(shape);
  T* o = out.data().data();
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), o + r * outd);
  }
  gemm_nn(x.data().data(), weight.data().data(), o, rows, in, outd);
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return tape.record("linear", out, std::move(inputs), [x, weight, bias, out, in, outd, rows]() mutable {
    const T* g = out.grad().data();
    if (x.requires_grad()) {
      std::vector<T> scratch;
      gemm_nt(g, weight.data().data(), x.grad_accumulator().data(), rows, outd, in, scratch);
    }
    if (weight.requires_grad()) {
      gemm_tn(x.data().data(), g, weight.grad_accumulator().data(), rows, in, outd);
    }
    if (bias.defined() && bias.requires_grad()) {
      auto gb = bias.grad_accumulator();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
    }
  });
}

template <typename T>
Tensor<T> batched_matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank("batched_matmul", a, 3);
  require_rank("batched_matmul", b, 3);
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != groups || bk != k) {
    throw DimensionError("batched_matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  auto out = Tensor<T>::zeros({groups, m, n});
  {
    std::vector<T> scratch;
    const T* av = a.data().data();
    const T* bv = b.data().data();
    T* o = out.data().data();
    for (std::size_t g = 0; g < groups; ++g) {
      if (transpose_b) {
        gemm_nt(av + g * m * k, bv + g * n * k, o + g * m * n, m, k, n, scratch);
      } else {
        gemm_nn(av + g * m * k, bv + g * k * n, o + g * m * n, m, k, n);
      }
    }
  }
  return tape.record("batched_matmul", out, {a, b}, [a, b, out, groups, m, k, n, transpose_b]() mutable {
    const T* gout = out.grad().data();
    std::vector<T> scratch;
    const T* av = a.data().data();
    const T* bv = b.data().data();
    if (a.requires_grad()) {
      T* ga = a.grad_accumulator().data();
      for (std::size_t g = 0; g < groups; ++g) {
        if (transpose_b) {
          // b is [n x k]: da = gout . b
          gemm_nn(gout + g * m * n, bv + g * n * k, ga + g * m * k, m, n, k);
        } else {
          gemm_nt(gout + g * m * n, bv + g * k * n, ga + g * m * k, m, n, k, scratch);
        }
      }
    }
    if (b.requires_grad()) {
      T* gb = b.grad_accumulator().data();
      for (std::size_t g = 0; g < groups; ++g) {
        if (transpose_b) {
          // db[n x k] = gout^T . a
          gemm_tn(gout + g * m * n, av + g * m * k, gb + g * n * k, m, n, k);
        } else {
          gemm_tn(av + g * m * k, gout + g * m * n, gb + g * k * n, m, k, n);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  require_rank("split_heads", x, 3);
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  auto out = Tensor<T>::zeros({b * heads, s, dh});
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t si = 0; si < s; ++si)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j)
          o[((bi * heads + h) * s + si) * dh + j] = xv[(bi * s + si) * d + h * dh + j];
  return tape.record("split_heads", out, {x}, [x, out, b, s, heads, dh]() mutable {
    auto g = out.grad();
    auto gx = x.grad_accumulator();
    const std::size_t d = heads * dh;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j)
            gx[(bi * s + si) * d + h * dh + j] += g[((bi * heads + h) * s + si) * dh + j];
  });
}

template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  require_rank("merge_heads", x, 3);
  if (heads == 0 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: leading extent " + std::to_string(x.dim(0)) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t b = x.dim(0) / heads, s = x.dim(1), dh = x.dim(2), d = heads * dh;
  auto out = Tensor<T>::zeros({b, s, d});
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t j = 0; j < dh; ++j)
          o[(bi * s + si) * d + h * dh + j] = xv[((bi * heads + h) * s + si) * dh + j];
  return tape.record("merge_heads", out, {x}, [x, out, b, s, heads, dh, d]() mutable {
    auto g = out.grad();
    auto gx = x.grad_accumulator();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t si = 0; si < s; ++si)
          for (std::size_t j = 0; j < dh; ++j)
            gx[((bi * heads + h) * s + si) * dh + j] += g[(bi * s + si) * d + h * dh + j];
  });
}

template <typename T>
Tensor<T> softmax_t(Tape<T>& tape, const Tensor<T>& logits, T temperature) {
  check_temperature("softmax_t", temperature);
  const std::size_t k = last_extent("softmax_t", logits);
  check_finite("softmax_t", logits.data());
  auto out = Tensor<T>::zeros(logits.shape());
  auto z = logits.data();
  auto p = out.data();
  const std::size_t rows = z.size() / k;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * k;
    T* pr = p.data() + r * k;
    T mx = zr[0] / temperature;
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, zr[i] / temperature);
    T acc = 0;
    for (std::size_t i = 0; i < k; ++i) {
      pr[i] = std::exp(zr[i] / temperature - mx);
      acc += pr[i];
    }
    for (std::size_t i = 0; i < k; ++i) pr[i] /= acc;
  }
  return tape.record("softmax_t", out, {logits}, [logits, out, k, rows, temperature]() mutable {
    auto g = out.grad();
    auto p = out.data();
    auto gz = logits.grad_accumulator();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < k; ++i) dot += g[r * k + i] * p[r * k + i];
      for (std::size_t i = 0; i < k; ++i) {
        gz[r * k + i] += p[r * k + i] * (g[r * k + i] - dot) / temperature;
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  const std::size_t d = last_extent("layer_norm", x);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine parameters " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match input " + shape_string(x.shape()));
  }
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  auto xv = x.data();
  auto o = out.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mu) * is;
      xhat[r * d + i] = h;
      o[r * d + i] = gv[i] * h + bv[i];
    }
  }
  return tape.record(
      "layer_norm", out, {x, gamma, beta},
      [x, gamma, beta, out, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
        auto g = out.grad();
        if (gamma.requires_grad()) {
          auto gg = gamma.grad_accumulator();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
        }
        if (beta.requires_grad()) {
          auto gb = beta.grad_accumulator();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
        if (x.requires_grad()) {
          auto gx = x.grad_accumulator();
          auto gv = gamma.data();
          const T invd = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t i = 0; i < d; ++i) {
              const T dh = g[r * d + i] * gv[i];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + i];
            }
            mean_dh *= invd;
            mean_dh_h *= invd;
            for (std::size_t i = 0; i < d; ++i) {
              const T dh = g[r * d + i] * gv[i];
              gx[r * d + i] += inv_std[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * normal_cdf(xv[i]);
  return tape.record("gelu", out, {x}, [x, out]() mutable {
    auto g = out.grad();
    auto xv = x.data();
    auto gx = x.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * (normal_cdf(xv[i]) + xv[i] * normal_pdf(xv[i]));
    }
  });
}

template <typename T>
Tensor<T> scale_shift(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t d = last_extent("scale_shift", x);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("scale_shift: parameters " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match input " + shape_string(x.shape()));
  }
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto o = out.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = gv[i % d] * xv[i] + bv[i % d];
  return tape.record("scale_shift", out, {x, gamma, beta}, [x, gamma, beta, out, d]() mutable {
    auto g = out.grad();
    if (x.requires_grad()) {
      auto gx = x.grad_accumulator();
      auto gv = gamma.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gv[i % d];
    }
    if (gamma.requires_grad()) {
      auto gg = gamma.grad_accumulator();
      auto xv = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xv[i];
    }
    if (beta.requires_grad()) {
      auto gb = beta.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b || b == 0 || k == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(logits.shape()));
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  check_finite("cross_entropy", logits.data());
  std::vector<T> logp;
  log_softmax_rows(logits.data(), k, T(1), logp);
  T acc = 0;
  for (std::size_t i = 0; i < b; ++i) acc -= logp[i * k + static_cast<std::size_t>(labels[i])];
  const T invb = T(1) / static_cast<T>(b);
  auto out = Tensor<T>::scalar(acc * invb);
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record("cross_entropy", out, {logits},
                     [logits, out, k, b, invb, logp = std::move(logp), lab = std::move(lab)]() mutable {
                       const T g = out.grad()[0] * invb;
                       auto gz = logits.grad_accumulator();
                       for (std::size_t i = 0; i < b; ++i) {
                         for (std::size_t j = 0; j < k; ++j) {
                           const T p = std::exp(logp[i * k + j]);
                           const T y = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                           gz[i * k + j] += g * (p - y);
                         }
                       }
                     });
}

template <typename T>
Tensor<T> kl_divergence(Tape<T>& tape, const Tensor<T>& p_logits, const Tensor<T>& q_logits, T temperature) {
  require_same_shape("kl_divergence", p_logits, q_logits);
  check_temperature("kl_divergence", temperature);
  require_rank("kl_divergence", p_logits, 2);
  const std::size_t b = p_logits.dim(0), k = p_logits.dim(1);
  if (b == 0 || k == 0) throw DimensionError("kl_divergence: empty logits");
  check_finite("kl_divergence", p_logits.data());
  check_finite("kl_divergence", q_logits.data());
  std::vector<T> lp, lq;
  log_softmax_rows(p_logits.data(), k, temperature, lp);
  log_softmax_rows(q_logits.data(), k, temperature, lq);
  std::vector<T> row_kl(b);
  T acc = 0;
  for (std::size_t i = 0; i < b; ++i) {
    T r = 0;
    for (std::size_t j = 0; j < k; ++j) r += std::exp(lp[i * k + j]) * (lp[i * k + j] - lq[i * k + j]);
    row_kl[i] = r;
    acc += r;
  }
  const T invb = T(1) / static_cast<T>(b);
  auto out = Tensor<T>::scalar(acc * invb);
  return tape.record("kl_divergence", out, {p_logits, q_logits},
                     [p_logits, q_logits, out, b, k, invb, temperature, lp = std::move(lp),
                      lq = std::move(lq), row_kl = std::move(row_kl)]() mutable {
                       const T g = out.grad()[0] * invb / temperature;
                       if (p_logits.requires_grad()) {
                         auto gp = p_logits.grad_accumulator();
                         for (std::size_t i = 0; i < b; ++i)
                           for (std::size_t j = 0; j < k; ++j) {
                             const std::size_t t = i * k + j;
                             gp[t] += g * std::exp(lp[t]) * (lp[t] - lq[t] - row_kl[i]);
                           }
                       }
                       if (q_logits.requires_grad()) {
                         auto gq = q_logits.grad_accumulator();
                         for (std::size_t t = 0; t < b * k; ++t) gq[t] += g * (std::exp(lq[t]) - std::exp(lp[t]));
                       }
                     });
}

template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mse", a, b);
  if (a.size() == 0) throw DimensionError("mse of empty tensors");
  auto av = a.data();
  auto bv = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T invn = T(1) / static_cast<T>(av.size());
  auto out = Tensor<T>::scalar(acc * invn);
  return tape.record("mse", out, {a, b}, [a, b, out, invn]() mutable {
    const T g = out.grad()[0] * T(2) * invn;
    auto av = a.data();
    auto bv = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  });
}

template <typename T>
Tensor<T> cosine_distance(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("cosine_distance", a, b);
  require_rank("cosine_distance", a, 2);
  const std::size_t rows = a.dim(0), d = a.dim(1);
  if (rows == 0) throw DimensionError("cosine_distance of empty tensors");
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> na(rows), nb(rows), cs(rows);
  T acc = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < d; ++i) {
      dot += av[r * d + i] * bv[r * d + i];
      aa += av[r * d + i] * av[r * d + i];
      bb += bv[r * d + i] * bv[r * d + i];
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    cs[r] = (na[r] > T(0) && nb[r] > T(0)) ? dot / (na[r] * nb[r]) : T(0);
    acc += cs[r];
  }
  const T invr = T(1) / static_cast<T>(rows);
  auto out = Tensor<T>::scalar(T(1) - acc * invr);
  return tape.record("cosine_distance", out, {a, b},
                     [a, b, out, rows, d, invr, na = std::move(na), nb = std::move(nb),
                      cs = std::move(cs)]() mutable {
                       const T g = -out.grad()[0] * invr;
                       auto av = a.data();
                       auto bv = b.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!(na[r] > T(0) && nb[r] > T(0))) continue;
                         const T inv_ab = T(1) / (na[r] * nb[r]);
                         if (a.requires_grad()) {
                           auto ga = a.grad_accumulator();
                           const T ca = cs[r] / (na[r] * na[r]);
                           for (std::size_t i = 0; i < d; ++i)
                             ga[r * d + i] += g * (bv[r * d + i] * inv_ab - ca * av[r * d + i]);
                         }
                         if (b.requires_grad()) {
                           auto gb = b.grad_accumulator();
                           const T cb = cs[r] / (nb[r] * nb[r]);
                           for (std::size_t i = 0; i < d; ++i)
                             gb[r * d + i] += g * (av[r * d + i] * inv_ab - cb * bv[r * d + i]);
                         }
                       }
                     });
}

template <typename T>
Tensor<T> concat_tokens(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_tokens: nothing to concatenate");
  const std::size_t b = parts[0].dim(0), d = parts[0].dim(2);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(0) != b || p.dim(2) != d) {
      throw DimensionError("concat_tokens: part " + shape_string(p.shape()) + " incompatible with " +
                           shape_string(parts[0].shape()));
    }
    total += p.dim(1);
  }
  auto out = Tensor<T>::zeros({b, total, d});
  auto o = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t s = p.dim(1);
    auto pv = p.data();
    for (std::size_t bi = 0; bi < b; ++bi)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(bi * s * d), s * d,
                  o.begin() + static_cast<std::ptrdiff_t>((bi * total + offset) * d));
    offset += s;
  }
  return tape.record("concat_tokens", out, parts, [parts, out, b, d, total]() mutable {
    auto g = out.grad();
    std::size_t offset = 0;
    for (auto& p : parts) {
      const std::size_t s = p.dim(1);
      if (p.requires_grad()) {
        auto gp = p.grad_accumulator();
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t t = 0; t < s * d; ++t) gp[bi * s * d + t] += g[(bi * total + offset) * d + t];
      }
      offset += s;
    }
  });
}

template <typename T>
Tensor<T> broadcast_batch(Tape<T>& tape, const Tensor<T>& x, std::size_t batch) {
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  auto out = Tensor<T>::zeros(shape);
  const std::size_t n = x.size();
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t bi = 0; bi < batch; ++bi)
    std::copy(xv.begin(), xv.end(), o.begin() + static_cast<std::ptrdiff_t>(bi * n));
  return tape.record("broadcast_batch", out, {x}, [x, out, batch, n]() mutable {
    auto g = out.grad();
    auto gx = x.grad_accumulator();
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[bi * n + i];
  });
}

template <typename T>
Tensor<T> slice_tokens(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank("slice_tokens", x, 3);
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (begin + count > s || count == 0) {
    throw IndexError("slice_tokens: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + std::to_string(s) + " tokens");
  }
  auto out = Tensor<T>::zeros({b, count, d});
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((bi * s + begin) * d), count * d,
                o.begin() + static_cast<std::ptrdiff_t>(bi * count * d));
  return tape.record("slice_tokens", out, {x}, [x, out, b, s, d, begin, count]() mutable {
    auto g = out.grad();
    auto gx = x.grad_accumulator();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < count * d; ++t) gx[(bi * s + begin) * d + t] += g[bi * count * d + t];
  });
}

template <typename T>
Tensor<T> mean_tokens(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("mean_tokens", x, 3);
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (s == 0) throw DimensionError("mean_tokens: no tokens");
  auto out = Tensor<T>::zeros({b, d});
  auto xv = x.data();
  auto o = out.data();
  const T count = static_cast<T>(s);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t si = 0; si < s; ++si)
      for (std::size_t j = 0; j < d; ++j) o[bi * d + j] += xv[(bi * s + si) * d + j];
    for (std::size_t j = 0; j < d; ++j) o[bi * d + j] /= count;
  }
  return tape.record("mean_tokens", out, {x}, [x, out, b, s, d, count]() mutable {
    auto g = out.grad();
    auto gx = x.grad_accumulator();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t j = 0; j < d; ++j) gx[(bi * s + si) * d + j] += g[bi * d + j] / count;
  });
}

template <typename T>
Tensor<T> patchify(Tape<T>& tape, const Tensor<T>& images, std::size_t patch) {
  require_rank("patchify", images, 4);
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + shape_string(images.shape()) + " not divisible into " +
                         std::to_string(patch) + "-pixel patches");
  }
  const std::size_t ph = h / patch, pw = w / patch, l = ph * pw, width = c * patch * patch;
  auto out = Tensor<T>::zeros({b, l, width});
  auto index = [=](std::size_t bi, std::size_t py, std::size_t px, std::size_t ci, std::size_t yy,
                   std::size_t xx) { return ((bi * c + ci) * h + py * patch + yy) * w + px * patch + xx; };
  auto iv = images.data();
  auto o = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px) {
        T* dst = o.data() + (bi * l + py * pw + px) * width;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t yy = 0; yy < patch; ++yy)
            for (std::size_t xx = 0; xx < patch; ++xx) *dst++ = iv[index(bi, py, px, ci, yy, xx)];
      }
  return tape.record("patchify", out, {images}, [images, out, b, c, ph, pw, l, width, patch, index]() mutable {
    auto g = out.grad();
    auto gi = images.grad_accumulator();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t py = 0; py < ph; ++py)
        for (std::size_t px = 0; px < pw; ++px) {
          const T* src = g.data() + (bi * l + py * pw + px) * width;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t yy = 0; yy < patch; ++yy)
              for (std::size_t xx = 0; xx < patch; ++xx) gi[index(bi, py, px, ci, yy, xx)] += *src++;
        }
  });
}

#define GISTLAB_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                          \
  template Tensor<T> add_bias(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                    \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> batched_matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&, bool);            \
  template Tensor<T> split_heads(Tape<T>&, const Tensor<T>&, std::size_t);                          \
  template Tensor<T> merge_heads(Tape<T>&, const Tensor<T>&, std::size_t);                          \
  template Tensor<T> softmax_t(Tape<T>&, const Tensor<T>&, T);                                      \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale_shift(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>);               \
  template Tensor<T> kl_divergence(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);                \
  template Tensor<T> mse(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> cosine_distance(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> concat_tokens(Tape<T>&, const std::vector<Tensor<T>>&);                        \
  template Tensor<T> broadcast_batch(Tape<T>&, const Tensor<T>&, std::size_t);                      \
  template Tensor<T> slice_tokens(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);            \
  template Tensor<T> mean_tokens(Tape<T>&, const Tensor<T>&);                                       \
  template Tensor<T> patchify(Tape<T>&, const Tensor<T>&, std::size_t);

GISTLAB_INSTANTIATE_OPS(float)
GISTLAB_INSTANTIATE_OPS(double)

}  // namespace gistlab::ops
