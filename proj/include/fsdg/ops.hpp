#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "fsdg/tensor.hpp"

namespace fsdg {

namespace detail {

using Dims4 = std::array<std::size_t, 4>;

inline Dims4 pad4(const Shape& s) {
  Dims4 d{1, 1, 1, 1};
  std::copy(s.begin(), s.end(), d.begin() + static_cast<std::ptrdiff_t>(4 - s.size()));
  return d;
}

inline Dims4 strides4(const Dims4& d) {
  return {d[1] * d[2] * d[3], d[2] * d[3], d[3], 1};
}

// Broadcast layout of two operands against a common rank-4 output.
struct Broadcast {
  Shape out;
  Dims4 dims;
  Dims4 a_strides;
  Dims4 b_strides;
};

// Numpy-style right-aligned broadcasting, except that a rank-1 operand
// against a rank-4 operand is a channel vector laid out as [1, C, 1, 1].
inline Shape channel_aligned(const Shape& s, std::size_t other_rank) {
  if (s.size() == 1 && other_rank == 4) return Shape{1, s[0], 1, 1};
  return s;
}

inline Broadcast broadcast(const Shape& a_in, const Shape& b_in, const char* op) {
  if (a_in.size() > 4 || b_in.size() > 4) throw DimensionError(std::string(op) + ": rank above 4");
  const Shape a = channel_aligned(a_in, b_in.size());
  const Shape b = channel_aligned(b_in, a_in.size());
  const Dims4 da = pad4(a);
  const Dims4 db = pad4(b);
  Broadcast bc;
  const std::size_t rank = std::max(a.size(), b.size());
  for (std::size_t i = 0; i < 4; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a_in) + " and " + to_string(b_in) +
                           " do not broadcast");
    }
    bc.dims[i] = std::max(da[i], db[i]);
  }
  const Dims4 sa = strides4(da);
  const Dims4 sb = strides4(db);
  for (std::size_t i = 0; i < 4; ++i) {
    bc.a_strides[i] = da[i] == 1 ? 0 : sa[i];
    bc.b_strides[i] = db[i] == 1 ? 0 : sb[i];
  }
  bc.out.assign(bc.dims.begin() + static_cast<std::ptrdiff_t>(4 - rank), bc.dims.end());
  return bc;
}

// Visits every output position with the matching operand offsets.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < bc.dims[0]; ++i0) {
    for (std::size_t i1 = 0; i1 < bc.dims[1]; ++i1) {
      for (std::size_t i2 = 0; i2 < bc.dims[2]; ++i2) {
        std::size_t ia = i0 * bc.a_strides[0] + i1 * bc.a_strides[1] + i2 * bc.a_strides[2];
        std::size_t ib = i0 * bc.b_strides[0] + i1 * bc.b_strides[1] + i2 * bc.b_strides[2];
        for (std::size_t i3 = 0; i3 < bc.dims[3]; ++i3, ++o) {
          f(o, ia, ib);
          ia += bc.a_strides[3];
          ib += bc.b_strides[3];
        }
      }
    }
  }
}

// Binary op with partial derivatives da(x, y, z) and db(x, y, z).
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = f(x[i], y[i]);
    return make_result(a.shape(), std::move(z), op, {a, b}, [da, db](const TensorImpl& out) {
      const auto& ta = out.grad_fn->inputs[0];
      const auto& tb = out.grad_fn->inputs[1];
      const auto& g = out.grad;
      if (ta->requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) ta->grad[i] += g[i] * da(ta->data[i], tb->data[i], out.data[i]);
      }
      if (tb->requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) tb->grad[i] += g[i] * db(ta->data[i], tb->data[i], out.data[i]);
      }
    });
  }
  const Broadcast bc = broadcast(a.shape(), b.shape(), op);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> z(numel(bc.out));
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { z[o] = f(x[ia], y[ib]); });
  return make_result(bc.out, std::move(z), op, {a, b}, [bc, da, db](const TensorImpl& out) {
    const auto& ta = out.grad_fn->inputs[0];
    const auto& tb = out.grad_fn->inputs[1];
    const auto& g = out.grad;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const double xv = ta->data[ia];
      const double yv = tb->data[ib];
      if (ta->requires_grad) ta->grad[ia] += g[o] * da(xv, yv, out.data[o]);
      if (tb->requires_grad) tb->grad[ib] += g[o] * db(xv, yv, out.data[o]);
    });
  });
}

// Unary op with derivative df(x, y).
template <typename F, typename DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), op, {a}, [df](const TensorImpl& out) {
    const auto& t = out.grad_fn->inputs[0];
    for (std::size_t i = 0; i < out.grad.size(); ++i) t->grad[i] += out.grad[i] * df(t->data[i], out.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise family

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

/// Elementwise quotient; the caller keeps the denominator away from zero.
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

inline Tensor add(const Tensor& a, double s) {
  return detail::unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul(const Tensor& a, double s) {
  return detail::unary(
      a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Square root; the adjoint at exactly zero is taken as zero.
inline Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

/// max(x, floor); values at or below the floor receive no gradient.
inline Tensor clamp_min(const Tensor& a, double floor) {
  return detail::unary(
      a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// Same values, no backward edge.
inline Tensor stop_gradient(const Tensor& a) {
  return Tensor(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  return detail::make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), "reshape",
                             {a}, [](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                             });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  std::vector<double> y(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  return detail::make_result({n, m}, std::move(y), "transpose", {a}, [m, n](const detail::TensorImpl& out) {
    auto& g = out.grad_fn->inputs[0]->grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += out.grad[j * m + i];
  });
}

/// Concatenates along axis 0.
inline Tensor concat0(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw DimensionError("concat0: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> y(a.data().begin(), a.data().end());
  y.insert(y.end(), b.data().begin(), b.data().end());
  const std::size_t split = a.numel();
  return detail::make_result(std::move(shape), std::move(y), "concat0", {a, b},
                             [split](const detail::TensorImpl& out) {
                               const auto& ta = out.grad_fn->inputs[0];
                               const auto& tb = out.grad_fn->inputs[1];
                               if (ta->requires_grad)
                                 for (std::size_t i = 0; i < split; ++i) ta->grad[i] += out.grad[i];
                               if (tb->requires_grad)
                                 for (std::size_t i = split; i < out.grad.size(); ++i) tb->grad[i - split] += out.grad[i];
                             });
}

/// Rows [begin, end) along axis 0.
inline Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) {
    throw DimensionError("slice0: range out of bounds for " + to_string(a.shape()));
  }
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<double> y(a.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                        a.data().begin() + static_cast<std::ptrdiff_t>(end * row));
  const std::size_t offset = begin * row;
  return detail::make_result(std::move(shape), std::move(y), "slice0", {a},
                             [offset](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t i = 0; i < out.grad.size(); ++i) g[offset + i] += out.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum over every element; rank-0 result.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({}, {s}, "sum", {a}, [](const detail::TensorImpl& out) {
    auto& g = out.grad_fn->inputs[0]->grad;
    for (auto& v : g) v += out.grad[0];
  });
}

/// Sum over the listed axes.
inline Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdim = false) {
  if (a.rank() > 4) throw DimensionError("sum: rank above 4");
  if (axes.empty()) throw DomainError("sum: empty axis list");
  const std::size_t offset = 4 - a.rank();
  std::array<bool, 4> reduce{false, false, false, false};
  for (std::size_t ax : axes) {
    if (ax >= a.rank()) throw DimensionError("sum: axis " + std::to_string(ax) + " out of range");
    reduce[ax + offset] = true;
  }
  const detail::Dims4 in = detail::pad4(a.shape());
  detail::Dims4 red = in;
  for (std::size_t i = 0; i < 4; ++i)
    if (reduce[i]) red[i] = 1;
  const detail::Dims4 rs = detail::strides4(red);
  detail::Broadcast bc;
  bc.dims = in;
  bc.a_strides = detail::strides4(in);
  for (std::size_t i = 0; i < 4; ++i) bc.b_strides[i] = reduce[i] ? 0 : rs[i];
  Shape shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (!reduce[i + offset]) shape.push_back(a.dim(i));
    else if (keepdim) shape.push_back(1);
  }
  std::vector<double> y(numel(shape), 0.0);
  const auto x = a.data();
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t, std::size_t ib) { y[ib] += x[o]; });
  return detail::make_result(std::move(shape), std::move(y), "sum_axes", {a}, [bc](const detail::TensorImpl& out) {
    auto& g = out.grad_fn->inputs[0]->grad;
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t, std::size_t ib) { g[o] += out.grad[ib]; });
  });
}

inline Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdim = false) {
  std::size_t count = 1;
  for (std::size_t ax : axes) count *= ax < a.rank() ? a.dim(ax) : 1;
  if (count == 0) throw DomainError("mean: empty reduction set");
  return mul(sum(a, axes, keepdim), 1.0 / static_cast<double>(count));
}

struct MeanVar {
  Tensor mean;
  Tensor var;
};

/// Mean and population variance (divisor = count) over the given axes.
inline MeanVar reduce_stats(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdim = false) {
  std::size_t count = 1;
  for (std::size_t ax : axes) {
    if (ax >= a.rank()) throw DimensionError("reduce_stats: axis out of range");
    count *= a.dim(ax);
  }
  if (axes.empty() || count == 0) throw DomainError("reduce_stats: empty reduction set");
  const Tensor m = mean(a, axes, true);
  const Tensor d = sub(a, m);
  Tensor v = mean(square(d), axes, keepdim);
  if (keepdim) return {m, v};
  Shape reduced;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (std::find(axes.begin(), axes.end(), i) == axes.end()) reduced.push_back(a.dim(i));
  return {reshape(m, reduced), v};
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  const auto x = a.data();
  const auto w = b.data();
  std::vector<double> y(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += s * w[p * n + j];
    }
  return detail::make_result({m, n}, std::move(y), "matmul", {a, b}, [m, k, n](const detail::TensorImpl& out) {
    const auto& ta = out.grad_fn->inputs[0];
    const auto& tb = out.grad_fn->inputs[1];
    const auto& g = out.grad;
    if (ta->requires_grad) {  // grad_a = g . b^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * tb->data[p * n + j];
          ta->grad[i * k + p] += s;
        }
    }
    if (tb->requires_grad) {  // grad_b = a^T . g
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double s = ta->data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) tb->grad[p * n + j] += s * g[i * n + j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and spatial resampling

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_ch, height, width, out_ch, kernel, stride, pad, out_h, out_w;
  std::size_t rows() const { return in_ch * kernel * kernel; }
  std::size_t cols() const { return batch * out_h * out_w; }
};

// col[(c*k + ky)*k + kx][(b*out_h + oy)*out_w + ox]
inline void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t n = g.cols();
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x + (b * g.in_ch + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            double* dst = row + (b * g.out_h + oy) * g.out_w;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill(dst, dst + g.out_w, 0.0);
              continue;
            }
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                            ? 0.0
                            : plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
}

inline void col2im(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t n = g.cols();
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = x + (b * g.in_ch + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            const double* src = row + (b * g.out_h + oy) * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
}

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 8;

// c[r][j] = init[r] + sum_p a[r][p] * b[p][j] for one 4x8 tile, summing over
// p in order. a rows are `lda` apart, b rows `ldb` apart.
inline void gemm_tile(std::size_t k, const double* a, std::size_t lda, const double* b, std::size_t ldb,
                      const double* init, double (&c)[kTileRows][kTileCols]) {
  using v4 = double __attribute__((vector_size(32)));
  v4 acc[kTileRows][2];
  for (std::size_t r = 0; r < kTileRows; ++r) acc[r][0] = acc[r][1] = v4{} + init[r];
  for (std::size_t p = 0; p < k; ++p) {
    v4 lo, hi;
    std::memcpy(&lo, b + p * ldb, sizeof lo);
    std::memcpy(&hi, b + p * ldb + 4, sizeof hi);
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const double w = a[r * lda + p];
      acc[r][0] += w * lo;
      acc[r][1] += w * hi;
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    std::memcpy(c[r], &acc[r][0], sizeof(v4));
    std::memcpy(c[r] + 4, &acc[r][1], sizeof(v4));
  }
}

// out[m][n] = init[m] + sum_k a[m][k] * b[k][n], accumulating over k in order.
// Ragged edges are zero-padded into full tiles so that every output element
// goes through the same arithmetic, independent of n and of the batch size.
inline void gemm_rows(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                      const double* init, double* out) {
  std::vector<double> a_pad, b_pad;
  double c[kTileRows][kTileCols];
  for (std::size_t n0 = 0; n0 < n; n0 += kTileCols) {
    const std::size_t cols = std::min(kTileCols, n - n0);
    const double* bp = b + n0;
    std::size_t ldb = n;
    if (cols < kTileCols) {
      b_pad.assign(k * kTileCols, 0.0);
      for (std::size_t p = 0; p < k; ++p) std::copy_n(b + p * n + n0, cols, b_pad.data() + p * kTileCols);
      bp = b_pad.data();
      ldb = kTileCols;
    }
    for (std::size_t m0 = 0; m0 < m; m0 += kTileRows) {
      const std::size_t rows = std::min(kTileRows, m - m0);
      const double* ap = a + m0 * k;
      double bias[kTileRows] = {0.0, 0.0, 0.0, 0.0};
      for (std::size_t r = 0; r < rows; ++r) bias[r] = init ? init[m0 + r] : 0.0;
      if (rows < kTileRows) {
        a_pad.assign(kTileRows * k, 0.0);
        std::copy_n(a + m0 * k, rows * k, a_pad.data());
        ap = a_pad.data();
      }
      gemm_tile(k, ap, k, bp, ldb, bias, c);
      for (std::size_t r = 0; r < rows; ++r) std::copy_n(c[r], cols, out + (m0 + r) * n + n0);
    }
  }
}

inline double dot(const double* x, const double* y, std::size_t n) {
  using v4 = double __attribute__((vector_size(32)));
  v4 s0{}, s1{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    v4 x0, x1, y0, y1;
    std::memcpy(&x0, x + i, sizeof x0);
    std::memcpy(&x1, x + i + 4, sizeof x1);
    std::memcpy(&y0, y + i, sizeof y0);
    std::memcpy(&y1, y + i + 4, sizeof y1);
    s0 += x0 * y0;
    s1 += x1 * y1;
  }
  const v4 s = s0 + s1;
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + tail;
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. x: [B, Cin, H, W],
/// weight: [Cout, Cin, k, k], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || weight.rank() != 4) throw DimensionError("conv2d: input and weight must be rank 4");
  if (weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                         std::to_string(x.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3)) throw DimensionError("conv2d: kernel must be square");
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw DimensionError("conv2d: bias shape " + to_string(bias.shape()));
  }
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, pad, 0, 0};
  if (g.height + 2 * pad < g.kernel || g.width + 2 * pad < g.kernel) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;

  const std::size_t rows = g.rows();
  const std::size_t cols = g.cols();
  const std::size_t plane = g.out_h * g.out_w;
  auto col = std::make_shared<std::vector<double>>(rows * cols);
  detail::im2col(g, x.data().data(), col->data());
  std::vector<double> flat(g.out_ch * cols);
  detail::gemm_rows(g.out_ch, rows, cols, weight.data().data(), col->data(),
                    bias.defined() ? bias.data().data() : nullptr, flat.data());
  std::vector<double> y(flat.size());
  for (std::size_t o = 0; o < g.out_ch; ++o)
    for (std::size_t b = 0; b < g.batch; ++b)
      std::copy_n(flat.data() + o * cols + b * plane, plane, y.data() + (b * g.out_ch + o) * plane);

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(y), "conv2d", std::move(inputs),
      [g, col, rows, cols, plane](const detail::TensorImpl& out) {
        const auto& tx = out.grad_fn->inputs[0];
        const auto& tw = out.grad_fn->inputs[1];
        std::vector<double> gflat(g.out_ch * cols);
        for (std::size_t o = 0; o < g.out_ch; ++o)
          for (std::size_t b = 0; b < g.batch; ++b)
            std::copy_n(out.grad.data() + (b * g.out_ch + o) * plane, plane, gflat.data() + o * cols + b * plane);
        if (out.grad_fn->inputs.size() > 2 && out.grad_fn->inputs[2]->requires_grad) {
          auto& gb = out.grad_fn->inputs[2]->grad;
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += gflat[o * cols + j];
            gb[o] += s;
          }
        }
        if (tw->requires_grad) {
          for (std::size_t o = 0; o < g.out_ch; ++o)
            for (std::size_t r = 0; r < rows; ++r)
              tw->grad[o * rows + r] += detail::dot(gflat.data() + o * cols, col->data() + r * cols, cols);
        }
        if (tx->requires_grad) {
          std::vector<double> wt(rows * g.out_ch);
          for (std::size_t o = 0; o < g.out_ch; ++o)
            for (std::size_t r = 0; r < rows; ++r) wt[r * g.out_ch + o] = tw->data[o * rows + r];
          std::vector<double> gcol(rows * cols);
          detail::gemm_rows(rows, g.out_ch, cols, wt.data(), gflat.data(), nullptr, gcol.data());
          detail::col2im(g, gcol.data(), tx->grad.data());
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride = 1, std::size_t pad = 0) {
  return conv2d(x, weight, Tensor{}, stride, pad);
}

namespace detail {
inline void require_even_map(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": expected [B, C, H, W], got " + to_string(x.shape()));
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw DimensionError(std::string(op) + ": spatial extent " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)) +
                         " is odd; the stylization insertion point requires even height and width");
  }
}
}  // namespace detail

/// Mean of each non-overlapping 2x2 block; H and W must be even.
inline Tensor avg_pool2(const Tensor& x) {
  detail::require_even_map(x, "avg_pool2");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3), oh = h / 2, ow = w / 2;
  const auto in = x.data();
  std::vector<double> y(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* src = in.data() + p * h * w + 2 * i * w + 2 * j;
        y[(p * oh + i) * ow + j] = 0.25 * ((src[0] + src[1]) + (src[w] + src[w + 1]));
      }
  return detail::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(y), "avg_pool2", {x},
                             [planes, h, w, oh, ow](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t i = 0; i < oh; ++i)
                                   for (std::size_t j = 0; j < ow; ++j) {
                                     const double v = 0.25 * out.grad[(p * oh + i) * ow + j];
                                     double* dst = g.data() + p * h * w + 2 * i * w + 2 * j;
                                     dst[0] += v;
                                     dst[1] += v;
                                     dst[w] += v;
                                     dst[w + 1] += v;
                                   }
                             });
}

/// Max of each non-overlapping 2x2 block; ties route the gradient to the
/// first maximal element in row-major order.
inline Tensor max_pool2(const Tensor& x) {
  detail::require_even_map(x, "max_pool2");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3), oh = h / 2, ow = w / 2;
  const auto in = x.data();
  std::vector<double> y(planes * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = p * h * w + 2 * i * w + 2 * j;
        std::size_t best = base;
        for (std::size_t cand : {base + 1, base + w, base + w + 1})
          if (in[cand] > in[best]) best = cand;
        const std::size_t o = (p * oh + i) * ow + j;
        y[o] = in[best];
        (*arg)[o] = best;
      }
  return detail::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(y), "max_pool2", {x},
                             [arg](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t o = 0; o < out.grad.size(); ++o) g[(*arg)[o]] += out.grad[o];
                             });
}

/// Replicates each cell into a 2x2 block.
inline Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest2: expected [B, C, H, W], got " + to_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3), oh = 2 * h, ow = 2 * w;
  const auto in = x.data();
  std::vector<double> y(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) y[(p * oh + i) * ow + j] = in[(p * h + i / 2) * w + j / 2];
  return detail::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(y), "upsample_nearest2", {x},
                             [planes, h, w, ow](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t i = 0; i < h; ++i)
                                   for (std::size_t j = 0; j < w; ++j) {
                                     const double* src = out.grad.data() + (p * 2 * h + 2 * i) * ow + 2 * j;
                                     g[(p * h + i) * w + j] += (src[0] + src[1]) + (src[ow] + src[ow + 1]);
                                   }
                             });
}

/// Mean over H and W: [B, C, H, W] -> [B, C].
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: expected rank 4");
  return mean(x, {2, 3});
}

// ---------------------------------------------------------------------------
// Row-wise softmax family on [B, C]

namespace detail {
inline void check_logits(const Tensor& logits, double temperature, const char* op) {
  if (logits.rank() != 2) throw DimensionError(std::string(op) + ": expected [B, C], got " + to_string(logits.shape()));
  if (!(temperature > 0.0)) throw ParameterError(std::string(op) + ": temperature must be positive");
}

// Stable softmax of logits / temperature for one row.
inline void softmax_row(const double* x, std::size_t n, double temperature, double* p) {
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) top = std::max(top, x[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp((x[j] - top) / temperature);
    total += p[j];
  }
  for (std::size_t j = 0; j < n; ++j) p[j] /= total;
}
}  // namespace detail

/// softmax(logits / temperature) per row.
inline Tensor softmax(const Tensor& logits, double temperature = 1.0) {
  detail::check_logits(logits, temperature, "softmax");
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  std::vector<double> p(rows * n);
  for (std::size_t i = 0; i < rows; ++i) detail::softmax_row(logits.data().data() + i * n, n, temperature, p.data() + i * n);
  return detail::make_result(logits.shape(), std::move(p), "softmax", {logits},
                             [rows, n, temperature](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t i = 0; i < rows; ++i) {
                                 const double* y = out.data.data() + i * n;
                                 const double* go = out.grad.data() + i * n;
                                 double inner = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) inner += go[j] * y[j];
                                 for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (go[j] - inner) / temperature;
                               }
                             });
}

/// log(softmax(logits / temperature)) per row, computed without forming the
/// probabilities' logarithm directly.
inline Tensor log_softmax(const Tensor& logits, double temperature = 1.0) {
  detail::check_logits(logits, temperature, "log_softmax");
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  const auto x = logits.data();
  std::vector<double> y(rows * n);
  for (std::size_t i = 0; i < rows; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) top = std::max(top, x[i * n + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp((x[i * n + j] - top) / temperature);
    const double lse = std::log(total);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (x[i * n + j] - top) / temperature - lse;
  }
  return detail::make_result(logits.shape(), std::move(y), "log_softmax", {logits},
                             [rows, n, temperature](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t i = 0; i < rows; ++i) {
                                 const double* go = out.grad.data() + i * n;
                                 double total = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) total += go[j];
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const double p = std::exp(out.data[i * n + j]);
                                   g[i * n + j] += (go[j] - p * total) / temperature;
                                 }
                               }
                             });
}

/// x[i, index[i]] for each row of a [B, C] tensor.
inline Tensor pick(const Tensor& x, std::span<const int> index) {
  if (x.rank() != 2 || index.size() != x.dim(0)) throw DimensionError("pick: expected one index per row");
  const std::size_t n = x.dim(1);
  std::vector<std::size_t> flat(index.size());
  std::vector<double> y(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= n) {
      throw IndexError("pick: index " + std::to_string(index[i]) + " outside [0, " + std::to_string(n) + ")");
    }
    flat[i] = i * n + static_cast<std::size_t>(index[i]);
    y[i] = x.data()[flat[i]];
  }
  return detail::make_result({index.size()}, std::move(y), "pick", {x},
                             [flat = std::move(flat)](const detail::TensorImpl& out) {
                               auto& g = out.grad_fn->inputs[0]->grad;
                               for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += out.grad[i];
                             });
}

/// Rows scaled to unit L2 norm; rows with norm below eps are divided by eps.
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows: expected rank 2");
  const Tensor norm = clamp_min(sqrt(sum(square(x), {1}, true)), eps);
  return div(x, norm);
}

/// Per-row maximum as a constant [B, 1] tensor (no backward edge).
inline Tensor row_max(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("row_max: expected rank 2");
  const std::size_t rows = x.dim(0), n = x.dim(1);
  std::vector<double> y(rows, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] = std::max(y[i], x.data()[i * n + j]);
  return Tensor({rows, 1}, std::move(y));
}

}  // namespace fsdg
