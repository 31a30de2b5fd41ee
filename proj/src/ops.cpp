#include "lgaf/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace lgaf {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

using detail::grad_target;
using detail::make_result;
using detail::Storage;

std::string dim_error(const char* op, const char* what, std::int64_t got, std::int64_t want) {
  return std::string(op) + ": " + what + " is " + std::to_string(got) + ", expected " +
         std::to_string(want);
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op, const char* name) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": " + name + " is undefined");
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

struct ConvGeometry {
  std::int64_t n, c, h, w, k_out, k, stride, pad, ho, wo;
  std::int64_t ckk() const { return c * k * k; }
  std::int64_t cols() const { return n * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* dst = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* plane = x + (n * g.c + c) * g.h * g.w;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            T* row = dst + (n * g.ho + oy) * g.wo;
            std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) {
              std::fill(row, row + g.wo, T(0));
              continue;
            }
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              std::int64_t ix = ox * g.stride - g.pad + kx;
              row[ox] = (ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* gx) {
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* src = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (std::int64_t n = 0; n < g.n; ++n) {
          T* plane = gx + (n * g.c + c) * g.h * g.w;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* row = src + (n * g.ho + oy) * g.wo;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  T y;
  if (x >= T(0)) {
    y = T(1) / (T(1) + std::exp(-x));
  } else {
    T e = std::exp(x);
    y = e / (T(1) + e);
  }
  // Keep gates strictly inside (0,1) even where the exact value rounds off.
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  return std::clamp(y, lo, hi);
}

template <typename T>
Tensor<T> batch_norm_impl(const char* op, const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, BatchNormState& state, Mode mode,
                          std::int64_t n, std::int64_t c, std::int64_t spatial) {
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError(dim_error(op, "affine parameter length", gamma.numel(), c));
  }
  if (static_cast<std::int64_t>(state.running_mean.size()) != c ||
      static_cast<std::int64_t>(state.running_var.size()) != c) {
    throw ShapeError(dim_error(op, "running statistics length",
                               static_cast<std::int64_t>(state.running_mean.size()), c));
  }
  const std::int64_t count = n * spatial;
  if (mode == Mode::train && count < 2) {
    throw std::invalid_argument(std::string(op) +
                                ": training mode needs at least 2 values per feature, got " +
                                std::to_string(count));
  }
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  std::vector<T> invstd(static_cast<std::size_t>(c));
  std::vector<T> out(xd.size());

  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mu;
    double var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t p = 0; p < spatial; ++p) s += xd[(i * c + ch) * spatial + p];
      mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t p = 0; p < spatial; ++p) {
          double d = xd[(i * c + ch) * spatial + p] - mu;
          v += d * d;
        }
      }
      var = v / static_cast<double>(count);
      auto u = static_cast<std::size_t>(ch);
      state.running_mean[u] = (1.0 - state.momentum) * state.running_mean[u] + state.momentum * mu;
      double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      state.running_var[u] = (1.0 - state.momentum) * state.running_var[u] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[static_cast<std::size_t>(ch)];
      var = state.running_var[static_cast<std::size_t>(ch)];
    }
    T is = static_cast<T>(1.0 / std::sqrt(var + state.eps));
    invstd[static_cast<std::size_t>(ch)] = is;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t p = 0; p < spatial; ++p) {
        auto idx = static_cast<std::size_t>((i * c + ch) * spatial + p);
        T xh = (xd[idx] - static_cast<T>(mu)) * is;
        (*xhat)[idx] = xh;
        out[idx] = gd[static_cast<std::size_t>(ch)] * xh + bd[static_cast<std::size_t>(ch)];
      }
    }
  }

  return make_result<T>(
      op, x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, invstd, mode, n, c, spatial, count](const Storage<T>& o) {
        const auto& g = o.grad;
        auto gd = gamma.data();
        T* gx = grad_target(x);
        T* gg = grad_target(gamma);
        T* gb = grad_target(beta);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T sum_g = 0;
          T sum_gx = 0;
          for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t p = 0; p < spatial; ++p) {
              auto idx = static_cast<std::size_t>((i * c + ch) * spatial + p);
              sum_g += g[idx];
              sum_gx += g[idx] * (*xhat)[idx];
            }
          }
          auto u = static_cast<std::size_t>(ch);
          if (gg) gg[u] += sum_gx;
          if (gb) gb[u] += sum_g;
          if (!gx) continue;
          const T scale_c = gd[u] * invstd[u];
          const T m = static_cast<T>(count);
          for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t p = 0; p < spatial; ++p) {
              auto idx = static_cast<std::size_t>((i * c + ch) * spatial + p);
              if (mode == Mode::train) {
                gx[idx] += scale_c * (g[idx] - sum_g / m - (*xhat)[idx] * sum_gx / m);
              } else {
                gx[idx] += scale_c * g[idx];
              }
            }
          }
        }
      });
}

}  // namespace

namespace {

// out[n,e] = a[n,d] b[d,e] with every row accumulated in the same order, so
// a row's result does not depend on the other rows.
template <typename T>
void row_products(const T* a, const T* b, T* out, std::int64_t n, std::int64_t d, std::int64_t e) {
  for (std::int64_t i = 0; i < n; ++i) {
    T* y = out + i * e;
    std::fill_n(y, e, T(0));
    for (std::int64_t k = 0; k < d; ++k) {
      const T aik = a[i * d + k];
      const T* bk = b + k * e;
      for (std::int64_t j = 0; j < e; ++j) y[j] += aik * bk[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.k_out = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.c) {
    throw ShapeError(dim_error("conv2d", "weight input-channel dimension (dim 1)", weight.dim(1), g.c));
  }
  if (weight.dim(3) != g.k) {
    throw ShapeError(dim_error("conv2d", "weight kernel width (dim 3)", weight.dim(3), g.k));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.k_out)) {
    throw ShapeError(dim_error("conv2d", "bias length (dim 0)", bias.numel(), g.k_out));
  }
  std::int64_t span_h = g.h + 2 * g.pad - g.k;
  std::int64_t span_w = g.w + 2 * g.pad - g.k;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  g.ho = span_h / g.stride + 1;
  g.wo = span_w / g.stride + 1;

  const std::int64_t hw_out = g.ho * g.wo;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.ckk() * g.cols()));
  im2col(input.data().data(), g, cols->data());

  // One product per image keeps each image's output independent of its
  // position in the batch.
  std::vector<T> out(static_cast<std::size_t>(g.n * g.k_out * hw_out));
  ConstMatMap<T> all_cols(cols->data(), g.ckk(), g.cols());
  for (std::int64_t n = 0; n < g.n; ++n) {
    MatMap<T> y(out.data() + n * g.k_out * hw_out, g.k_out, hw_out);
    y.noalias() = ConstMatMap<T>(weight.data().data(), g.k_out, g.ckk()) * all_cols.middleCols(n * hw_out, hw_out);
    if (!bias.defined()) continue;
    for (std::int64_t k = 0; k < g.k_out; ++k) y.row(k).array() += bias.data()[static_cast<std::size_t>(k)];
  }

  return make_result<T>(
      "conv2d", Shape{g.n, g.k_out, g.ho, g.wo}, std::move(out), {input, weight, bias},
      [input, weight, bias, cols, g](const Storage<T>& o) {
        const std::int64_t hw = g.ho * g.wo;
        RowMat<T> dy(g.k_out, g.cols());
        for (std::int64_t n = 0; n < g.n; ++n)
          for (std::int64_t k = 0; k < g.k_out; ++k)
            std::copy_n(o.grad.data() + (n * g.k_out + k) * hw, hw, dy.data() + k * g.cols() + n * hw);
        if (T* gw = grad_target(weight)) {
          MatMap<T>(gw, g.k_out, g.ckk()).noalias() +=
              dy * ConstMatMap<T>(cols->data(), g.ckk(), g.cols()).transpose();
        }
        if (T* gb = grad_target(bias)) {
          for (std::int64_t k = 0; k < g.k_out; ++k) gb[k] += dy.row(k).sum();
        }
        if (T* gx = grad_target(input)) {
          RowMat<T> dcols = ConstMatMap<T>(weight.data().data(), g.k_out, g.ckk()).transpose() * dy;
          col2im(dcols.data(), g, gx);
        }
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul", "left operand");
  require_rank(b, 2, "matmul", "right operand");
  const std::int64_t n = a.dim(0), d = a.dim(1), e = b.dim(1);
  if (b.dim(0) != d) throw ShapeError(dim_error("matmul", "right operand dim 0", b.dim(0), d));
  std::vector<T> out(static_cast<std::size_t>(n * e));
  row_products(a.data().data(), b.data().data(), out.data(), n, d, e);
  return make_result<T>("matmul", Shape{n, e}, std::move(out), {a, b},
                        [a, b, n, d, e](const Storage<T>& o) {
                          ConstMatMap<T> gy(o.grad.data(), n, e);
                          if (T* ga = grad_target(a)) {
                            MatMap<T>(ga, n, d).noalias() +=
                                gy * ConstMatMap<T>(b.data().data(), d, e).transpose();
                          }
                          if (T* gb = grad_target(b)) {
                            MatMap<T>(gb, d, e).noalias() +=
                                ConstMatMap<T>(a.data().data(), n, d).transpose() * gy;
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::int64_t n = x.dim(0), d = x.dim(1), e = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError(dim_error("linear", "weight dim 0 (input features)", weight.dim(0), d));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != e)) {
    throw ShapeError(dim_error("linear", "bias length (dim 0)", bias.numel(), e));
  }
  std::vector<T> out(static_cast<std::size_t>(n * e));
  MatMap<T> y(out.data(), n, e);
  row_products(x.data().data(), weight.data().data(), out.data(), n, d, e);
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < e; ++j) y(i, j) += bd[static_cast<std::size_t>(j)];
  }
  return make_result<T>("linear", Shape{n, e}, std::move(out), {x, weight, bias},
                        [x, weight, bias, n, d, e](const Storage<T>& o) {
                          ConstMatMap<T> gy(o.grad.data(), n, e);
                          if (T* gx = grad_target(x)) {
                            MatMap<T>(gx, n, d).noalias() +=
                                gy * ConstMatMap<T>(weight.data().data(), d, e).transpose();
                          }
                          if (T* gw = grad_target(weight)) {
                            MatMap<T>(gw, d, e).noalias() +=
                                ConstMatMap<T>(x.data().data(), n, d).transpose() * gy;
                          }
                          if (T* gb = grad_target(bias)) {
                            for (std::int64_t j = 0; j < e; ++j) gb[j] += gy.col(j).sum();
                          }
                        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(n * c));
  for (std::int64_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::int64_t p = 0; p < hw; ++p) s += xd[i * hw + p];
    out[i] = s / static_cast<T>(hw);
  }
  return make_result<T>("global_avg_pool", Shape{n, c}, std::move(out), {x},
                        [x, n, c, hw](const Storage<T>& o) {
                          T* gx = grad_target(x);
                          for (std::int64_t i = 0; i < n * c; ++i) {
                            T g = o.grad[i] / static_cast<T>(hw);
                            for (std::int64_t p = 0; p < hw; ++p) gx[i * hw + p] += g;
                          }
                        });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  auto xd = x.data();
  std::vector<T> out(xd.size());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
    return make_result<T>("relu", x.shape(), std::move(out), {x}, [x](const Storage<T>& o) {
      T* gx = grad_target(x);
      auto xd = x.data();
      for (std::size_t i = 0; i < xd.size(); ++i)
        if (xd[i] > T(0)) gx[i] += o.grad[i];
    });
  }
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = sigmoid_scalar(xd[i]);
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x}, [x](const Storage<T>& o) {
    T* gx = grad_target(x);
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      T y = o.data[i];
      gx[i] += o.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  require_rank(x, 2, "l2_norm", "input");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::int64_t j = 0; j < d; ++j) s += xd[i * d + j] * xd[i * d + j];
    out[i] = std::sqrt(s);
  }
  return make_result<T>("l2_norm", Shape{n}, std::move(out), {x}, [x, n, d](const Storage<T>& o) {
    T* gx = grad_target(x);
    auto xd = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
      T norm = o.data[i];
      if (norm == T(0)) continue;
      T f = o.grad[i] / norm;
      for (std::int64_t j = 0; j < d; ++j) gx[i * d + j] += f * xd[i * d + j];
    }
  });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis) {
  require_rank(x, 2, "l2_normalize", "input");
  if (axis != 0 && axis != 1) throw std::invalid_argument("l2_normalize: axis must be 0 or 1");
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  // Vectors run along `axis`: axis 1 -> rows are vectors.
  const std::int64_t count = axis == 1 ? rows : cols;
  const std::int64_t len = axis == 1 ? cols : rows;
  auto at = [=](std::int64_t v, std::int64_t j) { return axis == 1 ? v * cols + j : j * cols + v; };
  auto xd = x.data();
  std::vector<T> out(xd.size());
  std::vector<T> norms(static_cast<std::size_t>(count));
  for (std::int64_t v = 0; v < count; ++v) {
    T s = 0;
    for (std::int64_t j = 0; j < len; ++j) s += xd[at(v, j)] * xd[at(v, j)];
    T nv = std::sqrt(s);
    if (nv == T(0)) {
      throw std::domain_error("l2_normalize: " + std::string(axis == 1 ? "row " : "column ") +
                              std::to_string(v) + " has zero norm");
    }
    norms[static_cast<std::size_t>(v)] = nv;
    for (std::int64_t j = 0; j < len; ++j) out[at(v, j)] = xd[at(v, j)] / nv;
  }
  return make_result<T>("l2_normalize", x.shape(), std::move(out), {x},
                        [x, norms, count, len, at](const Storage<T>& o) {
                          T* gx = grad_target(x);
                          for (std::int64_t v = 0; v < count; ++v) {
                            T dot = 0;
                            for (std::int64_t j = 0; j < len; ++j) dot += o.grad[at(v, j)] * o.data[at(v, j)];
                            T inv = T(1) / norms[static_cast<std::size_t>(v)];
                            for (std::int64_t j = 0; j < len; ++j) {
                              auto idx = at(v, j);
                              gx[idx] += (o.grad[idx] - o.data[idx] * dot) * inv;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  const int rank = xs[0].rank();
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = xs[0].shape();
  std::int64_t total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].rank() != rank) {
      throw ShapeError("concat: input " + std::to_string(i) + " has rank " +
                       std::to_string(xs[i].rank()) + ", expected " + std::to_string(rank));
    }
    for (int d = 0; d < rank; ++d) {
      if (d != a && xs[i].dim(d) != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: input " + std::to_string(i) + " dimension " + std::to_string(d) +
                         " is " + std::to_string(xs[i].dim(d)) + ", expected " +
                         std::to_string(out_shape[static_cast<std::size_t>(d)]));
      }
    }
    total += xs[i].dim(a);
  }
  out_shape[static_cast<std::size_t>(a)] = total;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = a + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::int64_t block = x.dim(a) * inner;
    auto xd = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(xd.data() + o * block, block, out.data() + o * total * inner + off * inner);
    off += x.dim(a);
  }
  std::vector<Tensor<T>> inputs(xs.begin(), xs.end());
  return make_result<T>(
      "concat", std::move(out_shape), std::move(out), inputs,
      [inputs, offsets, a, outer, inner, total](const Storage<T>& o) {
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          T* gx = grad_target(inputs[i]);
          if (!gx) continue;
          const std::int64_t block = inputs[i].dim(a) * inner;
          for (std::int64_t r = 0; r < outer; ++r) {
            const T* src = o.grad.data() + r * total * inner + offsets[i] * inner;
            for (std::int64_t j = 0; j < block; ++j) gx[r * block + j] += src[j];
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [a, b](const Storage<T>& o) {
    if (T* ga = grad_target(a))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    if (T* gb = grad_target(b))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](const Storage<T>& o) {
    auto ad = a.data();
    auto bd = b.data();
    if (T* ga = grad_target(a))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * bd[i];
    if (T* gb = grad_target(b))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i] * ad[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * factor;
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [x, factor](const Storage<T>& o) {
    T* gx = grad_target(x);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>("sum", Shape{1}, std::vector<T>{s}, {x}, [x](const Storage<T>& o) {
    T* gx = grad_target(x);
    const T g = o.grad[0];
    for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [x](const Storage<T>& o) {
    T* gx = grad_target(x);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("flatten: rank-0 input");
  return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& fmap, const Tensor<T>& gate) {
  require_rank(fmap, 4, "spatial_gate", "feature map");
  require_rank(gate, 4, "spatial_gate", "gate");
  const std::int64_t n = fmap.dim(0), c = fmap.dim(1), hw = fmap.dim(2) * fmap.dim(3);
  if (gate.dim(0) != n) throw ShapeError(dim_error("spatial_gate", "gate dim 0 (batch)", gate.dim(0), n));
  if (gate.dim(1) != 1) throw ShapeError(dim_error("spatial_gate", "gate dim 1 (channels)", gate.dim(1), 1));
  if (gate.dim(2) != fmap.dim(2)) throw ShapeError(dim_error("spatial_gate", "gate dim 2 (height)", gate.dim(2), fmap.dim(2)));
  if (gate.dim(3) != fmap.dim(3)) throw ShapeError(dim_error("spatial_gate", "gate dim 3 (width)", gate.dim(3), fmap.dim(3)));
  auto fd = fmap.data();
  auto gd = gate.data();
  std::vector<T> out(fd.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < hw; ++p) out[(i * c + ch) * hw + p] = fd[(i * c + ch) * hw + p] * gd[i * hw + p];
  return make_result<T>("spatial_gate", fmap.shape(), std::move(out), {fmap, gate},
                        [fmap, gate, n, c, hw](const Storage<T>& o) {
                          auto fd = fmap.data();
                          auto gd = gate.data();
                          T* gf = grad_target(fmap);
                          T* gg = grad_target(gate);
                          for (std::int64_t i = 0; i < n; ++i) {
                            for (std::int64_t ch = 0; ch < c; ++ch) {
                              for (std::int64_t p = 0; p < hw; ++p) {
                                auto idx = (i * c + ch) * hw + p;
                                if (gf) gf[idx] += o.grad[idx] * gd[i * hw + p];
                                if (gg) gg[i * hw + p] += o.grad[idx] * fd[idx];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> channel_gate(const Tensor<T>& fmap, const Tensor<T>& gate) {
  require_rank(fmap, 4, "channel_gate", "feature map");
  require_rank(gate, 2, "channel_gate", "gate");
  const std::int64_t n = fmap.dim(0), c = fmap.dim(1), hw = fmap.dim(2) * fmap.dim(3);
  if (gate.dim(0) != n) throw ShapeError(dim_error("channel_gate", "gate dim 0 (batch)", gate.dim(0), n));
  if (gate.dim(1) != c) throw ShapeError(dim_error("channel_gate", "gate dim 1 (channels)", gate.dim(1), c));
  auto fd = fmap.data();
  auto gd = gate.data();
  std::vector<T> out(fd.size());
  for (std::int64_t i = 0; i < n * c; ++i)
    for (std::int64_t p = 0; p < hw; ++p) out[i * hw + p] = fd[i * hw + p] * gd[i];
  return make_result<T>("channel_gate", fmap.shape(), std::move(out), {fmap, gate},
                        [fmap, gate, n, c, hw](const Storage<T>& o) {
                          auto fd = fmap.data();
                          auto gd = gate.data();
                          T* gf = grad_target(fmap);
                          T* gg = grad_target(gate);
                          for (std::int64_t i = 0; i < n * c; ++i) {
                            T acc = 0;
                            for (std::int64_t p = 0; p < hw; ++p) {
                              if (gf) gf[i * hw + p] += o.grad[i * hw + p] * gd[i];
                              acc += o.grad[i * hw + p] * fd[i * hw + p];
                            }
                            if (gg) gg[i] += acc;
                          }
                        });
}

template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s) {
  require_rank(x, 2, "row_scale", "input");
  require_rank(s, 1, "row_scale", "scale");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  if (s.dim(0) != n) throw ShapeError(dim_error("row_scale", "scale length (dim 0)", s.dim(0), n));
  auto xd = x.data();
  auto sd = s.data();
  std::vector<T> out(xd.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = xd[i * d + j] * sd[i];
  return make_result<T>("row_scale", x.shape(), std::move(out), {x, s}, [x, s, n, d](const Storage<T>& o) {
    auto xd = x.data();
    auto sd = s.data();
    T* gx = grad_target(x);
    T* gs = grad_target(s);
    for (std::int64_t i = 0; i < n; ++i) {
      T acc = 0;
      for (std::int64_t j = 0; j < d; ++j) {
        if (gx) gx[i * d + j] += o.grad[i * d + j] * sd[i];
        acc += o.grad[i * d + j] * xd[i * d + j];
      }
      if (gs) gs[i] += acc;
    }
  });
}

template <typename T>
Tensor<T> batch_norm_1d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormState& state, Mode mode) {
  require_rank(x, 2, "batch_norm_1d", "input");
  return batch_norm_impl("batch_norm_1d", x, gamma, beta, state, mode, x.dim(0), x.dim(1), 1);
}

template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormState& state, Mode mode) {
  require_rank(x, 4, "batch_norm_2d", "input");
  return batch_norm_impl("batch_norm_2d", x, gamma, beta, state, mode, x.dim(0), x.dim(1),
                         x.dim(2) * x.dim(3));
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError(dim_error("softmax_cross_entropy", "label count",
                               static_cast<std::int64_t>(labels.size()), n));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                              " at row " + std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
  }
  auto ld = logits.data();
  auto probs = std::make_shared<std::vector<T>>(ld.size());
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = ld.data() + i * k;
    T mx = *std::max_element(row, row + k);
    T s = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      T e = std::exp(row[j] - mx);
      (*probs)[i * k + j] = e;
      s += e;
    }
    for (std::int64_t j = 0; j < k; ++j) (*probs)[i * k + j] /= s;
    loss += std::log(s) + mx - row[labels[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>("softmax_cross_entropy", Shape{1}, std::vector<T>{loss}, {logits},
                        [logits, probs, lab, n, k](const Storage<T>& o) {
                          T* gl = grad_target(logits);
                          const T g = o.grad[0] / static_cast<T>(n);
                          for (std::int64_t i = 0; i < n; ++i) {
                            for (std::int64_t j = 0; j < k; ++j) {
                              T p = (*probs)[i * k + j];
                              if (j == lab[static_cast<std::size_t>(i)]) p -= T(1);
                              gl[i * k + j] += g * p;
                            }
                          }
                        });
}

#define LGAF_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);  \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation);                                \
  template Tensor<T> l2_norm<T>(const Tensor<T>&);                                               \
  template Tensor<T> l2_normalize<T>(const Tensor<T>&, int);                                     \
  template Tensor<T> concat<T>(std::span<const Tensor<T>>, int);                                 \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> flatten<T>(const Tensor<T>&);                                               \
  template Tensor<T> spatial_gate<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> channel_gate<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> row_scale<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> batch_norm_1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      BatchNormState&, Mode);                                    \
  template Tensor<T> batch_norm_2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      BatchNormState&, Mode);                                    \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>);

LGAF_INSTANTIATE_OPS(float)
LGAF_INSTANTIATE_OPS(double)

#undef LGAF_INSTANTIATE_OPS

}  // namespace lgaf
