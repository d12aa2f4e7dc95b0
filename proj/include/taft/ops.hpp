#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <utility>
#include <vector>

#include "taft/tensor.hpp"

namespace taft {

namespace detail {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
void require_ndim(const Tensor<T>& t, int ndim, const char* op) {
  if (t.ndim() != ndim) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(ndim) +
                         "-d tensor, got " + shape_str(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return make_op_node<T>(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        for (int side = 0; side < 2; ++side) {
          Node<T>& p = *self.parents[static_cast<size_t>(side)];
          if (!p.requires_grad) continue;
          for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
      },
      "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return make_op_node<T>(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        if (pa.requires_grad)
          for (size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += self.grad[i];
        if (pb.requires_grad)
          for (size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] -= self.grad[i];
      },
      "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return make_op_node<T>(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        if (pa.requires_grad)
          for (size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
        if (pb.requires_grad)
          for (size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
      },
      "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto& av = a.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = factor * av[i];
  return make_op_node<T>(
      a.shape(), std::move(out), {a},
      [factor](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += factor * self.grad[i];
      },
      "scale");
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  const auto& av = a.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return make_op_node<T>(
      a.shape(), std::move(out), {a},
      [](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.grad.size(); ++i) {
          if (p.value[i] > T(0)) p.grad[i] += self.grad[i];
        }
      },
      "relu");
}

// Adds a per-channel bias to a C x H x W tensor.
template <class T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_ndim(x, 3, "bias_add");
  detail::require_ndim(bias, 1, "bias_add");
  const int channels = x.dim(0);
  const int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  if (bias.dim(0) != channels) {
    throw DimensionError("bias_add: bias length " + std::to_string(bias.dim(0)) +
                         " vs channels " + std::to_string(channels));
  }
  const auto& xv = x.data();
  const auto& bv = bias.data();
  std::vector<T> out(xv.size());
  for (int c = 0; c < channels; ++c) {
    const T b = bv[static_cast<size_t>(c)];
    const int64_t base = c * plane;
    for (int64_t i = 0; i < plane; ++i) out[static_cast<size_t>(base + i)] = xv[static_cast<size_t>(base + i)] + b;
  }
  return make_op_node<T>(
      x.shape(), std::move(out), {x, bias},
      [channels, plane](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        if (px.requires_grad) {
          for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          for (int c = 0; c < channels; ++c) {
            T s = T(0);
            const int64_t base = c * plane;
            for (int64_t i = 0; i < plane; ++i) s += self.grad[static_cast<size_t>(base + i)];
            pb.grad[static_cast<size_t>(c)] += s;
          }
        }
      },
      "bias_add");
}

// Concatenates C_i x H x W tensors along the channel axis, preserving order.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: empty input list");
  const int h = parts[0].dim(1);
  const int w = parts[0].dim(2);
  int total_c = 0;
  for (const auto& p : parts) {
    detail::require_ndim(p, 3, "concat_channels");
    if (p.dim(1) != h || p.dim(2) != w) {
      throw DimensionError("concat_channels: spatial mismatch " + shape_str(p.shape()));
    }
    total_c += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(total_c) * h * w);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op_node<T>(
      Shape{total_c, h, w}, std::move(out), parts,
      [](Node<T>& self) {
        size_t offset = 0;
        for (auto& parent : self.parents) {
          const size_t n = parent->value.size();
          if (parent->requires_grad) {
            for (size_t i = 0; i < n; ++i) parent->grad[i] += self.grad[offset + i];
          }
          offset += n;
        }
      },
      "concat_channels");
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int c_in, h, w, c_out, k, stride, dilation, padding, out_h, out_w;
};

template <class T>
ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& kernel, int stride,
                   int dilation, int padding) {
  require_ndim(input, 3, "conv2d");
  require_ndim(kernel, 4, "conv2d");
  ConvDims d{};
  d.c_in = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.c_out = kernel.dim(0);
  d.k = kernel.dim(2);
  d.stride = stride;
  d.dilation = dilation;
  d.padding = padding;
  if (kernel.dim(1) != d.c_in) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(d.c_in));
  }
  if (kernel.dim(2) != kernel.dim(3) || d.k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd size, got " +
                         shape_str(kernel.shape()));
  }
  if (stride < 1 || dilation < 1 || padding < 0) {
    throw DimensionError("conv2d: invalid stride/dilation/padding");
  }
  const int span = dilation * (d.k - 1) + 1;
  d.out_h = (d.h + 2 * padding - span) / stride + 1;
  d.out_w = (d.w + 2 * padding - span) / stride + 1;
  if (d.h + 2 * padding < span || d.w + 2 * padding < span || d.out_h < 1 || d.out_w < 1) {
    throw DimensionError("conv2d: kernel span exceeds padded input");
  }
  return d;
}

// cols is (c_in*k*k) x (out_h*out_w), row-major.
template <class T>
void im2col(const std::vector<T>& input, const ConvDims& d, std::vector<T>& cols) {
  const int64_t out_plane = static_cast<int64_t>(d.out_h) * d.out_w;
  cols.assign(static_cast<size_t>(d.c_in) * d.k * d.k * out_plane, T(0));
  for (int c = 0; c < d.c_in; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        const int64_t row = (static_cast<int64_t>(c) * d.k + ki) * d.k + kj;
        T* dst = cols.data() + row * out_plane;
        const T* src_plane = input.data() + static_cast<int64_t>(c) * d.h * d.w;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int y = oy * d.stride - d.padding + ki * d.dilation;
          if (y < 0 || y >= d.h) {
            dst += d.out_w;
            continue;
          }
          const T* src_row = src_plane + static_cast<int64_t>(y) * d.w;
          int ox = 0;
          int x = -d.padding + kj * d.dilation;
          for (; ox < d.out_w; ++ox, x += d.stride) {
            *dst++ = (x >= 0 && x < d.w) ? src_row[x] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const std::vector<T>& cols, const ConvDims& d, std::vector<T>& grad_input) {
  const int64_t out_plane = static_cast<int64_t>(d.out_h) * d.out_w;
  for (int c = 0; c < d.c_in; ++c) {
    T* dst_plane = grad_input.data() + static_cast<int64_t>(c) * d.h * d.w;
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        const int64_t row = (static_cast<int64_t>(c) * d.k + ki) * d.k + kj;
        const T* src = cols.data() + row * out_plane;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int y = oy * d.stride - d.padding + ki * d.dilation;
          if (y < 0 || y >= d.h) {
            src += d.out_w;
            continue;
          }
          T* dst_row = dst_plane + static_cast<int64_t>(y) * d.w;
          int x = -d.padding + kj * d.dilation;
          for (int ox = 0; ox < d.out_w; ++ox, ++src, x += d.stride) {
            if (x >= 0 && x < d.w) dst_row[x] += *src;
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-d cross-correlation of a C_in x H x W input with a C_out x C_in x k x k
// kernel. Differentiable w.r.t. both input and kernel.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride = 1,
                 int dilation = 1, int padding = 0) {
  const detail::ConvDims d = detail::conv_dims(input, kernel, stride, dilation, padding);
  const int64_t out_plane = static_cast<int64_t>(d.out_h) * d.out_w;
  const int64_t patch = static_cast<int64_t>(d.c_in) * d.k * d.k;

  auto cols = std::make_shared<std::vector<T>>();
  detail::im2col(input.data(), d, *cols);

  std::vector<T> out(static_cast<size_t>(d.c_out) * out_plane);
  {
    detail::ConstMatMap<T> w_mat(kernel.data().data(), d.c_out, patch);
    detail::ConstMatMap<T> col_mat(cols->data(), patch, out_plane);
    detail::MatMap<T> out_mat(out.data(), d.c_out, out_plane);
    out_mat.noalias() = w_mat * col_mat;
  }

  return make_op_node<T>(
      Shape{d.c_out, d.out_h, d.out_w}, std::move(out), {input, kernel},
      [d, cols, out_plane, patch](Node<T>& self) {
        Node<T>& pin = *self.parents[0];
        Node<T>& pker = *self.parents[1];
        detail::ConstMatMap<T> g_out(self.grad.data(), d.c_out, out_plane);
        if (pker.requires_grad) {
          detail::ConstMatMap<T> col_mat(cols->data(), patch, out_plane);
          detail::MatMap<T> g_w(pker.grad.data(), d.c_out, patch);
          g_w.noalias() += g_out * col_mat.transpose();
        }
        if (pin.requires_grad) {
          std::vector<T> g_cols(static_cast<size_t>(patch) * out_plane);
          detail::MatMap<T> g_col_mat(g_cols.data(), patch, out_plane);
          detail::ConstMatMap<T> w_mat(pker.value.data(), d.c_out, patch);
          g_col_mat.noalias() = w_mat.transpose() * g_out;
          detail::col2im_add(g_cols, d, pin.grad);
        }
      },
      "conv2d");
}

// Mean over non-overlapping factor x factor windows; extents must divide.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& input, int factor) {
  detail::require_ndim(input, 3, "avg_pool2d");
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw DimensionError("avg_pool2d: extents " + shape_str(input.shape()) +
                         " not divisible by factor " + std::to_string(factor));
  }
  const int oh = h / factor, ow = w / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  const auto& in = input.data();
  std::vector<T> out(static_cast<size_t>(c) * oh * ow, T(0));
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in.data() + static_cast<int64_t>(ch) * h * w;
    T* out_plane = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T s = T(0);
        for (int dy = 0; dy < factor; ++dy) {
          const T* row = plane + static_cast<int64_t>(oy * factor + dy) * w + ox * factor;
          for (int dx = 0; dx < factor; ++dx) s += row[dx];
        }
        out_plane[static_cast<int64_t>(oy) * ow + ox] = s * inv;
      }
    }
  }
  return make_op_node<T>(
      Shape{c, oh, ow}, std::move(out), {input},
      [c, h, w, oh, ow, factor, inv](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int ch = 0; ch < c; ++ch) {
          const T* g_plane = self.grad.data() + static_cast<int64_t>(ch) * oh * ow;
          T* gin_plane = p.grad.data() + static_cast<int64_t>(ch) * h * w;
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              const T g = g_plane[static_cast<int64_t>(oy) * ow + ox] * inv;
              for (int dy = 0; dy < factor; ++dy) {
                T* row = gin_plane + static_cast<int64_t>(oy * factor + dy) * w + ox * factor;
                for (int dx = 0; dx < factor; ++dx) row[dx] += g;
              }
            }
          }
        }
      },
      "avg_pool2d");
}

namespace detail {

struct LerpIndex {
  int lo, hi;
  double w_hi;
};

inline std::vector<LerpIndex> corner_aligned_grid(int in_size, int out_size) {
  std::vector<LerpIndex> grid(static_cast<size_t>(out_size));
  for (int i = 0; i < out_size; ++i) {
    double src = 0.0;
    if (out_size > 1) {
      src = static_cast<double>(i) * (in_size - 1) / (out_size - 1);
    }
    int lo = static_cast<int>(std::floor(src));
    if (lo > in_size - 1) lo = in_size - 1;
    int hi = std::min(lo + 1, in_size - 1);
    grid[static_cast<size_t>(i)] = {lo, hi, src - lo};
  }
  return grid;
}

}  // namespace detail

// Bilinear interpolation on a corner-aligned sampling grid.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w) {
  detail::require_ndim(input, 3, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output extents must be >= 1");
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto ys = detail::corner_aligned_grid(h, out_h);
  const auto xs = detail::corner_aligned_grid(w, out_w);
  const auto& in = input.data();
  std::vector<T> out(static_cast<size_t>(c) * out_h * out_w);
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in.data() + static_cast<int64_t>(ch) * h * w;
    T* out_plane = out.data() + static_cast<int64_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& gy = ys[static_cast<size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& gx = xs[static_cast<size_t>(ox)];
        const double v00 = plane[static_cast<int64_t>(gy.lo) * w + gx.lo];
        const double v01 = plane[static_cast<int64_t>(gy.lo) * w + gx.hi];
        const double v10 = plane[static_cast<int64_t>(gy.hi) * w + gx.lo];
        const double v11 = plane[static_cast<int64_t>(gy.hi) * w + gx.hi];
        const double top = v00 + (v01 - v00) * gx.w_hi;
        const double bot = v10 + (v11 - v10) * gx.w_hi;
        out_plane[static_cast<int64_t>(oy) * out_w + ox] = static_cast<T>(top + (bot - top) * gy.w_hi);
      }
    }
  }
  return make_op_node<T>(
      Shape{c, out_h, out_w}, std::move(out), {input},
      [c, h, w, out_h, out_w, ys, xs](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int ch = 0; ch < c; ++ch) {
          const T* g_plane = self.grad.data() + static_cast<int64_t>(ch) * out_h * out_w;
          T* gin = p.grad.data() + static_cast<int64_t>(ch) * h * w;
          for (int oy = 0; oy < out_h; ++oy) {
            const auto& gy = ys[static_cast<size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
              const auto& gx = xs[static_cast<size_t>(ox)];
              const T g = g_plane[static_cast<int64_t>(oy) * out_w + ox];
              const T wy1 = static_cast<T>(gy.w_hi), wy0 = T(1) - wy1;
              const T wx1 = static_cast<T>(gx.w_hi), wx0 = T(1) - wx1;
              gin[static_cast<int64_t>(gy.lo) * w + gx.lo] += g * wy0 * wx0;
              gin[static_cast<int64_t>(gy.lo) * w + gx.hi] += g * wy0 * wx1;
              gin[static_cast<int64_t>(gy.hi) * w + gx.lo] += g * wy1 * wx0;
              gin[static_cast<int64_t>(gy.hi) * w + gx.hi] += g * wy1 * wx1;
            }
          }
        }
      },
      "bilinear_resize");
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a, 2, "matmul");
  detail::require_ndim(b, 2, "matmul");
  const int m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(static_cast<size_t>(m) * p);
  {
    detail::ConstMatMap<T> am(a.data().data(), m, n);
    detail::ConstMatMap<T> bm(b.data().data(), n, p);
    detail::MatMap<T> om(out.data(), m, p);
    om.noalias() = am * bm;
  }
  return make_op_node<T>(
      Shape{m, p}, std::move(out), {a, b},
      [m, n, p](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        detail::ConstMatMap<T> g(self.grad.data(), m, p);
        if (pa.requires_grad) {
          detail::ConstMatMap<T> bm(pb.value.data(), n, p);
          detail::MatMap<T> ga(pa.grad.data(), m, n);
          ga.noalias() += g * bm.transpose();
        }
        if (pb.requires_grad) {
          detail::ConstMatMap<T> am(pa.value.data(), m, n);
          detail::MatMap<T> gb(pb.grad.data(), n, p);
          gb.noalias() += am.transpose() * g;
        }
      },
      "matmul");
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_ndim(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  const auto& av = a.data();
  std::vector<T> out(av.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
  return make_op_node<T>(
      Shape{n, m}, std::move(out), {a},
      [m, n](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            p.grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
      },
      "transpose");
}

namespace detail {

// Gaussian elimination with partial pivoting on the augmented system [A | I].
// Returns false when a pivot vanishes (exactly singular).
template <class T>
bool invert_gepp(const std::vector<T>& a, int n, std::vector<T>& inv) {
  std::vector<T> lhs(a);
  inv.assign(static_cast<size_t>(n) * n, T(0));
  for (int i = 0; i < n; ++i) inv[static_cast<size_t>(i) * n + i] = T(1);
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    T best = std::abs(lhs[static_cast<size_t>(col) * n + col]);
    for (int r = col + 1; r < n; ++r) {
      const T mag = std::abs(lhs[static_cast<size_t>(r) * n + col]);
      if (mag > best) {
        best = mag;
        pivot = r;
      }
    }
    if (!(best > T(0))) return false;
    if (pivot != col) {
      for (int j = 0; j < n; ++j) {
        std::swap(lhs[static_cast<size_t>(pivot) * n + j], lhs[static_cast<size_t>(col) * n + j]);
        std::swap(inv[static_cast<size_t>(pivot) * n + j], inv[static_cast<size_t>(col) * n + j]);
      }
    }
    const T diag = lhs[static_cast<size_t>(col) * n + col];
    const T inv_diag = T(1) / diag;
    for (int j = 0; j < n; ++j) {
      lhs[static_cast<size_t>(col) * n + j] *= inv_diag;
      inv[static_cast<size_t>(col) * n + j] *= inv_diag;
    }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const T f = lhs[static_cast<size_t>(r) * n + col];
      if (f == T(0)) continue;
      for (int j = 0; j < n; ++j) {
        lhs[static_cast<size_t>(r) * n + j] -= f * lhs[static_cast<size_t>(col) * n + j];
        inv[static_cast<size_t>(r) * n + j] -= f * inv[static_cast<size_t>(col) * n + j];
      }
    }
  }
  return true;
}

template <class T>
double norm1_colmax(const std::vector<T>& a, int n) {
  double best = 0.0;
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::abs(static_cast<double>(a[static_cast<size_t>(i) * n + j]));
    best = std::max(best, s);
  }
  return best;
}

}  // namespace detail

// Inverse of a square matrix by Gaussian elimination with partial pivoting.
// Raises InversionError for singular input or a 1-norm condition estimate
// above the cap. Backward rule: d(A^-1) = -A^-1 dA A^-1.
template <class T>
Tensor<T> mat_inverse(const Tensor<T>& a, double condition_cap = 1e12) {
  detail::require_ndim(a, 2, "mat_inverse");
  const int n = a.dim(0);
  if (a.dim(1) != n) throw DimensionError("mat_inverse: matrix not square, " + shape_str(a.shape()));
  std::vector<T> inv;
  if (!detail::invert_gepp(a.data(), n, inv)) {
    throw InversionError("mat_inverse: singular matrix",
                         std::numeric_limits<double>::infinity());
  }
  for (const T v : inv) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw InversionError("mat_inverse: non-finite inverse entries",
                           std::numeric_limits<double>::infinity());
    }
  }
  const double cond = detail::norm1_colmax(a.data(), n) * detail::norm1_colmax(inv, n);
  if (!(cond < condition_cap)) {
    throw InversionError("mat_inverse: condition estimate " + std::to_string(cond) +
                             " exceeds cap " + std::to_string(condition_cap),
                         cond);
  }
  return make_op_node<T>(
      Shape{n, n}, std::move(inv), {a},
      [n](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        detail::ConstMatMap<T> inv_m(self.value.data(), n, n);
        detail::ConstMatMap<T> g(self.grad.data(), n, n);
        detail::MatMap<T> ga(p.grad.data(), n, n);
        ga.noalias() -= inv_m.transpose() * g * inv_m.transpose();
      },
      "mat_inverse");
}

template <class T>
Tensor<T> trace(const Tensor<T>& a) {
  detail::require_ndim(a, 2, "trace");
  const int n = a.dim(0);
  if (a.dim(1) != n) throw DimensionError("trace: matrix not square");
  T s = T(0);
  for (int i = 0; i < n; ++i) s += a.data()[static_cast<size_t>(i) * n + i];
  return make_op_node<T>(
      Shape{1}, {s}, {a},
      [n](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) p.grad[static_cast<size_t>(i) * n + i] += self.grad[0];
      },
      "trace");
}

// factor * s * I_n for a scalar node s.
template <class T>
Tensor<T> scaled_identity(const Tensor<T>& s, T factor, int n) {
  if (s.numel() != 1) throw DimensionError("scaled_identity: scalar input required");
  std::vector<T> out(static_cast<size_t>(n) * n, T(0));
  const T v = factor * s.item();
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i) * n + i] = v;
  return make_op_node<T>(
      Shape{n, n}, std::move(out), {s},
      [factor, n](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        T s_diag = T(0);
        for (int i = 0; i < n; ++i) s_diag += self.grad[static_cast<size_t>(i) * n + i];
        p.grad[0] += factor * s_diag;
      },
      "scaled_identity");
}

// ---------------------------------------------------------------------------
// Reductions, reshapes, normalizations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (const T v : a.data()) s += v;
  return make_op_node<T>(
      Shape{1}, {s}, {a},
      [](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
      },
      "sum_all");
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
  }
  std::vector<T> out(a.data());
  return make_op_node<T>(
      std::move(shape), std::move(out), {a},
      [](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
      },
      "reshape");
}

// v / ||v||_2 over the flattened tensor.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& v) {
  const auto& data = v.data();
  double sq = 0.0;
  for (const T x : data) sq += static_cast<double>(x) * x;
  const T norm = static_cast<T>(std::sqrt(sq));
  if (!(norm > T(0))) throw NumericsError("l2_normalize: zero-norm input");
  std::vector<T> out(data.size());
  const T inv = T(1) / norm;
  for (size_t i = 0; i < data.size(); ++i) out[i] = data[i] * inv;
  return make_op_node<T>(
      v.shape(), std::move(out), {v},
      [inv](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        // d(v/||v||) = (I - v_hat v_hat^T) / ||v||
        T dot = T(0);
        for (size_t i = 0; i < self.value.size(); ++i) dot += self.value[i] * self.grad[i];
        for (size_t i = 0; i < p.grad.size(); ++i) {
          p.grad[i] += inv * (self.grad[i] - self.value[i] * dot);
        }
      },
      "l2_normalize");
}

// Stacks K same-length vectors as matrix columns: out[i][j] = v_j[i].
template <class T>
Tensor<T> concat_columns(const std::vector<Tensor<T>>& columns) {
  if (columns.empty()) throw DimensionError("concat_columns: empty input list");
  const int d = static_cast<int>(columns[0].numel());
  const int k = static_cast<int>(columns.size());
  std::vector<T> out(static_cast<size_t>(d) * k);
  for (int j = 0; j < k; ++j) {
    if (columns[static_cast<size_t>(j)].numel() != d) {
      throw DimensionError("concat_columns: length mismatch");
    }
    const auto& col = columns[static_cast<size_t>(j)].data();
    for (int i = 0; i < d; ++i) out[static_cast<size_t>(i) * k + j] = col[static_cast<size_t>(i)];
  }
  return make_op_node<T>(
      Shape{d, k}, std::move(out), columns,
      [d, k](Node<T>& self) {
        for (int j = 0; j < k; ++j) {
          Node<T>& p = *self.parents[static_cast<size_t>(j)];
          if (!p.requires_grad) continue;
          for (int i = 0; i < d; ++i) p.grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i) * k + j];
        }
      },
      "concat_columns");
}

// Stacks K same-length vectors as matrix rows: out[j][i] = v_j[i].
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: empty input list");
  const int d = static_cast<int>(rows[0].numel());
  const int k = static_cast<int>(rows.size());
  std::vector<T> out;
  out.reserve(static_cast<size_t>(d) * k);
  for (const auto& r : rows) {
    if (r.numel() != d) throw DimensionError("stack_rows: length mismatch");
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return make_op_node<T>(
      Shape{k, d}, std::move(out), rows,
      [d](Node<T>& self) {
        for (size_t j = 0; j < self.parents.size(); ++j) {
          Node<T>& p = *self.parents[j];
          if (!p.requires_grad) continue;
          const size_t base = j * static_cast<size_t>(d);
          for (int i = 0; i < d; ++i) p.grad[static_cast<size_t>(i)] += self.grad[base + static_cast<size_t>(i)];
        }
      },
      "stack_rows");
}

// Weighted mean of feature pixels: out[d] = sum_ij f[d,ij] w[ij] / sum_ij w[ij].
// Weights are fixed data, not a graph input.
template <class T>
Tensor<T> weighted_spatial_mean(const Tensor<T>& feature, std::vector<T> weights) {
  detail::require_ndim(feature, 3, "weighted_spatial_mean");
  const int d = feature.dim(0);
  const int64_t plane = static_cast<int64_t>(feature.dim(1)) * feature.dim(2);
  if (static_cast<int64_t>(weights.size()) != plane) {
    throw DimensionError("weighted_spatial_mean: weight grid size mismatch");
  }
  T wsum = T(0);
  for (const T w : weights) wsum += w;
  if (!(wsum > T(0))) throw NumericsError("weighted_spatial_mean: non-positive weight sum");
  const T inv = T(1) / wsum;
  const auto& f = feature.data();
  std::vector<T> out(static_cast<size_t>(d), T(0));
  for (int c = 0; c < d; ++c) {
    const T* plane_ptr = f.data() + static_cast<int64_t>(c) * plane;
    T s = T(0);
    for (int64_t i = 0; i < plane; ++i) s += plane_ptr[i] * weights[static_cast<size_t>(i)];
    out[static_cast<size_t>(c)] = s * inv;
  }
  auto w_shared = std::make_shared<std::vector<T>>(std::move(weights));
  return make_op_node<T>(
      Shape{d}, std::move(out), {feature},
      [d, plane, inv, w_shared](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int c = 0; c < d; ++c) {
          const T g = self.grad[static_cast<size_t>(c)] * inv;
          T* gp = p.grad.data() + static_cast<int64_t>(c) * plane;
          const T* w = w_shared->data();
          for (int64_t i = 0; i < plane; ++i) gp[i] += g * w[i];
        }
      },
      "weighted_spatial_mean");
}

// Per-pixel softmax across the channel axis of a K x H x W tensor,
// computed with max subtraction.
template <class T>
Tensor<T> softmax_channel(const Tensor<T>& logits) {
  detail::require_ndim(logits, 3, "softmax_channel");
  const int k = logits.dim(0);
  const int64_t plane = static_cast<int64_t>(logits.dim(1)) * logits.dim(2);
  const auto& in = logits.data();
  std::vector<T> out(in.size());
  for (int64_t px = 0; px < plane; ++px) {
    T m = in[static_cast<size_t>(px)];
    for (int c = 1; c < k; ++c) m = std::max(m, in[static_cast<size_t>(c * plane + px)]);
    T denom = T(0);
    for (int c = 0; c < k; ++c) {
      const T e = std::exp(in[static_cast<size_t>(c * plane + px)] - m);
      out[static_cast<size_t>(c * plane + px)] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (int c = 0; c < k; ++c) out[static_cast<size_t>(c * plane + px)] *= inv;
  }
  return make_op_node<T>(
      logits.shape(), std::move(out), {logits},
      [k, plane](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int64_t px = 0; px < plane; ++px) {
          T dot = T(0);
          for (int c = 0; c < k; ++c) {
            dot += self.value[static_cast<size_t>(c * plane + px)] *
                   self.grad[static_cast<size_t>(c * plane + px)];
          }
          for (int c = 0; c < k; ++c) {
            const size_t i = static_cast<size_t>(c * plane + px);
            p.grad[i] += self.value[i] * (self.grad[i] - dot);
          }
        }
      },
      "softmax_channel");
}

// Copies values into a fresh constant leaf, cutting all gradient paths.
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from_data(a.shape(), a.data(), false);
}

}  // namespace taft
