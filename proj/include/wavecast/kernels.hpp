#pragma once

// Raw loops behind the differentiable ops. Everything here works on
// contiguous row-major buffers and knows nothing about the tape.

#include <Eigen/Core>

#include <cstddef>

namespace wavecast::kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m,n] (+)= op(A) * op(B), where op(A) is m x k and op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  using Map = Eigen::Map<RowMatrix<T>>;
  using ConstMap = Eigen::Map<const RowMatrix<T>>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Map cm(c, M, N);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
  } else if (trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  } else if (!trans_a && trans_b) {
    cm.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  } else {
    cm.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose();
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;
};

/// Unrolls patches into a (channels*kh*kw) x (out_h*out_w) column matrix.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = in + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= H) {
            for (std::size_t ow = 0; ow < g.out_w; ++ow) dst[ow] = T{0};
            continue;
          }
          const T* src = plane + ih * W;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T{0};
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* out) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = out + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= H) continue;
          const T* src = row + oh * g.out_w;
          T* dst = plane + ih * W;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

/// Flat source index in a [C*r*r, H, W] tensor for output element (c, y, x)
/// of the shuffled [C, H*r, W*r] tensor.
inline std::size_t pixel_shuffle_source(std::size_t c, std::size_t y, std::size_t x,
                                        std::size_t r, std::size_t h, std::size_t w) {
  const std::size_t ic = c * r * r + (y % r) * r + (x % r);
  return (ic * h + y / r) * w + x / r;
}

}  // namespace wavecast::kernels
