#include "fsfnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace fsfnet {

namespace {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  int oc, ic, kh, kw;
  int oh, ow;
  int stride, padding;
};

template <typename T>
ConvGeom conv_geom(const Shape& xs, const Shape& ws, int stride, int padding) {
  ConvGeom g;
  g.oc = ws.n;
  g.ic = ws.h;
  g.kh = ws.w;
  g.kw = ws.c;
  g.stride = stride;
  g.padding = padding;
  if (stride < 1) fail("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) fail("conv2d: padding must be >= 0");
  if (xs.c != g.ic) {
    fail("conv2d: input channels " + std::to_string(xs.c) +
         " != kernel in_channels " + std::to_string(g.ic) + " (input " +
         xs.str() + ", kernel " + ws.str() + ")");
  }
  g.oh = (xs.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (xs.w + 2 * padding - g.kw) / stride + 1;
  if (g.oh < 1 || g.ow < 1 ||
      (xs.h + 2 * padding - g.kh) < 0 || (xs.w + 2 * padding - g.kw) < 0) {
    fail("conv2d: kernel " + ws.str() + " does not fit input " + xs.str() +
         " with padding " + std::to_string(padding));
  }
  return g;
}

// One image of x into a (oh*ow) x (kh*kw*ic) row-major patch matrix.
template <typename T>
void im2col(const Tensor<T>& x, int image, const ConvGeom& g, T* col) {
  const Shape& s = x.shape();
  const int ic = g.ic;
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      T* row = col + (static_cast<std::size_t>(oy) * g.ow + ox) *
                         (static_cast<std::size_t>(g.kh) * g.kw * ic);
      for (int ky = 0; ky < g.kh; ++ky) {
        const int iy = oy * g.stride + ky - g.padding;
        for (int kx = 0; kx < g.kw; ++kx) {
          const int ix = ox * g.stride + kx - g.padding;
          T* dst = row + (static_cast<std::size_t>(ky) * g.kw + kx) * ic;
          if (iy >= 0 && iy < s.h && ix >= 0 && ix < s.w) {
            std::memcpy(dst, &x.at(image, iy, ix, 0), sizeof(T) * ic);
          } else {
            std::memset(dst, 0, sizeof(T) * ic);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int image, const ConvGeom& g, Tensor<T>& dx) {
  const Shape& s = dx.shape();
  const int ic = g.ic;
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      const T* row = col + (static_cast<std::size_t>(oy) * g.ow + ox) *
                               (static_cast<std::size_t>(g.kh) * g.kw * ic);
      for (int ky = 0; ky < g.kh; ++ky) {
        const int iy = oy * g.stride + ky - g.padding;
        if (iy < 0 || iy >= s.h) continue;
        for (int kx = 0; kx < g.kw; ++kx) {
          const int ix = ox * g.stride + kx - g.padding;
          if (ix < 0 || ix >= s.w) continue;
          const T* src = row + (static_cast<std::size_t>(ky) * g.kw + kx) * ic;
          T* dst = &dx.at(image, iy, ix, 0);
          for (int ci = 0; ci < ic; ++ci) dst[ci] += src[ci];
        }
      }
    }
  }
}

// Kernel (oc,ic,kh,kw) packed as (kh*kw*ic) x oc for the patch GEMM.
template <typename T>
std::vector<T> pack_weights(const Tensor<T>& w, const ConvGeom& g) {
  std::vector<T> packed(static_cast<std::size_t>(g.kh) * g.kw * g.ic * g.oc);
  for (int co = 0; co < g.oc; ++co) {
    for (int ci = 0; ci < g.ic; ++ci) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx) {
          const std::size_t r =
              (static_cast<std::size_t>(ky) * g.kw + kx) * g.ic + ci;
          packed[r * g.oc + co] = w.at(co, ci, ky, kx);
        }
      }
    }
  }
  return packed;
}

}  // namespace

template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& w, const Value<T>& b,
                int stride, int padding) {
  const ConvGeom g = conv_geom<T>(x.shape(), w.shape(), stride, padding);
  const Shape xs = x.shape();
  if (b.shape() != Shape{1, 1, 1, g.oc}) {
    fail("conv2d: bias shape must be 1x1x1x" + std::to_string(g.oc) + ", got " +
         b.shape().str());
  }

  const std::size_t rows = static_cast<std::size_t>(g.oh) * g.ow;
  const std::size_t cols = static_cast<std::size_t>(g.kh) * g.kw * g.ic;
  Tensor<T> out(Shape{xs.n, g.oh, g.ow, g.oc});
  {
    const std::vector<T> wpack = pack_weights(w.val(), g);
    std::vector<T> col(rows * cols);
    Eigen::Map<const MatX<T>> wm(wpack.data(), cols, g.oc);
    for (int n = 0; n < xs.n; ++n) {
      im2col(x.val(), n, g, col.data());
      Eigen::Map<const MatX<T>> cm(col.data(), rows, cols);
      Eigen::Map<MatX<T>> om(out.data() + n * rows * g.oc, rows, g.oc);
      om.noalias() = cm * wm;
      om.rowwise() +=
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.val().data(),
                                                                g.oc);
    }
  }

  ValueNode<T>* xn = x.node();
  ValueNode<T>* wn = w.node();
  ValueNode<T>* bn = b.node();
  return make_op<T>(
      std::move(out), {x, w, b}, [xn, wn, bn, g, rows, cols](ValueNode<T>& node) {
        const int batch = xn->val.shape().n;
        std::vector<T> col(rows * cols);
        std::vector<T> dcol(rows * cols);
        std::vector<T> dwpack;
        std::vector<T> wpack;
        if (wn->requires_grad) dwpack.assign(cols * g.oc, T(0));
        if (xn->requires_grad) wpack = pack_weights(wn->val, g);
        for (int n = 0; n < batch; ++n) {
          Eigen::Map<const MatX<T>> dom(node.grad.data() + n * rows * g.oc,
                                        rows, g.oc);
          if (wn->requires_grad) {
            im2col(xn->val, n, g, col.data());
            Eigen::Map<const MatX<T>> cm(col.data(), rows, cols);
            Eigen::Map<MatX<T>> dwm(dwpack.data(), cols, g.oc);
            dwm.noalias() += cm.transpose() * dom;
          }
          if (bn->requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbm(
                bn->grad.data(), g.oc);
            dbm += dom.colwise().sum();
          }
          if (xn->requires_grad) {
            Eigen::Map<const MatX<T>> wm(wpack.data(), cols, g.oc);
            Eigen::Map<MatX<T>> dcm(dcol.data(), rows, cols);
            dcm.noalias() = dom * wm.transpose();
            col2im_add(dcol.data(), n, g, xn->grad);
          }
        }
        if (wn->requires_grad) {
          for (int co = 0; co < g.oc; ++co) {
            for (int ci = 0; ci < g.ic; ++ci) {
              for (int ky = 0; ky < g.kh; ++ky) {
                for (int kx = 0; kx < g.kw; ++kx) {
                  const std::size_t r =
                      (static_cast<std::size_t>(ky) * g.kw + kx) * g.ic + ci;
                  wn->grad.at(co, ci, ky, kx) += dwpack[r * g.oc + co];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Value<T> downsample_max(const Value<T>& x, int factor) {
  const Shape s = x.shape();
  if (factor < 1) fail("downsample: factor must be >= 1");
  if (s.h % factor != 0 || s.w % factor != 0) {
    fail("downsample: spatial extents " + s.str() + " not divisible by factor " +
         std::to_string(factor));
  }
  const int oh = s.h / factor;
  const int ow = s.w / factor;
  Tensor<T> out(Shape{s.n, oh, ow, s.c});
  // Flat input index of each window maximum, first occurrence on ties.
  auto arg = std::make_shared<std::vector<std::int64_t>>(out.numel());
  const Tensor<T>& xv = x.val();
  std::int64_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int c = 0; c < s.c; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_idx = -1;
          for (int ky = 0; ky < factor; ++ky) {
            for (int kx = 0; kx < factor; ++kx) {
              const int iy = oy * factor + ky;
              const int ix = ox * factor + kx;
              const T v = xv.at(n, iy, ix, c);
              if (v > best) {
                best = v;
                best_idx =
                    ((static_cast<std::int64_t>(n) * s.h + iy) * s.w + ix) *
                        s.c + c;
              }
            }
          }
          out.data()[o] = best;
          (*arg)[o] = best_idx;
          ++o;
        }
      }
    }
  }
  ValueNode<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, arg](ValueNode<T>& node) {
    const T* dy = node.grad.data();
    for (std::int64_t i = 0; i < node.grad.numel(); ++i) {
      xn->grad.data()[(*arg)[i]] += dy[i];
    }
  });
}

namespace {

struct LerpIdx {
  int lo, hi;
  double w_hi;
};

inline LerpIdx half_pixel(int dst, int factor, int src_extent) {
  const double src = (dst + 0.5) / factor - 0.5;
  double f = std::floor(src);
  LerpIdx r;
  r.w_hi = src - f;
  int lo = static_cast<int>(f);
  r.lo = std::clamp(lo, 0, src_extent - 1);
  r.hi = std::clamp(lo + 1, 0, src_extent - 1);
  return r;
}

}  // namespace

template <typename T>
Value<T> upsample(const Value<T>& x, int factor, UpsampleMode mode) {
  const Shape s = x.shape();
  if (factor < 1) fail("upsample: factor must be >= 1");
  const int oh = s.h * factor;
  const int ow = s.w * factor;
  Tensor<T> out(Shape{s.n, oh, ow, s.c});
  const Tensor<T>& xv = x.val();

  if (mode == UpsampleMode::kNearest) {
    for (int n = 0; n < s.n; ++n) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          std::memcpy(&out.at(n, oy, ox, 0), &xv.at(n, oy / factor, ox / factor, 0),
                      sizeof(T) * s.c);
        }
      }
    }
    ValueNode<T>* xn = x.node();
    return make_op<T>(std::move(out), {x}, [xn, factor](ValueNode<T>& node) {
      const Shape os = node.grad.shape();
      for (int n = 0; n < os.n; ++n) {
        for (int oy = 0; oy < os.h; ++oy) {
          for (int ox = 0; ox < os.w; ++ox) {
            T* dst = &xn->grad.at(n, oy / factor, ox / factor, 0);
            const T* src = &node.grad.at(n, oy, ox, 0);
            for (int c = 0; c < os.c; ++c) dst[c] += src[c];
          }
        }
      }
    });
  }

  // Bilinear with half-pixel centers; edges clamp.
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < oh; ++oy) {
      const LerpIdx ly = half_pixel(oy, factor, s.h);
      for (int ox = 0; ox < ow; ++ox) {
        const LerpIdx lx = half_pixel(ox, factor, s.w);
        const T wy1 = static_cast<T>(ly.w_hi), wy0 = T(1) - wy1;
        const T wx1 = static_cast<T>(lx.w_hi), wx0 = T(1) - wx1;
        T* dst = &out.at(n, oy, ox, 0);
        const T* p00 = &xv.at(n, ly.lo, lx.lo, 0);
        const T* p01 = &xv.at(n, ly.lo, lx.hi, 0);
        const T* p10 = &xv.at(n, ly.hi, lx.lo, 0);
        const T* p11 = &xv.at(n, ly.hi, lx.hi, 0);
        for (int c = 0; c < s.c; ++c) {
          dst[c] = wy0 * (wx0 * p00[c] + wx1 * p01[c]) +
                   wy1 * (wx0 * p10[c] + wx1 * p11[c]);
        }
      }
    }
  }
  ValueNode<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, factor](ValueNode<T>& node) {
    const Shape os = node.grad.shape();
    const Shape is = xn->grad.shape();
    for (int n = 0; n < os.n; ++n) {
      for (int oy = 0; oy < os.h; ++oy) {
        const LerpIdx ly = half_pixel(oy, factor, is.h);
        for (int ox = 0; ox < os.w; ++ox) {
          const LerpIdx lx = half_pixel(ox, factor, is.w);
          const T wy1 = static_cast<T>(ly.w_hi), wy0 = T(1) - wy1;
          const T wx1 = static_cast<T>(lx.w_hi), wx0 = T(1) - wx1;
          const T* dy = &node.grad.at(n, oy, ox, 0);
          T* g00 = &xn->grad.at(n, ly.lo, lx.lo, 0);
          T* g01 = &xn->grad.at(n, ly.lo, lx.hi, 0);
          T* g10 = &xn->grad.at(n, ly.hi, lx.lo, 0);
          T* g11 = &xn->grad.at(n, ly.hi, lx.hi, 0);
          for (int c = 0; c < os.c; ++c) {
            g00[c] += wy0 * wx0 * dy[c];
            g01[c] += wy0 * wx1 * dy[c];
            g10[c] += wy1 * wx0 * dy[c];
            g11[c] += wy1 * wx1 * dy[c];
          }
        }
      }
    }
  });
}

template <typename T>
Value<T> sigmoid(const Value<T>& x) {
  Tensor<T> out(x.shape());
  const T hi = std::nextafter(T(1), T(0));
  const T lo = std::numeric_limits<T>::min();
  const T* xv = x.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const T v = xv[i];
    T y;
    if (v >= T(0)) {
      y = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y = e / (T(1) + e);
    }
    out.data()[i] = std::min(std::max(y, lo), hi);
  }
  ValueNode<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](ValueNode<T>& node) {
    const T* y = node.val.data();
    const T* dy = node.grad.data();
    T* dx = xn->grad.data();
    for (std::int64_t i = 0; i < node.grad.numel(); ++i) {
      dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    }
  });
}

template <typename T>
Value<T> relu(const Value<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    out.data()[i] = xv[i] > T(0) ? xv[i] : T(0);
  }
  ValueNode<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](ValueNode<T>& node) {
    const T* xv = xn->val.data();
    const T* dy = node.grad.data();
    T* dx = xn->grad.data();
    for (std::int64_t i = 0; i < node.grad.numel(); ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
  if (a.shape() != b.shape()) {
    fail("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor<T> out(a.shape());
  const T* av = a.val().data();
  const T* bv = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data()[i] = av[i] + bv[i];
  ValueNode<T>* an = a.node();
  ValueNode<T>* bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](ValueNode<T>& node) {
    const T* dy = node.grad.data();
    if (an->requires_grad) {
      T* da = an->grad.data();
      for (std::int64_t i = 0; i < node.grad.numel(); ++i) da[i] += dy[i];
    }
    if (bn->requires_grad) {
      T* db = bn->grad.data();
      for (std::int64_t i = 0; i < node.grad.numel(); ++i) db[i] += dy[i];
    }
  });
}

template <typename T>
Value<T> scale(const Value<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* av = a.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data()[i] = s * av[i];
  ValueNode<T>* an = a.node();
  return make_op<T>(std::move(out), {a}, [an, s](ValueNode<T>& node) {
    const T* dy = node.grad.data();
    T* da = an->grad.data();
    for (std::int64_t i = 0; i < node.grad.numel(); ++i) da[i] += s * dy[i];
  });
}

template <typename T>
Value<T> concat_channels(const std::vector<Value<T>>& xs) {
  if (xs.empty()) fail("concat_channels: no inputs");
  const Shape s0 = xs[0].shape();
  int total_c = 0;
  for (const auto& x : xs) {
    const Shape s = x.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      fail("concat_channels: extent mismatch " + s.str() + " vs " + s0.str());
    }
    total_c += s.c;
  }
  Tensor<T> out(Shape{s0.n, s0.h, s0.w, total_c});
  for (int n = 0; n < s0.n; ++n) {
    for (int y = 0; y < s0.h; ++y) {
      for (int x = 0; x < s0.w; ++x) {
        T* dst = &out.at(n, y, x, 0);
        for (const auto& part : xs) {
          const int c = part.shape().c;
          std::memcpy(dst, &part.val().at(n, y, x, 0), sizeof(T) * c);
          dst += c;
        }
      }
    }
  }
  std::vector<ValueNode<T>*> nodes;
  std::vector<int> widths;
  for (const auto& x : xs) {
    nodes.push_back(x.node());
    widths.push_back(x.shape().c);
  }
  return make_op<T>(std::move(out), xs, [nodes, widths](ValueNode<T>& node) {
    const Shape os = node.grad.shape();
    for (int n = 0; n < os.n; ++n) {
      for (int y = 0; y < os.h; ++y) {
        for (int x = 0; x < os.w; ++x) {
          const T* src = &node.grad.at(n, y, x, 0);
          for (std::size_t k = 0; k < nodes.size(); ++k) {
            if (nodes[k]->requires_grad) {
              T* dst = &nodes[k]->grad.at(n, y, x, 0);
              for (int c = 0; c < widths[k]; ++c) dst[c] += src[c];
            }
            src += widths[k];
          }
        }
      }
    }
  });
}

template <typename T>
Value<T> mul_spatial(const Value<T>& x, const Value<T>& a) {
  const Shape xs = x.shape();
  const Shape as = a.shape();
  if (as.n != xs.n || as.h != xs.h || as.w != xs.w || as.c != 1) {
    fail("mul_spatial: attention map must be " +
         Shape{xs.n, xs.h, xs.w, 1}.str() + ", got " + as.str());
  }
  Tensor<T> out(xs);
  for (int n = 0; n < xs.n; ++n) {
    for (int y = 0; y < xs.h; ++y) {
      for (int xp = 0; xp < xs.w; ++xp) {
        const T g = a.val().at(n, y, xp, 0);
        const T* src = &x.val().at(n, y, xp, 0);
        T* dst = &out.at(n, y, xp, 0);
        for (int c = 0; c < xs.c; ++c) dst[c] = g * src[c];
      }
    }
  }
  ValueNode<T>* xn = x.node();
  ValueNode<T>* an = a.node();
  return make_op<T>(std::move(out), {x, a}, [xn, an](ValueNode<T>& node) {
    const Shape xs = xn->val.shape();
    for (int n = 0; n < xs.n; ++n) {
      for (int y = 0; y < xs.h; ++y) {
        for (int xp = 0; xp < xs.w; ++xp) {
          const T* dy = &node.grad.at(n, y, xp, 0);
          const T g = an->val.at(n, y, xp, 0);
          const T* xv = &xn->val.at(n, y, xp, 0);
          if (xn->requires_grad) {
            T* dx = &xn->grad.at(n, y, xp, 0);
            for (int c = 0; c < xs.c; ++c) dx[c] += g * dy[c];
          }
          if (an->requires_grad) {
            T acc = T(0);
            for (int c = 0; c < xs.c; ++c) acc += dy[c] * xv[c];
            an->grad.at(n, y, xp, 0) += acc;
          }
        }
      }
    }
  });
}

template <typename T>
Value<T> channel_pool_mean_max(const Value<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.h, s.w, 2});
  auto arg = std::make_shared<std::vector<int>>(
      static_cast<std::size_t>(s.n) * s.h * s.w);
  std::size_t p = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int xp = 0; xp < s.w; ++xp, ++p) {
        const T* src = &x.val().at(n, y, xp, 0);
        T sum = T(0);
        T best = src[0];
        int best_c = 0;
        for (int c = 0; c < s.c; ++c) {
          sum += src[c];
          if (src[c] > best) {
            best = src[c];
            best_c = c;
          }
        }
        out.at(n, y, xp, 0) = sum / static_cast<T>(s.c);
        out.at(n, y, xp, 1) = best;
        (*arg)[p] = best_c;
      }
    }
  }
  ValueNode<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, arg](ValueNode<T>& node) {
    const Shape s = xn->val.shape();
    const T inv_c = T(1) / static_cast<T>(s.c);
    std::size_t p = 0;
    for (int n = 0; n < s.n; ++n) {
      for (int y = 0; y < s.h; ++y) {
        for (int xp = 0; xp < s.w; ++xp, ++p) {
          const T d_mean = node.grad.at(n, y, xp, 0) * inv_c;
          const T d_max = node.grad.at(n, y, xp, 1);
          T* dx = &xn->grad.at(n, y, xp, 0);
          for (int c = 0; c < s.c; ++c) dx[c] += d_mean;
          dx[(*arg)[p]] += d_max;
        }
      }
    }
  });
}

template <typename T>
Value<T> batch_norm(const Value<T>& x, const Value<T>& gamma,
                    const Value<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool training, T momentum, T eps) {
  const Shape s = x.shape();
  const Shape ps{1, 1, 1, s.c};
  if (gamma.shape() != ps || beta.shape() != ps ||
      running_mean.shape() != ps || running_var.shape() != ps) {
    fail("batch_norm: parameter shapes must be " + ps.str());
  }
  const std::int64_t m = static_cast<std::int64_t>(s.n) * s.h * s.w;
  const std::int64_t stride_c = s.c;

  Tensor<T> mean(ps), var(ps);
  if (training) {
    const T* xv = x.val().data();
    for (std::int64_t i = 0; i < x.val().numel(); ++i) {
      mean.data()[i % stride_c] += xv[i];
    }
    for (int c = 0; c < s.c; ++c) mean.data()[c] /= static_cast<T>(m);
    for (std::int64_t i = 0; i < x.val().numel(); ++i) {
      const T d = xv[i] - mean.data()[i % stride_c];
      var.data()[i % stride_c] += d * d;
    }
    for (int c = 0; c < s.c; ++c) var.data()[c] /= static_cast<T>(m);
    for (int c = 0; c < s.c; ++c) {
      running_mean.data()[c] =
          (T(1) - momentum) * running_mean.data()[c] + momentum * mean.data()[c];
      running_var.data()[c] =
          (T(1) - momentum) * running_var.data()[c] + momentum * var.data()[c];
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  auto inv_std = std::make_shared<std::vector<T>>(s.c);
  for (int c = 0; c < s.c; ++c) {
    (*inv_std)[c] = T(1) / std::sqrt(var.data()[c] + eps);
  }
  auto xhat = std::make_shared<Tensor<T>>(s);
  Tensor<T> out(s);
  {
    const T* xv = x.val().data();
    const T* gm = gamma.val().data();
    const T* bt = beta.val().data();
    T* xh = xhat->data();
    T* ov = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      const int c = static_cast<int>(i % stride_c);
      xh[i] = (xv[i] - mean.data()[c]) * (*inv_std)[c];
      ov[i] = gm[c] * xh[i] + bt[c];
    }
  }

  ValueNode<T>* xn = x.node();
  ValueNode<T>* gn = gamma.node();
  ValueNode<T>* bn = beta.node();
  return make_op<T>(
      std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, inv_std, m, training](ValueNode<T>& node) {
        const Shape s = xn->val.shape();
        const int C = s.c;
        const T* dy = node.grad.data();
        const T* xh = xhat->data();
        std::vector<T> sum_dy(C, T(0)), sum_dy_xh(C, T(0));
        for (std::int64_t i = 0; i < node.grad.numel(); ++i) {
          const int c = static_cast<int>(i % C);
          sum_dy[c] += dy[i];
          sum_dy_xh[c] += dy[i] * xh[i];
        }
        if (gn->requires_grad) {
          for (int c = 0; c < C; ++c) gn->grad.data()[c] += sum_dy_xh[c];
        }
        if (bn->requires_grad) {
          for (int c = 0; c < C; ++c) bn->grad.data()[c] += sum_dy[c];
        }
        if (xn->requires_grad) {
          const T* gm = gn->val.data();
          T* dx = xn->grad.data();
          if (training) {
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::int64_t i = 0; i < node.grad.numel(); ++i) {
              const int c = static_cast<int>(i % C);
              dx[i] += gm[c] * (*inv_std)[c] *
                       (dy[i] - sum_dy[c] * inv_m - xh[i] * sum_dy_xh[c] * inv_m);
            }
          } else {
            for (std::int64_t i = 0; i < node.grad.numel(); ++i) {
              const int c = static_cast<int>(i % C);
              dx[i] += gm[c] * (*inv_std)[c] * dy[i];
            }
          }
        }
      });
}

template <typename T>
Value<T> weighted_cross_entropy(const Value<T>& logits, const LabelMap& labels,
                                std::span<const T> class_weights,
                                int ignore_index) {
  const Shape s = logits.shape();
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w) {
    fail("weighted_cross_entropy: labels " + std::to_string(labels.n) + "x" +
         std::to_string(labels.h) + "x" + std::to_string(labels.w) +
         " do not match logits " + s.str());
  }
  const int K = s.c;
  if (static_cast<int>(class_weights.size()) != K) {
    fail("weighted_cross_entropy: " + std::to_string(class_weights.size()) +
         " class weights for " + std::to_string(K) + " classes");
  }

  auto probs = std::make_shared<Tensor<T>>(s);
  auto lbl = std::make_shared<LabelMap>(labels);
  std::vector<T> weights(class_weights.begin(), class_weights.end());
  double loss = 0.0;
  std::int64_t scored = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const std::int32_t lab = labels.at(n, y, x);
        const T* l = &logits.val().at(n, y, x, 0);
        T* p = &probs->at(n, y, x, 0);
        T mx = l[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
        T denom = T(0);
        for (int k = 0; k < K; ++k) {
          p[k] = std::exp(l[k] - mx);
          denom += p[k];
        }
        for (int k = 0; k < K; ++k) p[k] /= denom;
        if (lab == ignore_index) continue;
        if (lab < 0 || lab >= K) {
          fail("weighted_cross_entropy: label " + std::to_string(lab) +
               " out of range for " + std::to_string(K) + " classes at pixel (" +
               std::to_string(y) + "," + std::to_string(x) + ")");
        }
        const T log_p = (l[lab] - mx) - std::log(denom);
        loss += static_cast<double>(weights[lab]) * -static_cast<double>(log_p);
        ++scored;
      }
    }
  }
  Tensor<T> out(Shape{1, 1, 1, 1});
  out.at(0, 0, 0, 0) =
      scored > 0 ? static_cast<T>(loss / static_cast<double>(scored)) : T(0);

  ValueNode<T>* ln = logits.node();
  const int ign = ignore_index;
  return make_op<T>(
      std::move(out), {logits},
      [ln, probs, lbl, weights, scored, ign](ValueNode<T>& node) {
        if (scored == 0) return;
        const T g = node.grad.at(0, 0, 0, 0) / static_cast<T>(scored);
        const Shape s = ln->val.shape();
        const int K = s.c;
        for (int n = 0; n < s.n; ++n) {
          for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
              const std::int32_t lab = lbl->at(n, y, x);
              if (lab == ign) continue;
              const T wg = g * weights[lab];
              const T* p = &probs->at(n, y, x, 0);
              T* dl = &ln->grad.at(n, y, x, 0);
              for (int k = 0; k < K; ++k) {
                dl[k] += wg * (p[k] - (k == lab ? T(1) : T(0)));
              }
            }
          }
        }
      });
}

LabelMap argmax_channels(const Tensor<float>& logits) {
  const Shape s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const float* l = &logits.at(n, y, x, 0);
        int best = 0;
        for (int k = 1; k < s.c; ++k) {
          if (l[k] > l[best]) best = k;
        }
        out.at(n, y, x) = best;
      }
    }
  }
  return out;
}

#define FSFNET_INSTANTIATE_OPS(T)                                              \
  template Value<T> conv2d<T>(const Value<T>&, const Value<T>&,                \
                              const Value<T>&, int, int);                      \
  template Value<T> downsample_max<T>(const Value<T>&, int);                   \
  template Value<T> upsample<T>(const Value<T>&, int, UpsampleMode);           \
  template Value<T> sigmoid<T>(const Value<T>&);                               \
  template Value<T> relu<T>(const Value<T>&);                                  \
  template Value<T> add<T>(const Value<T>&, const Value<T>&);                  \
  template Value<T> scale<T>(const Value<T>&, T);                              \
  template Value<T> concat_channels<T>(const std::vector<Value<T>>&);          \
  template Value<T> mul_spatial<T>(const Value<T>&, const Value<T>&);          \
  template Value<T> channel_pool_mean_max<T>(const Value<T>&);                 \
  template Value<T> batch_norm<T>(const Value<T>&, const Value<T>&,            \
                                  const Value<T>&, Tensor<T>&, Tensor<T>&,     \
                                  bool, T, T);                                 \
  template Value<T> weighted_cross_entropy<T>(const Value<T>&,                 \
                                              const LabelMap&,                 \
                                              std::span<const T>, int);

FSFNET_INSTANTIATE_OPS(float)
FSFNET_INSTANTIATE_OPS(double)

#undef FSFNET_INSTANTIATE_OPS

}  // namespace fsfnet
