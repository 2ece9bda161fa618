#include "bowda/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "bowda/parallel.hpp"
#include "bowda/rng.hpp"

namespace bowda {

int conv_output_extent(int in, const ConvGeometry& g) {
  if (g.kernel < 1 || g.stride < 1 || g.padding < 0) {
    throw std::invalid_argument("conv: kernel and stride must be >= 1, padding >= 0");
  }
  const int span = in + 2 * g.padding - g.kernel;
  if (span < 0) throw std::invalid_argument("conv: kernel larger than padded input");
  return span / g.stride + 1;
}

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

struct Extent {
  int d, h, w;
  std::size_t count() const { return static_cast<std::size_t>(d) * h * w; }
};

Extent spatial(const Shape& s) { return {s.d, s.h, s.w}; }

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.padding == 0; }

// Rows (c, kz, ky, kx), columns = output voxels.
template <typename T>
void im2col(const T* x, int channels, Extent in, Extent out, const ConvGeometry& g, T* cols) {
  const int k = g.kernel;
  const std::size_t ov = out.count();
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * in.count();
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* row = cols + ((static_cast<std::size_t>(c) * k + kz) * k + ky) * k * ov + kx * ov;
          std::size_t o = 0;
          for (int oz = 0; oz < out.d; ++oz) {
            const int iz = oz * g.stride - g.padding + kz;
            for (int oy = 0; oy < out.h; ++oy) {
              const int iy = oy * g.stride - g.padding + ky;
              if (iz < 0 || iz >= in.d || iy < 0 || iy >= in.h) {
                for (int ox = 0; ox < out.w; ++ox) row[o++] = T(0);
                continue;
              }
              const T* line = xc + (static_cast<std::size_t>(iz) * in.h + iy) * in.w;
              for (int ox = 0; ox < out.w; ++ox) {
                const int ix = ox * g.stride - g.padding + kx;
                row[o++] = (ix >= 0 && ix < in.w) ? line[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into x (which must be zeroed).
template <typename T>
void col2im(const T* cols, int channels, Extent in, Extent out, const ConvGeometry& g, T* x) {
  const int k = g.kernel;
  const std::size_t ov = out.count();
  for (int c = 0; c < channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * in.count();
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const T* row = cols + ((static_cast<std::size_t>(c) * k + kz) * k + ky) * k * ov + kx * ov;
          std::size_t o = 0;
          for (int oz = 0; oz < out.d; ++oz) {
            const int iz = oz * g.stride - g.padding + kz;
            for (int oy = 0; oy < out.h; ++oy) {
              const int iy = oy * g.stride - g.padding + ky;
              if (iz < 0 || iz >= in.d || iy < 0 || iy >= in.h) {
                o += out.w;
                continue;
              }
              T* line = xc + (static_cast<std::size_t>(iz) * in.h + iy) * in.w;
              for (int ox = 0; ox < out.w; ++ox, ++o) {
                const int ix = ox * g.stride - g.padding + kx;
                if (ix >= 0 && ix < in.w) line[ix] += row[o];
              }
            }
          }
        }
      }
    }
  }
}

void check_weight(const Shape& w, int in_channels, const ConvGeometry& g, const char* what) {
  if (w.c != in_channels || w.d != g.kernel || w.h != g.kernel || w.w != g.kernel) {
    throw std::invalid_argument(std::string(what) + ": weight shape " + to_string(w) +
                                " incompatible with " + std::to_string(in_channels) +
                                " input channels and kernel " + std::to_string(g.kernel));
  }
}

}  // namespace

namespace kernels {

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         const ConvGeometry& g) {
  const Shape& xs = x.shape();
  check_weight(weight.shape(), xs.c, g, "conv3d");
  const int cout = weight.shape().n;
  if (bias && bias->size() != static_cast<std::size_t>(cout)) {
    throw std::invalid_argument("conv3d: bias size does not match output channels");
  }
  const Extent in = spatial(xs);
  const Extent out{conv_output_extent(in.d, g), conv_output_extent(in.h, g), conv_output_extent(in.w, g)};
  Tensor<T> y(Shape{xs.n, cout, out.d, out.h, out.w});
  const std::size_t kdim = static_cast<std::size_t>(xs.c) * g.kernel * g.kernel * g.kernel;
  const std::size_t ov = out.count();
  CMapR<T> w(weight.data(), cout, static_cast<Eigen::Index>(kdim));

  parallel_for(static_cast<std::size_t>(xs.n), [&](std::size_t n) {
    MapR<T> ym(y.sample(static_cast<int>(n)), cout, static_cast<Eigen::Index>(ov));
    if (is_pointwise(g)) {
      CMapR<T> xm(x.sample(static_cast<int>(n)), xs.c, static_cast<Eigen::Index>(ov));
      ym.noalias() = w * xm;
    } else {
      std::vector<T> cols(kdim * ov);
      im2col(x.sample(static_cast<int>(n)), xs.c, in, out, g, cols.data());
      CMapR<T> cm(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ov));
      ym.noalias() = w * cm;
    }
    if (bias) {
      for (int c = 0; c < cout; ++c) ym.row(c).array() += (*bias)[c];
    }
  });
  return y;
}

template <typename T>
Tensor<T> conv3d_backward_input(const Tensor<T>& dy, const Tensor<T>& weight,
                                const Shape& input_shape, const ConvGeometry& g) {
  check_weight(weight.shape(), input_shape.c, g, "conv3d_backward_input");
  const int cout = weight.shape().n;
  const Extent in = spatial(input_shape);
  const Extent out{conv_output_extent(in.d, g), conv_output_extent(in.h, g), conv_output_extent(in.w, g)};
  const Shape& ds = dy.shape();
  if (ds.c != cout || ds.d != out.d || ds.h != out.h || ds.w != out.w || ds.n != input_shape.n) {
    throw std::invalid_argument("conv3d_backward_input: gradient shape " + to_string(ds) +
                                " does not match geometry");
  }
  Tensor<T> dx(input_shape, T(0));
  const std::size_t kdim = static_cast<std::size_t>(input_shape.c) * g.kernel * g.kernel * g.kernel;
  const std::size_t ov = out.count();
  CMapR<T> w(weight.data(), cout, static_cast<Eigen::Index>(kdim));

  parallel_for(static_cast<std::size_t>(ds.n), [&](std::size_t n) {
    CMapR<T> dym(dy.sample(static_cast<int>(n)), cout, static_cast<Eigen::Index>(ov));
    if (is_pointwise(g)) {
      MapR<T> dxm(dx.sample(static_cast<int>(n)), input_shape.c, static_cast<Eigen::Index>(ov));
      dxm.noalias() = w.transpose() * dym;
    } else {
      std::vector<T> cols(kdim * ov);
      MapR<T> cm(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ov));
      cm.noalias() = w.transpose() * dym;
      col2im(cols.data(), input_shape.c, in, out, g, dx.sample(static_cast<int>(n)));
    }
  });
  return dx;
}

template <typename T>
void conv3d_backward_weight(const Tensor<T>& x, const Tensor<T>& dy, const ConvGeometry& g,
                            Tensor<T>& dweight, Tensor<T>* dbias) {
  const Shape& xs = x.shape();
  check_weight(dweight.shape(), xs.c, g, "conv3d_backward_weight");
  const int cout = dweight.shape().n;
  const Extent in = spatial(xs);
  const Extent out{conv_output_extent(in.d, g), conv_output_extent(in.h, g), conv_output_extent(in.w, g)};
  const std::size_t kdim = static_cast<std::size_t>(xs.c) * g.kernel * g.kernel * g.kernel;
  const std::size_t ov = out.count();

  // One partial per sample, reduced afterwards in sample order.
  std::vector<MatR<T>> partial(static_cast<std::size_t>(xs.n));
  std::vector<std::vector<double>> bias_partial(static_cast<std::size_t>(xs.n));
  parallel_for(static_cast<std::size_t>(xs.n), [&](std::size_t n) {
    CMapR<T> dym(dy.sample(static_cast<int>(n)), cout, static_cast<Eigen::Index>(ov));
    if (is_pointwise(g)) {
      CMapR<T> xm(x.sample(static_cast<int>(n)), xs.c, static_cast<Eigen::Index>(ov));
      partial[n].noalias() = dym * xm.transpose();
    } else {
      std::vector<T> cols(kdim * ov);
      im2col(x.sample(static_cast<int>(n)), xs.c, in, out, g, cols.data());
      CMapR<T> cm(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ov));
      partial[n].noalias() = dym * cm.transpose();
    }
    if (dbias) {
      auto& bp = bias_partial[n];
      bp.assign(static_cast<std::size_t>(cout), 0.0);
      for (int c = 0; c < cout; ++c) {
        const T* row = dy.channel(static_cast<int>(n), c);
        double s = 0.0;
        for (std::size_t i = 0; i < ov; ++i) s += row[i];
        bp[c] = s;
      }
    }
  });
  MapR<T> dw(dweight.data(), cout, static_cast<Eigen::Index>(kdim));
  for (const auto& p : partial) dw += p;
  if (dbias) {
    for (const auto& bp : bias_partial) {
      for (int c = 0; c < cout; ++c) (*dbias)[c] += static_cast<T>(bp[c]);
    }
  }
}

}  // namespace kernels

namespace {

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Adds per-channel sums of g (over batch and space) into a (1, C, 1, 1, 1) buffer.
template <typename T>
void accumulate_channel_sums(const Tensor<T>& g, Tensor<T>& dst) {
  const Shape& s = g.shape();
  for (int c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const T* row = g.channel(n, c);
      for (std::size_t i = 0; i < s.spatial(); ++i) acc += row[i];
    }
    dst[static_cast<std::size_t>(c)] += static_cast<T>(acc);
  }
}

template <typename T>
void add_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const Shape& s = y.shape();
  if (bias.size() != static_cast<std::size_t>(s.c)) {
    throw std::invalid_argument("bias size " + std::to_string(bias.size()) + " does not match " +
                                std::to_string(s.c) + " channels");
  }
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      T* row = y.channel(n, c);
      for (std::size_t i = 0; i < s.spatial(); ++i) row[i] += bias[static_cast<std::size_t>(c)];
    }
  }
}

template <typename T>
bool any_requires_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

// Elementwise op whose derivative is a function of (input, output).
template <typename T, typename F, typename D>
Var<T> elementwise(Var<T> x, F f, D df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return x.tape->push(std::move(y), x.requires_grad(), [x, df](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    const Tensor<T>& xv = x.value();
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, const ConvGeometry& g) {
  Tensor<T> y = kernels::conv3d_forward(x.value(), weight.value(), bias ? &bias->value() : nullptr, g);
  const bool rg = x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad());
  return x.tape->push(std::move(y), rg, [x, weight, bias, g](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    if (x.requires_grad()) {
      accumulate(t.grad_of(x), kernels::conv3d_backward_input(gy, weight.value(), x.shape(), g));
    }
    const bool bias_grad = bias && bias->requires_grad();
    if (weight.requires_grad()) {
      kernels::conv3d_backward_weight(x.value(), gy, g, t.grad_of(weight),
                                      bias_grad ? &t.grad_of(*bias) : nullptr);
    } else if (bias_grad) {
      accumulate_channel_sums(gy, t.grad_of(*bias));
    }
  });
}

template <typename T>
Var<T> conv_transpose3d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, const ConvGeometry& g,
                        Shape out_spatial) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.n != xs.c) {
    throw std::invalid_argument("conv_transpose3d: weight " + to_string(ws) + " expects " +
                                std::to_string(ws.n) + " input channels, got " + std::to_string(xs.c));
  }
  const Shape out{xs.n, ws.c, out_spatial.d, out_spatial.h, out_spatial.w};
  if (conv_output_extent(out.d, g) != xs.d || conv_output_extent(out.h, g) != xs.h ||
      conv_output_extent(out.w, g) != xs.w) {
    throw std::invalid_argument("conv_transpose3d: output extent " + to_string(out) +
                                " does not map back to input " + to_string(xs));
  }
  Tensor<T> y = kernels::conv3d_backward_input(x.value(), weight.value(), out, g);
  if (bias) add_bias(y, bias->value());
  const bool rg = x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad());
  return x.tape->push(std::move(y), rg, [x, weight, bias, g](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    if (x.requires_grad()) accumulate(t.grad_of(x), kernels::conv3d_forward(gy, weight.value(), static_cast<const Tensor<T>*>(nullptr), g));
    if (weight.requires_grad()) kernels::conv3d_backward_weight(gy, x.value(), g, t.grad_of(weight), static_cast<Tensor<T>*>(nullptr));
    if (bias && bias->requires_grad()) accumulate_channel_sums(gy, t.grad_of(*bias));
  });
}

template <typename T>
Var<T> upsample_transpose3d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, int stride) {
  const Shape& xs = x.shape();
  const ConvGeometry g{stride, stride, 0};
  return conv_transpose3d(x, weight, bias, g, Shape{1, 1, xs.d * stride, xs.h * stride, xs.w * stride});
}

template <typename T>
Var<T> avg_pool3d(Var<T> x, int window) {
  const Shape& xs = x.shape();
  if (window < 1 || xs.d % window || xs.h % window || xs.w % window) {
    throw std::invalid_argument("avg_pool3d: extent " + to_string(xs) + " not divisible by window " +
                                std::to_string(window));
  }
  const Shape ys{xs.n, xs.c, xs.d / window, xs.h / window, xs.w / window};
  const T inv = T(1) / static_cast<T>(window * window * window);
  Tensor<T> y(ys, T(0));
  const Tensor<T>& xv = x.value();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T* src = xv.channel(n, c);
      T* dst = y.channel(n, c);
      for (int z = 0; z < xs.d; ++z) {
        for (int r = 0; r < xs.h; ++r) {
          const T* line = src + (static_cast<std::size_t>(z) * xs.h + r) * xs.w;
          T* out = dst + (static_cast<std::size_t>(z / window) * ys.h + r / window) * ys.w;
          for (int q = 0; q < xs.w; ++q) out[q / window] += line[q] * inv;
        }
      }
    }
  }
  return x.tape->push(std::move(y), x.requires_grad(), [x, window, inv](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    Tensor<T>& gx = t.grad_of(x);
    const Shape& xs = gx.shape();
    const Shape& ys = gy.shape();
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        const T* src = gy.channel(n, c);
        T* dst = gx.channel(n, c);
        for (int z = 0; z < xs.d; ++z) {
          for (int r = 0; r < xs.h; ++r) {
            T* line = dst + (static_cast<std::size_t>(z) * xs.h + r) * xs.w;
            const T* g = src + (static_cast<std::size_t>(z / window) * ys.h + r / window) * ys.w;
            for (int q = 0; q < xs.w; ++q) line[q] += g[q / window] * inv;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return elementwise(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, double slope) {
  const T s = static_cast<T>(slope);
  return elementwise(
      x, [s](T v) { return v > T(0) ? v : s * v; }, [s](T v, T) { return v > T(0) ? T(1) : s; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return elementwise(
      x,
      [](T v) {
        // Split by sign so exp never overflows.
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor<T> y = a.value();
  accumulate(y, b.value());
  return a.tape->push(std::move(y), any_requires_grad({a, b}), [a, b](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    if (a.requires_grad()) accumulate(t.grad_of(a), gy);
    if (b.requires_grad()) accumulate(t.grad_of(b), gy);
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape first = parts.front().shape();
  int channels = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n || s.d != first.d || s.h != first.h || s.w != first.w) {
      throw std::invalid_argument("concat_channels: " + to_string(s) + " incompatible with " + to_string(first));
    }
    channels += s.c;
    rg = rg || p.requires_grad();
  }
  const Shape ys{first.n, channels, first.d, first.h, first.w};
  const std::size_t vox = ys.spatial();
  Tensor<T> y(ys);
  for (int n = 0; n < ys.n; ++n) {
    int offset = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      std::copy_n(p.value().sample(n), static_cast<std::size_t>(pc) * vox, y.channel(n, offset));
      offset += pc;
    }
  }
  return parts.front().tape->push(std::move(y), rg, [parts](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    const Shape& ys = gy.shape();
    const std::size_t vox = ys.spatial();
    int offset = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      if (p.requires_grad()) {
        Tensor<T>& gp = t.grad_of(p);
        for (int n = 0; n < ys.n; ++n) {
          const T* src = gy.channel(n, offset);
          T* dst = gp.sample(n);
          for (std::size_t i = 0; i < static_cast<std::size_t>(pc) * vox; ++i) dst[i] += src[i];
        }
      }
      offset += pc;
    }
  });
}

template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_batch: no inputs");
  const Shape first = parts.front().shape();
  int batch = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.c != first.c || s.d != first.d || s.h != first.h || s.w != first.w) {
      throw std::invalid_argument("concat_batch: " + to_string(s) + " incompatible with " + to_string(first));
    }
    batch += s.n;
    rg = rg || p.requires_grad();
  }
  Tensor<T> y(Shape{batch, first.c, first.d, first.h, first.w});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), y.data() + offset);
    offset += p.value().size();
  }
  return parts.front().tape->push(std::move(y), rg, [parts](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.value().size();
      if (p.requires_grad()) {
        Tensor<T>& gp = t.grad_of(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += gy[offset + i];
      }
      offset += n;
    }
  });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> scale, Var<T> shift, Parameter<T>& running_mean,
                  Parameter<T>& running_var, const BatchNormOptions& opt) {
  const Shape& xs = x.shape();
  const std::size_t C = static_cast<std::size_t>(xs.c);
  if (scale.value().size() != C || shift.value().size() != C || running_mean.value.size() != C ||
      running_var.value.size() != C) {
    throw std::invalid_argument("batch_norm: parameter sizes do not match " + std::to_string(C) + " channels");
  }
  const std::size_t vox = xs.spatial();
  const double count = static_cast<double>(xs.n) * static_cast<double>(vox);
  const Tensor<T>& xv = x.value();

  // Normalized input and 1/sqrt(var + eps) per channel, kept for backward.
  auto xhat = std::make_shared<Tensor<T>>(xs);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  const bool batch_stats = opt.mode == Mode::train;
  Tensor<T> y(xs);

  parallel_for(C, [&](std::size_t c) {
    const int ci = static_cast<int>(c);
    double mean, var;
    if (batch_stats) {
      double s = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const T* row = xv.channel(n, ci);
        for (std::size_t i = 0; i < vox; ++i) s += row[i];
      }
      mean = s / count;
      double ss = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const T* row = xv.channel(n, ci);
        for (std::size_t i = 0; i < vox; ++i) {
          const double d = row[i] - mean;
          ss += d * d;
        }
      }
      var = ss / count;
      if (opt.update_stats) {
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean.value[c] = static_cast<T>((1 - opt.momentum) * running_mean.value[c] + opt.momentum * mean);
        running_var.value[c] = static_cast<T>((1 - opt.momentum) * running_var.value[c] + opt.momentum * unbiased);
      }
    } else {
      mean = running_mean.value[c];
      var = running_var.value[c];
    }
    const double is = 1.0 / std::sqrt(var + opt.epsilon);
    (*inv_std)[c] = is;
    const T g = scale.value()[c];
    const T b = shift.value()[c];
    for (int n = 0; n < xs.n; ++n) {
      const T* row = xv.channel(n, ci);
      T* h = xhat->channel(n, ci);
      T* out = y.channel(n, ci);
      for (std::size_t i = 0; i < vox; ++i) {
        h[i] = static_cast<T>((row[i] - mean) * is);
        out[i] = g * h[i] + b;
      }
    }
  });

  const bool rg = any_requires_grad({x, scale, shift});
  return x.tape->push(
      std::move(y), rg, [x, scale, shift, xhat, inv_std, batch_stats, count](Tape<T>& t, Var<T> self) {
        const Tensor<T>& gy = t.grad_of(self);
        const Shape& xs = gy.shape();
        const std::size_t vox = xs.spatial();
        const std::size_t C = static_cast<std::size_t>(xs.c);
        Tensor<T>* gx = x.requires_grad() ? &t.grad_of(x) : nullptr;
        Tensor<T>* gscale = scale.requires_grad() ? &t.grad_of(scale) : nullptr;
        Tensor<T>* gshift = shift.requires_grad() ? &t.grad_of(shift) : nullptr;
        parallel_for(C, [&](std::size_t c) {
          const int ci = static_cast<int>(c);
          double sum_g = 0.0, sum_gh = 0.0;
          for (int n = 0; n < xs.n; ++n) {
            const T* g = gy.channel(n, ci);
            const T* h = xhat->channel(n, ci);
            for (std::size_t i = 0; i < vox; ++i) {
              sum_g += g[i];
              sum_gh += static_cast<double>(g[i]) * h[i];
            }
          }
          if (gscale) (*gscale)[c] += static_cast<T>(sum_gh);
          if (gshift) (*gshift)[c] += static_cast<T>(sum_g);
          if (!gx) return;
          const double k = scale.value()[c] * (*inv_std)[c];
          for (int n = 0; n < xs.n; ++n) {
            const T* g = gy.channel(n, ci);
            const T* h = xhat->channel(n, ci);
            T* dx = gx->channel(n, ci);
            if (batch_stats) {
              const double mg = sum_g / count, mgh = sum_gh / count;
              for (std::size_t i = 0; i < vox; ++i) dx[i] += static_cast<T>(k * (g[i] - mg - h[i] * mgh));
            } else {
              for (std::size_t i = 0; i < vox; ++i) dx[i] += static_cast<T>(k * g[i]);
            }
          }
        });
      });
}

bool dropout_keep(std::uint64_t seed, std::size_t index, double rate) {
  return unit_double(derive_seed(seed, index)) >= rate;
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, std::uint64_t seed, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  const Tensor<T>& xv = x.value();
  auto mult = std::make_shared<std::vector<T>>(xv.size());
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mult)[i] = dropout_keep(seed, i, rate) ? keep_scale : T(0);
    y[i] = xv[i] * (*mult)[i];
  }
  return x.tape->push(std::move(y), x.requires_grad(), [x, mult](Tape<T>& t, Var<T> self) {
    const Tensor<T>& gy = t.grad_of(self);
    Tensor<T>& gx = t.grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (*mult)[i];
  });
}

#define BOWDA_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> kernels::conv3d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,       \
                                             const ConvGeometry&);                                       \
  template Tensor<T> kernels::conv3d_backward_input(const Tensor<T>&, const Tensor<T>&, const Shape&,    \
                                                    const ConvGeometry&);                                \
  template void kernels::conv3d_backward_weight(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&, \
                                                Tensor<T>&, Tensor<T>*);                                 \
  template Var<T> conv3d(Var<T>, Var<T>, std::optional<Var<T>>, const ConvGeometry&);                  \
  template Var<T> conv_transpose3d(Var<T>, Var<T>, std::optional<Var<T>>, const ConvGeometry&, Shape);  \
  template Var<T> upsample_transpose3d(Var<T>, Var<T>, std::optional<Var<T>>, int);                     \
  template Var<T> avg_pool3d(Var<T>, int);                                                               \
  template Var<T> relu(Var<T>);                                                                          \
  template Var<T> leaky_relu(Var<T>, double);                                                            \
  template Var<T> sigmoid(Var<T>);                                                                       \
  template Var<T> add(Var<T>, Var<T>);                                                                   \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                           \
  template Var<T> concat_batch(const std::vector<Var<T>>&);                                              \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, Parameter<T>&, Parameter<T>&,                      \
                             const BatchNormOptions&);                                                   \
  template Var<T> dropout(Var<T>, double, std::uint64_t, Mode);

BOWDA_INSTANTIATE_OPS(float)
BOWDA_INSTANTIATE_OPS(double)

}  // namespace bowda
