#pragma once

// Brute-force reference implementations used by the tests. They share no code
// with the library beyond the data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "bowda/image.hpp"
#include "bowda/tensor.hpp"

namespace oracle {

using bowda::Dims;
using bowda::Mask;
using bowda::Spacing;
using Point = std::array<int, 3>;

inline Mask random_mask(const Dims& d, const Spacing& s, std::mt19937_64& rng, double density) {
  std::bernoulli_distribution on(density);
  Mask m(d, s);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = on(rng) ? 1 : 0;
  return m;
}

/// Union of a few random boxes: connected-ish shapes with real surfaces.
inline Mask random_boxes(const Dims& d, const Spacing& s, std::mt19937_64& rng, int boxes) {
  Mask m(d, s);
  for (int b = 0; b < boxes; ++b) {
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      std::uniform_int_distribution<int> pick(0, d[a] - 1);
      int p = pick(rng), q = pick(rng);
      lo[a] = std::min(p, q);
      hi[a] = std::max(p, q);
    }
    for (int z = lo[0]; z <= hi[0]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[2]; x <= hi[2]; ++x) m(z, y, x) = 1;
  }
  return m;
}

inline std::vector<Point> boundary(const Mask& m) {
  const Dims d = m.dims();
  std::vector<Point> out;
  const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        if (!m(z, y, x)) continue;
        bool edge = false;
        for (const auto& o : off) {
          const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
          if (!m.contains(zz, yy, xx) || !m(zz, yy, xx)) edge = true;
        }
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

inline double dist(const Point& a, const Point& b, const Spacing& s) {
  const double dz = (a[0] - b[0]) * s.depth, dy = (a[1] - b[1]) * s.height, dx = (a[2] - b[2]) * s.width;
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

inline double nearest(const Point& p, const std::vector<Point>& set, const Spacing& s) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : set) best = std::min(best, dist(p, q, s));
  return best;
}

inline bowda::Image<double> distance_map(const Mask& m) {
  const auto b = boundary(m);
  bowda::Image<double> out(m.dims(), m.spacing());
  const Dims d = m.dims();
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) out(z, y, x) = nearest({z, y, x}, b, m.spacing());
  return out;
}

struct Surface {
  double abd;
  double hd;
};

inline Surface surface(const Mask& a, const Mask& b) {
  const auto ba = boundary(a), bb = boundary(b);
  double sum = 0.0, worst = 0.0;
  for (const auto& p : ba) {
    const double v = nearest(p, bb, a.spacing());
    sum += v;
    worst = std::max(worst, v);
  }
  for (const auto& q : bb) {
    const double v = nearest(q, ba, a.spacing());
    sum += v;
    worst = std::max(worst, v);
  }
  return {sum / static_cast<double>(ba.size() + bb.size()), worst};
}

/// Direct 7-loop cross-correlation in double. w: (out, in, k, k, k).
template <typename T>
bowda::Tensor<double> conv3d(const bowda::Tensor<T>& x, const bowda::Tensor<T>& w, int stride, int pad) {
  const auto xs = x.shape(), ws = w.shape();
  const int k = ws.d;
  const int od = (xs.d + 2 * pad - k) / stride + 1, oh = (xs.h + 2 * pad - k) / stride + 1,
            ow = (xs.w + 2 * pad - k) / stride + 1;
  bowda::Tensor<double> y(bowda::Shape{xs.n, ws.n, od, oh, ow});
  auto xi = [&](int n, int c, int z, int yy, int xx) {
    return ((static_cast<std::size_t>(n) * xs.c + c) * xs.d + z) * xs.h * xs.w + static_cast<std::size_t>(yy) * xs.w + xx;
  };
  auto wi = [&](int o, int c, int a, int b, int e) {
    return (((static_cast<std::size_t>(o) * ws.c + c) * k + a) * k + b) * k + e;
  };
  std::size_t out = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int z = 0; z < od; ++z)
        for (int yy = 0; yy < oh; ++yy)
          for (int xx = 0; xx < ow; ++xx, ++out) {
            double acc = 0.0;
            for (int c = 0; c < xs.c; ++c)
              for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b)
                  for (int e = 0; e < k; ++e) {
                    const int iz = z * stride + a - pad, iy = yy * stride + b - pad, ix = xx * stride + e - pad;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= xs.d || iy >= xs.h || ix >= xs.w) continue;
                    acc += static_cast<double>(x[xi(n, c, iz, iy, ix)]) * static_cast<double>(w[wi(o, c, a, b, e)]);
                  }
            y[out] = acc;
          }
  return y;
}

/// Two-sided p value of Student's t by composite Simpson integration of the
/// density over [0, |t|] (p = 1 - 2 * integral).
inline double t_two_sided_p(double t, double dof, int intervals = 2000000) {
  const double c = std::exp(std::lgamma((dof + 1) / 2) - std::lgamma(dof / 2)) / std::sqrt(dof * M_PI);
  auto f = [&](double x) { return c * std::pow(1.0 + x * x / dof, -(dof + 1) / 2); };
  const double b = std::abs(t);
  const double h = b / intervals;
  double s = f(0) + f(b);
  for (int i = 1; i < intervals; ++i) s += f(i * h) * (i % 2 ? 4.0 : 2.0);
  return 1.0 - 2.0 * s * h / 3.0;
}

}  // namespace oracle
