#include "bowda/boundary.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <stdexcept>

namespace bowda {

BoundaryPointSet morphological_boundary(const Mask& mask) {
  BoundaryPointSet out;
  const Dims d = mask.dims();
  for (int z = 0; z < d.depth; ++z) {
    for (int y = 0; y < d.height; ++y) {
      for (int x = 0; x < d.width; ++x) {
        if (!mask(z, y, x)) continue;
        const bool edge = z == 0 || y == 0 || x == 0 || z == d.depth - 1 || y == d.height - 1 ||
                          x == d.width - 1;
        if (edge || !mask(z - 1, y, x) || !mask(z + 1, y, x) || !mask(z, y - 1, x) ||
            !mask(z, y + 1, x) || !mask(z, y, x - 1) || !mask(z, y, x + 1)) {
          out.push_back({z, y, x});
        }
      }
    }
  }
  return out;
}

Mask boundary_mask(const Mask& mask) {
  Mask b(mask.dims(), mask.spacing());
  for (const auto& p : morphological_boundary(mask)) b(p[0], p[1], p[2]) = 1;
  return b;
}

namespace {

// Correlates `src` along `axis` with a 3-tap kernel, replicating edge voxels.
std::vector<double> filter_axis(const std::vector<double>& src, const Dims& d, int axis,
                                const std::array<double, 3>& k) {
  std::vector<double> dst(src.size());
  const int n = d[axis];
  const std::size_t stride = axis == 0   ? static_cast<std::size_t>(d.height) * d.width
                             : axis == 1 ? static_cast<std::size_t>(d.width)
                                         : 1;
  for (int z = 0; z < d.depth; ++z) {
    for (int y = 0; y < d.height; ++y) {
      for (int x = 0; x < d.width; ++x) {
        const std::size_t i = (static_cast<std::size_t>(z) * d.height + y) * d.width + x;
        const int pos = axis == 0 ? z : axis == 1 ? y : x;
        const std::size_t lo = pos > 0 ? i - stride : i;
        const std::size_t hi = pos < n - 1 ? i + stride : i;
        dst[i] = k[0] * src[lo] + k[1] * src[i] + k[2] * src[hi];
      }
    }
  }
  return dst;
}

}  // namespace

WeightMap sobel_contour(const Mask& mask) {
  const Dims d = mask.dims();
  std::vector<double> m(mask.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i];

  constexpr std::array<double, 3> deriv{-1.0, 0.0, 1.0};
  constexpr std::array<double, 3> smooth{1.0, 2.0, 1.0};

  std::vector<double> mag2(m.size(), 0.0);
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> g = m;
    for (int a = 0; a < 3; ++a) g = filter_axis(g, d, a, a == axis ? deriv : smooth);
    for (std::size_t i = 0; i < g.size(); ++i) mag2[i] += g[i] * g[i];
  }
  double peak = 0.0;
  for (auto& v : mag2) {
    v = std::sqrt(v);
    peak = std::max(peak, v);
  }
  WeightMap out(d, mask.spacing());
  if (peak > 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(mag2[i] / peak);
  }
  return out;
}

std::array<double, 9> boundary_gaussian_kernel() {
  constexpr double variance = 0.64;
  std::array<double, 9> k{};
  double sum = 0.0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const double w = std::exp(-(dy * dy + dx * dx) / (2.0 * variance));
      k[(dy + 1) * 3 + (dx + 1)] = w;
      sum += w;
    }
  }
  for (auto& w : k) w /= sum;
  return k;
}

WeightMap boundary_weight_map(const Mask& mask) {
  const WeightMap contour = sobel_contour(mask);
  const auto k = boundary_gaussian_kernel();
  const Dims d = mask.dims();
  WeightMap out(d, mask.spacing());
  for (int z = 0; z < d.depth; ++z) {
    for (int y = 0; y < d.height; ++y) {
      for (int x = 0; x < d.width; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = std::clamp(y + dy, 0, d.height - 1);
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = std::clamp(x + dx, 0, d.width - 1);
            acc += k[(dy + 1) * 3 + (dx + 1)] * contour(z, yy, xx);
          }
        }
        out(z, y, x) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One lower-envelope pass over a line of squared distances (Felzenszwalb &
// Huttenlocher), positions scaled by `s`. Infinite entries are skipped.
void envelope_pass(const double* f, double* out, int n, double s, std::vector<int>& v,
                   std::vector<double>& z) {
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double pq = q * s;
    double cut = -kInf;
    while (k >= 0) {
      const double pv = v[k] * s;
      cut = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (cut <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : cut;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out, out + n, kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double pq = q * s;
    while (z[j + 1] < pq) ++j;
    const double dd = (q - v[j]) * s;
    out[q] = dd * dd + f[v[j]];
  }
}

}  // namespace

DistanceMap distance_to_seeds(const Mask& seeds) {
  if (seeds.empty()) throw std::domain_error("distance transform: empty seed set");
  const Dims d = seeds.dims();
  const Spacing& sp = seeds.spacing();
  std::vector<double> g(seeds.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds[i] ? 0.0 : kInf;

  const int longest = std::max({d.depth, d.height, d.width});
  std::vector<double> line(longest), res(longest), z(longest + 1);
  std::vector<int> v(longest);

  // width, then height, then depth
  for (int axis = 2; axis >= 0; --axis) {
    const int n = d[axis];
    const std::size_t stride = axis == 0   ? static_cast<std::size_t>(d.height) * d.width
                               : axis == 1 ? static_cast<std::size_t>(d.width)
                                           : 1;
    for (int a = 0; a < d.depth; ++a) {
      for (int b = 0; b < d.height; ++b) {
        for (int c = 0; c < d.width; ++c) {
          const int pos = axis == 0 ? a : axis == 1 ? b : c;
          if (pos != 0) continue;  // visit each line once, from its start
          const std::size_t base = (static_cast<std::size_t>(a) * d.height + b) * d.width + c;
          for (int q = 0; q < n; ++q) line[q] = g[base + q * stride];
          envelope_pass(line.data(), res.data(), n, sp[axis], v, z);
          for (int q = 0; q < n; ++q) g[base + q * stride] = res[q];
        }
      }
    }
  }
  DistanceMap out(d, sp);
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = std::sqrt(g[i]);
  return out;
}

DistanceMap distance_map(const Mask& mask) {
  if (mask.empty() || mask.full()) {
    throw std::domain_error("distance_map: degenerate mask (all foreground or all background)");
  }
  return distance_to_seeds(boundary_mask(mask));
}

std::size_t Histogram::total() const {
  std::size_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

Histogram boundary_gradient_histogram(const Volume& vol, const Mask& mask, int bins) {
  require_same_dims(vol, mask, "boundary_gradient_histogram");
  if (bins < 1) throw std::invalid_argument("boundary_gradient_histogram: bins must be >= 1");
  if (mask.empty() || mask.full()) {
    throw std::domain_error("boundary_gradient_histogram: degenerate mask");
  }
  const Dims d = vol.dims();
  const Spacing& sp = vol.spacing();
  auto derivative = [&](int z, int y, int x, int axis) -> double {
    const int n = d[axis];
    if (n == 1) return 0.0;
    int pos = axis == 0 ? z : axis == 1 ? y : x;
    auto at = [&](int p) {
      return axis == 0 ? vol(p, y, x) : axis == 1 ? vol(z, p, x) : vol(z, y, p);
    };
    const int lo = std::max(pos - 1, 0);
    const int hi = std::min(pos + 1, n - 1);
    return (static_cast<double>(at(hi)) - at(lo)) / ((hi - lo) * sp[axis]);
  };

  const auto pts = morphological_boundary(mask);
  std::vector<double> mags;
  mags.reserve(pts.size());
  double peak = 0.0, sum = 0.0;
  for (const auto& p : pts) {
    double m2 = 0.0;
    for (int axis = 0; axis < 3; ++axis) {
      const double g = derivative(p[0], p[1], p[2], axis);
      m2 += g * g;
    }
    const double m = std::sqrt(m2);
    mags.push_back(m);
    peak = std::max(peak, m);
    sum += m;
  }
  Histogram h;
  const double upper = peak > 0.0 ? peak : 1.0;
  h.edges.resize(bins + 1);
  for (int i = 0; i <= bins; ++i) h.edges[i] = upper * i / bins;
  h.counts.assign(bins, 0);
  for (double m : mags) {
    int b = static_cast<int>(m / upper * bins);
    h.counts[std::clamp(b, 0, bins - 1)]++;
  }
  h.sample_mean = mags.empty() ? 0.0 : sum / static_cast<double>(mags.size());
  return h;
}

void write_histogram_csv(const Histogram& h, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "bin_lower,bin_upper,count\n" << std::setprecision(17);
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    os << h.edges[i] << "," << h.edges[i + 1] << "," << h.counts[i] << "\n";
  }
}

}  // namespace bowda
