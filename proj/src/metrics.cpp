#include "bowda/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "bowda/boundary.hpp"

namespace bowda {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t overlap(const Mask& a, const Mask& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] & b[i]);
  return n;
}

}  // namespace

double dsc(const Mask& a, const Mask& b) {
  require_same_geometry(a, b, "dsc");
  const std::size_t na = a.foreground_count(), nb = b.foreground_count();
  if (na + nb == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(overlap(a, b)) / static_cast<double>(na + nb);
}

double rvd(const Mask& seg, const Mask& ref) {
  require_same_geometry(seg, ref, "rvd");
  const std::size_t nr = ref.foreground_count();
  if (nr == 0) throw std::domain_error("rvd: reference mask is empty");
  // Same geometry, so the voxel volume cancels; the count difference is exact.
  const double diff = static_cast<double>(seg.foreground_count()) - static_cast<double>(nr);
  return 100.0 * diff / static_cast<double>(nr);
}

SurfaceDistance surface_distance(const Mask& a, const Mask& b) {
  require_same_geometry(a, b, "surface_distance");
  if (a.empty() || b.empty()) throw std::domain_error("surface distance: mask without foreground");
  const BoundaryPointSet ba = morphological_boundary(a);
  const BoundaryPointSet bb = morphological_boundary(b);
  const DistanceMap to_b = distance_to_seeds(boundary_mask(b));
  const DistanceMap to_a = distance_to_seeds(boundary_mask(a));
  // Separate sums keep the result bitwise symmetric in (a, b).
  double sum_a = 0.0, sum_b = 0.0, worst = 0.0;
  for (const auto& p : ba) {
    const double d = to_b(p[0], p[1], p[2]);
    sum_a += d;
    worst = std::max(worst, d);
  }
  for (const auto& q : bb) {
    const double d = to_a(q[0], q[1], q[2]);
    sum_b += d;
    worst = std::max(worst, d);
  }
  return {(sum_a + sum_b) / static_cast<double>(ba.size() + bb.size()), worst};
}

double abd(const Mask& a, const Mask& b) { return surface_distance(a, b).abd; }
double hd(const Mask& a, const Mask& b) { return surface_distance(a, b).hd; }

RegionSplit region_split(const Mask& ref) {
  const Dims d = ref.dims();
  const std::size_t slice = static_cast<std::size_t>(d.height) * d.width;
  int first = -1, last = -1, occupied = 0;
  for (int z = 0; z < d.depth; ++z) {
    const auto begin = ref.values().begin() + static_cast<std::ptrdiff_t>(z * slice);
    if (std::any_of(begin, begin + static_cast<std::ptrdiff_t>(slice), [](std::uint8_t v) { return v != 0; })) {
      if (first < 0) first = z;
      last = z;
      ++occupied;
    }
  }
  if (occupied < 3) {
    throw std::domain_error("region_split: reference has foreground in " + std::to_string(occupied) +
                            " slices, need at least 3");
  }
  const int n = last - first + 1;
  const int apex_n = static_cast<int>(std::lround(n / 3.0));
  const int base_n = n - static_cast<int>(std::lround(2.0 * n / 3.0));
  RegionSplit r;
  r.apex = {first, first + apex_n - 1};
  r.base = {last - base_n + 1, last};
  r.mid = {first + apex_n, last - base_n};
  return r;
}

Mask restrict_slices(const Mask& m, const SliceRange& r) {
  Mask out(m.dims(), m.spacing());
  const std::size_t slice = static_cast<std::size_t>(m.dims().height) * m.dims().width;
  for (int z = std::max(r.first, 0); z <= std::min(r.last, m.dims().depth - 1); ++z) {
    std::copy_n(m.values().begin() + static_cast<std::ptrdiff_t>(z * slice), slice,
                out.values().begin() + static_cast<std::ptrdiff_t>(z * slice));
  }
  return out;
}

MetricValues evaluate_pair(const Mask& seg, const Mask& ref) {
  MetricValues v;
  v.dsc = dsc(seg, ref);
  v.rvd = ref.empty() ? kNaN : rvd(seg, ref);
  if (seg.empty() || ref.empty()) {
    v.abd = v.hd = kNaN;
  } else {
    const SurfaceDistance s = surface_distance(seg, ref);
    v.abd = s.abd;
    v.hd = s.hd;
  }
  return v;
}

void MetricReport::add_case(const std::string& case_id, const Mask& seg, const Mask& ref) {
  rows_.push_back({case_id, "whole", evaluate_pair(seg, ref)});
  RegionSplit split;
  try {
    split = region_split(ref);
  } catch (const std::domain_error&) {
    return;
  }
  rows_.push_back({case_id, "apex", evaluate_pair(restrict_slices(seg, split.apex), restrict_slices(ref, split.apex))});
  rows_.push_back({case_id, "base", evaluate_pair(restrict_slices(seg, split.base), restrict_slices(ref, split.base))});
}

MetricSummary MetricReport::summary(const std::string& region) const {
  const auto stats = [&](double MetricValues::*field, double& mean, double& sd) {
    std::vector<double> xs;
    for (const auto& r : rows_) {
      if (r.region == region && std::isfinite(r.values.*field)) xs.push_back(r.values.*field);
    }
    if (xs.empty()) {
      mean = sd = kNaN;
      return;
    }
    double s = 0.0;
    for (double x : xs) s += x;
    mean = s / static_cast<double>(xs.size());
    if (xs.size() < 2) {
      sd = kNaN;
      return;
    }
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  };
  MetricSummary out;
  stats(&MetricValues::dsc, out.mean.dsc, out.stddev.dsc);
  stats(&MetricValues::rvd, out.mean.rvd, out.stddev.rvd);
  stats(&MetricValues::abd, out.mean.abd, out.stddev.abd);
  stats(&MetricValues::hd, out.mean.hd, out.stddev.hd);
  return out;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void put_row(std::ostream& os, const std::string& id, const std::string& region, const MetricValues& v) {
  os << id << ',' << region << ',' << fmt(v.dsc) << ',' << fmt(v.rvd) << ',' << fmt(v.abd) << ',' << fmt(v.hd) << '\n';
}

}  // namespace

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "case,region,dsc,rvd,abd,hd\n";
  for (const auto& r : rows_) put_row(os, r.case_id, r.region, r.values);
  for (const char* region : {"whole", "apex", "base"}) {
    const bool present = std::any_of(rows_.begin(), rows_.end(), [&](const MetricRow& r) { return r.region == region; });
    if (!present) continue;
    const MetricSummary s = summary(region);
    put_row(os, "mean", region, s.mean);
    put_row(os, "std", region, s.stddev);
  }
  return os.str();
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv();
}

TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b, double alpha) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_ttest: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_ttest: need at least 2 pairs");
  const std::size_t n = a.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(n - 1);
  if (!(var > 0.0)) throw std::domain_error("paired_ttest: differences have zero variance");
  TTestResult r;
  r.n = n;
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  r.significant = r.p < alpha;
  return r;
}

void write_ttest_csv(const std::vector<std::pair<std::string, TTestResult>>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "metric,n,t,p,significant\n";
  for (const auto& [name, r] : rows) {
    out << name << ',' << r.n << ',' << fmt(r.t) << ',' << fmt(r.p) << ',' << (r.significant ? 1 : 0) << '\n';
  }
}

}  // namespace bowda
