#include <cmath>
#include <random>

#include "doctest.h"
#include "bowda/metrics.hpp"
#include "bowda/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace bowda;

namespace {

Mask slab(Dims d, int first, int last) {
  Mask m(d, {1, 1, 1});
  for (int z = first; z <= last; ++z)
    for (int y = 1; y < d.height - 1; ++y)
      for (int x = 1; x < d.width - 1; ++x) m(z, y, x) = 1;
  return m;
}

Mask with_spacing(const Mask& m, Spacing s) { return Mask(m.dims(), s, m.values()); }

}  // namespace

TEST_CASE("dice and relative volume difference") {
  const Dims d{3, 3, 3};
  Mask a(d, {1, 1, 1}), b(d, {1, 1, 1});
  CHECK(dsc(a, b) == 100.0);
  a(0, 0, 0) = a(0, 0, 1) = 1;
  CHECK(dsc(a, a) == 100.0);
  CHECK(dsc(a, b) == 0.0);
  b(2, 2, 2) = 1;
  CHECK(dsc(a, b) == 0.0);
  b(2, 2, 2) = 0;
  b(0, 0, 1) = b(1, 1, 1) = 1;
  CHECK(dsc(a, b) == 50.0);

  CHECK(rvd(a, a) == 0.0);
  Mask ref({1, 1, 20}, {1, 1, 1}), seg({1, 1, 20}, {1, 1, 1});
  for (int x = 0; x < 10; ++x) ref(0, 0, x) = 1;
  for (int x = 0; x < 11; ++x) seg(0, 0, x) = 1;
  CHECK(rvd(seg, ref) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(rvd(ref, seg) < 0.0);
  CHECK_THROWS_AS(rvd(seg, Mask({1, 1, 20}, {1, 1, 1})), std::domain_error);
  CHECK_THROWS_AS(dsc(a, Mask({3, 3, 2}, {1, 1, 1})), std::invalid_argument);
}

TEST_CASE("surface distances") {
  Mask a({8, 3, 3}, {1.5, 1, 1}), b({8, 3, 3}, {1.5, 1, 1});
  a(1, 1, 1) = 1;
  b(5, 1, 1) = 1;
  CHECK(abd(a, b) == 6.0);
  CHECK(hd(a, b) == 6.0);
  CHECK(abd(a, a) == 0.0);
  CHECK(hd(a, a) == 0.0);
  CHECK_THROWS_AS(abd(a, Mask({8, 3, 3}, {1.5, 1, 1})), std::domain_error);
  CHECK_THROWS_AS(hd(Mask({8, 3, 3}, {1.5, 1, 1}), b), std::domain_error);

  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const Spacing sp = trial % 3 == 0 ? Spacing{1, 1, 1} : Spacing{1.5, 0.6, 0.8};
    const Mask x = trial % 2 ? oracle::random_mask({10, 10, 10}, sp, rng, 0.1) : oracle::random_boxes({10, 10, 10}, sp, rng, 2);
    const Mask y = oracle::random_boxes({10, 10, 10}, sp, rng, 3);
    if (x.empty() || y.empty()) continue;
    const auto ref = oracle::surface(x, y);
    CHECK(std::abs(abd(x, y) - ref.abd) <= 1e-9);
    CHECK(std::abs(hd(x, y) - ref.hd) <= 1e-9);
    const auto sd = surface_distance(x, y);
    CHECK(sd.abd == abd(x, y));
    CHECK(sd.hd == hd(x, y));

    CHECK(abd(x, y) == abd(y, x));
    CHECK(hd(x, y) == hd(y, x));
    CHECK(dsc(x, y) == dsc(y, x));
    CHECK(hd(x, y) >= abd(x, y));
    CHECK(dsc(x, y) >= 0.0);
    CHECK(dsc(x, y) <= 100.0);
    CHECK(dsc(x, x) == 100.0);
    CHECK(rvd(x, x) == 0.0);

    const Spacing twice{2 * sp.depth, 2 * sp.height, 2 * sp.width};
    const Mask x2 = with_spacing(x, twice), y2 = with_spacing(y, twice);
    CHECK(abd(x2, y2) == 2 * abd(x, y));
    CHECK(hd(x2, y2) == 2 * hd(x, y));
  }
}

TEST_CASE("metrics are invariant under joint flips and quarter turns") {
  std::mt19937_64 rng(32);
  Rng draws(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask x = oracle::random_boxes({6, 9, 9}, {1, 1, 1}, rng, 2);
    const Mask y = oracle::random_boxes({6, 9, 9}, {1, 1, 1}, rng, 2);
    const AugmentDraw draw = sample_augment(draws);
    const Mask tx = apply_augment(x, draw), ty = apply_augment(y, draw);
    CHECK(dsc(tx, ty) == dsc(x, y));
    CHECK(hd(tx, ty) == doctest::Approx(hd(x, y)).epsilon(1e-12));
    CHECK(abd(tx, ty) == doctest::Approx(abd(x, y)).epsilon(1e-12));
  }
}

TEST_CASE("region split") {
  const Dims d{16, 4, 4};
  auto check_split = [&](int first, int n, int apex, int mid, int base) {
    const RegionSplit r = region_split(slab(d, first, first + n - 1));
    CHECK(r.apex.first == first);
    CHECK(r.apex.count() == apex);
    CHECK(r.mid.first == first + apex);
    CHECK(r.mid.count() == mid);
    CHECK(r.base.first == first + apex + mid);
    CHECK(r.base.last == first + n - 1);
    CHECK(r.base.count() == base);
  };
  check_split(2, 9, 3, 3, 3);
  check_split(0, 10, 3, 4, 3);
  check_split(3, 11, 4, 3, 4);
  check_split(5, 3, 1, 1, 1);
  CHECK_THROWS_AS(region_split(slab(d, 4, 5)), std::domain_error);

  std::mt19937_64 rng(33);
  const Mask ref = slab(d, 2, 12);
  const Mask seg = oracle::random_mask(d, {1, 1, 1}, rng, 0.3);
  const RegionSplit r = region_split(ref);
  const Mask apex = restrict_slices(seg, r.apex);
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) CHECK(apex(z, y, x) == ((z >= r.apex.first && z <= r.apex.last) ? seg(z, y, x) : 0));

  MetricReport report;
  report.add_case("a", seg, ref);
  report.add_case("flat", slab(d, 3, 4), slab(d, 3, 4));
  int whole = 0, apexes = 0, bases = 0;
  for (const auto& row : report.rows()) {
    whole += row.region == "whole";
    apexes += row.region == "apex";
    bases += row.region == "base";
  }
  CHECK(whole == 2);
  CHECK(apexes == 1);
  CHECK(bases == 1);
  // Splitting restricts, it never changes whole-volume values.
  CHECK(report.rows()[0].values.dsc == dsc(seg, ref));
  CHECK(report.rows()[0].values.hd == hd(seg, ref));
}

TEST_CASE("metric report and csv") {
  std::mt19937_64 rng(34);
  MetricReport report;
  const Dims d{9, 8, 8};
  std::vector<double> dscs;
  for (int i = 0; i < 4; ++i) {
    const Mask ref = slab(d, 1, 7);
    const Mask seg = oracle::random_boxes(d, {1, 1, 1}, rng, 2);
    report.add_case("case_" + std::to_string(i), seg, ref);
    dscs.push_back(dsc(seg, ref));
  }
  const auto s = report.summary("whole");
  double mean = 0.0;
  for (double v : dscs) mean += v;
  mean /= dscs.size();
  double var = 0.0;
  for (double v : dscs) var += (v - mean) * (v - mean);
  CHECK(s.mean.dsc == doctest::Approx(mean).epsilon(1e-12));
  CHECK(s.stddev.dsc == doctest::Approx(std::sqrt(var / 3)).epsilon(1e-12));

  const std::string csv = report.to_csv();
  CHECK(csv.rfind("case,region,dsc,rvd,abd,hd\n", 0) == 0);
  CHECK(csv.find("mean,whole,") != std::string::npos);
  CHECK(csv.find("std,whole,") != std::string::npos);
  ScratchDir dir("metrics_csv");
  report.write_csv(dir.path() / "m.csv");
  CHECK(slurp(dir.path() / "m.csv") == csv);

  MetricValues v = evaluate_pair(Mask(d, {1, 1, 1}), slab(d, 1, 7));
  CHECK(v.dsc == 0.0);
  CHECK(std::isnan(v.hd));
  CHECK(std::isnan(v.abd));
  CHECK(v.rvd == -100.0);
}

TEST_CASE("paired t-test") {
  CHECK_THROWS_AS(paired_ttest({1, 2, 3}, {1, 2, 3}), std::domain_error);
  CHECK_THROWS_AS(paired_ttest({1, 2}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(paired_ttest({1}, {2}), std::invalid_argument);

  const auto zero = paired_ttest({1, -1, 1, -1}, {0, 0, 0, 0});
  CHECK(zero.t == 0.0);
  CHECK(zero.p == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(zero.significant);

  // Classic before/after sample: differences 9, 4, 21, 3, 20.
  const std::vector<double> before{200, 174, 198, 170, 179}, after{191, 170, 177, 167, 159};
  const auto r = paired_ttest(before, after);
  const double mean = 57.0 / 5.0;
  double ss = 0.0;
  for (double dd : {9.0, 4.0, 21.0, 3.0, 20.0}) ss += (dd - mean) * (dd - mean);
  const double t = mean / std::sqrt(ss / 4.0 / 5.0);
  CHECK(r.n == 5);
  CHECK(r.t == doctest::Approx(t).epsilon(1e-12));
  CHECK(std::abs(r.p - oracle::t_two_sided_p(t, 4.0)) < 1e-6);
  CHECK(r.significant);

  ScratchDir dir("ttest");
  write_ttest_csv({{"dsc", r}}, dir.path() / "t.csv");
  CHECK(slurp(dir.path() / "t.csv").rfind("metric,n,t,p,significant\ndsc,5,", 0) == 0);
}
