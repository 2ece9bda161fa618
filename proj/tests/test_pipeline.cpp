#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "bowda/parallel.hpp"
#include "bowda/pipeline.hpp"
#include "oracles.hpp"

using namespace bowda;

namespace {

Volume random_volume(Dims d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Volume v(d, {1, 1, 1});
  for (auto& f : v.values()) f = static_cast<float>(u(rng));
  return v;
}

// Placements per axis: every stride multiple whose window fits, plus the
// window flush with the far edge.
std::vector<int> placements(int extent, int window, int stride) {
  std::set<int> s;
  for (int o = 0; o + window <= extent; o += stride) s.insert(o);
  s.insert(extent - window);
  return {s.begin(), s.end()};
}

// Reference sliding-window average with an explicit sum/count accumulator.
Volume brute_infer(const Predictor& f, const Volume& v, const WindowSpec& w) {
  const Dims d = v.dims();
  Image<double> sum(d, v.spacing(), 0.0);
  Image<int> cnt(d, v.spacing(), 0);
  for (int z0 : placements(d.depth, w.window.depth, w.stride.depth))
    for (int y0 : placements(d.height, w.window.height, w.stride.height))
      for (int x0 : placements(d.width, w.window.width, w.stride.width)) {
        Volume block(w.window, v.spacing());
        for (int z = 0; z < w.window.depth; ++z)
          for (int y = 0; y < w.window.height; ++y)
            for (int x = 0; x < w.window.width; ++x) block(z, y, x) = v(z0 + z, y0 + y, x0 + x);
        const Volume p = f(block);
        for (int z = 0; z < w.window.depth; ++z)
          for (int y = 0; y < w.window.height; ++y)
            for (int x = 0; x < w.window.width; ++x) {
              sum(z0 + z, y0 + y, x0 + x) += p(z, y, x);
              cnt(z0 + z, y0 + y, x0 + x) += 1;
            }
      }
  Volume out(d, v.spacing());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(sum[i] / cnt[i]);
  return out;
}

}  // namespace

TEST_CASE("random crop") {
  std::mt19937_64 g(41);
  const Volume v = random_volume({8, 12, 10}, g);
  const Mask m = oracle::random_mask(v.dims(), v.spacing(), g, 0.5);

  Rng rng(1);
  const Crop full = random_crop(v, m, {v.dims()}, rng);
  CHECK(full.origin == VoxelIndex{0, 0, 0});
  CHECK(full.image.values() == v.values());
  CHECK(full.label.values() == m.values());

  Rng r1(5), r2(5);
  const CropSpec spec{{4, 8, 8}};
  const Crop a = random_crop(v, m, spec, r1), b = random_crop(v, m, spec, r2);
  CHECK(a.origin == b.origin);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        CHECK(a.image(z, y, x) == v(a.origin[0] + z, a.origin[1] + y, a.origin[2] + x));
        CHECK(a.label(z, y, x) == m(a.origin[0] + z, a.origin[1] + y, a.origin[2] + x));
      }

  CHECK_THROWS_AS(random_crop(v, m, {{16, 8, 8}}, rng), std::invalid_argument);

  // Origins are uniform per axis: chi-square goodness of fit at the 1% level.
  Rng r(9);
  const int draws = 10000;
  std::vector<std::vector<int>> hist(3);
  for (int a2 = 0; a2 < 3; ++a2) hist[a2].assign(v.dims()[a2] - spec.size[a2] + 1, 0);
  for (int i = 0; i < draws; ++i) {
    const Crop c = random_crop(v, m, spec, r);
    for (int a2 = 0; a2 < 3; ++a2) hist[a2][c.origin[a2]]++;
  }
  for (const auto& h : hist) {
    const double expect = static_cast<double>(draws) / h.size();
    double chi2 = 0.0;
    for (int n : h) chi2 += (n - expect) * (n - expect) / expect;
    const boost::math::chi_squared dist(static_cast<double>(h.size() - 1));
    CHECK(chi2 < boost::math::quantile(dist, 0.99));
  }
}

TEST_CASE("augmentation") {
  std::mt19937_64 g(42);
  const Volume v = random_volume({4, 6, 6}, g);
  const Mask m = oracle::random_mask(v.dims(), v.spacing(), g, 0.4);

  const AugmentDraw id;
  CHECK(id.identity());
  CHECK(apply_augment(v, id).values() == v.values());
  CHECK(apply_augment(m, id).values() == m.values());

  for (int axis = 0; axis < 3; ++axis) {
    AugmentDraw f;
    f.flips[axis] = true;
    CHECK_FALSE(apply_augment(v, f).values() == v.values());
    CHECK(apply_augment(apply_augment(v, f), f).values() == v.values());
  }

  Rng r(3);
  std::set<int> seen_rot;
  for (int i = 0; i < 64; ++i) {
    const AugmentDraw dr = sample_augment(r);
    seen_rot.insert(dr.rotations);
    const Volume av = apply_augment(v, dr);
    const Mask am = apply_augment(m, dr);
    CHECK(am.foreground_count() == m.foreground_count());
    CHECK(invert_augment(av, dr).values() == v.values());
    CHECK(invert_augment(am, dr).values() == m.values());
    // Image and label move together.
    const Volume mv = apply_augment(image_cast<float>(static_cast<const Image<std::uint8_t>&>(m)), dr);
    for (std::size_t k = 0; k < am.size(); ++k) CHECK(mv[k] == am[k]);
  }
  CHECK(seen_rot.size() == 4);

  // A quarter turn moves (y, x) to a transposed position.
  AugmentDraw q;
  q.rotations = 1;
  const Volume rv = apply_augment(v, q);
  CHECK(rv.dims() == Dims{4, 6, 6});
  CHECK_FALSE(rv.values() == v.values());
  q.rotations = 4;
  CHECK(apply_augment(v, q).values() == v.values());

  Rng ra(4), rb(4);
  const auto [ia, la] = augment(v, m, ra);
  const auto [ib, lb] = augment(v, m, rb);
  CHECK(ia.values() == ib.values());
  CHECK(la.values() == lb.values());
}

TEST_CASE("window placement and coverage") {
  CHECK(window_origins(12, 8, 4) == std::vector<int>{0, 4});
  CHECK(window_origins(13, 8, 4) == std::vector<int>{0, 4, 5});
  CHECK(window_origins(8, 8, 4) == std::vector<int>{0});
  CHECK_THROWS_AS(window_origins(6, 8, 4), std::invalid_argument);

  const Image<int> c12 = coverage_counts({12, 12, 12}, {{8, 8, 8}, {4, 4, 4}});
  auto per_axis = [](int p) { return p < 4 || p >= 8 ? 1 : 2; };
  for (int z = 0; z < 12; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) CHECK(c12(z, y, x) == per_axis(z) * per_axis(y) * per_axis(x));

  for (int extent = 1; extent <= 40; ++extent)
    for (int window = 1; window <= extent; window += 3)
      for (int stride = 1; stride <= window; stride += 2) {
        CHECK(window_origins(extent, window, stride) == placements(extent, window, stride));
      }

  const Image<int> c = coverage_counts({9, 13, 11}, {{4, 8, 6}, {3, 5, 4}});
  for (int n : c.values()) CHECK(n >= 1);
}

TEST_CASE("sliding-window inference") {
  std::mt19937_64 g(43);
  const Predictor identity = [](const Volume& x) { return x; };
  struct Combo {
    Dims vol;
    WindowSpec w;
  };
  const std::vector<Combo> combos = {
      {{8, 32, 32}, {{8, 32, 32}, {4, 16, 16}}},   {{12, 12, 12}, {{8, 8, 8}, {4, 4, 4}}},
      {{13, 17, 19}, {{8, 8, 8}, {4, 4, 4}}},      {{10, 33, 29}, {{8, 16, 16}, {3, 7, 5}}},
      {{9, 9, 9}, {{4, 4, 4}, {4, 4, 4}}},         {{7, 21, 20}, {{7, 10, 10}, {1, 9, 3}}},
      {{5, 30, 31}, {{8, 32, 32}, {4, 16, 16}}},   {{16, 40, 40}, {{8, 32, 32}, {8, 32, 32}}},
      {{11, 11, 11}, {{3, 5, 7}, {2, 5, 6}}},      {{6, 14, 15}, {{6, 14, 15}, {3, 7, 7}}},
      {{20, 12, 9}, {{8, 8, 8}, {5, 3, 2}}},
  };
  for (const auto& cb : combos) {
    const Volume v = random_volume(cb.vol, g);
    const Volume out = sliding_window_infer(identity, v, cb.w);
    REQUIRE(out.dims() == v.dims());
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(out[i]) - v[i]));
    CHECK(worst <= 1e-6);
  }

  int calls = 0;
  const Predictor counting = [&](const Volume& x) {
    ++calls;
    return x;
  };
  const Volume v = random_volume({8, 16, 16}, g);
  set_num_threads(1);
  sliding_window_infer(counting, v, {{8, 16, 16}, {4, 8, 8}});
  CHECK(calls == 1);

  // A non-trivial predictor: each window's output depends on the whole window.
  const Predictor nonlocal = [](const Volume& x) {
    double m = 0.0;
    for (float f : x.values()) m += f;
    m /= x.size();
    Volume y = x;
    for (auto& f : y.values()) f = static_cast<float>(f * f + m);
    return y;
  };
  const Volume big = random_volume({13, 21, 18}, g);
  const WindowSpec ws{{8, 8, 8}, {3, 5, 4}};
  const Volume ref = brute_infer(nonlocal, big, ws);
  const Volume one = sliding_window_infer(nonlocal, big, ws);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(one[i] - ref[i]) <= 1e-6);
  set_num_threads(4);
  const Volume four = sliding_window_infer(nonlocal, big, ws);
  CHECK(four.values() == one.values());
  set_num_threads(1);

  VoxelIndex off{};
  const Volume small = random_volume({3, 5, 4}, g);
  const Volume padded = pad_to_at_least(small, {8, 8, 8}, off);
  CHECK(padded.dims() == Dims{8, 8, 8});
  CHECK(padded(off[0], off[1], off[2]) == small(0, 0, 0));
  CHECK(padded(0, 0, 0) == small(0, 0, 0));
  CHECK(padded(7, 7, 7) == small(2, 4, 3));
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS((WindowSpec{{8, 8, 8}, {9, 4, 4}}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((WindowSpec{{8, 8, 8}, {0, 4, 4}}).validate(), std::invalid_argument);
  CHECK(WindowSpec::half_overlap({16, 96, 96}).stride == Dims{8, 48, 48});
  CHECK(CropSpec::paper().size == Dims{16, 96, 96});
}
