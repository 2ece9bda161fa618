#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "bowda/boundary.hpp"
#include "bowda/losses.hpp"
#include "oracles.hpp"

using namespace bowda;

namespace {

using Img = Image<double>;

Img random_prob(Dims d, std::mt19937_64& rng, double lo = 0.02, double hi = 0.98) {
  std::uniform_real_distribution<double> u(lo, hi);
  Img p(d, {1, 1, 1});
  for (auto& v : p.values()) v = u(rng);
  return p;
}

WeightMap random_weights(Dims d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  WeightMap w(d, {1, 1, 1});
  for (auto& v : w.values()) v = static_cast<float>(u(rng));
  return w;
}

/// Central differences of `f` at every voxel of `x` against `analytic`.
double max_rel_error(Img x, const std::function<double(const Img&)>& f, const Img& analytic, double h = 1e-4) {
  double worst = 0.0, scale = 0.0;
  for (double g : analytic.values()) scale = std::max(scale, std::abs(g));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    const double num = (up - down) / (2 * h);
    const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-3 * scale, 1e-12});
    worst = std::max(worst, std::abs(num - analytic[i]) / denom);
  }
  return worst;
}

// Keeps values at least `gap` away from the threshold so finite differences
// never move a voxel across it.
void push_off_threshold(Img& p, double t, double gap) {
  for (auto& v : p.values()) {
    if (std::abs(v - t) < gap) v = v < t ? t - gap : t + gap;
  }
}

}  // namespace

TEST_CASE("cross entropy") {
  LossConfig cfg;
  Mask y({2, 2, 2}, {1, 1, 1});
  y(0, 0, 0) = y(1, 1, 0) = 1;

  Img perfect(y.dims(), y.spacing());
  for (std::size_t i = 0; i < y.size(); ++i) perfect[i] = y[i];
  const auto ce0 = cross_entropy(perfect, y, cfg);
  CHECK(ce0.value >= 0.0);
  CHECK(ce0.value <= -std::log(1.0 - cfg.epsilon) + 1e-15);

  const Img half(y.dims(), y.spacing(), 0.5);
  CHECK(cross_entropy(half, y, cfg).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Mask one({1, 1, 1}, {1, 1, 1});
  one[0] = 1;
  CHECK(cross_entropy(Img({1, 1, 1}, {1, 1, 1}, 0.25), one, cfg).value == doctest::Approx(-std::log(0.25)));
  CHECK(cross_entropy(Img({1, 1, 1}, {1, 1, 1}, 0.25), one, cfg).value == doctest::Approx(1.3863).epsilon(1e-4));

  // Clamped voxels carry no gradient.
  Img sat(y.dims(), y.spacing(), 0.0);
  const auto cs = cross_entropy(sat, y, cfg);
  for (double g : cs.grads[0].values()) CHECK(g == 0.0);
  CHECK(std::isfinite(cs.value));

  CHECK_THROWS_AS(cross_entropy(Img({2, 2, 3}, {1, 1, 1}, 0.5), y, cfg), std::invalid_argument);

  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const Mask t = oracle::random_mask({3, 4, 4}, {1, 1, 1}, rng, 0.4);
    const Img p = random_prob(t.dims(), rng);
    const auto lv = cross_entropy(p, t, cfg);
    CHECK(lv.value >= 0.0);
    CHECK(lv.grads[0].dims() == p.dims());
    CHECK(max_rel_error(p, [&](const Img& q) { return cross_entropy(q, t, cfg).value; }, lv.grads[0]) < 1e-4);
  }
}

TEST_CASE("distance loss") {
  LossConfig cfg;
  const Dims d{8, 8, 8};
  Mask ref(d, {1, 1, 1});
  for (int z = 2; z < 5; ++z)
    for (int y = 2; y < 5; ++y)
      for (int x = 2; x < 5; ++x) ref(z, y, x) = 1;
  const DistanceMap dm = distance_map(ref);

  Img exact(d, {1, 1, 1});
  for (std::size_t i = 0; i < ref.size(); ++i) exact[i] = ref[i] ? 0.9 : 0.1;
  CHECK(dist_loss(exact, dm, cfg).value == 0.0);
  CHECK(dist_loss(Img(d, {1, 1, 1}, 0.1), dm, cfg).value == 0.0);

  // Reference cube shifted by one voxel along x.
  Mask shifted(d, {1, 1, 1});
  for (int z = 2; z < 5; ++z)
    for (int y = 2; y < 5; ++y)
      for (int x = 3; x < 6; ++x) shifted(z, y, x) = 1;
  Img pred(d, {1, 1, 1});
  for (std::size_t i = 0; i < shifted.size(); ++i) pred[i] = shifted[i] ? 0.8 : 0.2;
  const auto oracle_dm = oracle::distance_map(ref);
  double expect = 0.0;
  for (const auto& p : oracle::boundary(shifted)) expect += 0.8 * oracle_dm(p[0], p[1], p[2]);
  const auto lv = dist_loss(pred, dm, cfg);
  CHECK(lv.value == doctest::Approx(cfg.beta * expect / pred.size()).epsilon(1e-12));
  CHECK(lv.value > 0.0);

  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const Mask t = oracle::random_boxes({5, 6, 6}, {1, 1, 1}, rng, 2);
    if (t.empty() || t.full()) continue;
    const DistanceMap tm = distance_map(t);
    Img p = random_prob(t.dims(), rng);
    push_off_threshold(p, cfg.threshold, 1e-2);
    const auto v = dist_loss(p, tm, cfg);
    CHECK(v.value >= 0.0);
    CHECK(max_rel_error(p, [&](const Img& q) { return dist_loss(q, tm, cfg).value; }, v.grads[0]) < 1e-4);
  }
}

TEST_CASE("boundary-weighted segmentation loss") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    LossConfig cfg;
    const Mask t = oracle::random_boxes({5, 6, 6}, {1, 1, 1}, rng, 2);
    if (t.empty() || t.full()) continue;
    Img p = random_prob(t.dims(), rng);
    push_off_threshold(p, cfg.threshold, 1e-2);

    const auto b = bwsl(p, t, cfg);
    const auto ce = cross_entropy(p, t, cfg);
    const auto dl = dist_loss(p, distance_map(t), cfg);
    CHECK(b.value == doctest::Approx(ce.value + dl.value).epsilon(1e-14));
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(b.grads[0][i] == doctest::Approx(ce.grads[0][i] + dl.grads[0][i]));
    CHECK(max_rel_error(p, [&](const Img& q) { return bwsl(q, t, cfg).value; }, b.grads[0]) < 1e-4);

    LossConfig nob = cfg;
    nob.beta = 0.0;
    const auto b0 = bwsl(p, t, nob);
    CHECK(b0.value == ce.value);
    CHECK(b0.grads[0].values() == ce.grads[0].values());

    Img perfect(t.dims(), t.spacing());
    for (std::size_t i = 0; i < t.size(); ++i) perfect[i] = t[i];
    CHECK(bwsl(perfect, t, cfg).value <= -std::log(1.0 - cfg.epsilon) + 1e-15);
  }
}

TEST_CASE("boundary-weighted transfer loss") {
  LossConfig cfg;
  const Dims d{2, 3, 3};
  const WeightMap zero(d, {1, 1, 1});
  WeightMap ones(d, {1, 1, 1}, 1.0f);

  CHECK(bwtl_discriminator(Img(d, {1, 1, 1}, 1.0), Img(d, {1, 1, 1}, 0.0), zero, zero, cfg).value < 1e-6);
  CHECK(bwtl_discriminator(Img(d, {1, 1, 1}, 0.5), Img(d, {1, 1, 1}, 0.5), zero, zero, cfg).value ==
        doctest::Approx(2 * std::log(2.0)));

  // Doubling the source term: W_s = 1, alpha = 1, W_t = 0. D(t) = 0 leaves only the
  // clamped target term, which is the same in both.
  const Img ds(d, {1, 1, 1}, 0.3), dt(d, {1, 1, 1}, 0.0);
  const double tgt_term = -std::log(1.0 - cfg.epsilon);
  const double plain = bwtl_discriminator(ds, dt, zero, zero, cfg).value - tgt_term;
  const double weighted = bwtl_discriminator(ds, dt, ones, zero, cfg).value - tgt_term;
  CHECK(weighted == doctest::Approx(2 * plain).epsilon(1e-12));

  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 10; ++trial) {
    LossConfig c;
    c.alpha = trial % 2 ? 1.0 : 0.37;
    const Img s = random_prob(d, rng), t = random_prob(d, rng);
    const WeightMap ws = random_weights(d, rng), wt = random_weights(d, rng);
    const auto lv = bwtl_discriminator(s, t, ws, wt, c);
    CHECK(lv.grads.size() == 2);
    CHECK(max_rel_error(s, [&](const Img& q) { return bwtl_discriminator(q, t, ws, wt, c).value; }, lv.grads[0]) < 1e-4);
    CHECK(max_rel_error(t, [&](const Img& q) { return bwtl_discriminator(s, q, ws, wt, c).value; }, lv.grads[1]) < 1e-4);

    // Zero weights reduce to the standard adversarial loss for any alpha.
    double standard = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) standard -= std::log(s[i]) + std::log(1 - t[i]);
    CHECK(bwtl_discriminator(s, t, zero, zero, c).value == doctest::Approx(standard / s.size()).epsilon(1e-12));
  }

  CHECK_THROWS_AS(bwtl_discriminator(Img({1, 3, 3}, {1, 1, 1}, 0.5), Img(d, {1, 1, 1}, 0.5), zero, zero, cfg),
                  std::invalid_argument);
}

TEST_CASE("generator loss and total loss") {
  LossConfig cfg;
  const Dims d{2, 2, 3};
  const WeightMap zero(d, {1, 1, 1});
  CHECK(adversarial_generator_loss(Img(d, {1, 1, 1}, 1.0), zero, cfg).value < 1e-6);
  CHECK(adversarial_generator_loss(Img(d, {1, 1, 1}, 0.5), zero, cfg).value == doctest::Approx(std::log(2.0)));

  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 10; ++trial) {
    const Img t = random_prob(d, rng);
    const WeightMap w = random_weights(d, rng);
    const auto g = adversarial_generator_loss(t, w, cfg);
    for (double v : g.grads[0].values()) CHECK(v < 0.0);
    CHECK(max_rel_error(t, [&](const Img& q) { return adversarial_generator_loss(q, w, cfg).value; }, g.grads[0]) < 1e-4);

    const Mask y = oracle::random_mask(d, {1, 1, 1}, rng, 0.5);
    const Img p = random_prob(d, rng);
    const auto seg = cross_entropy(p, y, cfg);
    const auto tot = total_loss(seg, g, 0.7);
    CHECK(tot.value == doctest::Approx(seg.value + 0.7 * g.value).epsilon(1e-14));
    REQUIRE(tot.grads.size() == 2);
    CHECK(tot.grads[0].values() == seg.grads[0].values());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(tot.grads[1][i] == doctest::Approx(0.7 * g.grads[0][i]));

    const auto none = total_loss(seg, g, 0.0);
    CHECK(none.value == seg.value);
  }
}

TEST_CASE("loss config validation") {
  LossConfig c;
  CHECK_NOTHROW(c.validate());
  c.beta = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.epsilon = 0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.alpha = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
