#include <cmath>
#include <set>

#include "doctest.h"
#include "bowda/boundary.hpp"
#include "bowda/phantom.hpp"
#include "bowda/volume.hpp"
#include "test_util.hpp"

using namespace bowda;

namespace {

std::vector<double> intensity_histogram(const Volume& v) {
  constexpr int bins = 32;
  std::vector<double> h(bins, 0.0);
  for (float f : v.values()) {
    const int b = std::clamp(static_cast<int>((f + 4.0) / 8.0 * bins), 0, bins - 1);
    h[b] += 1.0 / v.size();
  }
  return h;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST_CASE("phantoms are deterministic per seed and index") {
  const DomainSpec s = DomainSpec::target_preset();
  const Phantom a = gen_phantom(s, 3), b = gen_phantom(s, 3), c = gen_phantom(s, 4);
  CHECK(a.image.values() == b.image.values());
  CHECK(a.label.values() == b.label.values());
  CHECK_FALSE(a.image.values() == c.image.values());
  DomainSpec other = s;
  other.seed += 1;
  CHECK_FALSE(gen_phantom(other, 3).label.values() == a.label.values());
  CHECK(a.image.dims() == s.dims);
  CHECK(a.image.spacing() == s.spacing);
  CHECK(a.label.dims() == s.dims);
}

TEST_CASE("a clean phantom is a two-level step of its mask") {
  DomainSpec s;
  s.blur_sigma = 0.0;
  s.noise_sigma = 0.0;
  s.texture_amplitude = 0.0;
  for (int i = 0; i < 3; ++i) {
    const Phantom p = gen_phantom(s, i);
    std::set<float> levels(p.image.values().begin(), p.image.values().end());
    CHECK(levels.size() == 2);
    const float hi = *levels.rbegin();
    for (std::size_t k = 0; k < p.label.size(); ++k) CHECK((p.image[k] == hi) == (p.label[k] == 1));
  }
}

TEST_CASE("phantom invariants") {
  for (const DomainSpec& s : {DomainSpec::source_preset(), DomainSpec::target_preset(), DomainSpec{}}) {
    const auto [lo, hi] = foreground_fraction_bounds(s);
    CHECK(lo > 0.0);
    CHECK(lo < hi);
    for (int i = 0; i < 8; ++i) {
      const Phantom p = gen_phantom(s, i);
      const double frac = static_cast<double>(p.label.foreground_count()) / p.label.size();
      CHECK(frac >= lo);
      CHECK(frac <= hi);
      for (float f : p.image.values()) CHECK(std::isfinite(f));
      const auto m = moments(p.image);
      CHECK(std::abs(m.mean) < 1e-5);
      CHECK(std::abs(m.stddev - 1.0) < 1e-5);
    }
  }
  CHECK(DomainSpec::source_preset().blur_sigma < DomainSpec::target_preset().blur_sigma);
}

TEST_CASE("phantom spec validation") {
  DomainSpec s;
  s.blur_sigma = -1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.noise_sigma = -0.1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.radius_min = 20;
  s.radius_max = 20;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK_THROWS_AS(gen_phantom(s, 0), std::invalid_argument);
}

TEST_CASE("source boundaries are sharper than target boundaries") {
  for (std::uint64_t seed : {0ull, 1ull, 2ull}) {
    DomainSpec src = DomainSpec::source_preset(), tgt = DomainSpec::target_preset();
    src.seed = seed;
    tgt.seed = seed + 1000;
    double ms = 0.0, mt = 0.0;
    for (int i = 0; i < 20; ++i) {
      const Phantom a = gen_phantom(src, i), b = gen_phantom(tgt, i);
      ms += boundary_gradient_histogram(a.image, a.label, 32).sample_mean;
      mt += boundary_gradient_histogram(b.image, b.label, 32).sample_mean;
    }
    CHECK(ms > mt);
  }
}

TEST_CASE("domains are separable by intensity histograms") {
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) {
    feats.push_back(intensity_histogram(gen_phantom(DomainSpec::source_preset(), i).image));
    labels.push_back(0);
    feats.push_back(intensity_histogram(gen_phantom(DomainSpec::target_preset(), i).image));
    labels.push_back(1);
  }
  // Leave-one-out nearest class centroid.
  int correct = 0;
  for (std::size_t k = 0; k < feats.size(); ++k) {
    std::vector<double> cen[2] = {std::vector<double>(32, 0.0), std::vector<double>(32, 0.0)};
    int n[2] = {0, 0};
    for (std::size_t j = 0; j < feats.size(); ++j) {
      if (j == k) continue;
      for (int b = 0; b < 32; ++b) cen[labels[j]][b] += feats[j][b];
      n[labels[j]]++;
    }
    for (int c = 0; c < 2; ++c)
      for (auto& v : cen[c]) v /= n[c];
    const int guess = sq_dist(feats[k], cen[0]) <= sq_dist(feats[k], cen[1]) ? 0 : 1;
    correct += guess == labels[k];
  }
  CHECK(static_cast<double>(correct) / feats.size() > 0.8);
}

TEST_CASE("dataset generation") {
  ScratchDir a("dataset_a"), b("dataset_b");
  DomainSpec s = DomainSpec::target_preset();
  s.dims = {16, 24, 24};
  s.radius_min = 4;
  s.radius_max = 6;
  const DatasetManifest m = gen_dataset(s, 7, a.path(), 0.3);
  CHECK(m.cases.size() == 7);
  CHECK(m.split("val").size() == 2);
  CHECK(m.split("train").size() == 5);
  CHECK(m.split("val").back().id == m.cases.back().id);
  CHECK(m.seed == s.seed);

  const DatasetManifest back = read_manifest(a.path() / "manifest.json");
  CHECK(back.cases.size() == 7);
  CHECK(back.spec_digest == m.spec_digest);

  gen_dataset(s, 7, b.path(), 0.3);
  for (const auto& c : m.cases) {
    CHECK(std::filesystem::exists(c.image));
    const auto rel = std::filesystem::relative(c.image, a.path());
    CHECK(slurp(a.path() / rel) == slurp(b.path() / rel));
    const Phantom p = gen_phantom(s, static_cast<int>(&c - m.cases.data()));
    CHECK(read_metaimage(c.image).values() == p.image.values());
    CHECK(read_mask(c.label).values() == p.label.values());
  }
  CHECK(slurp(a.path() / "manifest.json") == slurp(b.path() / "manifest.json"));
}
