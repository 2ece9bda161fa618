#include "bowda/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "bowda/config.hpp"
#include "bowda/rng.hpp"
#include "bowda/volume.hpp"

namespace bowda {

DomainSpec DomainSpec::source_preset() {
  DomainSpec s;
  s.dims = Dims{24, 48, 48};
  s.spacing = Spacing{2.0, 0.75, 0.75};
  s.count = 24;
  s.radius_min = 10.0;
  s.radius_max = 14.0;
  s.deformation = {0.08, 0.08, 0.08};
  s.blur_sigma = 0.4;
  s.noise_sigma = 0.08;
  s.foreground_level = 1.0;
  s.background_level = 0.3;
  s.texture_amplitude = 0.1;
  s.seed = 101;
  return s;
}

DomainSpec DomainSpec::target_preset() {
  DomainSpec s;
  s.dims = Dims{32, 32, 32};
  s.spacing = Spacing{1.5, 1.0, 1.0};
  s.count = 18;
  s.radius_min = 7.5;
  s.radius_max = 10.5;
  s.deformation = {0.08, 0.08, 0.08};
  s.blur_sigma = 1.6;
  s.noise_sigma = 0.2;
  s.foreground_level = 0.8;
  s.background_level = 0.4;
  s.texture_amplitude = 0.3;
  s.seed = 202;
  return s;
}

namespace {

double deformation_sum(const DomainSpec& s) { return s.deformation[0] + s.deformation[1] + s.deformation[2]; }

// Axial semi-axis per unit in-plane radius.
double axial_ratio(const DomainSpec& s) { return s.spacing.height / s.spacing.depth; }

// Largest half-extent (voxels) of the deformed object along each axis.
std::array<double, 3> max_half_extent(const DomainSpec& s) {
  const double r = s.radius_max * (1.0 + deformation_sum(s));
  return {r * axial_ratio(s), r, r};
}

}  // namespace

void DomainSpec::validate() const {
  if (dims.depth < 1 || dims.height < 1 || dims.width < 1) throw std::invalid_argument("DomainSpec: bad dims");
  if (!(spacing.depth > 0 && spacing.height > 0 && spacing.width > 0)) {
    throw std::invalid_argument("DomainSpec: spacing must be > 0");
  }
  if (count < 0) throw std::invalid_argument("DomainSpec: count must be >= 0");
  if (!(radius_min > 0 && radius_max >= radius_min)) {
    throw std::invalid_argument("DomainSpec: need 0 < radius_min <= radius_max");
  }
  for (double a : deformation) {
    if (!(a >= 0)) throw std::invalid_argument("DomainSpec: deformation amplitudes must be >= 0");
  }
  if (!(deformation_sum(*this) < 0.5)) throw std::invalid_argument("DomainSpec: deformation amplitudes must sum below 0.5");
  if (!(blur_sigma >= 0)) throw std::invalid_argument("DomainSpec: blur sigma must be >= 0");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("DomainSpec: noise sigma must be >= 0");
  if (!(texture_amplitude >= 0 && texture_amplitude < 1)) {
    throw std::invalid_argument("DomainSpec: texture amplitude must lie in [0, 1)");
  }
  if (foreground_level == background_level) {
    throw std::invalid_argument("DomainSpec: foreground and background levels must differ");
  }
  const auto ext = max_half_extent(*this);
  for (int a = 0; a < 3; ++a) {
    // Center range [ext + 1, dim - 2 - ext] must be non-empty.
    if (2.0 * ext[a] + 3.0 > dims[a]) {
      throw std::invalid_argument("DomainSpec: object of radius " + std::to_string(radius_max) +
                                  " (deformed) cannot fit in dims " + to_string(dims));
    }
  }
}

std::pair<double, double> foreground_fraction_bounds(const DomainSpec& s) {
  s.validate();
  const double S = deformation_sum(s);
  const double q = axial_ratio(s);
  const double rho = std::sqrt(3.0) / 2.0;  // half diagonal of a voxel cell
  const double smallest = s.radius_min * std::min(1.0, q);
  const double total = static_cast<double>(s.dims.count());
  const double k = 4.0 / 3.0 * std::numbers::pi;
  const double lo_scale = std::max(0.0, (1.0 - S) - rho / smallest);
  const double hi_scale = (1.0 + S) + rho / smallest;
  const double lo = k * q * std::pow(s.radius_min, 3) * std::pow(lo_scale, 3) / total;
  const double hi = k * q * std::pow(s.radius_max, 3) * std::pow(hi_scale, 3) / total;
  return {lo, std::min(1.0, hi)};
}

namespace {

// Separable Gaussian along one axis with edge replication; sigma in voxels.
void gaussian_axis(std::vector<double>& v, const Dims& d, int axis, double sigma) {
  if (sigma <= 0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& w : k) w /= sum;
  const std::vector<double> src = v;
  const int n = d[axis];
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        int p[3] = {z, y, x};
        const int c = p[axis];
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          p[axis] = std::clamp(c + i, 0, n - 1);
          acc += k[i + radius] * src[(static_cast<std::size_t>(p[0]) * d.height + p[1]) * d.width + p[2]];
        }
        v[(static_cast<std::size_t>(z) * d.height + y) * d.width + x] = acc;
      }
}

}  // namespace

Phantom gen_phantom(const DomainSpec& spec, int index) {
  spec.validate();
  if (index < 0) throw std::invalid_argument("gen_phantom: index must be >= 0");
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const Dims d = spec.dims;
  const double q = axial_ratio(spec);
  const double S = deformation_sum(spec);

  // Shape: ellipsoid with a radial perturbation of three cosine modes, mode a
  // turning around axis a.
  const std::array<double, 3> r{rng.uniform(spec.radius_min, spec.radius_max) * q,
                                rng.uniform(spec.radius_min, spec.radius_max),
                                rng.uniform(spec.radius_min, spec.radius_max)};
  std::array<double, 3> center;
  for (int a = 0; a < 3; ++a) {
    const double ext = r[a] * (1.0 + S);
    const double lo = ext + 1.0, hi = d[a] - 2.0 - ext;
    if (hi < lo) throw std::invalid_argument("gen_phantom: object cannot fit in " + to_string(d));
    center[a] = rng.uniform(lo, hi);
  }
  std::array<int, 3> freq;
  std::array<double, 3> phase;
  for (int a = 0; a < 3; ++a) {
    freq[a] = rng.uniform_int(2, 3);
    phase[a] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  Mask label(d, spec.spacing);
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        const double u[3] = {(z - center[0]) / r[0], (y - center[1]) / r[1], (x - center[2]) / r[2]};
        const double rho = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        double delta = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double psi = std::atan2(u[(a + 2) % 3], u[(a + 1) % 3]);
          delta += spec.deformation[a] * std::cos(freq[a] * psi + phase[a]);
        }
        label(z, y, x) = rho <= 1.0 + delta ? 1 : 0;
      }

  // Texture: smooth multiplicative field 1 + amplitude * mean of three plane waves.
  std::array<std::array<double, 3>, 3> wave;
  std::array<double, 3> wave_phase;
  for (int j = 0; j < 3; ++j) {
    for (int a = 0; a < 3; ++a) wave[j][a] = rng.uniform(-1.5, 1.5);
    wave_phase[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  std::vector<double> intensity(d.count());
  for (std::size_t i = 0; i < intensity.size(); ++i) {
    intensity[i] = label[i] ? spec.foreground_level : spec.background_level;
  }
  for (int a = 0; a < 3; ++a) gaussian_axis(intensity, d, a, spec.blur_sigma / spec.spacing[a]);

  Volume image(d, spec.spacing);
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        const double p[3] = {static_cast<double>(z) / d.depth, static_cast<double>(y) / d.height,
                             static_cast<double>(x) / d.width};
        double field = 0.0;
        for (int j = 0; j < 3; ++j) {
          field += std::cos(2.0 * std::numbers::pi * (wave[j][0] * p[0] + wave[j][1] * p[1] + wave[j][2] * p[2]) +
                            wave_phase[j]);
        }
        const std::size_t i = image.index(z, y, x);
        double v = intensity[i] * (1.0 + spec.texture_amplitude * field / 3.0);
        if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
        image[i] = static_cast<float>(v);
      }
  return {znormalize(image), std::move(label)};
}

std::vector<DatasetCase> DatasetManifest::split(const std::string& name) const {
  std::vector<DatasetCase> out;
  for (const auto& c : cases) {
    if (c.split == name) out.push_back(c);
  }
  return out;
}

DatasetManifest gen_dataset(const DomainSpec& spec, int count, const std::filesystem::path& dir, double val_fraction) {
  spec.validate();
  if (count < 1) throw std::invalid_argument("gen_dataset: count must be >= 1");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw std::invalid_argument("gen_dataset: val fraction must lie in [0, 1)");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.seed = spec.seed;
  m.val_fraction = val_fraction;
  Json spec_json = spec;
  m.spec_digest = json_digest(spec_json);
  const int n_val = static_cast<int>(std::lround(count * val_fraction));
  Json cases = Json::array();
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    const Phantom p = gen_phantom(spec, i);
    DatasetCase c{id, std::string(id) + "_image.mhd", std::string(id) + "_label.mhd", i >= count - n_val ? "val" : "train"};
    write_metaimage(p.image, dir / c.image);
    write_metaimage(p.label, dir / c.label);
    cases.push_back({{"id", c.id}, {"image", c.image.string()}, {"label", c.label.string()}, {"split", c.split}});
    c.image = dir / c.image;
    c.label = dir / c.label;
    m.cases.push_back(c);
  }
  const Json manifest{{"seed", spec.seed},
                      {"spec_digest", m.spec_digest},
                      {"spec", spec_json},
                      {"val_fraction", val_fraction},
                      {"count", count},
                      {"cases", cases}};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  const Json j = Json::parse(in);
  DatasetManifest m;
  m.seed = j.value("seed", std::uint64_t{0});
  m.spec_digest = j.value("spec_digest", std::string());
  m.val_fraction = j.value("val_fraction", 0.0);
  const auto base = path.parent_path();
  for (const auto& c : j.at("cases")) {
    m.cases.push_back({c.at("id").get<std::string>(), base / c.at("image").get<std::string>(),
                       base / c.at("label").get<std::string>(), c.value("split", std::string("train"))});
  }
  return m;
}

}  // namespace bowda
