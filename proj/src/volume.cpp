#include "bowda/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace bowda {
namespace {

static_assert(std::endian::native == std::endian::little,
              "MetaImage I/O assumes a little-endian host");

struct Header {
  std::map<std::string, std::string> keys;
  std::string data_file;
  std::streamoff data_offset = 0;  // for LOCAL
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

Header parse_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MetaImageError("", "cannot open " + path.string());
  Header h;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (trim(line).empty()) continue;
      throw MetaImageError("", "malformed header line '" + trim(line) + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    h.keys[key] = value;
    if (key == "ElementDataFile") {
      h.data_file = value;
      h.data_offset = in.tellg();
      break;
    }
  }
  if (h.data_file.empty()) throw MetaImageError("ElementDataFile", "missing");
  return h;
}

const std::string& require_key(const Header& h, const std::string& key) {
  auto it = h.keys.find(key);
  if (it == h.keys.end()) throw MetaImageError(key, "missing");
  return it->second;
}

template <typename T>
std::vector<T> parse_numbers(const std::string& key, const std::string& value, std::size_t n) {
  std::istringstream is(value);
  std::vector<T> out;
  T v{};
  while (is >> v) out.push_back(v);
  if (!is.eof() || out.size() != n) {
    throw MetaImageError(key, "expected " + std::to_string(n) + " numbers, got '" + value + "'");
  }
  return out;
}

bool is_false(const std::string& v) { return v == "False" || v == "false" || v == "0"; }

std::size_t element_size(const std::string& type) {
  if (type == "MET_UCHAR") return 1;
  if (type == "MET_SHORT" || type == "MET_USHORT") return 2;
  if (type == "MET_FLOAT") return 4;
  throw MetaImageError("ElementType", "unsupported element type " + type);
}

template <typename T>
void widen(const std::vector<char>& raw, std::vector<float>& out) {
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<float>(v);
  }
}

void write_header(const std::filesystem::path& mhd, const Dims& d, const Spacing& s,
                  const char* element_type, const std::string& raw_name) {
  std::ofstream os(mhd, std::ios::binary);
  if (!os) throw MetaImageError("", "cannot write " + mhd.string());
  os << std::setprecision(17);
  os << "ObjectType = Image\n"
     << "NDims = 3\n"
     << "BinaryData = True\n"
     << "BinaryDataByteOrderMSB = False\n"
     << "CompressedData = False\n"
     // MetaImage lists the fastest axis first
     << "DimSize = " << d.width << " " << d.height << " " << d.depth << "\n"
     << "ElementSpacing = " << s.width << " " << s.height << " " << s.depth << "\n"
     << "ElementType = " << element_type << "\n"
     << "ElementDataFile = " << raw_name << "\n";
  if (!os) throw MetaImageError("", "write failed for " + mhd.string());
}

void write_payload(const std::filesystem::path& raw, const void* data, std::size_t bytes) {
  std::ofstream os(raw, std::ios::binary);
  if (!os) throw MetaImageError("", "cannot write " + raw.string());
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!os) throw MetaImageError("", "write failed for " + raw.string());
}

std::pair<std::filesystem::path, std::filesystem::path> header_and_raw(
    const std::filesystem::path& path) {
  auto mhd = path;
  if (mhd.extension() != ".mhd") mhd += ".mhd";
  auto raw = mhd;
  raw.replace_extension(".raw");
  return {mhd, raw};
}

}  // namespace

Volume read_metaimage(const std::filesystem::path& path) {
  const Header h = parse_header(path);

  const auto ndims = parse_numbers<int>("NDims", require_key(h, "NDims"), 1);
  if (ndims[0] != 3) throw MetaImageError("NDims", "only 3D volumes are supported");

  const auto dim = parse_numbers<long long>("DimSize", require_key(h, "DimSize"), 3);
  for (auto v : dim) {
    if (v < 1 || v > std::numeric_limits<int>::max()) {
      throw MetaImageError("DimSize", "dimensions must be positive");
    }
  }
  Spacing spacing;
  if (auto it = h.keys.find("ElementSpacing"); it != h.keys.end()) {
    const auto sp = parse_numbers<double>("ElementSpacing", it->second, 3);
    for (auto v : sp) {
      if (!(v > 0)) throw MetaImageError("ElementSpacing", "spacing must be positive");
    }
    spacing = {sp[2], sp[1], sp[0]};
  }
  if (auto it = h.keys.find("BinaryDataByteOrderMSB"); it != h.keys.end() && !is_false(it->second)) {
    throw MetaImageError("BinaryDataByteOrderMSB", "big-endian payloads are not supported");
  }
  if (auto it = h.keys.find("CompressedData"); it != h.keys.end() && !is_false(it->second)) {
    throw MetaImageError("CompressedData", "compressed payloads are not supported");
  }
  if (auto it = h.keys.find("ElementNumberOfChannels"); it != h.keys.end() && it->second != "1") {
    throw MetaImageError("ElementNumberOfChannels", "only scalar volumes are supported");
  }
  const std::string& type = require_key(h, "ElementType");
  const std::size_t esize = element_size(type);

  const Dims dims{static_cast<int>(dim[2]), static_cast<int>(dim[1]), static_cast<int>(dim[0])};
  const std::size_t n = dims.count();

  std::ifstream in;
  if (h.data_file == "LOCAL") {
    in.open(path, std::ios::binary);
    in.seekg(h.data_offset);
  } else {
    in.open(path.parent_path() / h.data_file, std::ios::binary);
  }
  if (!in) throw MetaImageError("ElementDataFile", "cannot open payload '" + h.data_file + "'");
  std::vector<char> raw(n * esize);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != raw.size()) {
    throw MetaImageError("ElementDataFile", "payload has " + std::to_string(got / esize) +
                                                " elements, DimSize requires " + std::to_string(n));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw MetaImageError("ElementDataFile",
                         "payload is larger than DimSize requires (" + std::to_string(n) + ")");
  }

  std::vector<float> values(n);
  if (type == "MET_UCHAR") widen<std::uint8_t>(raw, values);
  else if (type == "MET_SHORT") widen<std::int16_t>(raw, values);
  else if (type == "MET_USHORT") widen<std::uint16_t>(raw, values);
  else widen<float>(raw, values);
  return Volume(dims, spacing, std::move(values));
}

Mask read_mask(const std::filesystem::path& path) {
  const Volume v = read_metaimage(path);
  Mask m(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] != 0.0f ? 1 : 0;
  return m;
}

void write_metaimage(const Volume& vol, const std::filesystem::path& path) {
  const auto [mhd, raw] = header_and_raw(path);
  write_header(mhd, vol.dims(), vol.spacing(), "MET_FLOAT", raw.filename().string());
  write_payload(raw, vol.values().data(), vol.size() * sizeof(float));
}

void write_metaimage(const Mask& mask, const std::filesystem::path& path) {
  const auto [mhd, raw] = header_and_raw(path);
  write_header(mhd, mask.dims(), mask.spacing(), "MET_UCHAR", raw.filename().string());
  write_payload(raw, mask.values().data(), mask.size());
}

Dims resampled_dims(const Dims& dims, const Spacing& from, const Spacing& to) {
  if (!(to.depth > 0) || !(to.height > 0) || !(to.width > 0)) {
    throw std::invalid_argument("resample: target spacing must be > 0, got " + to_string(to));
  }
  auto axis = [](int n, double s_in, double s_out) {
    return std::max(1, static_cast<int>(std::lround(n * s_in / s_out)));
  };
  return {axis(dims.depth, from.depth, to.depth), axis(dims.height, from.height, to.height),
          axis(dims.width, from.width, to.width)};
}

namespace {

// Continuous input index of output voxel center i.
double source_coordinate(int i, double s_out, double s_in) { return (i + 0.5) * s_out / s_in - 0.5; }

struct LinearTap {
  int lo, hi;
  double frac;
};

LinearTap linear_tap(double c, int n) {
  c = std::clamp(c, 0.0, static_cast<double>(n - 1));
  const int lo = static_cast<int>(std::floor(c));
  const int hi = std::min(lo + 1, n - 1);
  return {lo, hi, c - lo};
}

}  // namespace

Volume resample_trilinear(const Volume& vol, const Spacing& target) {
  const Dims in = vol.dims();
  const Dims out = resampled_dims(in, vol.spacing(), target);
  const Spacing& s = vol.spacing();

  std::vector<LinearTap> tz(out.depth), ty(out.height), tx(out.width);
  for (int i = 0; i < out.depth; ++i) tz[i] = linear_tap(source_coordinate(i, target.depth, s.depth), in.depth);
  for (int i = 0; i < out.height; ++i) ty[i] = linear_tap(source_coordinate(i, target.height, s.height), in.height);
  for (int i = 0; i < out.width; ++i) tx[i] = linear_tap(source_coordinate(i, target.width, s.width), in.width);

  Volume res(out, target);
  for (int z = 0; z < out.depth; ++z) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const auto& a = tz[z];
        const auto& b = ty[y];
        const auto& c = tx[x];
        auto lerp_x = [&](int zz, int yy) {
          return (1.0 - c.frac) * vol(zz, yy, c.lo) + c.frac * vol(zz, yy, c.hi);
        };
        auto lerp_xy = [&](int zz) {
          return (1.0 - b.frac) * lerp_x(zz, b.lo) + b.frac * lerp_x(zz, b.hi);
        };
        res(z, y, x) = static_cast<float>((1.0 - a.frac) * lerp_xy(a.lo) + a.frac * lerp_xy(a.hi));
      }
    }
  }
  return res;
}

Mask resample_mask_nearest(const Mask& mask, const Spacing& target) {
  const Dims in = mask.dims();
  const Dims out = resampled_dims(in, mask.spacing(), target);
  const Spacing& s = mask.spacing();
  auto nearest = [](int i, double s_out, double s_in, int n) {
    // floor of the physical position in input voxel units = voxel whose cell
    // contains the sample; ties on a cell face go to the higher index
    const int k = static_cast<int>(std::floor((i + 0.5) * s_out / s_in));
    return std::clamp(k, 0, n - 1);
  };
  std::vector<int> iz(out.depth), iy(out.height), ix(out.width);
  for (int i = 0; i < out.depth; ++i) iz[i] = nearest(i, target.depth, s.depth, in.depth);
  for (int i = 0; i < out.height; ++i) iy[i] = nearest(i, target.height, s.height, in.height);
  for (int i = 0; i < out.width; ++i) ix[i] = nearest(i, target.width, s.width, in.width);

  Mask res(out, target);
  for (int z = 0; z < out.depth; ++z)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) res(z, y, x) = mask(iz[z], iy[y], ix[x]);
  return res;
}

MomentStats moments(const Volume& vol) {
  double sum = 0.0;
  for (float v : vol.values()) sum += v;
  const double mean = sum / static_cast<double>(vol.size());
  double sq = 0.0;
  for (float v : vol.values()) {
    const double d = v - mean;
    sq += d * d;
  }
  return {mean, std::sqrt(sq / static_cast<double>(vol.size()))};
}

Volume znormalize(const Volume& vol) {
  if (vol.size() < 2) throw std::invalid_argument("znormalize: need at least 2 voxels");
  const MomentStats m = moments(vol);
  if (m.stddev < 1e-12) {
    throw std::domain_error("znormalize: degenerate variance (stddev " + std::to_string(m.stddev) + ")");
  }
  Volume out(vol.dims(), vol.spacing());
  for (std::size_t i = 0; i < vol.size(); ++i) {
    out[i] = static_cast<float>((vol[i] - m.mean) / m.stddev);
  }
  return out;
}

}  // namespace bowda
