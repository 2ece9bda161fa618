#include "bowda/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

#include "bowda/parallel.hpp"

namespace bowda {

void CropSpec::validate() const {
  if (size.depth < 1 || size.height < 1 || size.width < 1) {
    throw std::invalid_argument("CropSpec: crop dims must be >= 1, got " + to_string(size));
  }
}

template <typename T>
Image<T> extract_block(const Image<T>& img, const VoxelIndex& origin, const Dims& size) {
  const Dims d = img.dims();
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || origin[a] + size[a] > d[a]) {
      throw std::invalid_argument("extract_block: block " + to_string(size) + " at origin (" +
                                  std::to_string(origin[0]) + ", " + std::to_string(origin[1]) + ", " +
                                  std::to_string(origin[2]) + ") exceeds " + to_string(d));
    }
  }
  Image<T> out(size, img.spacing());
  for (int z = 0; z < size.depth; ++z) {
    for (int y = 0; y < size.height; ++y) {
      const auto src = img.values().begin() + static_cast<std::ptrdiff_t>(img.index(origin[0] + z, origin[1] + y, origin[2]));
      std::copy_n(src, size.width, out.values().begin() + static_cast<std::ptrdiff_t>(out.index(z, y, 0)));
    }
  }
  return out;
}

Mask extract_block(const Mask& m, const VoxelIndex& origin, const Dims& size) {
  Image<std::uint8_t> block = extract_block<std::uint8_t>(m, origin, size);
  return Mask(block.dims(), block.spacing(), std::move(block.values()));
}

Crop random_crop(const Volume& image, const Mask& label, const CropSpec& spec, Rng& rng) {
  spec.validate();
  require_same_dims(image, label, "random_crop");
  const Dims d = image.dims();
  for (int a = 0; a < 3; ++a) {
    if (spec.size[a] > d[a]) {
      throw std::invalid_argument("random_crop: crop " + to_string(spec.size) + " larger than volume " + to_string(d));
    }
  }
  Crop c;
  for (int a = 0; a < 3; ++a) c.origin[a] = rng.uniform_int(0, d[a] - spec.size[a]);
  c.image = extract_block(image, c.origin, spec.size);
  c.label = extract_block(label, c.origin, spec.size);
  return c;
}

AugmentDraw sample_augment(Rng& rng) {
  AugmentDraw draw;
  draw.rotations = rng.uniform_int(0, 3);
  for (auto& f : draw.flips) f = rng.coin();
  return draw;
}

namespace {

template <typename T>
Image<T> flip(const Image<T>& img, int axis) {
  Image<T> out(img.dims(), img.spacing());
  const Dims d = img.dims();
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        const int sz = axis == 0 ? d.depth - 1 - z : z;
        const int sy = axis == 1 ? d.height - 1 - y : y;
        const int sx = axis == 2 ? d.width - 1 - x : x;
        out(z, y, x) = img(sz, sy, sx);
      }
  return out;
}

// One quarter turn in the (height, width) plane: out(z, y, x) = in(z, H-1-x, y).
template <typename T>
Image<T> rotate_quarter(const Image<T>& img) {
  const Dims d = img.dims();
  const Spacing s = img.spacing();
  Image<T> out(Dims{d.depth, d.width, d.height}, Spacing{s.depth, s.width, s.height});
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.width; ++y)
      for (int x = 0; x < d.height; ++x) out(z, y, x) = img(z, d.height - 1 - x, y);
  return out;
}

template <typename T>
Image<T> rotate(Image<T> img, int quarter_turns) {
  for (int i = 0; i < ((quarter_turns % 4) + 4) % 4; ++i) img = rotate_quarter(img);
  return img;
}

Mask as_mask(Image<std::uint8_t> img) {
  Dims d = img.dims();
  Spacing s = img.spacing();
  return Mask(d, s, std::move(img.values()));
}

}  // namespace

template <typename T>
Image<T> apply_augment(const Image<T>& img, const AugmentDraw& draw) {
  Image<T> out = img;
  for (int a = 0; a < 3; ++a) {
    if (draw.flips[a]) out = flip(out, a);
  }
  return rotate(std::move(out), draw.rotations);
}

template <typename T>
Image<T> invert_augment(const Image<T>& img, const AugmentDraw& draw) {
  Image<T> out = rotate(img, 4 - draw.rotations % 4);
  for (int a = 2; a >= 0; --a) {
    if (draw.flips[a]) out = flip(out, a);
  }
  return out;
}

Mask apply_augment(const Mask& m, const AugmentDraw& draw) {
  return as_mask(apply_augment<std::uint8_t>(m, draw));
}

Mask invert_augment(const Mask& m, const AugmentDraw& draw) {
  return as_mask(invert_augment<std::uint8_t>(m, draw));
}

std::pair<Volume, Mask> augment(const Volume& image, const Mask& label, Rng& rng) {
  require_same_dims(image, label, "augment");
  const AugmentDraw draw = sample_augment(rng);
  return {apply_augment(image, draw), apply_augment(label, draw)};
}

WindowSpec WindowSpec::half_overlap(const Dims& window) {
  return {window, Dims{std::max(1, window.depth / 2), std::max(1, window.height / 2), std::max(1, window.width / 2)}};
}

void WindowSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1) throw std::invalid_argument("WindowSpec: window dims must be >= 1");
    if (stride[a] < 1 || stride[a] > window[a]) {
      throw std::invalid_argument("WindowSpec: stride must satisfy 0 < stride <= window, got stride " +
                                  to_string(stride) + " for window " + to_string(window));
    }
  }
}

std::vector<int> window_origins(int extent, int window, int stride) {
  if (window > extent) throw std::invalid_argument("window_origins: window larger than extent");
  std::vector<int> out;
  for (int o = 0; o + window < extent; o += stride) out.push_back(o);
  const int last = extent - window;
  if (out.empty() || out.back() != last) out.push_back(last);
  return out;
}

Image<int> coverage_counts(const Dims& dims, const WindowSpec& spec) {
  spec.validate();
  Image<int> counts(dims, Spacing{1, 1, 1}, 0);
  const auto oz = window_origins(dims.depth, spec.window.depth, spec.stride.depth);
  const auto oy = window_origins(dims.height, spec.window.height, spec.stride.height);
  const auto ox = window_origins(dims.width, spec.window.width, spec.stride.width);
  for (int z0 : oz)
    for (int y0 : oy)
      for (int x0 : ox)
        for (int z = 0; z < spec.window.depth; ++z)
          for (int y = 0; y < spec.window.height; ++y)
            for (int x = 0; x < spec.window.width; ++x) ++counts(z0 + z, y0 + y, x0 + x);
  return counts;
}

Volume pad_to_at_least(const Volume& vol, const Dims& min_dims, VoxelIndex& offset) {
  const Dims d = vol.dims();
  Dims p = d;
  for (int a = 0; a < 3; ++a) {
    p[a] = std::max(d[a], min_dims[a]);
    offset[a] = (p[a] - d[a]) / 2;
  }
  if (p == d) return vol;
  Volume out(p, vol.spacing());
  for (int z = 0; z < p.depth; ++z)
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x) {
        out(z, y, x) = vol(std::clamp(z - offset[0], 0, d.depth - 1), std::clamp(y - offset[1], 0, d.height - 1),
                           std::clamp(x - offset[2], 0, d.width - 1));
      }
  return out;
}

Volume sliding_window_infer(const Predictor& predict, const Volume& vol, const WindowSpec& spec) {
  spec.validate();
  VoxelIndex offset{0, 0, 0};
  const Volume padded = pad_to_at_least(vol, spec.window, offset);
  const Dims pd = padded.dims();
  const auto oz = window_origins(pd.depth, spec.window.depth, spec.stride.depth);
  const auto oy = window_origins(pd.height, spec.window.height, spec.stride.height);
  const auto ox = window_origins(pd.width, spec.window.width, spec.stride.width);
  std::vector<VoxelIndex> origins;
  for (int z0 : oz)
    for (int y0 : oy)
      for (int x0 : ox) origins.push_back({z0, y0, x0});

  std::vector<Volume> predictions(origins.size());
  parallel_for(origins.size(), [&](std::size_t i) {
    Volume p = predict(extract_block(padded, origins[i], spec.window));
    if (!(p.dims() == spec.window)) {
      throw std::runtime_error("sliding_window_infer: predictor returned " + to_string(p.dims()) + " for window " +
                               to_string(spec.window));
    }
    predictions[i] = std::move(p);
  });

  const Image<int> counts = coverage_counts(pd, spec);
  std::vector<double> sum(pd.count(), 0.0);
  for (std::size_t i = 0; i < origins.size(); ++i) {
    const auto& o = origins[i];
    const Volume& p = predictions[i];
    for (int z = 0; z < spec.window.depth; ++z)
      for (int y = 0; y < spec.window.height; ++y)
        for (int x = 0; x < spec.window.width; ++x) sum[padded.index(o[0] + z, o[1] + y, o[2] + x)] += p(z, y, x);
  }
  Volume out(vol.dims(), vol.spacing());
  const Dims d = vol.dims();
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        const std::size_t i = padded.index(z + offset[0], y + offset[1], x + offset[2]);
        out(z, y, x) = static_cast<float>(sum[i] / counts[i]);
      }
  return out;
}

template Image<float> extract_block(const Image<float>&, const VoxelIndex&, const Dims&);
template Image<std::uint8_t> extract_block(const Image<std::uint8_t>&, const VoxelIndex&, const Dims&);
template Image<float> apply_augment(const Image<float>&, const AugmentDraw&);
template Image<float> invert_augment(const Image<float>&, const AugmentDraw&);

}  // namespace bowda
