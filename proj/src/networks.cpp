#include "bowda/networks.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "bowda/rng.hpp"

namespace bowda {

void DRBConfig::validate() const {
  if (input_channels < 1) throw std::invalid_argument("DRBConfig: input channels must be >= 1");
  if (layers < 1) throw std::invalid_argument("DRBConfig: layer count must be >= 1");
  if (growth < 1) throw std::invalid_argument("DRBConfig: growth must be >= 1");
  if (bottleneck < 1) throw std::invalid_argument("DRBConfig: bottleneck factor must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("DRBConfig: dropout must lie in [0, 1)");
}

SNetConfig SNetConfig::make(int base_width, const std::vector<int>& down_layers, const std::vector<int>& up_layers,
                            int growth, double dropout, const SNetFlags& flags) {
  SNetConfig cfg;
  cfg.base_width = base_width;
  cfg.flags = flags;
  for (int l : down_layers) cfg.down.push_back(DRBConfig{base_width, l, growth, dropout, 4});
  for (int l : up_layers) cfg.up.push_back(DRBConfig{cfg.up_input_channels(), l, growth, dropout, 4});
  return cfg;
}

SNetConfig SNetConfig::desk() { return make(8, {2, 2, 2}, {2, 2, 2}, 4, 0.0); }

SNetConfig SNetConfig::paper() { return make(32, {4, 8, 16}, {16, 8, 2}, 32, 0.3); }

void SNetConfig::validate() const {
  if (input_channels < 1) throw std::invalid_argument("SNetConfig: input channels must be >= 1");
  if (base_width < 1) throw std::invalid_argument("SNetConfig: base width must be >= 1");
  if (down.size() != 3 || up.size() != 3) {
    throw std::invalid_argument("SNetConfig: need exactly 3 down and 3 up blocks, got " +
                                std::to_string(down.size()) + " and " + std::to_string(up.size()));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    down[i].validate();
    up[i].validate();
    if (down[i].input_channels != base_width) {
      throw std::invalid_argument("SNetConfig: down block " + std::to_string(i) + " expects " +
                                  std::to_string(down[i].input_channels) + " channels but receives " +
                                  std::to_string(base_width));
    }
    if (up[i].input_channels != up_input_channels()) {
      throw std::invalid_argument("SNetConfig: up block " + std::to_string(i) + " expects " +
                                  std::to_string(up[i].input_channels) + " channels but receives " +
                                  std::to_string(up_input_channels()));
    }
  }
}

void DiscriminatorConfig::validate() const {
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("DiscriminatorConfig: widths must be >= 1");
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) {
    throw std::invalid_argument("DiscriminatorConfig: leaky slope must lie in [0, 1)");
  }
}

// ---------------------------------------------------------------- ParamStore

template <typename T>
Parameter<T>& ParamStore<T>::add(const std::string& name, Tensor<T> value, bool trainable) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  index_[name] = params_.size();
  params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value), trainable));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return *params_[it->second];
}

template <typename T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return *params_[it->second];
}

template <typename T>
std::vector<Parameter<T>*> ParamStore<T>::all() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ParamStore<T>::all() const {
  std::vector<const Parameter<T>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p->trainable) n += p->value.size();
  }
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
void ParamStore<T>::copy_values_from(const ParamStore& other) {
  if (other.params_.size() != params_.size()) {
    throw std::invalid_argument("ParamStore: parameter count mismatch (" + std::to_string(other.params_.size()) +
                                " vs " + std::to_string(params_.size()) + ")");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = *other.params_[i];
    auto& dst = *params_[i];
    if (src.name != dst.name || !(src.value.shape() == dst.value.shape())) {
      throw std::invalid_argument("ParamStore: parameter " + src.name + " does not match " + dst.name);
    }
    dst.value = src.value;
  }
}

// -------------------------------------------------------------------- Layers

template <typename T>
void Layers<T>::he_uniform(Tensor<T>& w, int fan_in) {
  Rng rng(derive_seed(seed_, created_++));
  const double bound = std::sqrt(6.0 / fan_in);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void Layers<T>::create_conv(const std::string& prefix, int in, int out, int kernel, bool bias) {
  Tensor<T> w(Shape{out, in, kernel, kernel, kernel});
  he_uniform(w, in * kernel * kernel * kernel);
  store_.add(prefix + ".weight", std::move(w));
  if (bias) store_.add(prefix + ".bias", Tensor<T>(Shape{1, out, 1, 1, 1}, T(0)));
}

template <typename T>
void Layers<T>::create_tconv(const std::string& prefix, int in, int out, int kernel) {
  Tensor<T> w(Shape{in, out, kernel, kernel, kernel});
  // With kernel == stride every output voxel sees exactly one tap per input channel.
  he_uniform(w, in);
  store_.add(prefix + ".weight", std::move(w));
  store_.add(prefix + ".bias", Tensor<T>(Shape{1, out, 1, 1, 1}, T(0)));
}

template <typename T>
void Layers<T>::create_norm(const std::string& prefix, int channels) {
  const Shape s{1, channels, 1, 1, 1};
  store_.add(prefix + ".scale", Tensor<T>(s, T(1)));
  store_.add(prefix + ".shift", Tensor<T>(s, T(0)));
  store_.add(prefix + ".running_mean", Tensor<T>(s, T(0)), false);
  store_.add(prefix + ".running_var", Tensor<T>(s, T(1)), false);
}

template <typename T>
Var<T> conv_layer(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x,
                  const ConvGeometry& g) {
  Var<T> w = ctx.tape->parameter(store.get(prefix + ".weight"), ctx.track_params);
  std::optional<Var<T>> b;
  if (store.contains(prefix + ".bias")) b = ctx.tape->parameter(store.get(prefix + ".bias"), ctx.track_params);
  return conv3d(x, w, b, g);
}

template <typename T>
Var<T> tconv_layer(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x, int stride) {
  Var<T> w = ctx.tape->parameter(store.get(prefix + ".weight"), ctx.track_params);
  Var<T> b = ctx.tape->parameter(store.get(prefix + ".bias"), ctx.track_params);
  return upsample_transpose3d(x, w, std::optional<Var<T>>(b), stride);
}

template <typename T>
Var<T> norm_layer(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x) {
  Var<T> scale = ctx.tape->parameter(store.get(prefix + ".scale"), ctx.track_params);
  Var<T> shift = ctx.tape->parameter(store.get(prefix + ".shift"), ctx.track_params);
  BatchNormOptions opt;
  opt.mode = ctx.mode;
  opt.update_stats = ctx.update_running_stats;
  return batch_norm(x, scale, shift, store.get(prefix + ".running_mean"), store.get(prefix + ".running_var"), opt);
}

// ----------------------------------------------------------------------- DRB

namespace {

int dense_layer_input(const DRBConfig& cfg, const SNetFlags& flags, int layer) {
  if (flags.dense_connections) return cfg.input_channels + layer * cfg.growth;
  return layer == 0 ? cfg.input_channels : cfg.growth;
}

int transition_input(const DRBConfig& cfg, const SNetFlags& flags) {
  return flags.dense_connections ? cfg.input_channels + cfg.layers * cfg.growth : cfg.growth;
}

std::string layer_prefix(const std::string& prefix, int l) { return prefix + ".layer" + std::to_string(l); }

}  // namespace

template <typename T>
void create_drb(Layers<T>& layers, const std::string& prefix, const DRBConfig& cfg, const SNetFlags& flags) {
  cfg.validate();
  const int mid = cfg.bottleneck * cfg.growth;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(prefix, l);
    const int in = dense_layer_input(cfg, flags, l);
    if (flags.normalization) layers.create_norm(p + ".norm1", in);
    layers.create_conv(p + ".conv1", in, mid, 1, !flags.normalization);
    if (flags.normalization) layers.create_norm(p + ".norm2", mid);
    // Layer outputs reach the rest of the network only through norms.
    layers.create_conv(p + ".conv2", mid, cfg.growth, 3, !flags.normalization);
  }
  const int tin = transition_input(cfg, flags);
  if (flags.normalization) layers.create_norm(prefix + ".transition.norm", tin);
  layers.create_conv(prefix + ".transition.conv", tin, cfg.input_channels, 1);
}

template <typename T>
Var<T> drb_forward(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x,
                   const DRBConfig& cfg, const SNetFlags& flags) {
  if (x.shape().c != cfg.input_channels) {
    throw std::invalid_argument("drb_forward(" + prefix + "): expected " + std::to_string(cfg.input_channels) +
                                " channels, got " + std::to_string(x.shape().c));
  }
  auto bn_relu = [&](const std::string& p, Var<T> v) {
    if (flags.normalization) v = norm_layer(store, ctx, p, v);
    return relu(v);
  };
  std::vector<Var<T>> features{x};
  Var<T> prev = x;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(prefix, l);
    Var<T> in = flags.dense_connections && features.size() > 1 ? concat_channels(features) : prev;
    Var<T> h = conv_layer(store, ctx, p + ".conv1", bn_relu(p + ".norm1", in), ConvGeometry::same(1));
    h = conv_layer(store, ctx, p + ".conv2", bn_relu(p + ".norm2", h), ConvGeometry::same(3));
    h = dropout(h, cfg.dropout, derive_seed(ctx.dropout_seed, ctx.dropout_calls++), ctx.mode);
    features.push_back(h);
    prev = h;
  }
  Var<T> tin = flags.dense_connections ? concat_channels(features) : prev;
  Var<T> out = conv_layer(store, ctx, prefix + ".transition.conv", bn_relu(prefix + ".transition.norm", tin),
                          ConvGeometry::same(1));
  return flags.residual_connections ? add(out, x) : out;
}

// ---------------------------------------------------------------------- SNet

namespace {

std::string down_name(int i) { return "down" + std::to_string(i); }
std::string up_name(int i) { return "up" + std::to_string(i); }

template <typename T>
void create_snet(Layers<T>& layers, const SNetConfig& cfg) {
  const int c0 = cfg.base_width;
  layers.create_conv("stem.conv", cfg.input_channels, c0, 3, !cfg.flags.normalization);
  if (cfg.flags.normalization) layers.create_norm("stem.norm", c0);
  for (int i = 0; i < 3; ++i) create_drb(layers, down_name(i), cfg.down[i], cfg.flags);
  for (int i = 0; i < 3; ++i) {
    layers.create_tconv(up_name(i) + ".upsample", i == 0 ? c0 : cfg.up_input_channels(), c0, 2);
    create_drb(layers, up_name(i), cfg.up[i], cfg.flags);
  }
  layers.create_conv("head.conv", cfg.up_input_channels(), 1, 1);
}

}  // namespace

template <typename T>
SNet<T>::SNet(SNetConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Layers<T> layers(params_, init_seed);
  create_snet(layers, cfg_);
}

template <typename T>
SNetOutput<T> SNet<T>::forward(Var<T> x, ForwardContext<T>& ctx) {
  const Shape& s = x.shape();
  if (s.c != cfg_.input_channels) {
    throw std::invalid_argument("SNet: expected " + std::to_string(cfg_.input_channels) + " input channels, got " +
                                std::to_string(s.c));
  }
  if (s.d % 8 || s.h % 8 || s.w % 8) {
    throw std::invalid_argument("SNet: spatial extent " + to_string(s) + " must be divisible by 8");
  }
  Var<T> h = conv_layer(params_, ctx, "stem.conv", x, ConvGeometry::same(3));
  if (cfg_.flags.normalization) h = norm_layer(params_, ctx, "stem.norm", h);
  h = relu(h);
  std::array<Var<T>, 3> skips;
  for (int i = 0; i < 3; ++i) {
    h = drb_forward(params_, ctx, down_name(i), h, cfg_.down[i], cfg_.flags);
    skips[i] = h;
    h = avg_pool3d(h, 2);
  }
  SNetOutput<T> out;
  for (int i = 0; i < 3; ++i) {
    h = tconv_layer(params_, ctx, up_name(i) + ".upsample", h, 2);
    if (cfg_.flags.long_connections) h = concat_channels(std::vector<Var<T>>{skips[2 - i], h});
    h = drb_forward(params_, ctx, up_name(i), h, cfg_.up[i], cfg_.flags);
    out.up_features[i] = h;
  }
  out.prob = sigmoid(conv_layer(params_, ctx, "head.conv", h, ConvGeometry::same(1)));
  return out;
}

std::array<int, 3> snet_feature_channels(const SNetConfig& cfg) {
  const int c = cfg.up_input_channels();
  return {c, c, c};
}

std::size_t snet_parameter_count(const SNetConfig& cfg) {
  cfg.validate();
  // Mirrors create_snet; kept in sync by a unit test against an allocated network.
  const std::size_t with_bias = cfg.flags.normalization ? 0 : 1;
  const auto conv = [](int in, int out, int k, std::size_t bias = 1) {
    return static_cast<std::size_t>(out) * in * k * k * k + bias * out;
  };
  const auto norm = [&](int c) { return cfg.flags.normalization ? static_cast<std::size_t>(2 * c) : 0; };
  const auto drb = [&](const DRBConfig& d) {
    std::size_t n = 0;
    const int mid = d.bottleneck * d.growth;
    for (int l = 0; l < d.layers; ++l) {
      const int in = dense_layer_input(d, cfg.flags, l);
      n += norm(in) + conv(in, mid, 1, with_bias) + norm(mid) + conv(mid, d.growth, 3, with_bias);
    }
    const int tin = transition_input(d, cfg.flags);
    return n + norm(tin) + conv(tin, d.input_channels, 1);
  };
  const int c0 = cfg.base_width;
  std::size_t n = conv(cfg.input_channels, c0, 3, with_bias) + norm(c0);
  for (int i = 0; i < 3; ++i) n += drb(cfg.down[i]);
  for (int i = 0; i < 3; ++i) n += conv(i == 0 ? c0 : cfg.up_input_channels(), c0, 2) + drb(cfg.up[i]);
  return n + conv(cfg.up_input_channels(), 1, 1);
}

// ------------------------------------------------------------- Discriminator

template <typename T>
Discriminator<T>::Discriminator(DiscriminatorConfig cfg, std::array<int, 3> feature_channels,
                                std::uint64_t init_seed)
    : cfg_(cfg), feature_channels_(feature_channels) {
  cfg_.validate();
  Layers<T> layers(params_, init_seed);
  const auto& w = cfg_.widths;
  for (int i = 0; i < 3; ++i) {
    const std::string p = "block" + std::to_string(i);
    layers.create_conv(p + ".conv", feature_channels_[i], w[i], 3, !cfg_.normalization);
    if (cfg_.normalization) layers.create_norm(p + ".norm", w[i]);
  }
  layers.create_tconv("upsample0", w[0], w[0], 2);
  layers.create_tconv("upsample1", w[0] + w[1], w[1], 2);
  layers.create_conv("head.conv", w[1] + w[2], 1, 1);
}

template <typename T>
Var<T> Discriminator<T>::forward(const std::array<Var<T>, 3>& f, ForwardContext<T>& ctx) {
  for (int i = 0; i < 3; ++i) {
    if (f[i].shape().c != feature_channels_[i]) {
      throw std::invalid_argument("Discriminator: feature " + std::to_string(i) + " has " +
                                  std::to_string(f[i].shape().c) + " channels, expected " +
                                  std::to_string(feature_channels_[i]));
    }
  }
  for (int i = 0; i < 2; ++i) {
    const Shape& a = f[i].shape();
    const Shape& b = f[i + 1].shape();
    if (a.n != b.n || 2 * a.d != b.d || 2 * a.h != b.h || 2 * a.w != b.w) {
      throw std::invalid_argument("Discriminator: feature resolutions " + to_string(a) + " and " + to_string(b) +
                                  " are not one factor of two apart");
    }
  }
  auto block = [&](int i) {
    const std::string p = "block" + std::to_string(i);
    Var<T> h = conv_layer(params_, ctx, p + ".conv", f[i], ConvGeometry::same(3));
    if (cfg_.normalization) h = norm_layer(params_, ctx, p + ".norm", h);
    return leaky_relu(h, cfg_.leaky_slope);
  };
  Var<T> h = tconv_layer(params_, ctx, "upsample0", block(0), 2);
  h = tconv_layer(params_, ctx, "upsample1", concat_channels(std::vector<Var<T>>{h, block(1)}), 2);
  h = concat_channels(std::vector<Var<T>>{h, block(2)});
  return sigmoid(conv_layer(params_, ctx, "head.conv", h, ConvGeometry::same(1)));
}

// ------------------------------------------------------------------- summary

template <typename T>
std::string model_summary(const ParamStore<T>& store, const std::string& title) {
  std::ostringstream os;
  os << title << "\n";
  os << std::left << std::setw(40) << "parameter" << std::setw(24) << "shape" << std::right << std::setw(10)
     << "count" << "  kind\n";
  std::size_t trainable = 0, buffers = 0;
  for (const auto* p : store.all()) {
    const Shape& s = p->value.shape();
    std::ostringstream shape;
    shape << s.n << "x" << s.c << "x" << s.d << "x" << s.h << "x" << s.w;
    os << std::left << std::setw(40) << p->name << std::setw(24) << shape.str() << std::right << std::setw(10)
       << p->value.size() << "  " << (p->trainable ? "weight" : "buffer") << "\n";
    (p->trainable ? trainable : buffers) += p->value.size();
  }
  os << "trainable parameters: " << trainable << "\n";
  os << "buffer values: " << buffers << "\n";
  return os.str();
}

#define BOWDA_INSTANTIATE_NETWORKS(T)                                                                      \
  template class ParamStore<T>;                                                                            \
  template class Layers<T>;                                                                                \
  template class SNet<T>;                                                                                  \
  template class Discriminator<T>;                                                                         \
  template Var<T> conv_layer(ParamStore<T>&, ForwardContext<T>&, const std::string&, Var<T>,               \
                             const ConvGeometry&);                                                         \
  template Var<T> tconv_layer(ParamStore<T>&, ForwardContext<T>&, const std::string&, Var<T>, int);        \
  template Var<T> norm_layer(ParamStore<T>&, ForwardContext<T>&, const std::string&, Var<T>);              \
  template void create_drb(Layers<T>&, const std::string&, const DRBConfig&, const SNetFlags&);            \
  template Var<T> drb_forward(ParamStore<T>&, ForwardContext<T>&, const std::string&, Var<T>,              \
                              const DRBConfig&, const SNetFlags&);                                         \
  template std::string model_summary(const ParamStore<T>&, const std::string&);

BOWDA_INSTANTIATE_NETWORKS(float)
BOWDA_INSTANTIATE_NETWORKS(double)

}  // namespace bowda
