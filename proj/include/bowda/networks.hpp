#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bowda/ops.hpp"
#include "bowda/tape.hpp"

namespace bowda {

/// One densely-connected residual block. `bottleneck` is the width of the 1³
/// conv inside every layer as a multiple of the growth rate.
struct DRBConfig {
  int input_channels = 8;
  int layers = 2;
  int growth = 4;
  double dropout = 0.0;
  int bottleneck = 4;

  void validate() const;
};

struct SNetFlags {
  bool dense_connections = true;
  bool residual_connections = true;
  bool long_connections = true;
  bool normalization = true;
};

struct SNetConfig {
  int input_channels = 1;
  int base_width = 8;
  std::vector<DRBConfig> down;  // three blocks, finest first
  std::vector<DRBConfig> up;    // three blocks, coarsest first
  SNetFlags flags;

  /// Desk-scale network: base width 8, every block 2 layers of growth 4.
  static SNetConfig desk();
  /// Full-size network: base width 32, growth 32, dropout 0.3, block sizes
  /// (4, 8, 16) down and (16, 8, 2) up.
  static SNetConfig paper();
  /// Builds a config with block input widths derived from the wiring.
  static SNetConfig make(int base_width, const std::vector<int>& down_layers, const std::vector<int>& up_layers,
                         int growth, double dropout, const SNetFlags& flags = {});

  /// Channel count entering up-path block i (coarsest first).
  int up_input_channels() const { return flags.long_connections ? 2 * base_width : base_width; }
  void validate() const;
};

struct DiscriminatorConfig {
  std::array<int, 3> widths{8, 8, 8};  // conv blocks on the 1/4, 1/2, 1/1 features
  double leaky_slope = 0.2;
  bool normalization = true;

  void validate() const;
};

/// Named parameters in creation order. Batch-norm running statistics are
/// stored as untrainable entries so checkpoints carry them too.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value, bool trainable = true);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter<T>*> all();
  std::vector<const Parameter<T>*> all() const;
  std::size_t size() const { return params_.size(); }
  /// Number of trainable scalars.
  std::size_t trainable_count() const;
  void zero_grad();
  /// Copies values (not gradients) from a store with identical names/shapes.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Per-forward switches. Dropout seeds are derived from `dropout_seed` and a
/// running call counter, so a forward pass is a pure function of its inputs
/// and this struct.
template <typename T>
struct ForwardContext {
  Tape<T>* tape = nullptr;
  Mode mode = Mode::eval;
  bool track_params = false;      // parameters enter the tape as differentiable leaves
  bool update_running_stats = false;
  std::uint64_t dropout_seed = 0;
  std::uint64_t dropout_calls = 0;
};

/// Shared building blocks; `prefix` names the parameters in the store.
template <typename T>
class Layers {
 public:
  Layers(ParamStore<T>& store, std::uint64_t init_seed) : store_(store), seed_(init_seed) {}

  /// He-uniform kernel (layout out, in, k, k, k) plus an optional zero bias.
  /// Convs feeding only batch-norm skip the bias: its gradient is identically zero.
  void create_conv(const std::string& prefix, int in, int out, int kernel, bool bias = true);
  /// Transposed conv kernel (layout in, out, k, k, k) plus a zero bias.
  void create_tconv(const std::string& prefix, int in, int out, int kernel);
  void create_norm(const std::string& prefix, int channels);

 private:
  void he_uniform(Tensor<T>& w, int fan_in);

  ParamStore<T>& store_;
  std::uint64_t seed_;
  std::uint64_t created_ = 0;
};

template <typename T>
Var<T> conv_layer(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x,
                  const ConvGeometry& g);
template <typename T>
Var<T> tconv_layer(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x, int stride);
template <typename T>
Var<T> norm_layer(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x);

/// Creates the parameters of one DRB under `prefix`.
template <typename T>
void create_drb(Layers<T>& layers, const std::string& prefix, const DRBConfig& cfg, const SNetFlags& flags);

template <typename T>
Var<T> drb_forward(ParamStore<T>& store, ForwardContext<T>& ctx, const std::string& prefix, Var<T> x,
                   const DRBConfig& cfg, const SNetFlags& flags);

template <typename T>
struct SNetOutput {
  Var<T> prob;                       // (N, 1, D, H, W), values in (0, 1)
  std::array<Var<T>, 3> up_features; // 1/4, 1/2, 1/1 resolution
};

template <typename T>
class SNet {
 public:
  SNet(SNetConfig cfg, std::uint64_t init_seed);

  SNetOutput<T> forward(Var<T> x, ForwardContext<T>& ctx);

  const SNetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

 private:
  SNetConfig cfg_;
  ParamStore<T> params_;
};

template <typename T>
class Discriminator {
 public:
  /// `feature_channels` are the channel counts of the three input features.
  Discriminator(DiscriminatorConfig cfg, std::array<int, 3> feature_channels, std::uint64_t init_seed);

  /// Per-voxel probability that the features came from the source domain,
  /// at the resolution of the finest feature.
  Var<T> forward(const std::array<Var<T>, 3>& features, ForwardContext<T>& ctx);

  const DiscriminatorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

 private:
  DiscriminatorConfig cfg_;
  std::array<int, 3> feature_channels_;
  ParamStore<T> params_;
};

/// Channel counts of SNet's up-path outputs, i.e. the discriminator inputs.
std::array<int, 3> snet_feature_channels(const SNetConfig& cfg);

/// Trainable scalar count computed from the config alone (no allocation).
std::size_t snet_parameter_count(const SNetConfig& cfg);

/// Layer table plus totals.
template <typename T>
std::string model_summary(const ParamStore<T>& store, const std::string& title);

}  // namespace bowda
