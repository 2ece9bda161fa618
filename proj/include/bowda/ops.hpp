#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bowda/tape.hpp"
#include "bowda/tensor.hpp"

namespace bowda {

enum class Mode { train, eval };

/// Cubic kernel, isotropic stride and zero padding.
struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  static ConvGeometry same(int kernel) { return {kernel, 1, kernel / 2}; }
};

/// Spatial output extent of a convolution along one axis; throws when the
/// kernel does not fit.
int conv_output_extent(int in, const ConvGeometry& g);

namespace kernels {

// Raw (untaped) convolution primitives. Kernel layout (out, in, k, k, k).

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         const ConvGeometry& g);

/// Gradient with respect to the conv input, i.e. the adjoint map applied to
/// `dy`. `input_shape` fixes the (otherwise ambiguous) input extent.
template <typename T>
Tensor<T> conv3d_backward_input(const Tensor<T>& dy, const Tensor<T>& weight,
                                const Shape& input_shape, const ConvGeometry& g);

/// Accumulates d/d weight (and d/d bias when given) into the output buffers.
template <typename T>
void conv3d_backward_weight(const Tensor<T>& x, const Tensor<T>& dy, const ConvGeometry& g,
                            Tensor<T>& dweight, Tensor<T>* dbias);

}  // namespace kernels

/// Cross-correlation. weight: (out, in, k, k, k); bias: (1, out, 1, 1, 1) or none.
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, const ConvGeometry& g);

/// Adjoint of conv3d with the same weight tensor layout, read as
/// (in_t, out_t, k, k, k). `out_spatial` is the (d, h, w) extent of the result;
/// it must map back to x's extent under the forward geometry.
template <typename T>
Var<T> conv_transpose3d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias,
                        const ConvGeometry& g, Shape out_spatial);

/// Convenience: non-overlapping upsampling by `stride` (kernel = stride).
template <typename T>
Var<T> upsample_transpose3d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, int stride);

/// Mean over non-overlapping windows (window == stride).
template <typename T>
Var<T> avg_pool3d(Var<T> x, int window);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> leaky_relu(Var<T> x, double slope);
template <typename T>
Var<T> sigmoid(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Concatenation along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// Concatenation along the batch axis.
template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& parts);

/// Per-channel statistics over (batch, depth, height, width). In train mode the
/// batch statistics normalize the input and, when `update_stats` is set, are
/// blended into the running buffers with `momentum` (unbiased variance). Eval
/// mode uses the running buffers.
struct BatchNormOptions {
  Mode mode = Mode::train;
  double momentum = 0.1;
  double epsilon = 1e-5;
  bool update_stats = true;
};

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> scale, Var<T> shift, Parameter<T>& running_mean,
                  Parameter<T>& running_var, const BatchNormOptions& opt);

/// Inverted dropout. The keep mask is a pure function of (seed, element index).
template <typename T>
Var<T> dropout(Var<T> x, double rate, std::uint64_t seed, Mode mode);

/// Keep/drop decision used by dropout, exposed for tests.
bool dropout_keep(std::uint64_t seed, std::size_t index, double rate);

}  // namespace bowda
