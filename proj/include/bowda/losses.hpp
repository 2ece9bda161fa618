#pragma once

#include <vector>

#include "bowda/boundary.hpp"
#include "bowda/image.hpp"

namespace bowda {

struct LossConfig {
  double alpha = 1.0;     // boundary weight in the transfer loss
  double beta = 0.1;      // distance-loss weight
  double epsilon = 1e-7;  // probability clamp before logs
  double threshold = 0.5; // binarization of predictions for the boundary set

  void validate() const;
};

/// Scalar loss value plus one gradient per differentiable input, in the order
/// documented by each loss.
template <typename T>
struct LossValue {
  double value = 0.0;
  std::vector<Image<T>> grads;
};

/// Mean binary cross entropy. grads = {d/d pred}; zero where pred is clamped.
template <typename T>
LossValue<T> cross_entropy(const Image<T>& pred, const Mask& target, const LossConfig& cfg);

/// beta * sum over the boundary B of (pred >= threshold) of pred(p) * dmap(p),
/// divided by the voxel count like the other loss terms so beta does not
/// depend on the crop size. B is treated as constant. grads = {d/d pred}.
template <typename T>
LossValue<T> dist_loss(const Image<T>& pred, const DistanceMap& dmap, const LossConfig& cfg);

/// Boundary-weighted segmentation loss: dist_loss + cross_entropy, with the
/// distance map built from `target`. A target without both classes has no
/// boundary distance, so only the cross-entropy term remains.
template <typename T>
LossValue<T> bwsl(const Image<T>& pred, const Mask& target, const LossConfig& cfg);

/// Same with a precomputed distance map.
template <typename T>
LossValue<T> bwsl(const Image<T>& pred, const Mask& target, const DistanceMap& dmap,
                  const LossConfig& cfg);

/// Boundary-weighted transfer loss for the discriminator:
///   -mean[(1 + a W_s) ln D(s)] - mean[(1 + a W_t) ln(1 - D(t))].
/// grads = {d/d d_src, d/d d_tgt}.
template <typename T>
LossValue<T> bwtl_discriminator(const Image<T>& d_src, const Image<T>& d_tgt,
                                const WeightMap& w_src, const WeightMap& w_tgt,
                                const LossConfig& cfg);

/// Non-saturating generator objective -mean[(1 + a W_t) ln D(t)]. grads = {d/d d_tgt}.
template <typename T>
LossValue<T> adversarial_generator_loss(const Image<T>& d_tgt, const WeightMap& w_tgt,
                                        const LossConfig& cfg);

/// seg + adv_weight * adv. Values add; gradients are concatenated (seg's
/// inputs first) with adv's scaled by adv_weight.
template <typename T>
LossValue<T> total_loss(const LossValue<T>& seg, const LossValue<T>& adv, double adv_weight = 1.0);

}  // namespace bowda
