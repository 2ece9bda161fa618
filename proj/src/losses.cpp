#include "bowda/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace bowda {

void LossConfig::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("LossConfig: alpha must be >= 0");
  if (!(beta >= 0.0)) throw std::invalid_argument("LossConfig: beta must be >= 0");
  if (!(epsilon > 0.0 && epsilon < 0.5)) {
    throw std::invalid_argument("LossConfig: epsilon must be in (0, 0.5)");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("LossConfig: threshold must be in (0, 1)");
  }
}

namespace {

struct Clamped {
  double p;
  bool clamped;
};

Clamped clamp_prob(double p, double eps) {
  if (p < eps) return {eps, true};
  if (p > 1.0 - eps) return {1.0 - eps, true};
  return {p, false};
}

// -mean[(1 + a w) ln q] where q = p (toward_one) or 1 - p; gradient w.r.t. p.
template <typename T>
double weighted_log_term(const Image<T>& p, const WeightMap* w, double alpha, double eps,
                         bool toward_one, Image<T>& grad) {
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto c = clamp_prob(static_cast<double>(p[i]), eps);
    const double weight = 1.0 + (w ? alpha * (*w)[i] : 0.0);
    const double q = toward_one ? c.p : 1.0 - c.p;
    acc += weight * std::log(q);
    if (c.clamped) {
      grad[i] = T(0);
    } else {
      grad[i] = static_cast<T>(toward_one ? -weight / (q * n) : weight / (q * n));
    }
  }
  return -acc / n;
}

}  // namespace

template <typename T>
LossValue<T> cross_entropy(const Image<T>& pred, const Mask& target, const LossConfig& cfg) {
  require_same_dims(pred, target, "cross_entropy");
  const double n = static_cast<double>(pred.size());
  Image<T> grad(pred.dims(), pred.spacing());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto c = clamp_prob(static_cast<double>(pred[i]), cfg.epsilon);
    const double y = target[i];
    acc += y * std::log(c.p) + (1.0 - y) * std::log(1.0 - c.p);
    grad[i] = c.clamped ? T(0) : static_cast<T>((c.p - y) / (c.p * (1.0 - c.p)) / n);
  }
  LossValue<T> out;
  out.value = -acc / n;
  out.grads.push_back(std::move(grad));
  return out;
}

template <typename T>
LossValue<T> dist_loss(const Image<T>& pred, const DistanceMap& dmap, const LossConfig& cfg) {
  require_same_dims(pred, dmap, "dist_loss");
  Image<T> grad(pred.dims(), pred.spacing());
  const double n = static_cast<double>(pred.size());
  double acc = 0.0;
  for (const auto& p : morphological_boundary(Mask::threshold(pred, cfg.threshold))) {
    const std::size_t i = pred.index(p[0], p[1], p[2]);
    acc += static_cast<double>(pred[i]) * dmap[i];
    grad[i] = static_cast<T>(cfg.beta * dmap[i] / n);
  }
  LossValue<T> out;
  out.value = cfg.beta * acc / n;
  out.grads.push_back(std::move(grad));
  return out;
}

template <typename T>
LossValue<T> bwsl(const Image<T>& pred, const Mask& target, const DistanceMap& dmap,
                  const LossConfig& cfg) {
  auto ce = cross_entropy(pred, target, cfg);
  const auto dl = dist_loss(pred, dmap, cfg);
  ce.value += dl.value;
  auto& g = ce.grads[0];
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += dl.grads[0][i];
  return ce;
}

template <typename T>
LossValue<T> bwsl(const Image<T>& pred, const Mask& target, const LossConfig& cfg) {
  if (target.empty() || target.full()) return cross_entropy(pred, target, cfg);
  return bwsl(pred, target, distance_map(target), cfg);
}

template <typename T>
LossValue<T> bwtl_discriminator(const Image<T>& d_src, const Image<T>& d_tgt,
                                const WeightMap& w_src, const WeightMap& w_tgt,
                                const LossConfig& cfg) {
  require_same_dims(d_src, w_src, "bwtl_discriminator (source)");
  require_same_dims(d_tgt, w_tgt, "bwtl_discriminator (target)");
  LossValue<T> out;
  Image<T> gs(d_src.dims(), d_src.spacing());
  Image<T> gt(d_tgt.dims(), d_tgt.spacing());
  out.value = weighted_log_term(d_src, &w_src, cfg.alpha, cfg.epsilon, true, gs) +
              weighted_log_term(d_tgt, &w_tgt, cfg.alpha, cfg.epsilon, false, gt);
  out.grads.push_back(std::move(gs));
  out.grads.push_back(std::move(gt));
  return out;
}

template <typename T>
LossValue<T> adversarial_generator_loss(const Image<T>& d_tgt, const WeightMap& w_tgt,
                                        const LossConfig& cfg) {
  require_same_dims(d_tgt, w_tgt, "adversarial_generator_loss");
  LossValue<T> out;
  Image<T> g(d_tgt.dims(), d_tgt.spacing());
  out.value = weighted_log_term(d_tgt, &w_tgt, cfg.alpha, cfg.epsilon, true, g);
  out.grads.push_back(std::move(g));
  return out;
}

template <typename T>
LossValue<T> total_loss(const LossValue<T>& seg, const LossValue<T>& adv, double adv_weight) {
  LossValue<T> out = seg;
  out.value += adv_weight * adv.value;
  for (auto g : adv.grads) {
    for (auto& v : g.values()) v = static_cast<T>(adv_weight * v);
    out.grads.push_back(std::move(g));
  }
  return out;
}

#define BOWDA_INSTANTIATE_LOSSES(T)                                                              \
  template LossValue<T> cross_entropy(const Image<T>&, const Mask&, const LossConfig&);          \
  template LossValue<T> dist_loss(const Image<T>&, const DistanceMap&, const LossConfig&);       \
  template LossValue<T> bwsl(const Image<T>&, const Mask&, const LossConfig&);                   \
  template LossValue<T> bwsl(const Image<T>&, const Mask&, const DistanceMap&, const LossConfig&); \
  template LossValue<T> bwtl_discriminator(const Image<T>&, const Image<T>&, const WeightMap&,   \
                                           const WeightMap&, const LossConfig&);                 \
  template LossValue<T> adversarial_generator_loss(const Image<T>&, const WeightMap&,            \
                                                   const LossConfig&);                           \
  template LossValue<T> total_loss(const LossValue<T>&, const LossValue<T>&, double);

BOWDA_INSTANTIATE_LOSSES(float)
BOWDA_INSTANTIATE_LOSSES(double)

}  // namespace bowda
