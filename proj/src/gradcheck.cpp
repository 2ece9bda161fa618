#include "bowda/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bowda/losses.hpp"
#include "bowda/networks.hpp"
#include "bowda/ops.hpp"
#include "bowda/rng.hpp"

namespace bowda {

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

bool GradcheckReport::passed() const {
  std::size_t checked = 0, skipped = 0;
  for (const auto& g : groups) {
    if (!(g.max_rel_error < tolerance) || g.checked == 0) return false;
    checked += g.checked;
    skipped += g.skipped;
  }
  return checked > 0 && static_cast<double>(skipped) <= max_skipped_fraction * static_cast<double>(checked + skipped);
}

GradcheckReport gradcheck(const GradcheckProblem& problem, const GradcheckOptions& opt) {
  GradcheckReport report;
  report.name = problem.name;
  report.tolerance = opt.tolerance;
  report.max_skipped_fraction = opt.max_skipped_fraction;

  for (auto* p : problem.groups) p->zero_grad();
  problem.objective(true);
  std::vector<Tensor<double>> analytic;
  for (auto* p : problem.groups) analytic.push_back(p->grad);

  const auto central = [&](double& slot, double h) {
    const double orig = slot;
    slot = orig + h;
    const double fp = problem.objective(false);
    slot = orig - h;
    const double fm = problem.objective(false);
    slot = orig;
    return (fp - fm) / (2.0 * h);
  };

  for (std::size_t gi = 0; gi < problem.groups.size(); ++gi) {
    Parameter<double>& p = *problem.groups[gi];
    const Tensor<double>& a = analytic[gi];
    GradcheckGroup group;
    group.name = p.name;
    double scale = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) scale = std::max(scale, std::abs(a[i]));
    const double floor = std::max(opt.relative_floor * scale, 1e-12);

    // Visit coordinates in a seeded random order; a coordinate sitting on a
    // kink is replaced by the next one in that order.
    std::vector<std::size_t> order(p.value.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(opt.seed, gi));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t wanted = std::min(opt.coords_per_group, order.size());
    for (std::size_t i : order) {
      if (group.checked == wanted || group.skipped >= 4 * wanted) break;
      const double n1 = central(p.value[i], opt.step);
      const double n2 = central(p.value[i], opt.step / 2);
      if (std::abs(n1 - n2) > opt.kink_threshold * std::max({std::abs(n1), std::abs(n2), floor})) {
        ++group.skipped;
        continue;
      }
      const double rel = std::abs(a[i] - n1) / std::max({std::abs(a[i]), std::abs(n1), floor});
      group.max_rel_error = std::max(group.max_rel_error, rel);
      ++group.checked;
    }
    report.groups.push_back(group);
  }
  return report;
}

std::function<double(bool)> projected_objective(std::function<Var<double>(Tape<double>&)> build,
                                                std::uint64_t seed) {
  auto r = std::make_shared<Tensor<double>>();
  return [build = std::move(build), seed, r](bool with_grad) {
    Tape<double> tape;
    Var<double> y = build(tape);
    if (r->empty()) {
      *r = Tensor<double>(y.shape());
      Rng rng(seed);
      for (std::size_t i = 0; i < r->size(); ++i) (*r)[i] = rng.normal();
    }
    if (!(r->shape() == y.shape())) throw std::logic_error("projected_objective: output shape changed");
    double f = 0.0;
    const Tensor<double>& yv = y.value();
    for (std::size_t i = 0; i < yv.size(); ++i) f += (*r)[i] * yv[i];
    if (with_grad) tape.backward(y, *r);
    return f;
  };
}

namespace {

// Owns the parameters of the problems built below.
class Fixture {
 public:
  explicit Fixture(std::uint64_t seed) : rng_(seed) {}

  Parameter<double>& normal(const std::string& name, Shape s, double sd = 1.0) {
    Tensor<double> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = sd * rng_.normal();
    return keep(name, std::move(t));
  }
  /// Normal values pushed at least `gap` away from zero (keeps rectifiers off their kink).
  Parameter<double>& away_from_zero(const std::string& name, Shape s, double gap) {
    Tensor<double> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double v = rng_.normal();
      t[i] = v >= 0 ? v + gap : v - gap;
    }
    return keep(name, std::move(t));
  }
  Parameter<double>& uniform(const std::string& name, Shape s, double lo, double hi) {
    Tensor<double> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng_.uniform(lo, hi);
    return keep(name, std::move(t));
  }
  Parameter<double>& keep(const std::string& name, Tensor<double> t) {
    params_.emplace_back(name, std::move(t));
    return params_.back();
  }
  Rng& rng() { return rng_; }
  std::uint64_t next_seed() { return rng_.next(); }

 private:
  Rng rng_;
  std::deque<Parameter<double>> params_;
};

std::vector<Parameter<double>*> trainable(ParamStore<double>& store) {
  std::vector<Parameter<double>*> out;
  for (auto* p : store.all()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

Image<double> as_image(const Tensor<double>& t, const Spacing& spacing) {
  const Shape& s = t.shape();
  return Image<double>(Dims{s.d, s.h, s.w}, spacing, t.values());
}

void add_into(Tensor<double>& dst, const Image<double>& g) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

Mask random_blob_mask(Rng& rng, Dims dims, Spacing spacing) {
  // Ellipsoid with random center so the mask has both classes and a boundary.
  Mask m(dims, spacing);
  const double cz = rng.uniform(1.0, dims.depth - 2.0), cy = rng.uniform(1.0, dims.height - 2.0),
               cx = rng.uniform(1.0, dims.width - 2.0);
  const double r = rng.uniform(1.2, 2.5);
  for (int z = 0; z < dims.depth; ++z)
    for (int y = 0; y < dims.height; ++y)
      for (int x = 0; x < dims.width; ++x) {
        const double d = (z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx);
        m(z, y, x) = d <= r * r ? 1 : 0;
      }
  if (m.empty()) m(static_cast<int>(cz), static_cast<int>(cy), static_cast<int>(cx)) = 1;
  return m;
}

// Probabilities kept away from the binarization threshold so the predicted
// boundary set is locally constant.
Parameter<double>& probability_map(Fixture& fx, const std::string& name, Shape s, double threshold) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double v = fx.rng().uniform(0.03, 0.97);
    if (std::abs(v - threshold) < 0.02) v = threshold + (v < threshold ? -0.02 : 0.02);
    t[i] = v;
  }
  return fx.keep(name, std::move(t));
}

}  // namespace

std::vector<GradcheckReport> run_standard_gradchecks(std::uint64_t seed, const GradcheckOptions& base) {
  std::vector<GradcheckReport> reports;
  Fixture fx(seed);
  GradcheckOptions opt = base;
  opt.seed = derive_seed(seed, 0x6763);

  const auto check = [&](const std::string& name, std::vector<Parameter<double>*> groups,
                         std::function<Var<double>(Tape<double>&)> build, std::size_t coords = 0) {
    GradcheckOptions o = opt;
    if (coords) o.coords_per_group = coords;
    GradcheckProblem problem{name, std::move(groups), projected_objective(std::move(build), fx.next_seed())};
    reports.push_back(gradcheck(problem, o));
  };

  // ---- primitives
  {
    auto& x = fx.normal("input", Shape{2, 2, 4, 4, 4});
    auto& w = fx.normal("weight", Shape{3, 2, 3, 3, 3}, 0.3);
    auto& b = fx.normal("bias", Shape{1, 3, 1, 1, 1});
    check("conv3d", {&x, &w, &b}, [&](Tape<double>& t) {
      return conv3d(t.parameter(x), t.parameter(w), std::optional(t.parameter(b)), ConvGeometry{3, 1, 1});
    });
    check("conv3d_strided", {&x, &w, &b}, [&](Tape<double>& t) {
      return conv3d(t.parameter(x), t.parameter(w), std::optional(t.parameter(b)), ConvGeometry{3, 2, 1});
    });
  }
  {
    auto& x = fx.normal("input", Shape{2, 3, 2, 3, 2});
    auto& w = fx.normal("weight", Shape{3, 2, 2, 2, 2}, 0.5);
    auto& b = fx.normal("bias", Shape{1, 2, 1, 1, 1});
    check("transposed_conv3d", {&x, &w, &b}, [&](Tape<double>& t) {
      return upsample_transpose3d(t.parameter(x), t.parameter(w), std::optional(t.parameter(b)), 2);
    });
    auto& w3 = fx.normal("weight", Shape{3, 2, 3, 3, 3}, 0.3);
    check("transposed_conv3d_k3", {&x, &w3, &b}, [&](Tape<double>& t) {
      return conv_transpose3d(t.parameter(x), t.parameter(w3), std::optional(t.parameter(b)), ConvGeometry{3, 1, 1},
                              Shape{1, 1, 2, 3, 2});
    });
  }
  {
    auto& x = fx.normal("input", Shape{2, 2, 4, 4, 6});
    check("avgpool3d", {&x}, [&](Tape<double>& t) { return avg_pool3d(t.parameter(x), 2); });
  }
  {
    auto& x = fx.away_from_zero("input", Shape{1, 2, 3, 4, 5}, 0.05);
    check("relu", {&x}, [&](Tape<double>& t) { return relu(t.parameter(x)); });
    check("leaky_relu", {&x}, [&](Tape<double>& t) { return leaky_relu(t.parameter(x), 0.2); });
    check("sigmoid", {&x}, [&](Tape<double>& t) { return sigmoid(t.parameter(x)); });
  }
  {
    auto& x = fx.normal("input", Shape{2, 3, 2, 3, 3});
    auto& g = fx.uniform("scale", Shape{1, 3, 1, 1, 1}, 0.5, 1.5);
    auto& s = fx.normal("shift", Shape{1, 3, 1, 1, 1});
    auto& rm = fx.normal("running_mean", Shape{1, 3, 1, 1, 1});
    auto& rv = fx.uniform("running_var", Shape{1, 3, 1, 1, 1}, 0.5, 2.0);
    rm.trainable = rv.trainable = false;
    for (Mode mode : {Mode::train, Mode::eval}) {
      check(mode == Mode::train ? "batchnorm_train" : "batchnorm_eval", {&x, &g, &s}, [&, mode](Tape<double>& t) {
        BatchNormOptions bo;
        bo.mode = mode;
        bo.update_stats = false;
        return batch_norm(t.parameter(x), t.parameter(g), t.parameter(s), rm, rv, bo);
      });
    }
  }
  {
    auto& x = fx.normal("input", Shape{1, 2, 3, 4, 4});
    const std::uint64_t mask_seed = fx.next_seed();
    check("dropout", {&x}, [&, mask_seed](Tape<double>& t) { return dropout(t.parameter(x), 0.3, mask_seed, Mode::train); });
    auto& y = fx.normal("other", Shape{1, 3, 3, 4, 4});
    auto& z = fx.normal("addend", Shape{1, 2, 3, 4, 4});
    check("add", {&x, &z}, [&](Tape<double>& t) { return add(t.parameter(x), t.parameter(z)); });
    check("concat_channels", {&x, &y}, [&](Tape<double>& t) {
      return concat_channels(std::vector<Var<double>>{t.parameter(x), t.parameter(y)});
    });
    auto& w = fx.normal("second", Shape{2, 2, 3, 4, 4});
    check("concat_batch", {&x, &w}, [&](Tape<double>& t) {
      return concat_batch(std::vector<Var<double>>{t.parameter(x), t.parameter(w)});
    });
  }

  // ---- blocks and networks
  const auto drb_check = [&](const std::string& name, const SNetFlags& flags) {
    ParamStore<double> store;
    Layers<double> layers(store, fx.next_seed());
    const DRBConfig cfg{4, 2, 2, 0.2, 2};
    create_drb(layers, "drb", cfg, flags);
    for (auto* p : store.all()) {  // non-trivial affine parameters
      if (p->name.find(".shift") != std::string::npos || p->name.find(".bias") != std::string::npos) {
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.1 * fx.rng().normal();
      }
    }
    auto& x = fx.normal("input", Shape{2, 4, 4, 4, 4});
    auto groups = trainable(store);
    groups.push_back(&x);
    const std::uint64_t dseed = fx.next_seed();
    check(name, groups, [&, dseed, cfg, flags](Tape<double>& t) {
      ForwardContext<double> ctx{&t, Mode::train, true, false, dseed, 0};
      return drb_forward(store, ctx, "drb", t.parameter(x), cfg, flags);
    }, 4);
  };
  drb_check("drb", SNetFlags{});
  drb_check("drb_sequential_plain", SNetFlags{false, false, true, false});

  {
    SNet<double> net(SNetConfig::make(4, {1, 1, 1}, {1, 1, 1}, 2, 0.1), fx.next_seed());
    auto& x = fx.normal("input", Shape{1, 1, 8, 16, 16});
    auto groups = trainable(net.params());
    groups.push_back(&x);
    const std::uint64_t dseed = fx.next_seed();
    check("snet_mini", groups, [&, dseed](Tape<double>& t) {
      ForwardContext<double> ctx{&t, Mode::train, true, false, dseed, 0};
      return net.forward(t.parameter(x), ctx).prob;
    }, 3);
  }
  {
    Discriminator<double> d(DiscriminatorConfig{{3, 3, 3}, 0.2, true}, {4, 4, 4}, fx.next_seed());
    auto& f0 = fx.normal("feature0", Shape{2, 4, 1, 2, 2});
    auto& f1 = fx.normal("feature1", Shape{2, 4, 2, 4, 4});
    auto& f2 = fx.normal("feature2", Shape{2, 4, 4, 8, 8});
    auto groups = trainable(d.params());
    groups.insert(groups.end(), {&f0, &f1, &f2});
    check("discriminator_mini", groups, [&](Tape<double>& t) {
      ForwardContext<double> ctx{&t, Mode::train, true, false, 0, 0};
      return d.forward({t.parameter(f0), t.parameter(f1), t.parameter(f2)}, ctx);
    }, 4);
  }

  // ---- losses (scalar objectives, no tape)
  {
    const Dims dims{4, 6, 6};
    const Spacing spacing{1.5, 0.8, 1.1};
    const Shape s{1, 1, dims.depth, dims.height, dims.width};
    LossConfig lc;
    lc.alpha = 1.0;
    lc.beta = 0.1;
    const Mask label = random_blob_mask(fx.rng(), dims, spacing);
    const Mask label2 = random_blob_mask(fx.rng(), dims, spacing);
    const WeightMap ws = boundary_weight_map(label);
    const WeightMap wt = boundary_weight_map(label2);
    const DistanceMap dmap = distance_map(label);

    auto& pred = probability_map(fx, "pred", s, lc.threshold);
    auto& ds = fx.uniform("d_src", s, 0.05, 0.95);
    auto& dt = fx.uniform("d_tgt", s, 0.05, 0.95);

    const auto scalar = [&](const std::string& name, std::vector<Parameter<double>*> groups,
                            std::function<LossValue<double>()> fn) {
      GradcheckProblem problem{name, groups, [groups, fn](bool with_grad) {
                                 LossValue<double> v = fn();
                                 if (with_grad) {
                                   for (std::size_t k = 0; k < groups.size(); ++k) add_into(groups[k]->grad, v.grads[k]);
                                 }
                                 return v.value;
                               }};
      GradcheckOptions o = opt;
      o.step = 1e-5;
      reports.push_back(gradcheck(problem, o));
    };
    scalar("cross_entropy", {&pred}, [&] { return cross_entropy(as_image(pred.value, spacing), label, lc); });
    scalar("dist_loss", {&pred}, [&] { return dist_loss(as_image(pred.value, spacing), dmap, lc); });
    scalar("bwsl", {&pred}, [&] { return bwsl(as_image(pred.value, spacing), label, lc); });
    scalar("bwtl_discriminator", {&ds, &dt}, [&] {
      return bwtl_discriminator(as_image(ds.value, spacing), as_image(dt.value, spacing), ws, wt, lc);
    });
    scalar("adversarial_generator_loss", {&dt},
           [&] { return adversarial_generator_loss(as_image(dt.value, spacing), wt, lc); });
  }
  return reports;
}

std::string format_gradcheck_table(const std::vector<GradcheckReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "check" << std::setw(28) << "worst group" << std::right << std::setw(14)
     << "max_rel_err" << std::setw(9) << "checked" << std::setw(9) << "skipped" << "  verdict\n";
  for (const auto& r : reports) {
    const GradcheckGroup* worst = nullptr;
    std::size_t checked = 0, skipped = 0;
    for (const auto& g : r.groups) {
      checked += g.checked;
      skipped += g.skipped;
      if (!worst || g.max_rel_error > worst->max_rel_error) worst = &g;
    }
    os << std::left << std::setw(28) << r.name << std::setw(28) << (worst ? worst->name : "-") << std::right
       << std::setw(14) << std::scientific << std::setprecision(3) << r.max_rel_error() << std::defaultfloat
       << std::setw(9) << checked << std::setw(9) << skipped << "  " << (r.passed() ? "PASS" : "FAIL") << "\n";
  }
  return os.str();
}

}  // namespace bowda
