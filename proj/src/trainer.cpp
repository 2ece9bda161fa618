#include "bowda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "bowda/parallel.hpp"
#include "bowda/rng.hpp"
#include "bowda/volume.hpp"

namespace bowda {

namespace {

// Keys of the independent random streams. The supervised target phase and
// the adversarial phase share kStreamTarget so that an adversarial run with
// zero adversarial weight replays supervised fine-tuning exactly.
constexpr std::uint64_t kInitSNet = 1;
constexpr std::uint64_t kInitDiscriminator = 2;
constexpr std::uint64_t kStreamSource = 10;
constexpr std::uint64_t kStreamTarget = 11;
constexpr std::uint64_t kStreamMixed = 12;
constexpr std::uint64_t kStreamAdversarialSource = 13;
constexpr std::uint64_t kDropoutOffset = 100;

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("error writing " + path.string());
}

Image<float> sample_image(const Tensor<float>& t, int n, const Dims& dims, const Spacing& spacing) {
  const float* p = t.sample(n);
  return Image<float>(dims, spacing, std::vector<float>(p, p + t.shape().spatial()));
}

void copy_scaled(const Image<float>& g, float scale, Tensor<float>& dst, int n) {
  float* out = dst.sample(n);
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * scale;
}

Dims spatial_dims(const Shape& s) { return Dims{s.d, s.h, s.w}; }

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw std::runtime_error(what + " is not finite (" + format_g(v) + ")");
}

std::string segloss_name(SegLoss s) { return s == SegLoss::bwsl ? "bwsl" : "ce"; }

SegLoss parse_segloss(const std::string& s) {
  if (s == "bwsl") return SegLoss::bwsl;
  if (s == "ce" || s == "cross_entropy") return SegLoss::cross_entropy;
  throw std::invalid_argument("segmentation_loss: expected 'ce' or 'bwsl', got '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------- optimizer

void SGDConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd: lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd: momentum must be in [0, 1)");
  if (!(decay >= 0.0)) throw std::invalid_argument("sgd: decay must be >= 0");
  if (batch < 1) throw std::invalid_argument("sgd: batch must be >= 1");
}

template <typename T>
void sgd_step(ParamStore<T>& store, Velocity<T>& velocity, const SGDConfig& cfg, int epoch) {
  const auto params = store.all();
  for (const Parameter<T>* p : params) {
    if (!p->trainable) continue;
    if (!(p->grad.shape() == p->value.shape())) {
      throw std::invalid_argument("sgd_step: gradient of '" + p->name + "' has the wrong shape");
    }
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(static_cast<double>(p->grad[i]))) {
        throw std::runtime_error("sgd_step: non-finite gradient in parameter '" + p->name + "'");
      }
    }
  }
  const T lr = static_cast<T>(cfg.learning_rate(epoch));
  const T momentum = static_cast<T>(cfg.momentum);
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    auto it = velocity.find(p->name);
    if (it == velocity.end()) it = velocity.emplace(p->name, Tensor<T>(p->value.shape(), T(0))).first;
    Tensor<T>& v = it->second;
    if (!(v.shape() == p->value.shape())) {
      throw std::invalid_argument("sgd_step: momentum buffer of '" + p->name + "' has the wrong shape");
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] - lr * p->grad[i];
      p->value[i] += v[i];
    }
  }
}

template void sgd_step(ParamStore<float>&, Velocity<float>&, const SGDConfig&, int);
template void sgd_step(ParamStore<double>&, Velocity<double>&, const SGDConfig&, int);

// ---------------------------------------------------------------- strategies

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::target_only: return "target_only";
    case Strategy::mix_direct: return "mix_direct";
    case Strategy::mix_resampled: return "mix_resampled";
    case Strategy::finetune: return "finetune";
    case Strategy::finetune_resampled: return "finetune_resampled";
    case Strategy::adapt_ce: return "adapt_ce";
    case Strategy::adapt_bowda: return "adapt_bowda";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::target_only, Strategy::mix_direct, Strategy::mix_resampled, Strategy::finetune,
                     Strategy::finetune_resampled, Strategy::adapt_ce, Strategy::adapt_bowda}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown strategy '" + name + "'");
}

bool is_adversarial(Strategy s) { return s == Strategy::adapt_ce || s == Strategy::adapt_bowda; }

bool uses_source_phase(Strategy s) {
  return s == Strategy::finetune || s == Strategy::finetune_resampled || is_adversarial(s);
}

bool resamples_source(Strategy s) { return s == Strategy::mix_resampled || s == Strategy::finetune_resampled; }

// ---------------------------------------------------------------- spec

SegLoss ExperimentSpec::effective_segmentation_loss() const {
  if (segmentation_loss) return *segmentation_loss;
  return strategy == Strategy::adapt_bowda ? SegLoss::bwsl : SegLoss::cross_entropy;
}

void ExperimentSpec::validate() const {
  sgd.validate();
  discriminator_sgd.validate();
  loss.validate();
  snet.validate();
  discriminator.validate();
  crop.validate();
  window.validate();
  if (crop.size.depth % 8 || crop.size.height % 8 || crop.size.width % 8) {
    throw std::invalid_argument("crop dims must be divisible by 8, got " + to_string(crop.size));
  }
  if (window.window.depth % 8 || window.window.height % 8 || window.window.width % 8) {
    throw std::invalid_argument("window dims must be divisible by 8, got " + to_string(window.window));
  }
  if (!target.present()) throw std::invalid_argument("experiment: target data is required");
  if (strategy != Strategy::target_only && !source.present()) {
    throw std::invalid_argument("experiment: strategy " + to_string(strategy) + " requires source data");
  }
  for (const DomainData* d : {&source, &target}) {
    if (d->phantom && !d->manifest.empty()) {
      throw std::invalid_argument("experiment: a domain takes either a phantom recipe or a manifest, not both");
    }
    if (d->phantom && (d->val_count < 0 || d->val_count >= d->phantom->count)) {
      throw std::invalid_argument("experiment: val_count must be in [0, count)");
    }
  }
  if (target.phantom && target.val_count < 1) {
    throw std::invalid_argument("experiment: target val_count must be >= 1");
  }
  if (epochs.source < 0 || epochs.target < 0 || epochs.mixed < 0 || epochs.adversarial < 0) {
    throw std::invalid_argument("experiment: epoch counts must be >= 0");
  }
  if (steps_per_epoch < 0) throw std::invalid_argument("experiment: steps_per_epoch must be >= 0");
  if (!(adversarial_weight >= 0.0)) throw std::invalid_argument("experiment: adversarial_weight must be >= 0");
  if (validate_every < 1) throw std::invalid_argument("experiment: validate_every must be >= 1");
}

void to_json(Json& j, const SGDConfig& c) {
  j = Json{{"lr", c.lr}, {"momentum", c.momentum}, {"decay", c.decay}, {"batch", c.batch}};
}
void from_json(const Json& j, SGDConfig& c) {
  require_known_keys(j, {"lr", "momentum", "decay", "batch"}, "sgd");
  read(j, "lr", c.lr);
  read(j, "momentum", c.momentum);
  read(j, "decay", c.decay);
  read(j, "batch", c.batch);
  c.validate();
}

void to_json(Json& j, const CropSpec& c) { j = Json{{"size", c.size}}; }
void from_json(const Json& j, CropSpec& c) {
  require_known_keys(j, {"size"}, "crop");
  read(j, "size", c.size);
  c.validate();
}

namespace {

Json domain_to_json(const DomainData& d) {
  Json j = Json::object();
  if (d.phantom) {
    j["phantom"] = *d.phantom;
    j["val_count"] = d.val_count;
  } else if (!d.manifest.empty()) {
    j["manifest"] = d.manifest.generic_string();
  }
  return j;
}

DomainData domain_from_json(const Json& j, const char* what) {
  require_known_keys(j, {"phantom", "manifest", "val_count"}, what);
  DomainData d;
  if (j.contains("phantom")) d.phantom = j.at("phantom").get<DomainSpec>();
  if (j.contains("manifest")) d.manifest = j.at("manifest").get<std::string>();
  read(j, "val_count", d.val_count);
  return d;
}

}  // namespace

void to_json(Json& j, const ExperimentSpec& s) {
  j = Json{{"strategy", to_string(s.strategy)},
           {"seed", s.seed},
           {"data", Json{{"source", domain_to_json(s.source)}, {"target", domain_to_json(s.target)}}},
           {"sgd", s.sgd},
           {"discriminator_sgd", s.discriminator_sgd},
           {"loss", s.loss},
           {"snet", s.snet},
           {"discriminator", s.discriminator},
           {"epochs",
            Json{{"source", s.epochs.source},
                 {"target", s.epochs.target},
                 {"mixed", s.epochs.mixed},
                 {"adversarial", s.epochs.adversarial}}},
           {"steps_per_epoch", s.steps_per_epoch},
           {"crop", s.crop},
           {"window", s.window},
           {"augment", s.augment},
           {"adversarial_weight", s.adversarial_weight},
           {"validate_every", s.validate_every},
           {"source_checkpoint", s.source_checkpoint.generic_string()},
           {"output_dir", s.output_dir.generic_string()}};
  if (s.segmentation_loss) j["segmentation_loss"] = segloss_name(*s.segmentation_loss);
}

void from_json(const Json& j, ExperimentSpec& s) {
  require_known_keys(j,
                     {"strategy", "seed", "data", "sgd", "discriminator_sgd", "loss", "segmentation_loss", "snet",
                      "discriminator", "epochs", "steps_per_epoch", "crop", "window", "augment", "adversarial_weight",
                      "validate_every", "source_checkpoint", "output_dir"},
                     "experiment");
  if (j.contains("strategy")) s.strategy = parse_strategy(j.at("strategy").get<std::string>());
  read(j, "seed", s.seed);
  if (j.contains("data")) {
    const Json& d = j.at("data");
    require_known_keys(d, {"source", "target"}, "data");
    if (d.contains("source")) s.source = domain_from_json(d.at("source"), "data.source");
    if (d.contains("target")) s.target = domain_from_json(d.at("target"), "data.target");
  }
  read(j, "sgd", s.sgd);
  read(j, "discriminator_sgd", s.discriminator_sgd);
  read(j, "loss", s.loss);
  if (j.contains("segmentation_loss")) s.segmentation_loss = parse_segloss(j.at("segmentation_loss").get<std::string>());
  read(j, "snet", s.snet);
  read(j, "discriminator", s.discriminator);
  if (j.contains("epochs")) {
    const Json& e = j.at("epochs");
    require_known_keys(e, {"source", "target", "mixed", "adversarial"}, "epochs");
    read(e, "source", s.epochs.source);
    read(e, "target", s.epochs.target);
    read(e, "mixed", s.epochs.mixed);
    read(e, "adversarial", s.epochs.adversarial);
  }
  read(j, "steps_per_epoch", s.steps_per_epoch);
  read(j, "crop", s.crop);
  read(j, "window", s.window);
  read(j, "augment", s.augment);
  read(j, "adversarial_weight", s.adversarial_weight);
  read(j, "validate_every", s.validate_every);
  if (j.contains("source_checkpoint")) s.source_checkpoint = j.at("source_checkpoint").get<std::string>();
  if (j.contains("output_dir")) s.output_dir = j.at("output_dir").get<std::string>();
}

std::string ExperimentSpec::digest() const {
  Json j = *this;
  j.erase("output_dir");
  j.erase("source_checkpoint");
  return json_digest(j);
}

std::string ExperimentSpec::source_phase_digest() const {
  Json j{{"seed", seed},
         {"source", domain_to_json(source)},
         {"sgd", sgd},
         {"snet", snet},
         {"epochs", epochs.source},
         {"steps_per_epoch", steps_per_epoch},
         {"crop", crop},
         {"augment", augment},
         {"resample", resamples_source(strategy)}};
  if (resamples_source(strategy)) j["target"] = domain_to_json(target);
  return json_digest(j);
}

ExperimentSpec read_experiment_spec(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read experiment spec " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument("experiment spec " + path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  ExperimentSpec s;
  try {
    s = j.get<ExperimentSpec>();
  } catch (const Json::exception& e) {
    throw std::invalid_argument("experiment spec " + path.string() + ": " + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------- data

DomainCases load_domain(const DomainData& data, const std::string& name, const std::optional<Spacing>& resample_to,
                        std::vector<std::string>& log) {
  struct Raw {
    std::string id;
    std::string split;
    Volume image;
    Mask label;
  };
  std::vector<Raw> raw;
  if (data.phantom) {
    const DomainSpec& spec = *data.phantom;
    raw.resize(static_cast<std::size_t>(spec.count));
    parallel_for(raw.size(), [&](std::size_t i) {
      Phantom ph = gen_phantom(spec, static_cast<int>(i));
      char id[32];
      std::snprintf(id, sizeof id, "case_%03zu", i);
      raw[i] = {id, static_cast<int>(i) >= spec.count - data.val_count ? "val" : "train", std::move(ph.image),
                std::move(ph.label)};
    });
    log.push_back(name + ": phantom seed " + std::to_string(spec.seed) + ", " + std::to_string(spec.count) +
                  " cases, " + std::to_string(data.val_count) + " held out");
  } else if (!data.manifest.empty()) {
    const DatasetManifest m = read_manifest(data.manifest);
    raw.resize(m.cases.size());
    parallel_for(raw.size(), [&](std::size_t i) {
      const DatasetCase& c = m.cases[i];
      raw[i] = {c.id, c.split, read_metaimage(c.image), read_mask(c.label)};
      if (!(raw[i].image.dims() == raw[i].label.dims())) {
        throw std::runtime_error(name + " case " + c.id + ": image and label dims differ");
      }
    });
    log.push_back(name + ": manifest with " + std::to_string(m.cases.size()) + " cases");
  } else {
    throw std::invalid_argument(name + ": no data configured");
  }

  DomainCases out;
  for (Raw& r : raw) {
    log.push_back("load " + name + " " + r.id + " split " + r.split + " dims " + to_string(r.image.dims()) +
                  " spacing " + to_string(r.image.spacing()));
    if (resample_to && !(r.image.spacing() == *resample_to)) {
      const Dims before = r.image.dims();
      const Spacing from = r.image.spacing();
      r.image = resample_trilinear(r.image, *resample_to);
      r.label = resample_mask_nearest(r.label, *resample_to);
      log.push_back("resample " + name + " " + r.id + " spacing " + to_string(from) + " -> " +
                    to_string(*resample_to) + " dims " + to_string(before) + " -> " + to_string(r.image.dims()));
    }
    r.image = znormalize(r.image);
    log.push_back("normalize " + name + " " + r.id);
    Case c{r.id, std::move(r.image), std::move(r.label)};
    if (r.split == "val") {
      out.val.push_back(std::move(c));
    } else {
      out.train.push_back(std::move(c));
    }
  }
  return out;
}

Batch sample_batch(const std::vector<const Case*>& cases, const CropSpec& crop, bool augment, Rng& rng) {
  if (cases.empty()) throw std::invalid_argument("sample_batch: no cases");
  const Dims& s = crop.size;
  Batch b;
  b.image = Tensor<float>(Shape{static_cast<int>(cases.size()), 1, s.depth, s.height, s.width});
  for (std::size_t n = 0; n < cases.size(); ++n) {
    Crop c = random_crop(cases[n]->image, cases[n]->label, crop, rng);
    if (augment) {
      AugmentDraw draw = sample_augment(rng);
      // a quarter turn swaps height and width, which only fits square crops
      if (s.height != s.width) draw.rotations &= 2;
      c.image = apply_augment(c.image, draw);
      c.label = apply_augment(c.label, draw);
    }
    std::copy(c.image.values().begin(), c.image.values().end(), b.image.sample(static_cast<int>(n)));
    b.labels.push_back(std::move(c.label));
  }
  return b;
}

double segmentation_loss(const Tensor<float>& prob, const std::vector<Mask>& labels, SegLoss kind,
                         const LossConfig& cfg, Tensor<float>& grad) {
  const Shape& s = prob.shape();
  if (s.c != 1 || static_cast<std::size_t>(s.n) != labels.size()) {
    throw std::invalid_argument("segmentation_loss: prob " + to_string(s) + " does not match " +
                                std::to_string(labels.size()) + " labels");
  }
  grad = Tensor<float>(s);
  std::vector<LossValue<float>> per(labels.size());
  parallel_for(labels.size(), [&](std::size_t n) {
    const Image<float> p = sample_image(prob, static_cast<int>(n), spatial_dims(s), labels[n].spacing());
    per[n] = kind == SegLoss::bwsl ? bwsl(p, labels[n], cfg) : cross_entropy(p, labels[n], cfg);
  });
  const float scale = 1.0f / static_cast<float>(s.n);
  double total = 0.0;
  for (std::size_t n = 0; n < per.size(); ++n) {
    total += per[n].value;
    copy_scaled(per[n].grads[0], scale, grad, static_cast<int>(n));
  }
  return total / s.n;
}

namespace {

/// D output holds the N source samples followed by the N target samples.
double discriminator_loss(const Tensor<float>& d, const std::vector<WeightMap>& ws, const std::vector<WeightMap>& wt,
                          const LossConfig& cfg, Tensor<float>& grad) {
  const int N = static_cast<int>(ws.size());
  const Shape& s = d.shape();
  grad = Tensor<float>(s);
  std::vector<LossValue<float>> per(static_cast<std::size_t>(N));
  parallel_for(per.size(), [&](std::size_t i) {
    const int n = static_cast<int>(i);
    per[i] = bwtl_discriminator(sample_image(d, n, spatial_dims(s), ws[i].spacing()),
                                sample_image(d, N + n, spatial_dims(s), wt[i].spacing()), ws[i], wt[i], cfg);
  });
  const float scale = 1.0f / static_cast<float>(N);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    total += per[n].value;
    copy_scaled(per[n].grads[0], scale, grad, n);
    copy_scaled(per[n].grads[1], scale, grad, N + n);
  }
  return total / N;
}

/// Generator term on the target half of D's output; the source half of `grad` stays zero.
double generator_loss(const Tensor<float>& d, const std::vector<WeightMap>& wt, const LossConfig& cfg, double weight,
                      Tensor<float>& grad) {
  const int N = static_cast<int>(wt.size());
  const Shape& s = d.shape();
  grad = Tensor<float>(s);
  std::vector<LossValue<float>> per(static_cast<std::size_t>(N));
  parallel_for(per.size(), [&](std::size_t i) {
    per[i] = adversarial_generator_loss(sample_image(d, N + static_cast<int>(i), spatial_dims(s), wt[i].spacing()),
                                        wt[i], cfg);
  });
  const float scale = static_cast<float>(weight) / static_cast<float>(N);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    total += per[n].value;
    copy_scaled(per[n].grads[0], scale, grad, N + n);
  }
  return total / N;
}

}  // namespace

// ---------------------------------------------------------------- networks

std::string architecture_digest(const SNetConfig& cfg) { return json_digest(Json(cfg)); }

Checkpoint snet_checkpoint(const SNet<float>& net) {
  Checkpoint ck;
  ck.digest = architecture_digest(net.config());
  ck.add_store("", net.params());
  ck.metadata["snet"] = net.config();
  ck.metadata["parameter_count"] = net.params().trainable_count();
  return ck;
}

std::unique_ptr<SNet<float>> load_snet(const Checkpoint& ck) {
  if (!ck.metadata.contains("snet")) throw std::runtime_error("checkpoint does not record a network config");
  const SNetConfig cfg = ck.metadata.at("snet").get<SNetConfig>();
  if (architecture_digest(cfg) != ck.digest) {
    throw std::runtime_error("checkpoint digest does not match its recorded network config");
  }
  auto net = std::make_unique<SNet<float>>(cfg, 0);
  ck.load_store("", net->params());
  return net;
}

void init_target_from_source(const Checkpoint& source, SNet<float>& target) {
  const std::string expected = architecture_digest(target.config());
  if (source.digest != expected) {
    throw std::invalid_argument("init_target_from_source: config digest " + source.digest +
                                " does not match the target network (" + expected + ")");
  }
  source.load_store("", target.params());
}

Volume predict_volume(SNet<float>& net, const Volume& image, const WindowSpec& window) {
  const Predictor predict = [&net](const Volume& w) {
    Tape<float> tape;
    ForwardContext<float> ctx{&tape, Mode::eval, false, false, 0, 0};
    const Dims& d = w.dims();
    Var<float> x = tape.constant(Tensor<float>(Shape{1, 1, d.depth, d.height, d.width}, w.values()));
    const SNetOutput<float> out = net.forward(x, ctx);
    return Volume(d, w.spacing(), out.prob.value().values());
  };
  return sliding_window_infer(predict, image, window);
}

// ---------------------------------------------------------------- logs

void write_train_log_csv(const std::vector<TrainLogRow>& rows, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "phase,epoch,step,loss,seg_loss,adv_loss,disc_loss,lr\n";
  for (const auto& r : rows) {
    out << r.phase << ',' << r.epoch << ',' << r.step << ',' << format_g(r.loss) << ',' << format_g(r.seg_loss)
        << ',' << format_g(r.adv_loss) << ',' << format_g(r.disc_loss) << ',' << format_g(r.lr) << '\n';
  }
  write_text(path, out.str());
}

void write_val_log_csv(const std::vector<ValLogRow>& rows, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "phase,epoch,dsc\n";
  for (const auto& r : rows) out << r.phase << ',' << r.epoch << ',' << format_g(r.dsc) << '\n';
  write_text(path, out.str());
}

namespace {

Json train_rows_to_json(const std::vector<TrainLogRow>& rows) {
  Json a = Json::array();
  for (const auto& r : rows) a.push_back({r.phase, r.epoch, r.step, r.loss, r.seg_loss, r.adv_loss, r.disc_loss, r.lr});
  return a;
}

std::vector<TrainLogRow> train_rows_from_json(const Json& a) {
  std::vector<TrainLogRow> rows;
  for (const auto& e : a) {
    rows.push_back({e[0].get<std::string>(), e[1].get<int>(), e[2].get<int>(), e[3].get<double>(), e[4].get<double>(),
                    e[5].get<double>(), e[6].get<double>(), e[7].get<double>()});
  }
  return rows;
}

void add_velocity(Checkpoint& ck, const std::string& prefix, const Velocity<float>& v) {
  for (const auto& [name, t] : v) ck.blobs.push_back({prefix + name, t.shape(), t.values()});
}

Velocity<float> read_velocity(const Checkpoint& ck, const std::string& prefix) {
  Velocity<float> v;
  for (const auto& b : ck.blobs) {
    if (b.name.rfind(prefix, 0) == 0) v.emplace(b.name.substr(prefix.size()), Tensor<float>(b.shape, b.data));
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------- experiment

struct Experiment::Impl {
  struct Phase {
    std::string name;  // source, target, mixed, adversarial
    int epochs = 0;
  };

  ExperimentSpec spec;
  RunOptions options;

  std::vector<std::string> pipeline_log;
  DomainCases source;
  DomainCases target;

  std::unique_ptr<SNet<float>> snet_s;
  std::unique_ptr<SNet<float>> snet_t;
  std::unique_ptr<Discriminator<float>> disc;
  Velocity<float> vel_s, vel_t, vel_d;

  std::vector<Phase> phases;
  int phase_index = 0;
  int next_epoch = 0;
  int epochs_run = 0;

  std::vector<TrainLogRow> train_rows;
  std::vector<ValLogRow> val_rows;
  bool has_best = false;
  double best_dsc = 0.0;
  int best_epoch = -1;
  std::string best_phase;
  Checkpoint best;

  std::filesystem::path out() const { return options.out; }
  std::filesystem::path state_path() const { return options.out / "checkpoints" / "state.bwck"; }

  void note(const std::string& msg) const {
    if (!options.quiet) std::cerr << "[" << to_string(spec.strategy) << "] " << msg << "\n";
  }

  void plan_phases() {
    switch (spec.strategy) {
      case Strategy::target_only:
        phases = {{"target", spec.epochs.target}};
        break;
      case Strategy::mix_direct:
      case Strategy::mix_resampled:
        phases = {{"mixed", spec.epochs.mixed}};
        break;
      case Strategy::finetune:
      case Strategy::finetune_resampled:
        phases = {{"source", spec.epochs.source}, {"target", spec.epochs.target}};
        break;
      case Strategy::adapt_ce:
      case Strategy::adapt_bowda:
        phases = {{"source", spec.epochs.source}, {"adversarial", spec.epochs.adversarial}};
        break;
    }
  }

  void load_data() {
    pipeline_log.push_back("strategy " + to_string(spec.strategy));
    target = load_domain(spec.target, "target", std::nullopt, pipeline_log);
    if (target.train.empty()) throw std::invalid_argument("target domain has no training cases");
    if (target.val.empty()) throw std::invalid_argument("target domain has no validation cases");
    if (spec.strategy != Strategy::target_only) {
      std::optional<Spacing> to;
      if (resamples_source(spec.strategy)) to = target.train.front().image.spacing();
      source = load_domain(spec.source, "source", to, pipeline_log);
      if (source.train.empty()) throw std::invalid_argument("source domain has no training cases");
    }
    for (const Phase& p : phases) pipeline_log.push_back("phase " + p.name + " epochs " + std::to_string(p.epochs));
  }

  void build_networks() {
    const std::uint64_t init = derive_seed(spec.seed, kInitSNet);
    snet_t = std::make_unique<SNet<float>>(spec.snet, init);
    if (uses_source_phase(spec.strategy)) snet_s = std::make_unique<SNet<float>>(spec.snet, init);
    if (is_adversarial(spec.strategy)) {
      disc = std::make_unique<Discriminator<float>>(spec.discriminator, snet_feature_channels(spec.snet),
                                                    derive_seed(spec.seed, kInitDiscriminator));
    }
  }

  std::string summary() const {
    std::string s = model_summary(snet_t->params(), "SNet");
    s += "config parameter count: " + std::to_string(snet_parameter_count(spec.snet)) + "\n";
    if (disc) s += "\n" + model_summary(disc->params(), "Discriminator");
    return s;
  }

  int steps_for(std::size_t cases, int batch) const {
    if (spec.steps_per_epoch > 0) return spec.steps_per_epoch;
    return static_cast<int>((cases + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  }

  static std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
  }

  std::uint64_t dropout_seed(std::uint64_t stream, int epoch, int step) const {
    return derive_seed(derive_seed(spec.seed, stream + kDropoutOffset),
                       (static_cast<std::uint64_t>(epoch) << 32) | static_cast<std::uint64_t>(step));
  }

  void supervised_epoch(const std::string& phase, SNet<float>& net, Velocity<float>& vel,
                        const std::vector<const Case*>& cases, SegLoss kind, std::uint64_t stream, int epoch) {
    const int B = spec.sgd.batch;
    Rng rng(derive_seed(derive_seed(spec.seed, stream), static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled(cases.size(), rng);
    const int steps = steps_for(cases.size(), B);
    const double lr = spec.sgd.learning_rate(epoch);
    for (int step = 0; step < steps; ++step) {
      std::vector<const Case*> picked;
      for (int b = 0; b < B; ++b) picked.push_back(cases[order[(static_cast<std::size_t>(step) * B + b) % cases.size()]]);
      const Batch batch = sample_batch(picked, spec.crop, spec.augment, rng);

      Tape<float> tape;
      ForwardContext<float> ctx{&tape, Mode::train, true, true, dropout_seed(stream, epoch, step), 0};
      net.params().zero_grad();
      const SNetOutput<float> out = net.forward(tape.constant(batch.image), ctx);
      Tensor<float> grad;
      const double seg = segmentation_loss(out.prob.value(), batch.labels, kind, spec.loss, grad);
      require_finite(seg, phase + " epoch " + std::to_string(epoch) + " step " + std::to_string(step) + " loss");
      tape.backward(out.prob, grad);
      sgd_step(net.params(), vel, spec.sgd, epoch);
      train_rows.push_back({phase, epoch, step, seg, seg, 0.0, 0.0, lr});
    }
  }

  LossConfig transfer_loss_config() const {
    LossConfig c = spec.loss;
    if (spec.strategy == Strategy::adapt_ce) c.alpha = 0.0;  // plain (unweighted) adversarial cross entropy
    return c;
  }

  void adversarial_epoch(int epoch) {
    const int B = spec.sgd.batch;
    std::vector<const Case*> tcases, scases;
    for (const Case& c : target.train) tcases.push_back(&c);
    for (const Case& c : source.train) scases.push_back(&c);
    Rng trng(derive_seed(derive_seed(spec.seed, kStreamTarget), static_cast<std::uint64_t>(epoch)));
    Rng srng(derive_seed(derive_seed(spec.seed, kStreamAdversarialSource), static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled(tcases.size(), trng);
    const int steps = steps_for(tcases.size(), B);
    const double lr = spec.sgd.learning_rate(epoch);
    const SegLoss kind = spec.effective_segmentation_loss();
    const LossConfig tcfg = transfer_loss_config();

    for (int step = 0; step < steps; ++step) {
      std::vector<const Case*> tpick, spick;
      for (int b = 0; b < B; ++b) tpick.push_back(tcases[order[(static_cast<std::size_t>(step) * B + b) % tcases.size()]]);
      const Batch tb = sample_batch(tpick, spec.crop, spec.augment, trng);
      for (int b = 0; b < B; ++b) spick.push_back(scases[srng.below(scases.size())]);
      const Batch sb = sample_batch(spick, spec.crop, spec.augment, srng);

      std::vector<WeightMap> ws(static_cast<std::size_t>(B)), wt(static_cast<std::size_t>(B));
      parallel_for(static_cast<std::size_t>(2 * B), [&](std::size_t i) {
        if (i < static_cast<std::size_t>(B)) {
          ws[i] = boundary_weight_map(sb.labels[i]);
        } else {
          wt[i - B] = boundary_weight_map(tb.labels[i - B]);
        }
      });

      // frozen source network: eval mode, parameters and statistics untouched
      Tape<float> stape;
      ForwardContext<float> sctx{&stape, Mode::eval, false, false, 0, 0};
      const SNetOutput<float> sout = snet_s->forward(stape.constant(sb.image), sctx);

      Tape<float> tape;
      ForwardContext<float> tctx{&tape, Mode::train, true, true, dropout_seed(kStreamTarget, epoch, step), 0};
      snet_t->params().zero_grad();
      const SNetOutput<float> tout = snet_t->forward(tape.constant(tb.image), tctx);

      // discriminator step on the joint batch [source; target]
      double dloss = 0.0;
      {
        Tape<float> dtape;
        std::array<Var<float>, 3> joint;
        for (int k = 0; k < 3; ++k) {
          joint[k] = concat_batch(std::vector<Var<float>>{dtape.constant(sout.up_features[k].value()),
                                                          dtape.constant(tout.up_features[k].value())});
        }
        ForwardContext<float> dctx{&dtape, Mode::train, true, true, 0, 0};
        disc->params().zero_grad();
        const Var<float> d = disc->forward(joint, dctx);
        Tensor<float> dgrad;
        dloss = discriminator_loss(d.value(), ws, wt, tcfg, dgrad);
        require_finite(dloss, "discriminator loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
        dtape.backward(d, dgrad);
        sgd_step(disc->params(), vel_d, spec.discriminator_sgd, epoch);
      }

      // SNet-t step: segmentation loss plus the weighted generator term
      std::array<Var<float>, 3> joint;
      for (int k = 0; k < 3; ++k) {
        joint[k] = concat_batch(std::vector<Var<float>>{tape.constant(sout.up_features[k].value()), tout.up_features[k]});
      }
      ForwardContext<float> gctx{&tape, Mode::train, false, false, 0, 0};
      const Var<float> d = disc->forward(joint, gctx);
      Tensor<float> ggrad, sgrad;
      const double adv = generator_loss(d.value(), wt, tcfg, spec.adversarial_weight, ggrad);
      const double seg = segmentation_loss(tout.prob.value(), tb.labels, kind, spec.loss, sgrad);
      const double total = seg + spec.adversarial_weight * adv;
      require_finite(total, "SNet-t loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                " (segmentation " + format_g(seg) + ", adversarial " + format_g(adv) + ")");
      tape.backward({{tout.prob, &sgrad}, {d, &ggrad}});
      sgd_step(snet_t->params(), vel_t, spec.sgd, epoch);
      train_rows.push_back({"adversarial", epoch, step, total, seg, adv, dloss, lr});
    }
  }

  double validate(SNet<float>& net) const {
    double sum = 0.0;
    for (const Case& c : target.val) {
      const Volume prob = predict_volume(net, c.image, spec.window);
      sum += dsc(Mask::threshold(prob, spec.loss.threshold), c.label);
    }
    return sum / static_cast<double>(target.val.size());
  }

  void run_epoch(const Phase& phase, int epoch) {
    if (phase.name == "source") {
      std::vector<const Case*> cases;
      for (const Case& c : source.train) cases.push_back(&c);
      supervised_epoch("source", *snet_s, vel_s, cases, SegLoss::cross_entropy, kStreamSource, epoch);
    } else if (phase.name == "target") {
      std::vector<const Case*> cases;
      for (const Case& c : target.train) cases.push_back(&c);
      supervised_epoch("target", *snet_t, vel_t, cases, spec.effective_segmentation_loss(), kStreamTarget, epoch);
    } else if (phase.name == "mixed") {
      std::vector<const Case*> cases;
      for (const Case& c : source.train) cases.push_back(&c);
      for (const Case& c : target.train) cases.push_back(&c);
      supervised_epoch("mixed", *snet_t, vel_t, cases, spec.effective_segmentation_loss(), kStreamMixed, epoch);
    } else {
      adversarial_epoch(epoch);
    }
  }

  Checkpoint source_checkpoint() const {
    Checkpoint ck = snet_checkpoint(*snet_s);
    ck.metadata["source_phase_digest"] = spec.source_phase_digest();
    std::vector<TrainLogRow> rows;
    for (const auto& r : train_rows) {
      if (r.phase == "source") rows.push_back(r);
    }
    ck.metadata["train_log"] = train_rows_to_json(rows);
    return ck;
  }

  void finish_source_phase() {
    write_checkpoint(source_checkpoint(), out() / "snet_s.bwck");
    init_target_from_source(snet_checkpoint(*snet_s), *snet_t);
    vel_s.clear();
  }

  void end_phase(const Phase& phase) {
    if (phase.name == "source") finish_source_phase();
    ++phase_index;
    next_epoch = 0;
  }

  bool try_reuse_source() {
    if (spec.source_checkpoint.empty() || !uses_source_phase(spec.strategy)) return false;
    const Checkpoint ck = read_checkpoint(spec.source_checkpoint);
    const std::string want = spec.source_phase_digest();
    if (ck.metadata.value("source_phase_digest", std::string()) != want) {
      throw std::invalid_argument("source checkpoint " + spec.source_checkpoint.string() +
                                  " was trained with different settings (digest " +
                                  ck.metadata.value("source_phase_digest", std::string("none")) + ", expected " +
                                  want + ")");
    }
    init_target_from_source(ck, *snet_s);
    train_rows = train_rows_from_json(ck.metadata.at("train_log"));
    if (std::filesystem::absolute(spec.source_checkpoint) != std::filesystem::absolute(out() / "snet_s.bwck")) {
      std::filesystem::copy_file(spec.source_checkpoint, out() / "snet_s.bwck",
                                 std::filesystem::copy_options::overwrite_existing);
    }
    init_target_from_source(ck, *snet_t);
    phase_index = 1;
    next_epoch = 0;
    note("reusing source network " + spec.source_checkpoint.string());
    return true;
  }

  void save_state(bool complete) const {
    Checkpoint ck;
    ck.digest = spec.digest();
    if (snet_s) ck.add_store("snet_s/", snet_s->params());
    add_velocity(ck, "snet_s_velocity/", vel_s);
    ck.add_store("snet_t/", snet_t->params());
    add_velocity(ck, "snet_t_velocity/", vel_t);
    if (disc) {
      ck.add_store("disc/", disc->params());
      add_velocity(ck, "disc_velocity/", vel_d);
    }
    if (has_best) {
      for (const auto& b : best.blobs) ck.blobs.push_back({"best/" + b.name, b.shape, b.data});
    }
    Json val = Json::array();
    for (const auto& r : val_rows) val.push_back({r.phase, r.epoch, r.dsc});
    ck.metadata = Json{{"phase_index", phase_index},
                       {"next_epoch", next_epoch},
                       {"has_best", has_best},
                       {"best_dsc", best_dsc},
                       {"best_epoch", best_epoch},
                       {"best_phase", best_phase},
                       {"train_log", train_rows_to_json(train_rows)},
                       {"val_log", val},
                       {"complete", complete}};
    write_checkpoint(ck, state_path());
  }

  bool restore_state() {
    if (!options.resume || !std::filesystem::exists(state_path())) return false;
    const Checkpoint ck = read_checkpoint(state_path());
    if (ck.digest != spec.digest()) {
      throw std::invalid_argument("resume: saved state belongs to a different experiment spec");
    }
    if (snet_s) ck.load_store("snet_s/", snet_s->params());
    vel_s = read_velocity(ck, "snet_s_velocity/");
    ck.load_store("snet_t/", snet_t->params());
    vel_t = read_velocity(ck, "snet_t_velocity/");
    if (disc) {
      ck.load_store("disc/", disc->params());
      vel_d = read_velocity(ck, "disc_velocity/");
    }
    const Json& m = ck.metadata;
    phase_index = m.at("phase_index").get<int>();
    next_epoch = m.at("next_epoch").get<int>();
    has_best = m.at("has_best").get<bool>();
    best_dsc = m.at("best_dsc").get<double>();
    best_epoch = m.at("best_epoch").get<int>();
    best_phase = m.at("best_phase").get<std::string>();
    if (has_best) {
      best = snet_checkpoint(*snet_t);
      best.blobs.clear();
      for (const auto& b : ck.blobs) {
        if (b.name.rfind("best/", 0) == 0) best.blobs.push_back({b.name.substr(5), b.shape, b.data});
      }
    }
    train_rows = train_rows_from_json(m.at("train_log"));
    val_rows.clear();
    for (const auto& e : m.at("val_log")) val_rows.push_back({e[0].get<std::string>(), e[1].get<int>(), e[2].get<double>()});
    note("resumed at phase " + std::to_string(phase_index) + " epoch " + std::to_string(next_epoch));
    return true;
  }

  void write_logs() const {
    write_train_log_csv(train_rows, out() / "train_log.csv");
    write_val_log_csv(val_rows, out() / "val_log.csv");
  }

  RunResult finish() {
    if (!has_best) {
      best = snet_checkpoint(*snet_t);
      has_best = true;
    }
    write_checkpoint(snet_checkpoint(*snet_t), out() / "final.bwck");
    Checkpoint best_out = best;
    best_out.metadata["best_dsc"] = best_dsc;
    best_out.metadata["best_epoch"] = best_epoch;
    best_out.metadata["best_phase"] = best_phase;
    write_checkpoint(best_out, out() / "best.bwck");

    auto net = load_snet(best);
    RunResult result;
    for (const Case& c : target.val) {
      const Volume prob = predict_volume(*net, c.image, spec.window);
      result.report.add_case(c.id, Mask::threshold(prob, spec.loss.threshold), c.label);
    }
    result.report.write_csv(out() / "metrics.csv");
    write_logs();
    save_state(true);
    result.complete = true;
    result.best_dsc = best_dsc;
    result.best_epoch = best_epoch;
    return result;
  }

  RunResult run() {
    spec.validate();
    if (options.out.empty()) throw std::invalid_argument("experiment: no output directory");
    std::filesystem::create_directories(out() / "checkpoints");
    write_text(out() / "spec.json", Json(spec).dump(2) + "\n");

    plan_phases();
    load_data();
    build_networks();
    std::string log;
    for (const auto& line : pipeline_log) log += line + "\n";
    write_text(out() / "pipeline_log.txt", log);
    write_text(out() / "model_summary.txt", summary());

    if (!restore_state()) try_reuse_source();

    const auto phase_limit = [&] {
      return options.max_phases >= 0 && phase_index >= options.max_phases;
    };
    while (phase_index < static_cast<int>(phases.size())) {
      if (phase_limit()) {
        write_logs();
        return RunResult{};
      }
      const Phase& phase = phases[static_cast<std::size_t>(phase_index)];
      if (next_epoch >= phase.epochs) {  // zero-epoch phase
        end_phase(phase);
        continue;
      }
      const int epoch = next_epoch;
      run_epoch(phase, epoch);
      std::string msg = phase.name + " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(phase.epochs);
      const bool last = epoch + 1 == phase.epochs;
      if (phase.name != "source" && ((epoch + 1) % spec.validate_every == 0 || last)) {
        const double v = validate(*snet_t);
        val_rows.push_back({phase.name, epoch, v});
        msg += " val dsc " + format_g(v);
        if (!has_best || v > best_dsc) {
          has_best = true;
          best_dsc = v;
          best_epoch = epoch;
          best_phase = phase.name;
          best = snet_checkpoint(*snet_t);
        }
      }
      note(msg);
      next_epoch = epoch + 1;
      if (last) end_phase(phase);
      save_state(false);
      write_logs();
      ++epochs_run;
      if (options.stop_after_epochs >= 0 && epochs_run >= options.stop_after_epochs) return RunResult{};
    }
    return finish();
  }
};

Experiment::Experiment(ExperimentSpec spec, RunOptions options) : impl_(std::make_unique<Impl>()) {
  impl_->spec = std::move(spec);
  impl_->options = std::move(options);
}

Experiment::~Experiment() = default;

RunResult Experiment::run() { return impl_->run(); }
const ExperimentSpec& Experiment::spec() const { return impl_->spec; }
const SNet<float>* Experiment::source_net() const { return impl_->snet_s.get(); }
const SNet<float>& Experiment::target_net() const { return *impl_->snet_t; }
const Discriminator<float>* Experiment::discriminator() const { return impl_->disc.get(); }
const std::vector<TrainLogRow>& Experiment::train_log() const { return impl_->train_rows; }
const std::vector<ValLogRow>& Experiment::val_log() const { return impl_->val_rows; }

RunResult run_strategy(const ExperimentSpec& spec, const RunOptions& options) {
  Experiment e(spec, options);
  return e.run();
}

}  // namespace bowda
