#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bowda/checkpoint.hpp"
#include "bowda/config.hpp"
#include "bowda/losses.hpp"
#include "bowda/metrics.hpp"
#include "bowda/networks.hpp"
#include "bowda/phantom.hpp"
#include "bowda/pipeline.hpp"

namespace bowda {

struct SGDConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  double decay = 1e-6;  // learning-rate decay per epoch: lr / (1 + decay * epoch)
  int batch = 2;

  static SGDConfig paper() { return {1e-4, 0.9, 1e-6, 4}; }
  double learning_rate(int epoch) const { return lr / (1.0 + decay * epoch); }
  void validate() const;
};

/// Momentum buffers keyed by parameter name, created on first use.
template <typename T>
using Velocity = std::map<std::string, Tensor<T>>;

/// v = momentum * v - lr_e * g; w = w + v for every trainable parameter.
/// Every gradient is checked first, so a non-finite one throws (naming the
/// parameter) without modifying anything.
template <typename T>
void sgd_step(ParamStore<T>& store, Velocity<T>& velocity, const SGDConfig& cfg, int epoch);

enum class Strategy { target_only, mix_direct, mix_resampled, finetune, finetune_resampled, adapt_ce, adapt_bowda };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);
bool is_adversarial(Strategy s);
/// Strategies with a supervised source-domain pretraining phase.
bool uses_source_phase(Strategy s);
bool resamples_source(Strategy s);

enum class SegLoss { cross_entropy, bwsl };

/// Either a phantom recipe (generated in memory) or a dataset manifest.
struct DomainData {
  std::optional<DomainSpec> phantom;
  std::filesystem::path manifest;
  int val_count = 0;  // phantom only: the trailing cases form the validation split

  bool present() const { return phantom.has_value() || !manifest.empty(); }
};

struct EpochPlan {
  int source = 30;
  int target = 40;
  int mixed = 20;
  int adversarial = 30;
};

struct ExperimentSpec {
  Strategy strategy = Strategy::target_only;
  std::uint64_t seed = 0;
  DomainData source;
  DomainData target;
  SGDConfig sgd;
  SGDConfig discriminator_sgd;
  LossConfig loss;
  /// Loss of the supervised target/mixed phases and of SNet-t in the
  /// adversarial phase; unset means BWSL for adapt_bowda and cross entropy otherwise.
  std::optional<SegLoss> segmentation_loss;
  SNetConfig snet = SNetConfig::desk();
  DiscriminatorConfig discriminator;
  EpochPlan epochs;
  int steps_per_epoch = 0;  // 0: one pass over the phase's training cases
  CropSpec crop;
  WindowSpec window;
  bool augment = true;
  double adversarial_weight = 1.0;
  int validate_every = 1;
  /// Reuse a pretrained SNet-s (its training digest must match this spec's).
  std::filesystem::path source_checkpoint;
  std::filesystem::path output_dir;

  SegLoss effective_segmentation_loss() const;
  void validate() const;
  /// Digest of everything that influences results (output_dir and
  /// source_checkpoint excluded).
  std::string digest() const;
  /// Digest of the settings that determine the source-phase network.
  std::string source_phase_digest() const;
};

void to_json(Json& j, const SGDConfig& c);
void from_json(const Json& j, SGDConfig& c);
void to_json(Json& j, const CropSpec& c);
void from_json(const Json& j, CropSpec& c);
void to_json(Json& j, const ExperimentSpec& s);
void from_json(const Json& j, ExperimentSpec& s);

ExperimentSpec read_experiment_spec(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

struct Case {
  std::string id;
  Volume image;
  Mask label;
};

struct DomainCases {
  std::vector<Case> train;
  std::vector<Case> val;
};

/// Loads (or generates) a domain. When `resample_to` is set, images are
/// resampled trilinearly and labels by nearest neighbour before intensity
/// normalization. One line per preprocessing action is appended to `log`.
DomainCases load_domain(const DomainData& data, const std::string& name, const std::optional<Spacing>& resample_to,
                        std::vector<std::string>& log);

struct Batch {
  Tensor<float> image;  // (N, 1, D, H, W)
  std::vector<Mask> labels;
};

/// One random crop (and optional augmentation) per listed case, drawn in order from `rng`.
Batch sample_batch(const std::vector<const Case*>& cases, const CropSpec& crop, bool augment, Rng& rng);

/// Mean over the batch of the per-sample segmentation loss; `grad` receives
/// d loss / d prob with the prob tensor's shape.
double segmentation_loss(const Tensor<float>& prob, const std::vector<Mask>& labels, SegLoss kind,
                         const LossConfig& cfg, Tensor<float>& grad);

/// Architecture digest stored in network checkpoints.
std::string architecture_digest(const SNetConfig& cfg);

Checkpoint snet_checkpoint(const SNet<float>& net);
/// Rebuilds the network recorded in a checkpoint written by snet_checkpoint.
std::unique_ptr<SNet<float>> load_snet(const Checkpoint& ck);

/// Copies SNet-s into SNet-t. Throws if the checkpoint was written for a
/// different architecture than `target`'s.
void init_target_from_source(const Checkpoint& source, SNet<float>& target);

/// Eval-mode probability map of a whole volume by sliding-window inference.
Volume predict_volume(SNet<float>& net, const Volume& image, const WindowSpec& window);

struct TrainLogRow {
  std::string phase;
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
  double seg_loss = 0.0;
  double adv_loss = 0.0;
  double disc_loss = 0.0;
  double lr = 0.0;
};

struct ValLogRow {
  std::string phase;
  int epoch = 0;
  double dsc = 0.0;
};

struct RunOptions {
  std::filesystem::path out;
  bool resume = false;
  /// Testing hook: stop after this many epochs have run in this invocation
  /// (the resumable state is saved first). Negative means no limit.
  int stop_after_epochs = -1;
  /// Stop once this many phases are complete (1 = source pretraining only).
  /// Negative means run every phase and the final evaluation.
  int max_phases = -1;
  bool quiet = true;
};

struct RunResult {
  bool complete = false;
  double best_dsc = 0.0;
  int best_epoch = -1;
  MetricReport report;
};

/// Runs one strategy end to end. Writes into options.out:
///   spec.json, pipeline_log.txt, model_summary.txt, train_log.csv,
///   val_log.csv, snet_s.bwck (strategies with source pretraining),
///   best.bwck, final.bwck, metrics.csv, checkpoints/state.bwck
class Experiment {
 public:
  Experiment(ExperimentSpec spec, RunOptions options);
  ~Experiment();
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  RunResult run();

  const ExperimentSpec& spec() const;
  /// The frozen source network (strategies with source pretraining).
  const SNet<float>* source_net() const;
  const SNet<float>& target_net() const;
  const Discriminator<float>* discriminator() const;
  const std::vector<TrainLogRow>& train_log() const;
  const std::vector<ValLogRow>& val_log() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

RunResult run_strategy(const ExperimentSpec& spec, const RunOptions& options);

void write_train_log_csv(const std::vector<TrainLogRow>& rows, const std::filesystem::path& path);
void write_val_log_csv(const std::vector<ValLogRow>& rows, const std::filesystem::path& path);

}  // namespace bowda
