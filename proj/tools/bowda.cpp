// Command-line entry point. Exit codes: 0 success, 1 invalid arguments or
// configuration, 2 failure while running.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bowda/boundary.hpp"
#include "bowda/config.hpp"
#include "bowda/gradcheck.hpp"
#include "bowda/metrics.hpp"
#include "bowda/parallel.hpp"
#include "bowda/phantom.hpp"
#include "bowda/trainer.hpp"
#include "bowda/volume.hpp"

namespace fs = std::filesystem;
using namespace bowda;

namespace {

/// Errors in what the user asked for (exit 1) as opposed to failures while running (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::vector<std::string> sets;
  std::string out;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--seed", c.seed, "Master seed (overrides the spec)");
  cmd->add_option("--threads", c.threads, "Worker threads (default: BOWDA_THREADS or all cores)");
  cmd->add_option("--set", c.sets, "Override a spec field: dotted.key=value (repeatable)");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
}

ExperimentSpec load_spec(const std::string& path, const Common& c) {
  ExperimentSpec s;
  try {
    s = read_experiment_spec(path, c.sets);
    if (c.seed) s.seed = *c.seed;
    if (!c.out.empty()) s.output_dir = c.out;
    s.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return s;
}

void write_report_summary(const MetricReport& report, std::ostream& os) {
  const MetricSummary s = report.summary("whole");
  char buf[256];
  std::snprintf(buf, sizeof buf, "DSC %.4f  RVD %.4f  ABD %.4f  HD %.4f\n", s.mean.dsc, s.mean.rvd, s.mean.abd,
                s.mean.hd);
  os << buf;
}

int cmd_gen_phantom(const std::string& domain, const std::string& spec_path, int count, double val_fraction,
                    const Common& c) {
  DomainSpec spec;
  try {
    Json j = domain.empty() ? Json::object() : Json{{"preset", domain}};
    if (!spec_path.empty()) {
      std::ifstream in(spec_path);
      if (!in) throw std::invalid_argument("cannot read " + spec_path);
      Json file = Json::parse(in);
      if (!domain.empty()) file["preset"] = domain;
      j = file;
    }
    for (const auto& s : c.sets) apply_override(j, s);
    spec = j.get<DomainSpec>();
    if (c.seed) spec.seed = *c.seed;
    if (count > 0) spec.count = count;
    spec.validate();
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("--val-fraction must be in [0, 1)");
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const DatasetManifest m = gen_dataset(spec, spec.count, c.out, val_fraction);
  std::cout << "wrote " << m.cases.size() << " cases to " << c.out << "\n";
  return 0;
}

int cmd_run(const std::string& spec_path, const std::string& strategy, bool resume, int stop_after, int max_phases,
            const std::string& source_ck, const Common& c) {
  ExperimentSpec s = load_spec(spec_path, c);
  try {
    if (!strategy.empty()) s.strategy = parse_strategy(strategy);
    if (!source_ck.empty()) s.source_checkpoint = source_ck;
    if (max_phases == 1 && !uses_source_phase(s.strategy)) {
      throw std::invalid_argument("train-source needs a strategy with source pretraining, got " +
                                  to_string(s.strategy));
    }
    if (!source_ck.empty() && !is_adversarial(s.strategy)) {
      throw std::invalid_argument("train-adapt needs an adapt_* strategy, got " + to_string(s.strategy));
    }
    s.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  RunOptions o;
  o.out = c.out;
  o.resume = resume;
  o.stop_after_epochs = stop_after;
  o.max_phases = max_phases;
  o.quiet = !c.verbose;
  const RunResult r = run_strategy(s, o);
  if (max_phases == 1) {
    std::cout << "source network written to " << (fs::path(c.out) / "snet_s.bwck").string() << "\n";
  } else if (!r.complete) {
    std::cout << "stopped early; resume with --resume\n";
  } else {
    std::cout << to_string(s.strategy) << " best validation DSC " << r.best_dsc << " (epoch " << r.best_epoch
              << ")\n";
    write_report_summary(r.report, std::cout);
  }
  return 0;
}

int cmd_infer(const std::string& ck_path, const std::string& image_path, const std::vector<int>& window,
              const std::vector<int>& stride, const Common& c) {
  WindowSpec w;
  try {
    if (!window.empty()) {
      if (window.size() != 3) throw std::invalid_argument("--window takes three values");
      w = WindowSpec::half_overlap(Dims{window[0], window[1], window[2]});
    }
    if (!stride.empty()) {
      if (stride.size() != 3) throw std::invalid_argument("--stride takes three values");
      w.stride = Dims{stride[0], stride[1], stride[2]};
    }
    w.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  auto net = load_snet(read_checkpoint(ck_path));
  const Volume image = znormalize(read_metaimage(image_path));
  const Volume prob = predict_volume(*net, image, w);
  fs::create_directories(c.out);
  write_metaimage(prob, fs::path(c.out) / "probability.mhd");
  write_metaimage(Mask::threshold(prob, 0.5), fs::path(c.out) / "segmentation.mhd");
  std::cout << "wrote probability.mhd and segmentation.mhd to " << c.out << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ref_path, const std::string& seg_path, const Common& c) {
  const Mask ref = read_mask(ref_path);
  const Mask seg = read_mask(seg_path);
  if (!(ref.dims() == seg.dims())) {
    throw UsageError("reference dims " + to_string(ref.dims()) + " differ from segmentation dims " +
                     to_string(seg.dims()));
  }
  MetricReport report;
  report.add_case(fs::path(seg_path).stem().string(), seg, ref);
  const MetricValues v = report.rows().front().values;
  char buf[256];
  std::snprintf(buf, sizeof buf, "DSC %.6f\nRVD %.6f\nABD %.6f\nHD %.6f\n", v.dsc, v.rvd, v.abd, v.hd);
  std::cout << buf;
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    report.write_csv(fs::path(c.out) / "metrics.csv");
  }
  return 0;
}

int cmd_gradcheck(bool all, const std::vector<std::string>& ops, double tol, int seeds, const Common& c) {
  if (!all && ops.empty()) throw UsageError("gradcheck: pass --all or at least one --op");
  if (!(tol > 0)) throw UsageError("gradcheck: --tol must be > 0");
  if (seeds < 1) throw UsageError("gradcheck: --seeds must be >= 1");
  GradcheckOptions opt;
  opt.tolerance = tol;
  const std::uint64_t base = c.seed.value_or(0);
  std::vector<GradcheckReport> merged;
  for (int s = 0; s < seeds; ++s) {
    for (auto& r : run_standard_gradchecks(base + static_cast<std::uint64_t>(s), opt)) {
      if (!all && std::find(ops.begin(), ops.end(), r.name) == ops.end()) continue;
      auto it = std::find_if(merged.begin(), merged.end(), [&](const GradcheckReport& m) { return m.name == r.name; });
      if (it == merged.end()) {
        merged.push_back(std::move(r));
      } else {
        // keep the worst group result per name across seeds
        for (std::size_t g = 0; g < r.groups.size() && g < it->groups.size(); ++g) {
          it->groups[g].max_rel_error = std::max(it->groups[g].max_rel_error, r.groups[g].max_rel_error);
          it->groups[g].checked += r.groups[g].checked;
          it->groups[g].skipped += r.groups[g].skipped;
        }
      }
    }
  }
  if (merged.empty()) throw UsageError("gradcheck: no check matches the requested --op names");
  const std::string table = format_gradcheck_table(merged);
  std::cout << table;
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "gradcheck.txt") << table;
  }
  bool ok = true;
  for (const auto& r : merged) ok = ok && r.passed();
  return ok ? 0 : 2;
}

int cmd_histogram(const std::string& image_path, const std::string& label_path, int bins, const Common& c) {
  if (bins < 1) throw UsageError("histogram: --bins must be >= 1");
  const Volume image = read_metaimage(image_path);
  const Mask label = read_mask(label_path);
  const Histogram h = boundary_gradient_histogram(image, label, bins);
  fs::create_directories(c.out);
  write_histogram_csv(h, fs::path(c.out) / "histogram.csv");
  std::cout << "mean boundary gradient " << h.sample_mean << " over " << h.total() << " voxels\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Boundary-weighted domain adaptation for volumetric segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;

  auto* gen = app.add_subcommand("gen-phantom", "Generate a synthetic dataset (MetaImage pairs + manifest)");
  std::string domain, domain_spec;
  int count = 0;
  double val_fraction = 0.0;
  gen->add_option("--domain", domain, "Preset: source or target")->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--domain-spec", domain_spec, "JSON domain recipe");
  gen->add_option("--count", count, "Number of cases (default: from the recipe)");
  gen->add_option("--val-fraction", val_fraction, "Fraction of trailing cases marked as validation");
  add_common(gen, common, true);

  std::string spec_path, strategy, source_ck;
  bool resume = false;
  int stop_after = -1;
  auto* train_src = app.add_subcommand("train-source", "Supervised source-domain pretraining (writes snet_s.bwck)");
  train_src->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
  add_common(train_src, common, true);

  auto* train_adapt = app.add_subcommand("train-adapt", "Adversarial adaptation from a pretrained source network");
  train_adapt->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
  train_adapt->add_option("--source-checkpoint", source_ck, "snet_s.bwck from train-source")->required();
  add_common(train_adapt, common, true);

  auto* run = app.add_subcommand("run-strategy", "Run a training strategy end to end and evaluate it");
  run->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
  run->add_option("--strategy", strategy, "Override the spec's strategy");
  run->add_option("--source-checkpoint", source_ck, "Reuse a pretrained source network");
  run->add_flag("--resume", resume, "Continue from <out>/checkpoints/state.bwck");
  run->add_option("--stop-after-epochs", stop_after, "Stop after N epochs (state is saved)");
  for (auto* cmd : {train_src, train_adapt, run}) cmd->add_flag("-v,--verbose", common.verbose, "Progress on stderr");
  add_common(run, common, true);

  auto* infer = app.add_subcommand("infer", "Sliding-window inference with a network checkpoint");
  std::string ck_path, image_path;
  std::vector<int> window, stride;
  infer->add_option("--checkpoint", ck_path, "Network checkpoint (best.bwck, final.bwck, snet_s.bwck)")->required();
  infer->add_option("--image", image_path, "MetaImage volume")->required();
  infer->add_option("--window", window, "Window dims d h w (default 8 32 32)")->expected(3);
  infer->add_option("--stride", stride, "Stride d h w (default half the window)")->expected(3);
  add_common(infer, common, true);

  auto* eval = app.add_subcommand("evaluate", "DSC, RVD, ABD and HD of a segmentation against a reference");
  std::string ref_path, seg_path;
  eval->add_option("--ref", ref_path, "Reference mask (MetaImage)")->required();
  eval->add_option("--seg", seg_path, "Segmentation mask (MetaImage)")->required();
  add_common(eval, common, false);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  bool all = false;
  std::vector<std::string> ops;
  double tol = 1e-4;
  int seeds = 1;
  grad->add_flag("--all", all, "Check every primitive, block, network and loss");
  grad->add_option("--op", ops, "Check only the named entries (repeatable)");
  grad->add_option("--tol", tol, "Maximum relative error");
  grad->add_option("--seeds", seeds, "Number of consecutive seeds");
  add_common(grad, common, false);

  auto* hist = app.add_subcommand("histogram", "Gradient-magnitude histogram on a label's boundary");
  std::string label_path;
  int bins = 32;
  hist->add_option("--image", image_path, "MetaImage volume")->required();
  hist->add_option("--label", label_path, "Label mask")->required();
  hist->add_option("--bins", bins, "Number of bins");
  add_common(hist, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    set_num_threads(resolve_thread_count(common.threads));
    if (*gen) return cmd_gen_phantom(domain, domain_spec, count, val_fraction, common);
    if (*train_src) return cmd_run(spec_path, "", false, -1, 1, "", common);
    if (*train_adapt) return cmd_run(spec_path, "", false, -1, -1, source_ck, common);
    if (*run) return cmd_run(spec_path, strategy, resume, stop_after, -1, source_ck, common);
    if (*infer) return cmd_infer(ck_path, image_path, window, stride, common);
    if (*eval) return cmd_evaluate(ref_path, seg_path, common);
    if (*grad) return cmd_gradcheck(all, ops, tol, seeds, common);
    if (*hist) return cmd_histogram(image_path, label_path, bins, common);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
