#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bowda/tape.hpp"

namespace bowda {

struct GradcheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  std::size_t coords_per_group = 8;  // sampled coordinates per group (all if the group is smaller)
  std::uint64_t seed = 0;
  /// Relative errors use max(|analytic|, |numeric|, floor * max |analytic| over the group).
  double relative_floor = 1e-3;
  /// A coordinate whose central differences at step and step/2 disagree by
  /// more than this (relative) sits on a kink; it is skipped and replaced.
  double kink_threshold = 1e-5;
  /// Fraction of skipped coordinates (over the whole report) that fails it.
  double max_skipped_fraction = 0.1;
};

struct GradcheckGroup {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct GradcheckReport {
  std::string name;
  std::vector<GradcheckGroup> groups;
  double tolerance = 0.0;
  double max_skipped_fraction = 1.0;

  double max_rel_error() const;
  bool passed() const;
};

/// A scalar objective over parameter groups. objective(true) must accumulate
/// its gradient into each group's `grad` (which the checker zeroes first).
struct GradcheckProblem {
  std::string name;
  std::vector<Parameter<double>*> groups;
  std::function<double(bool with_grad)> objective;
};

GradcheckReport gradcheck(const GradcheckProblem& problem, const GradcheckOptions& opt);

/// Turns a graph builder into an objective: sum(r * output) with a fixed
/// random projection r (drawn from `seed` once the output shape is known).
std::function<double(bool)> projected_objective(std::function<Var<double>(Tape<double>&)> build,
                                                std::uint64_t seed);

/// Every primitive, block, network and loss at miniature sizes.
std::vector<GradcheckReport> run_standard_gradchecks(std::uint64_t seed, const GradcheckOptions& base = {});

/// One line per report: name, worst group, max relative error, verdict.
std::string format_gradcheck_table(const std::vector<GradcheckReport>& reports);

}  // namespace bowda
