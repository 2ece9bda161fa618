#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "bowda/image.hpp"

namespace bowda {

/// Dice coefficient in percent; 100 when both masks are empty.
double dsc(const Mask& a, const Mask& b);

/// Signed relative volume difference in percent, 100 (V_seg - V_ref) / V_ref,
/// with physical voxel volumes. Throws std::domain_error for an empty reference.
double rvd(const Mask& seg, const Mask& ref);

/// Symmetric mean of boundary-to-boundary shortest distances (mm).
/// Throws std::domain_error when either mask is empty.
double abd(const Mask& a, const Mask& b);

/// Hausdorff distance between the two boundary point sets (mm).
double hd(const Mask& a, const Mask& b);

struct SurfaceDistance {
  double abd = 0.0;
  double hd = 0.0;
};

/// Both surface metrics from one pair of distance transforms.
SurfaceDistance surface_distance(const Mask& a, const Mask& b);

/// Inclusive slice index range; empty when first > last.
struct SliceRange {
  int first = 0;
  int last = -1;

  int count() const { return last >= first ? last - first + 1 : 0; }
};

struct RegionSplit {
  SliceRange apex, mid, base;
};

/// Splits the axial extent of the reference foreground into thirds: apex is
/// the first round(n/3) slices, base the last n - round(2n/3). Throws
/// std::domain_error when fewer than 3 slices carry foreground.
RegionSplit region_split(const Mask& ref);

/// Copy of `m` with every slice outside `r` cleared.
Mask restrict_slices(const Mask& m, const SliceRange& r);

/// All four metrics; surface metrics (and RVD) are NaN where undefined.
struct MetricValues {
  double dsc = 0.0;
  double rvd = 0.0;
  double abd = 0.0;
  double hd = 0.0;
};

MetricValues evaluate_pair(const Mask& seg, const Mask& ref);

struct MetricRow {
  std::string case_id;
  std::string region;  // whole, apex, base
  MetricValues values;
};

struct MetricSummary {
  MetricValues mean;
  MetricValues stddev;  // sample standard deviation; NaN below two values
};

class MetricReport {
 public:
  /// Adds whole-volume rows and, when the reference spans >= 3 foreground
  /// slices, apex and base rows.
  void add_case(const std::string& case_id, const Mask& seg, const Mask& ref);

  const std::vector<MetricRow>& rows() const { return rows_; }
  /// Mean and standard deviation over rows of `region`, ignoring NaNs.
  MetricSummary summary(const std::string& region) const;

  /// One row per case and region, then mean and std rows per region.
  void write_csv(const std::filesystem::path& path) const;
  std::string to_csv() const;

 private:
  std::vector<MetricRow> rows_;
};

struct TTestResult {
  std::size_t n = 0;
  double t = 0.0;
  double p = 1.0;
  bool significant = false;
};

/// Two-sided paired t-test with n - 1 degrees of freedom. Throws
/// std::invalid_argument for unequal or too-short samples and
/// std::domain_error when every difference is equal.
TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b, double alpha = 0.05);

/// Columns metric,n,t,p,significant.
void write_ttest_csv(const std::vector<std::pair<std::string, TTestResult>>& rows,
                     const std::filesystem::path& path);

}  // namespace bowda
