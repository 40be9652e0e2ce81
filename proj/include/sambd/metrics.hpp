#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sambd/volume.hpp"

namespace sambd::metrics {

using vol::BinaryMask;
using vol::LabelVolume;

struct Overlap {
  std::uint64_t pred = 0, ref = 0, inter = 0;
};

Overlap overlap(const BinaryMask& pred, const BinaryMask& ref);

// Both empty scores 1, exactly one empty scores 0.
double dice(const Overlap& o);
double voe(const Overlap& o);
// (pred - ref) / ref; absent for an empty reference.
std::optional<double> rvd(const Overlap& o);

double dice(const BinaryMask& pred, const BinaryMask& ref);
double voe(const BinaryMask& pred, const BinaryMask& ref);
std::optional<double> rvd(const BinaryMask& pred, const BinaryMask& ref);

// Pooled 2 * sum(inter) / sum(pred + ref) over cases.
double dice_global(std::span<const Overlap> cases);

struct SurfacePoint {
  std::int64_t x, y, z;  // voxel indices
};

// Mask voxels with a face neighbour outside the mask; the volume border
// counts as outside. Empty for an empty mask.
std::vector<SurfacePoint> surface_points(const BinaryMask& mask);

// Euclidean distance in millimetres between two voxel centres.
double point_distance(const SurfacePoint& a, const SurfacePoint& b, const vol::Spacing& s);

struct SurfaceDistances {
  double assd = 0.0;  // mean
  double msd = 0.0;   // max (symmetric)
  double rmsd = 0.0;  // root mean square
};

// Statistics of nearest-surface distances taken in both directions. Absent
// when either mask is empty.
std::optional<SurfaceDistances> surface_distances(const BinaryMask& pred, const BinaryMask& ref,
                                                  const vol::Spacing& spacing);
// Exhaustive O(S1 * S2) search; same results as surface_distances.
std::optional<SurfaceDistances> surface_distances_brute_force(const BinaryMask& pred, const BinaryMask& ref,
                                                              const vol::Spacing& spacing);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-sided
  std::size_t df = 0;
  bool degenerate = false;  // zero variance of the differences
};

// Paired t-test on a - b with n - 1 degrees of freedom.
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b);

struct ClassMetrics {
  Overlap counts;
  double dice = 0.0;
  double voe = 0.0;
  std::optional<double> rvd;
  std::optional<SurfaceDistances> distances;
};

struct CaseMetrics {
  std::string id;
  ClassMetrics liver;  // labels {1, 2}
  ClassMetrics tumor;  // label 2
};

BinaryMask liver_mask(const LabelVolume& labels);
BinaryMask tumor_mask(const LabelVolume& labels);

ClassMetrics evaluate_class(const BinaryMask& pred, const BinaryMask& ref, const vol::Spacing& spacing);
CaseMetrics evaluate_case(std::string id, const LabelVolume& pred, const LabelVolume& ref);

struct ClassAggregate {
  double dice_per_case = 0.0;
  double dice_per_case_sd = 0.0;
  double dice_global = 0.0;
  double voe = 0.0;
  std::optional<double> rvd;
  std::optional<double> assd, msd, rmsd;
};

struct AggregateReport {
  std::vector<CaseMetrics> cases;
  std::vector<std::string> missing;
  ClassAggregate liver, tumor;
};

AggregateReport aggregate(std::vector<CaseMetrics> cases, std::vector<std::string> missing = {});

nlohmann::ordered_json report_json(const AggregateReport& report);

double mean(std::span<const double> values);
// Sample standard deviation; 0 for fewer than two values.
double sample_sd(std::span<const double> values);

}  // namespace sambd::metrics
