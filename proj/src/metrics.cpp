#include "sambd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace sambd::metrics {

namespace {

void check_same_dims(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) throw std::invalid_argument("metrics: masks differ in size");
}

double squared_distance(const SurfacePoint& a, const SurfacePoint& b, const vol::Spacing& s) {
  const double dx = static_cast<double>(a.x - b.x) * s.x;
  const double dy = static_cast<double>(a.y - b.y) * s.y;
  const double dz = static_cast<double>(a.z - b.z) * s.z;
  return (dx * dx + dy * dy) + dz * dz;
}

SurfaceDistances summarize(const std::vector<double>& d) {
  SurfaceDistances out;
  double sum = 0.0, sum_sq = 0.0;
  for (double v : d) {
    sum += v;
    sum_sq += v * v;
    out.msd = std::max(out.msd, v);
  }
  const double n = static_cast<double>(d.size());
  out.assd = sum / n;
  out.rmsd = std::sqrt(sum_sq / n);
  return out;
}

// Surface points grouped by slice, then by row, for pruned nearest search.
class SurfaceIndex {
 public:
  SurfaceIndex(const std::vector<SurfacePoint>& points, const vol::Dims& dims) : dims_(dims) {
    rows_.resize(dims.z * dims.y);
    for (const auto& p : points) rows_[static_cast<std::size_t>(p.z) * dims.y + static_cast<std::size_t>(p.y)].push_back(p.x);
    slice_has_points_.assign(dims.z, false);
    for (const auto& p : points) slice_has_points_[static_cast<std::size_t>(p.z)] = true;
  }

  // Exact minimum of squared_distance(a, b) over indexed points b.
  double nearest_squared(const SurfacePoint& a, const vol::Spacing& s) const {
    double best = std::numeric_limits<double>::infinity();
    const auto Z = static_cast<std::int64_t>(dims_.z), Y = static_cast<std::int64_t>(dims_.y);
    for (std::int64_t dz = 0; dz < Z; ++dz) {
      const double zt = static_cast<double>(dz) * s.z;
      if (zt * zt >= best) break;
      for (int sign_z : {1, -1}) {
        if (dz == 0 && sign_z < 0) continue;
        const std::int64_t z = a.z + sign_z * dz;
        if (z < 0 || z >= Z || !slice_has_points_[static_cast<std::size_t>(z)]) continue;
        for (std::int64_t dy = 0; dy < Y; ++dy) {
          const double yt = static_cast<double>(dy) * s.y;
          // Lower bound for any point in rows at this |dy|; addition is
          // monotone, so it never exceeds an exact distance.
          if (yt * yt + zt * zt >= best) break;
          for (int sign_y : {1, -1}) {
            if (dy == 0 && sign_y < 0) continue;
            const std::int64_t y = a.y + sign_y * dy;
            if (y < 0 || y >= Y) continue;
            for (std::int64_t x : rows_[static_cast<std::size_t>(z) * dims_.y + static_cast<std::size_t>(y)]) {
              best = std::min(best, squared_distance(a, {x, y, z}, s));
            }
          }
        }
      }
    }
    return best;
  }

 private:
  vol::Dims dims_;
  std::vector<std::vector<std::int64_t>> rows_;
  std::vector<bool> slice_has_points_;
};

}  // namespace

Overlap overlap(const BinaryMask& pred, const BinaryMask& ref) {
  check_same_dims(pred, ref);
  Overlap o;
  for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
    const bool p = pred.voxels[i] != 0, r = ref.voxels[i] != 0;
    o.pred += p;
    o.ref += r;
    o.inter += p && r;
  }
  return o;
}

double dice(const Overlap& o) {
  if (o.pred + o.ref == 0) return 1.0;
  return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.pred + o.ref);
}

double voe(const Overlap& o) {
  const std::uint64_t uni = o.pred + o.ref - o.inter;
  if (uni == 0) return 0.0;
  return 1.0 - static_cast<double>(o.inter) / static_cast<double>(uni);
}

std::optional<double> rvd(const Overlap& o) {
  if (o.ref == 0) return std::nullopt;
  return (static_cast<double>(o.pred) - static_cast<double>(o.ref)) / static_cast<double>(o.ref);
}

double dice(const BinaryMask& pred, const BinaryMask& ref) { return dice(overlap(pred, ref)); }
double voe(const BinaryMask& pred, const BinaryMask& ref) { return voe(overlap(pred, ref)); }
std::optional<double> rvd(const BinaryMask& pred, const BinaryMask& ref) { return rvd(overlap(pred, ref)); }

double dice_global(std::span<const Overlap> cases) {
  if (cases.empty()) throw std::invalid_argument("dice_global: needs at least one case");
  std::uint64_t inter = 0, total = 0;
  for (const auto& o : cases) {
    inter += o.inter;
    total += o.pred + o.ref;
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

std::vector<SurfacePoint> surface_points(const BinaryMask& mask) {
  const vol::Dims d = mask.dims;
  std::vector<SurfacePoint> out;
  auto inside = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    if (x < 0 || y < 0 || z < 0 || x >= static_cast<std::int64_t>(d.x) || y >= static_cast<std::int64_t>(d.y) ||
        z >= static_cast<std::int64_t>(d.z)) {
      return false;
    }
    return mask.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)) != 0;
  };
  for (std::int64_t z = 0; z < static_cast<std::int64_t>(d.z); ++z) {
    for (std::int64_t y = 0; y < static_cast<std::int64_t>(d.y); ++y) {
      for (std::int64_t x = 0; x < static_cast<std::int64_t>(d.x); ++x) {
        if (!inside(x, y, z)) continue;
        if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) || !inside(x, y + 1, z) ||
            !inside(x, y, z - 1) || !inside(x, y, z + 1)) {
          out.push_back({x, y, z});
        }
      }
    }
  }
  return out;
}

double point_distance(const SurfacePoint& a, const SurfacePoint& b, const vol::Spacing& s) {
  return std::sqrt(squared_distance(a, b, s));
}

std::optional<SurfaceDistances> surface_distances(const BinaryMask& pred, const BinaryMask& ref,
                                                  const vol::Spacing& spacing) {
  check_same_dims(pred, ref);
  const auto sp = surface_points(pred);
  const auto sr = surface_points(ref);
  if (sp.empty() || sr.empty()) return std::nullopt;
  const SurfaceIndex ip(sp, pred.dims), ir(sr, ref.dims);
  std::vector<double> d;
  d.reserve(sp.size() + sr.size());
  for (const auto& a : sp) d.push_back(std::sqrt(ir.nearest_squared(a, spacing)));
  for (const auto& b : sr) d.push_back(std::sqrt(ip.nearest_squared(b, spacing)));
  return summarize(d);
}

std::optional<SurfaceDistances> surface_distances_brute_force(const BinaryMask& pred, const BinaryMask& ref,
                                                              const vol::Spacing& spacing) {
  check_same_dims(pred, ref);
  const auto sp = surface_points(pred);
  const auto sr = surface_points(ref);
  if (sp.empty() || sr.empty()) return std::nullopt;
  std::vector<double> d;
  auto directed = [&](const std::vector<SurfacePoint>& from, const std::vector<SurfacePoint>& to) {
    for (const auto& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : to) best = std::min(best, point_distance(a, b, spacing));
      d.push_back(best);
    }
  };
  directed(sp, sr);
  directed(sr, sp);
  return summarize(d);
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_ttest: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_ttest: needs at least two pairs");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  TTestResult r;
  r.df = a.size() - 1;
  const double m = mean(diff);
  const double sd = sample_sd(diff);
  if (sd == 0.0) {
    r.degenerate = true;
    if (m == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = m > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = m / (sd / std::sqrt(static_cast<double>(a.size())));
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

BinaryMask liver_mask(const LabelVolume& labels) {
  BinaryMask m(labels.dims, labels.spacing);
  for (std::size_t i = 0; i < labels.voxels.size(); ++i) {
    m.voxels[i] = labels.voxels[i] == vol::kLiver || labels.voxels[i] == vol::kTumor;
  }
  return m;
}

BinaryMask tumor_mask(const LabelVolume& labels) {
  BinaryMask m(labels.dims, labels.spacing);
  for (std::size_t i = 0; i < labels.voxels.size(); ++i) m.voxels[i] = labels.voxels[i] == vol::kTumor;
  return m;
}

ClassMetrics evaluate_class(const BinaryMask& pred, const BinaryMask& ref, const vol::Spacing& spacing) {
  ClassMetrics c;
  c.counts = overlap(pred, ref);
  c.dice = dice(c.counts);
  c.voe = voe(c.counts);
  c.rvd = rvd(c.counts);
  c.distances = surface_distances(pred, ref, spacing);
  return c;
}

CaseMetrics evaluate_case(std::string id, const LabelVolume& pred, const LabelVolume& ref) {
  if (pred.dims != ref.dims) throw std::invalid_argument("evaluate_case: prediction and reference differ in size");
  CaseMetrics c;
  c.id = std::move(id);
  c.liver = evaluate_class(liver_mask(pred), liver_mask(ref), ref.spacing);
  c.tumor = evaluate_class(tumor_mask(pred), tumor_mask(ref), ref.spacing);
  return c;
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double sample_sd(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size() - 1));
}

namespace {

ClassAggregate aggregate_class(const std::vector<CaseMetrics>& cases, ClassMetrics CaseMetrics::*member) {
  ClassAggregate a;
  std::vector<double> dices, voes, rvds, assds, msds, rmsds;
  std::vector<Overlap> counts;
  for (const auto& c : cases) {
    const ClassMetrics& m = c.*member;
    dices.push_back(m.dice);
    voes.push_back(m.voe);
    counts.push_back(m.counts);
    if (m.rvd) rvds.push_back(*m.rvd);
    if (m.distances) {
      assds.push_back(m.distances->assd);
      msds.push_back(m.distances->msd);
      rmsds.push_back(m.distances->rmsd);
    }
  }
  if (cases.empty()) return a;
  a.dice_per_case = mean(dices);
  a.dice_per_case_sd = sample_sd(dices);
  a.dice_global = dice_global(counts);
  a.voe = mean(voes);
  if (!rvds.empty()) a.rvd = mean(rvds);
  if (!assds.empty()) {
    a.assd = mean(assds);
    a.msd = mean(msds);
    a.rmsd = mean(rmsds);
  }
  return a;
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json class_json(const ClassMetrics& m) {
  nlohmann::ordered_json j;
  j["dice"] = m.dice;
  j["voe"] = m.voe;
  j["rvd"] = optional_json(m.rvd);
  j["assd_mm"] = optional_json(m.distances ? std::optional(m.distances->assd) : std::nullopt);
  j["msd_mm"] = optional_json(m.distances ? std::optional(m.distances->msd) : std::nullopt);
  j["rmsd_mm"] = optional_json(m.distances ? std::optional(m.distances->rmsd) : std::nullopt);
  j["voxels_pred"] = m.counts.pred;
  j["voxels_ref"] = m.counts.ref;
  j["voxels_overlap"] = m.counts.inter;
  return j;
}

nlohmann::ordered_json aggregate_json(const ClassAggregate& a) {
  nlohmann::ordered_json j;
  j["dice_per_case"] = a.dice_per_case;
  j["dice_per_case_sd"] = a.dice_per_case_sd;
  j["dice_global"] = a.dice_global;
  j["voe"] = a.voe;
  j["rvd"] = optional_json(a.rvd);
  j["assd_mm"] = optional_json(a.assd);
  j["msd_mm"] = optional_json(a.msd);
  j["rmsd_mm"] = optional_json(a.rmsd);
  return j;
}

}  // namespace

AggregateReport aggregate(std::vector<CaseMetrics> cases, std::vector<std::string> missing) {
  AggregateReport r;
  r.liver = aggregate_class(cases, &CaseMetrics::liver);
  r.tumor = aggregate_class(cases, &CaseMetrics::tumor);
  r.cases = std::move(cases);
  r.missing = std::move(missing);
  return r;
}

nlohmann::ordered_json report_json(const AggregateReport& report) {
  nlohmann::ordered_json j;
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : report.cases) {
    nlohmann::ordered_json row;
    row["id"] = c.id;
    row["liver"] = class_json(c.liver);
    row["tumor"] = class_json(c.tumor);
    j["cases"].push_back(std::move(row));
  }
  j["missing"] = report.missing;
  j["aggregate"]["n_cases"] = report.cases.size();
  j["aggregate"]["liver"] = aggregate_json(report.liver);
  j["aggregate"]["tumor"] = aggregate_json(report.tumor);
  return j;
}

}  // namespace sambd::metrics
