// Acceptance checks: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sambd/gradcheck.hpp"
#include "sambd/inference.hpp"
#include "sambd/losses.hpp"
#include "sambd/metrics.hpp"
#include "sambd/model.hpp"
#include "sambd/phantom.hpp"
#include "sambd/preprocess.hpp"
#include "sambd/rng.hpp"
#include "sambd/runtime.hpp"
#include "sambd/trainer.hpp"
#include "sambd/windows.hpp"

using namespace sambd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// 1. Every parameter tensor of the full model, double precision.
Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  auto model = build_model<double>(cfg, 101);
  Rng rng(102);
  std::vector<double> input(5 * 16 * 16);
  for (auto& v : input) v = rng.uniform();
  const auto x = Tensor<double>::from_data({1, 5, 16, 16}, std::move(input));
  std::vector<std::uint8_t> labels(3 * 16 * 16);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.index(3));
  const auto g = loss::one_hot<double>(labels, 3, 3, 16, 16);
  auto params = model.parameters();
  nn::GradCheckOptions opt;
  opt.max_coords_per_tensor = 400;
  opt.seed = 103;
  const auto r = nn::grad_check([&] { return loss::total_loss(forward(model, x), g).total; }, params, opt);
  const double elapsed = seconds_since(t0);
  Outcome o;
  o.pass = r.max_relative_error < 1e-5 && elapsed < 120.0 && r.coordinates_checked >= params.size();
  o.detail = std::to_string(params.size()) + " tensors, " + std::to_string(r.coordinates_checked) +
             " coordinates, max error " + fmt(r.max_relative_error, 3) + " (< 1e-5), " + fmt(elapsed, 3) + " s (< 120 s)";
  return o;
}

// 2. Closed-form loss values.
Outcome loss_identities() {
  Outcome o;
  auto expect = [&o](const std::string& what, double got, double want, double tol) {
    if (!(std::abs(got - want) <= tol)) {
      o.pass = false;
      o.detail += what + "=" + fmt(got, 17) + " (want " + fmt(want, 17) + ") ";
    }
  };
  expect("lambda(2)", loss::lambda_weight(2), 2.0, 1e-12);
  expect("lambda(3)", loss::lambda_weight(3), 1.2, 1e-12);
  expect("lambda(5)", loss::lambda_weight(5), 5.0 / (4.0 + 3.0 / 2.0 + 2.0 / 3.0 + 1.0 / 4.0), 1e-12);

  Rng rng(201);
  for (int c_out : {2, 3, 5}) {
    const std::size_t n = static_cast<std::size_t>(c_out);
    std::vector<std::uint8_t> labels(n * 8 * 8);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.index(2));  // one class absent
    const auto y = loss::one_hot<double>(labels, n, 3, 8, 8);
    const std::string tag = "[c_out=" + std::to_string(c_out) + "] ";
    expect(tag + "dice", loss::dice_loss(y, y).data()[0], -3.0 * c_out, 1e-9);
    expect(tag + "P(0,1)", loss::pairwise_dice(y, y, 0, 1).data()[0], -3.0, 1e-9);
    if (c_out == 3) {
      expect(tag + "dcd", loss::dcd_loss(y, y).data()[0], -7.5, 1e-9);
      expect(tag + "total", loss::total_loss(y, y).total.data()[0], -18.0, 1e-9);
    }
  }
  if (o.pass) o.detail = "lambda(2,3,5) within 1e-12; perfect-prediction dice/pair/dcd/total within 1e-9";
  return o;
}

// 3. Overlap identity, brute-force surface distances, distance ordering.
Outcome metric_oracles() {
  Rng rng(301);
  int identity_fail = 0, oracle_fail = 0, order_fail = 0, with_distances = 0;
  const std::vector<vol::Spacing> spacings{{1.0, 1.0, 1.0}, {0.8, 0.8, 2.5}, {0.7, 1.1, 4.0}};
  for (int i = 0; i < 200; ++i) {
    vol::BinaryMask a({8, 8, 8}, spacings[i % 3]), b({8, 8, 8}, spacings[i % 3]);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (auto& v : a.voxels) v = rng.uniform() < pa;
    for (auto& v : b.voxels) v = rng.uniform() < pb;
    const double d = metrics::dice(a, b);
    if (!(std::abs(metrics::voe(a, b) - (1.0 - d / (2.0 - d))) <= 1e-9)) ++identity_fail;
    const auto fast = metrics::surface_distances(a, b, a.spacing);
    const auto slow = metrics::surface_distances_brute_force(a, b, a.spacing);
    if (fast.has_value() != slow.has_value()) {
      ++oracle_fail;
      continue;
    }
    if (!fast) continue;
    ++with_distances;
    if (fast->assd != slow->assd || fast->msd != slow->msd || fast->rmsd != slow->rmsd) ++oracle_fail;
    if (!(fast->msd >= fast->rmsd && fast->rmsd >= fast->assd)) ++order_fail;
  }
  Outcome o;
  o.pass = identity_fail == 0 && oracle_fail == 0 && order_fail == 0;
  o.detail = "200 pairs (" + std::to_string(with_distances) + " with surfaces): identity failures " +
             std::to_string(identity_fail) + ", oracle mismatches " + std::to_string(oracle_fail) +
             ", ordering violations " + std::to_string(order_fail);
  return o;
}

// 4. Coverage counts and a constant-logit model.
Outcome sliding_window_contract() {
  const auto counts = vol::coverage_counts(vol::window_layout(10, 5, 3));
  const std::vector<std::size_t> want{1, 2, 3, 3, 3, 3, 3, 3, 2, 1};
  ModelConfig cfg;
  auto model = build_model<float>(cfg, 401);
  for (auto t : model.parameters()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  vol::ImageVolume v({16, 16, 10}, {0.8, 0.8, 1.0});
  Rng rng(402);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  const auto p = infer::sliding_window_predict(model, v, {1});
  double worst = 0.0;
  for (float x : p.probs) worst = std::max(worst, std::abs(static_cast<double>(x) - 1.0 / 3.0));
  Outcome o;
  o.pass = counts == want && p.coverage == want && worst <= 1e-6;
  std::string c;
  for (auto n : p.coverage) c += std::to_string(n);
  o.detail = "coverage " + c + ", max |p - 1/3| = " + fmt(worst, 3) + " (<= 1e-6)";
  return o;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// 5. MD+SAB+DCD against the width-matched single-branch baseline.
Outcome ablation_trend(const fs::path& out) {
  const auto t0 = Clock::now();
  fs::remove_all(out);
  const vol::DatasetConfig data;
  vol::generate_dataset(data, out / "data");
  train::ExperimentConfig base;
  base.manifest = out / "data" / "manifest.json";
  const auto variants = train::default_variants(base.model.c_out);
  const std::string wide = "baseline-" + std::to_string(base.model.c_out) + "x";
  const std::vector<train::Variant> chosen{*train::find_variant(variants, wide),
                                           *train::find_variant(variants, "MD+SAB+DCD")};
  const auto r = train::run_ablation(base, chosen, out / "runs", [](const std::string& line) {
    std::cerr << "  " << line << "\n";
  });
  const double elapsed = seconds_since(t0);

  std::vector<double> baseline, full, delta;
  for (std::size_t s = 0; s < r.seeds.size(); ++s) {
    baseline.push_back(r.variants[0].reports[s].tumor.dice_per_case);
    full.push_back(r.variants[1].reports[s].tumor.dice_per_case);
    delta.push_back(full.back() - baseline.back());
  }
  const double mean_b = metrics::mean(baseline), mean_f = metrics::mean(full), med = median(delta);
  Outcome o;
  o.pass = r.seeds.size() == 3 && mean_f >= mean_b && med > 0.0 && elapsed < 45.0 * 60.0;
  o.detail = "tumor Dice per case " + fmt(mean_f, 4) + " (MD+SAB+DCD) vs " + fmt(mean_b, 4) + " (" + wide +
             "), median per-seed delta " + fmt(med, 4);
  if (r.ttest) {
    o.detail += ", paired t-test t=" + fmt(r.ttest->t, 4) + " p=" + fmt(r.ttest->p, 4) +
                (r.ttest->degenerate ? " (degenerate)" : "");
  }
  o.detail += ", " + fmt(elapsed / 60.0, 3) + " min (< 45 min)";
  return o;
}

// 6. Parameter overhead of the attention-equipped multi-branch decoder.
Outcome parameter_accounting() {
  ModelConfig md_sab;
  ModelConfig md = md_sab;
  md.use_sab = false;
  ModelConfig wide = md;
  wide.variant = DecoderVariant::single_branch;
  wide.width_multiplier = md_sab.c_out;
  const auto n_sab = count_params(build_model<float>(md_sab, 0));
  const auto n_md = count_params(build_model<float>(md, 0));
  const auto n_wide = count_params(build_model<float>(wide, 0));
  const double overhead = static_cast<double>(n_sab) / static_cast<double>(n_wide) - 1.0;
  Outcome o;
  o.pass = overhead < 0.10;
  o.detail = "MD+SAB " + std::to_string(n_sab) + " vs width-matched single branch " + std::to_string(n_wide) +
             " params, overhead " + fmt(100.0 * overhead, 4) + "% (< 10%); attention adds " +
             std::to_string(n_sab - n_md) + " over MD";
  return o;
}

// 7. Bit-exact storage, intensity window, resampling and schedule.
Outcome pipeline_exactness(const fs::path& scratch) {
  Outcome o;
  fs::create_directories(scratch);
  vol::ImageVolume img({7, 5, 3}, {0.7, 0.9, 2.5});
  Rng rng(701);
  for (auto& v : img.voxels) v = static_cast<float>(rng.uniform(-1e4, 1e4));
  vol::write_svol(img, scratch / "round_trip.svol");
  const auto back = vol::read_image_svol(scratch / "round_trip.svol");
  const bool svol = back.dims == img.dims && back.spacing == img.spacing &&
                    std::memcmp(back.voxels.data(), img.voxels.data(), img.voxels.size() * sizeof(float)) == 0;

  vol::ImageVolume hu({3, 1, 1}, {});
  hu.voxels = {-300.0f, 25.0f, 250.0f};
  const auto w = vol::hu_window(hu);
  const bool window = w.voxels == std::vector<float>{0.0f, 0.5f, 1.0f};

  vol::ImageVolume two({1, 1, 2}, {1.0, 1.0, 2.0});
  two.voxels = {0.0f, 10.0f};
  const auto rs = vol::resample_z(two, 1.0);
  const bool resample = rs.voxels == std::vector<float>{0.0f, 5.0f, 10.0f} && rs.spacing.z == 1.0;

  train::ExperimentConfig c;
  // Iterated in extended precision from the same double constants.
  const long double decay = static_cast<long double>(c.lr_decay);
  long double iterated = static_cast<long double>(c.lr0);
  double worst = 0.0;
  for (int k = 0; k < 80; ++k) {
    const double got = train::learning_rate(c, k);
    worst = std::max(worst, static_cast<double>(std::abs((got - iterated) / iterated)));
    iterated *= decay;
  }
  const bool schedule = c.lr0 == 0.001 && c.lr_decay == 0.9 && worst <= 4.0 * std::numeric_limits<double>::epsilon();

  o.pass = svol && window && resample && schedule;
  o.detail = std::string("svol ") + (svol ? "bit-exact" : "MISMATCH") + ", window " + (window ? "exact" : "WRONG") +
             ", resample " + (resample ? "exact" : "WRONG") + ", lr max relative error " + fmt(worst, 3) +
             " over 80 epochs";
  return o;
}

// Number of 6-connected components of a mask.
int component_count(const vol::BinaryMask& m) {
  std::vector<char> seen(m.voxels.size(), 0);
  int count = 0;
  const std::size_t X = m.dims.x, Y = m.dims.y, Z = m.dims.z;
  for (std::size_t s = 0; s < m.voxels.size(); ++s) {
    if (!m.voxels[s] || seen[s]) continue;
    ++count;
    std::deque<std::size_t> q{s};
    seen[s] = 1;
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop_front();
      const std::size_t x = v % X, y = (v / X) % Y, z = v / (X * Y);
      auto visit = [&](std::size_t u) {
        if (m.voxels[u] && !seen[u]) {
          seen[u] = 1;
          q.push_back(u);
        }
      };
      if (x > 0) visit(v - 1);
      if (x + 1 < X) visit(v + 1);
      if (y > 0) visit(v - X);
      if (y + 1 < Y) visit(v + X);
      if (z > 0) visit(v - X * Y);
      if (z + 1 < Z) visit(v + X * Y);
    }
  }
  return count;
}

// 8. Postprocessing on random label volumes.
Outcome postprocess_invariants() {
  Rng rng(801);
  int violations = 0;
  for (int i = 0; i < 50; ++i) {
    vol::LabelVolume l({4 + rng.index(13), 4 + rng.index(13), 2 + rng.index(11)}, {});
    const double fg = rng.uniform(0.2, 0.7), tumor = rng.uniform(0.1, 0.6);
    for (auto& v : l.voxels) v = rng.uniform() < fg ? (rng.uniform() < tumor ? vol::kTumor : vol::kLiver) : vol::kBackground;
    const auto out = infer::postprocess(l);
    vol::BinaryMask body(out.dims, out.spacing);
    bool cleared_only = true, any_in = false;
    for (std::size_t k = 0; k < body.voxels.size(); ++k) {
      body.voxels[k] = out.voxels[k] != vol::kBackground;
      cleared_only = cleared_only && (out.voxels[k] == l.voxels[k] || out.voxels[k] == vol::kBackground);
      any_in = any_in || l.voxels[k] != vol::kBackground;
    }
    // Liver and tumour together form one component.
    if (component_count(body) != (any_in ? 1 : 0) || !cleared_only) ++violations;
  }
  Outcome o;
  o.pass = violations == 0;
  o.detail = "50 volumes, " + std::to_string(violations) + " with tumor outside the kept liver component or a split liver";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_out";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"loss identities", loss_identities},
      {"metric oracle equivalence", metric_oracles},
      {"sliding-window contract", sliding_window_contract},
      {"ablation trend", [&] { return ablation_trend(out / "ablation"); }},
      {"parameter accounting", parameter_accounting},
      {"pipeline exactness", [&] { return pipeline_exactness(out / "scratch"); }},
      {"postprocessing invariants", postprocess_invariants},
  };
  // Optional criterion numbers after the output directory select a subset.
  std::vector<bool> selected(criteria.size(), argc <= 2);
  for (int a = 2; a < argc; ++a) {
    const std::size_t k = std::stoul(argv[a]);
    if (k >= 1 && k <= criteria.size()) selected[k - 1] = true;
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed;
}
