#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <tuple>

#include "doctest.h"
#include "sambd/metrics.hpp"
#include "sambd/rng.hpp"

using namespace sambd;
using namespace sambd::metrics;
using vol::Dims;
using vol::Spacing;

namespace {

BinaryMask mask_from(Dims d, std::initializer_list<std::array<std::size_t, 3>> on) {
  BinaryMask m(d, {});
  for (const auto& p : on) m.at(p[0], p[1], p[2]) = 1;
  return m;
}

BinaryMask random_mask(Dims d, Rng& rng, double density) {
  BinaryMask m(d, {});
  for (auto& v : m.voxels) v = rng.uniform() < density;
  return m;
}

// Surface voxels by testing all six neighbours explicitly.
std::set<std::tuple<long, long, long>> surface_oracle(const BinaryMask& m) {
  std::set<std::tuple<long, long, long>> out;
  const long X = static_cast<long>(m.dims.x), Y = static_cast<long>(m.dims.y), Z = static_cast<long>(m.dims.z);
  auto inside = [&](long x, long y, long z) {
    return x >= 0 && y >= 0 && z >= 0 && x < X && y < Y && z < Z &&
           m.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z));
  };
  for (long z = 0; z < Z; ++z)
    for (long y = 0; y < Y; ++y)
      for (long x = 0; x < X; ++x) {
        if (!inside(x, y, z)) continue;
        if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) || !inside(x, y + 1, z) ||
            !inside(x, y, z - 1) || !inside(x, y, z + 1))
          out.emplace(x, y, z);
      }
  return out;
}

}  // namespace

TEST_CASE("overlap scores") {
  const Dims d{4, 1, 1};
  const auto a = mask_from(d, {{{0, 0, 0}}, {{1, 0, 0}}});
  const auto b = mask_from(d, {{{1, 0, 0}}, {{2, 0, 0}}});
  CHECK(dice(a, b) == 0.5);
  CHECK(voe(a, b) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(dice(a, a) == 1.0);
  CHECK(voe(a, a) == 0.0);
  CHECK(*rvd(a, a) == 0.0);

  CHECK(*rvd(Overlap{110, 100, 100}) == doctest::Approx(0.10).epsilon(1e-15));
  CHECK(*rvd(Overlap{90, 100, 90}) == doctest::Approx(-0.10).epsilon(1e-15));
  CHECK_FALSE(rvd(Overlap{5, 0, 0}).has_value());

  const BinaryMask empty(d, {});
  CHECK(dice(empty, empty) == 1.0);
  CHECK(voe(empty, empty) == 0.0);
  CHECK(dice(a, empty) == 0.0);
  CHECK(dice(empty, a) == 0.0);
  CHECK(voe(a, empty) == 1.0);
  CHECK_THROWS_AS(overlap(a, BinaryMask({2, 2, 1}, {})), std::invalid_argument);
}

TEST_CASE("global dice pools counts") {
  const std::vector<Overlap> cases{{10, 10, 10}, {0, 10, 0}};
  CHECK((dice(cases[0]) + dice(cases[1])) / 2.0 == 0.5);
  CHECK(dice_global(cases) == doctest::Approx(20.0 / 30.0).epsilon(1e-15));
  const std::vector<Overlap> single{{7, 5, 3}};
  CHECK(dice_global(single) == dice(single[0]));
  const std::vector<Overlap> perfect{{4, 4, 4}, {9, 9, 9}};
  CHECK(dice_global(perfect) == 1.0);
  CHECK_THROWS_AS(dice_global(std::span<const Overlap>{}), std::invalid_argument);
}

TEST_CASE("overlap identities on random masks") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Dims d{1 + rng.index(7), 1 + rng.index(7), 1 + rng.index(7)};
    const auto a = random_mask(d, rng, rng.uniform());
    const auto b = random_mask(d, rng, rng.uniform());
    const double dc = dice(a, b);
    CHECK((dc >= 0.0 && dc <= 1.0));
    CHECK(voe(a, b) == doctest::Approx(1.0 - dc / (2.0 - dc)).epsilon(1e-9));
    CHECK(dc == dice(b, a));
    CHECK(voe(a, b) == voe(b, a));
    const std::vector<Overlap> one{overlap(a, b)};
    CHECK(dice_global(one) == doctest::Approx(dc).epsilon(1e-15));
  }
}

TEST_CASE("surface points") {
  BinaryMask cube({5, 5, 5}, {});
  for (std::size_t z = 1; z < 4; ++z)
    for (std::size_t y = 1; y < 4; ++y)
      for (std::size_t x = 1; x < 4; ++x) cube.at(x, y, z) = 1;
  const auto pts = surface_points(cube);
  CHECK(pts.size() == 26);
  CHECK(pts.size() == surface_oracle(cube).size());
  for (const auto& p : pts) CHECK_FALSE((p.x == 2 && p.y == 2 && p.z == 2));

  const auto single = surface_points(mask_from({3, 3, 3}, {{{1, 2, 0}}}));
  REQUIRE(single.size() == 1);
  CHECK((single[0].x == 1 && single[0].y == 2 && single[0].z == 0));
  CHECK(surface_points(BinaryMask({3, 3, 3}, {})).empty());

  CHECK(point_distance({0, 0, 0}, {0, 0, 1}, {1.0, 1.0, 2.0}) == 2.0);
  CHECK(point_distance({0, 0, 0}, {3, 4, 0}, {1.0, 1.0, 2.0}) == 5.0);

  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_mask({6, 5, 4}, rng, 0.3 + 0.6 * rng.uniform());
    std::set<std::tuple<long, long, long>> got;
    for (const auto& p : surface_points(m)) got.emplace(p.x, p.y, p.z);
    CHECK(got == surface_oracle(m));
  }
}

TEST_CASE("surface distances") {
  const auto a = mask_from({3, 3, 6}, {{{1, 1, 0}}});
  const auto b = mask_from({3, 3, 6}, {{{1, 1, 3}}});
  const auto d = surface_distances(a, b, {1.0, 1.0, 2.0});
  REQUIRE(d.has_value());
  CHECK(d->assd == 6.0);
  CHECK(d->msd == 6.0);
  CHECK(d->rmsd == 6.0);

  const auto same = surface_distances(a, a, {0.7, 0.7, 2.5});
  CHECK(same->assd == 0.0);
  CHECK(same->msd == 0.0);
  CHECK(same->rmsd == 0.0);

  CHECK_FALSE(surface_distances(a, BinaryMask({3, 3, 6}, {}), {}).has_value());
  CHECK_FALSE(surface_distances_brute_force(BinaryMask({3, 3, 6}, {}), a, {}).has_value());

  // Directed distances 0 and 2 from the left voxel side, 0 from the right.
  const auto two = mask_from({4, 1, 1}, {{{0, 0, 0}}, {{3, 0, 0}}});
  const auto one = mask_from({4, 1, 1}, {{{0, 0, 0}}, {{1, 0, 0}}});
  // pred surface {0,3}: nearest ref {0,1} -> 0, 2. ref surface {0,1}: -> 0, 1.
  const auto m = surface_distances(two, one, {});
  CHECK(m->assd == 0.75);
  CHECK(m->msd == 2.0);
  CHECK(m->rmsd == std::sqrt(5.0 / 4.0));
}

TEST_CASE("optimized surface distances equal brute force") {
  Rng rng(5);
  const std::vector<Spacing> spacings{{1.0, 1.0, 1.0}, {0.8, 0.8, 2.5}, {0.7, 1.3, 4.0}};
  for (int trial = 0; trial < 200; ++trial) {
    const Dims d{8, 8, 8};
    const auto a = random_mask(d, rng, 0.05 + 0.5 * rng.uniform());
    const auto b = random_mask(d, rng, 0.05 + 0.5 * rng.uniform());
    const auto& s = spacings[static_cast<std::size_t>(trial) % spacings.size()];
    const auto fast = surface_distances(a, b, s);
    const auto slow = surface_distances_brute_force(a, b, s);
    REQUIRE(fast.has_value() == slow.has_value());
    if (!fast) continue;
    CHECK(fast->assd == slow->assd);
    CHECK(fast->msd == slow->msd);
    CHECK(fast->rmsd == slow->rmsd);
    const auto swapped = surface_distances(b, a, s);
    CHECK(swapped->assd == doctest::Approx(fast->assd).epsilon(1e-12));
    CHECK(swapped->msd == fast->msd);
    CHECK(swapped->rmsd == doctest::Approx(fast->rmsd).epsilon(1e-12));
    CHECK(fast->rmsd >= fast->assd);
    CHECK(fast->msd >= fast->rmsd);
  }
  // Sparse masks in a larger volume exercise the pruned search.
  for (int trial = 0; trial < 20; ++trial) {
    const Dims d{16, 16, 16};
    const auto a = random_mask(d, rng, 0.01);
    const auto b = random_mask(d, rng, 0.02);
    const auto fast = surface_distances(a, b, {0.8, 0.8, 2.0});
    const auto slow = surface_distances_brute_force(a, b, {0.8, 0.8, 2.0});
    REQUIRE(fast.has_value() == slow.has_value());
    if (!fast) continue;
    CHECK(fast->assd == slow->assd);
    CHECK(fast->msd == slow->msd);
    CHECK(fast->rmsd == slow->rmsd);
  }
}

TEST_CASE("paired t-test") {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0};
  const auto same = paired_ttest(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);
  CHECK(same.degenerate);

  // Student t with 2 dof: two-sided p = 1 - t / sqrt(t^2 + 2).
  const std::vector<double> x{1.0, 2.0, 3.0}, zero{0.0, 0.0, 0.0};
  const auto r = paired_ttest(x, zero);
  const double t = 2.0 / (1.0 / std::sqrt(3.0));
  CHECK(r.df == 2);
  CHECK(r.t == doctest::Approx(t).epsilon(1e-14));
  CHECK(r.p == doctest::Approx(1.0 - t / std::sqrt(t * t + 2.0)).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(0.0742).epsilon(1e-3));
  CHECK_FALSE(r.degenerate);
  CHECK(r.p > 0.05);
  CHECK(paired_ttest(zero, x).t == doctest::Approx(-t).epsilon(1e-14));
  CHECK(paired_ttest(zero, x).p == doctest::Approx(r.p).epsilon(1e-14));

  // One dof: Cauchy, p = 1 - 2 atan(|t|) / pi.
  const std::vector<double> u{3.0, 5.0}, v{1.0, 2.0};
  const auto c = paired_ttest(u, v);
  CHECK(c.t == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(c.p == doctest::Approx(1.0 - 2.0 * std::atan(5.0) / std::numbers::pi).epsilon(1e-12));

  const std::vector<double> shift{2.0, 3.0, 4.0, 5.0};
  const auto constant = paired_ttest(shift, a);
  CHECK(constant.degenerate);
  CHECK_THROWS_AS(paired_ttest(x, a), std::invalid_argument);
  CHECK_THROWS_AS(paired_ttest(std::vector<double>{1.0}, std::vector<double>{0.0}), std::invalid_argument);
}

TEST_CASE("case evaluation and aggregation") {
  vol::LabelVolume ref({4, 4, 2}, {1.0, 1.0, 2.0});
  vol::LabelVolume pred = ref;
  for (std::size_t x = 0; x < 4; ++x) ref.at(x, 1, 0) = 1;
  ref.at(1, 1, 0) = 2;
  pred = ref;
  pred.at(3, 1, 0) = 0;
  const auto cm = evaluate_case("c", pred, ref);
  CHECK(cm.liver.counts.ref == 4);
  CHECK(cm.liver.counts.pred == 3);
  CHECK(cm.liver.dice == doctest::Approx(6.0 / 7.0).epsilon(1e-15));
  CHECK(*cm.liver.rvd == -0.25);
  CHECK(cm.tumor.dice == 1.0);
  CHECK(cm.tumor.distances->msd == 0.0);

  vol::LabelVolume none({4, 4, 2}, {1.0, 1.0, 2.0});
  const auto empty = evaluate_case("e", none, none);
  CHECK(empty.tumor.dice == 1.0);
  CHECK_FALSE(empty.tumor.rvd.has_value());
  CHECK_FALSE(empty.tumor.distances.has_value());

  const auto rep = aggregate({cm, empty}, {"gone"});
  CHECK(rep.liver.dice_per_case == doctest::Approx((6.0 / 7.0 + 1.0) / 2.0).epsilon(1e-15));
  CHECK(rep.liver.dice_global == doctest::Approx(6.0 / 7.0).epsilon(1e-15));
  CHECK(rep.tumor.rvd == 0.0);
  const auto j = report_json(rep);
  CHECK(j["missing"][0] == "gone");
  CHECK(j["cases"].size() == 2);
  CHECK(j["cases"][1]["tumor"]["rvd"].is_null());
  CHECK(j["aggregate"]["liver"].begin().key() == "dice_per_case");

  const std::vector<double> vals{1.0, 2.0, 3.0, 4.0};
  CHECK(mean(vals) == 2.5);
  CHECK(sample_sd(vals) == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  CHECK(sample_sd(std::vector<double>{3.0}) == 0.0);
}
