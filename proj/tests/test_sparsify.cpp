#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <tuple>

#include "sparsevox/sparsify.hpp"

using namespace sparsevox;

namespace {

DenseVolume labeled_volume(std::uint64_t seed, std::array<int, 3> dims) {
  Rng rng(seed);
  DenseVolume v;
  v.dims = dims;
  v.hu.resize(v.voxel_count());
  v.labels.resize(v.voxel_count());
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    v.hu[i] = clamp_hu(rng.uniform(kHuMin, kHuMax + 1));
    v.labels[i] = rng.uniform() < 0.2 ? 1 : 0;
  }
  return v;
}

// Independent exhaustive reference for optimize_range: collect every feasible
// bin pair, then pick the best by the declared ordering.
struct OracleBest {
  bool found = false;
  std::size_t lo = 0, hi = 0;
  std::uint64_t sig_kept = 0, bkg_kept = 0;
};

OracleBest oracle_range(const HuHistogram& h, std::uint64_t budget) {
  OracleBest best;
  for (std::size_t lo = 0; lo < h.bins(); ++lo)
    for (std::size_t hi = lo; hi < h.bins(); ++hi) {
      std::uint64_t sig = 0, bkg = 0;
      for (std::size_t b = lo; b <= hi; ++b) {
        sig += h.signal_counts[b];
        bkg += h.background_counts[b];
      }
      if (sig + bkg > budget) continue;
      // Order: max signal kept, min background kept, narrowest.
      const auto key = std::make_tuple(sig, ~bkg, ~(hi - lo));
      const auto best_key =
          std::make_tuple(best.sig_kept, ~best.bkg_kept, ~(best.hi - best.lo));
      if (!best.found || key > best_key) {
        best = {true, lo, hi, sig, bkg};
      }
    }
  return best;
}

HuHistogram random_histogram(std::uint64_t seed, std::size_t bins) {
  HuHistogram h;
  h.bin_width = 10;
  h.first_bin = 0;
  h.signal_counts.resize(bins);
  h.background_counts.resize(bins);
  Rng rng(seed);
  for (std::size_t b = 0; b < bins; ++b) {
    h.signal_counts[b] = rng.below(50);
    h.background_counts[b] = rng.below(200);
  }
  return h;
}

}  // namespace

TEST_CASE("apply_range keeps exactly the in-range voxels, scan order") {
  DenseVolume v;
  v.dims = {2, 2, 2};
  v.hu = {-100, 0, 50, 400, 350, -30, -31, 351};
  v.labels = {1, 0, 1, 0, 1, 0, 1, 0};
  const HuRange r{-30, 350};
  const SparseVoxels s = apply_range(v, r);
  REQUIRE(s.size() == 4);
  // Scan order is z, then y, then x.
  CHECK(s.coords[0] == std::array<std::int32_t, 3>{1, 0, 0});
  CHECK(s.coords[1] == std::array<std::int32_t, 3>{0, 1, 0});
  CHECK(s.coords[2] == std::array<std::int32_t, 3>{0, 0, 1});
  CHECK(s.coords[3] == std::array<std::int32_t, 3>{1, 0, 1});
  CHECK(s.hu == std::vector<std::int16_t>{0, 50, 350, -30});
  CHECK(s.labels == std::vector<std::uint8_t>{0, 1, 1, 0});
}

TEST_CASE("apply_range against a brute-force scan over random volumes") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    DenseVolume v = labeled_volume(seed, {7, 6, 5});
    const HuRange r{-200, 500};
    const SparseVoxels s = apply_range(v, r);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < v.hu.size(); ++i)
      if (v.hu[i] >= r.lo && v.hu[i] <= r.hi) ++kept;
    CHECK(s.size() == kept);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& c = s.coords[i];
      const std::size_t idx = v.index(c[0], c[1], c[2]);
      CHECK(s.hu[i] == v.hu[idx]);
      CHECK(s.labels[i] == v.labels[idx]);
      CHECK(r.contains(s.hu[i]));
    }
  }
}

TEST_CASE("histogram accumulation matches direct counting and is additive") {
  DenseVolume a = labeled_volume(4, {6, 6, 6});
  DenseVolume b = labeled_volume(5, {5, 5, 5});

  HuHistogram h = histogram(std::vector<DenseVolume>{a, b});
  CHECK(h.signal_total() + h.background_total() ==
        a.voxel_count() + b.voxel_count());
  CHECK(h.case_total == std::vector<std::uint64_t>{216, 125});

  // Additivity: merging per-case histograms equals the joint histogram.
  HuHistogram ha = histogram(std::vector<DenseVolume>{a});
  HuHistogram hb = histogram(std::vector<DenseVolume>{b});
  ha.merge(hb);
  CHECK(ha.signal_counts == h.signal_counts);
  CHECK(ha.background_counts == h.background_counts);

  // Direct recount of one bin.
  const int probe = 0;  // bin [0, 9]
  std::uint64_t sig = 0;
  for (std::size_t i = 0; i < a.hu.size(); ++i)
    if (a.labels[i] != 0 && a.hu[i] >= probe && a.hu[i] <= probe + 9) ++sig;
  for (std::size_t i = 0; i < b.hu.size(); ++i)
    if (b.labels[i] != 0 && b.hu[i] >= probe && b.hu[i] <= probe + 9) ++sig;
  CHECK(h.signal_counts[h.bin_of(probe)] == sig);
}

TEST_CASE("histogram rejects unlabeled volumes and mismatched merges") {
  DenseVolume v = labeled_volume(9, {4, 4, 4});
  v.labels.clear();
  HuHistogram h = HuHistogram::make();
  CHECK_THROWS_AS(h.accumulate(v), DataError);
  HuHistogram other = HuHistogram::make(20);
  CHECK_THROWS_AS(h.merge(other), ConfigError);
}

TEST_CASE("bin convention: bin b covers [b*w, b*w + w - 1]") {
  HuHistogram h = HuHistogram::make(10);
  CHECK(h.bin_lo(h.bin_of(-1024)) <= -1024);
  CHECK(h.bin_of(0) == h.bin_of(9));
  CHECK(h.bin_of(10) == h.bin_of(0) + 1);
  CHECK(h.bin_of(-1) + 1 == h.bin_of(0));
  CHECK(h.bin_lo(h.bin_of(-30)) == -30);
  CHECK(h.bin_lo(h.bin_of(350)) == 350);
}

TEST_CASE("optimize_range: hand-checkable histogram") {
  HuHistogram h;
  h.bin_width = 10;
  h.first_bin = 0;
  h.signal_counts = {0, 5, 10, 5, 0};
  h.background_counts = {100, 10, 10, 10, 100};
  // Budget 45 admits bins [1,3] (kept 50 > 45? no: 5+10+5 + 30 = 50). So the
  // best feasible keeps two of the signal bins.
  const RangeResult r = optimize_range(h, 45);
  CHECK(r.stats.voxels_kept <= 45);
  CHECK(r.range.lo == 10);
  CHECK(r.range.hi == 20);  // bins 1..2 keep 15 signal + 20 background = 35
  CHECK(r.stats.signal_loss == doctest::Approx(5.0 / 20.0));
}

TEST_CASE("optimize_range equals the exhaustive oracle on random histograms") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    HuHistogram h = random_histogram(seed, 20 + seed % 41);
    const std::uint64_t total = h.signal_total() + h.background_total();
    const std::uint64_t budget = total / 3 + 1;
    const OracleBest best = oracle_range(h, budget);
    REQUIRE(best.found);
    const RangeResult r = optimize_range(h, budget);
    CHECK(r.range.lo == h.bin_lo(best.lo));
    CHECK(r.range.hi == h.bin_lo(best.hi));
    CHECK(r.stats.voxels_kept == best.sig_kept + best.bkg_kept);
  }
}

TEST_CASE("optimize_range reports infeasible budgets") {
  HuHistogram h;
  h.bin_width = 10;
  h.first_bin = 0;
  h.signal_counts = {50, 60};
  h.background_counts = {100, 90};
  CHECK_THROWS_AS(optimize_range(h, 100), NumericError);
  CHECK_THROWS_AS(optimize_range(h, 0), ConfigError);
  try {
    optimize_range(h, 100);
  } catch (const NumericError& e) {
    // The minimal achievable kept count (one bin, min 150) is reported.
    CHECK(std::string(e.what()).find("150") != std::string::npos);
  }
}

TEST_CASE("per-case budget scales by the number of cases") {
  HuHistogram h;
  h.bin_width = 10;
  h.first_bin = 0;
  h.signal_counts = {10, 10};
  h.background_counts = {50, 50};
  h.case_total = {60, 60};
  // Budget 70 per case = 140 total admits both bins (120 kept).
  const RangeResult r = optimize_range(h, 70, /*per_case=*/true);
  CHECK(r.stats.voxels_kept == 120);
  h.case_total.clear();
  CHECK_THROWS_AS(optimize_range(h, 70, true), ConfigError);
}

TEST_CASE("range_stats agrees with the optimizer accounting") {
  HuHistogram h = random_histogram(77, 30);
  const RangeResult r = optimize_range(
      h, (h.signal_total() + h.background_total()) / 2 + 1);
  const SparsificationStats s = range_stats(h, r.range);
  CHECK(s.voxels_kept == r.stats.voxels_kept);
  CHECK(s.signal_loss == doctest::Approx(r.stats.signal_loss));
  CHECK(s.background_removed == doctest::Approx(r.stats.background_removed));
}

TEST_CASE("cumulative curves: boundaries and a spot threshold") {
  HuHistogram h;
  h.bin_width = 10;
  h.first_bin = 0;
  h.signal_counts = {2, 3, 5};
  h.background_counts = {10, 0, 10};
  const CumulativeCurves c = cumulative_curves(h);
  REQUIRE(c.edges.size() == 4);
  CHECK(c.edges == std::vector<int>{0, 10, 20, 30});
  // Discarding below the lowest edge removes nothing.
  CHECK(c.signal_removed_min[0] == 0.0);
  CHECK(c.background_removed_min[0] == 0.0);
  // Discarding at-or-above the lowest edge removes everything.
  CHECK(c.signal_removed_max[0] == 1.0);
  CHECK(c.background_removed_max[0] == 1.0);
  // At the top edge the roles flip.
  CHECK(c.signal_removed_min[3] == 1.0);
  CHECK(c.signal_removed_max[3] == 0.0);
  // Spot check edge 10: signal below is 2/10, background below 10/20.
  CHECK(c.signal_removed_min[1] == doctest::Approx(0.2));
  CHECK(c.background_removed_min[1] == doctest::Approx(0.5));
  CHECK(c.signal_removed_max[1] == doctest::Approx(0.8));
}

TEST_CASE("cumulative curves are monotone") {
  HuHistogram h = random_histogram(123, 40);
  const CumulativeCurves c = cumulative_curves(h);
  for (std::size_t k = 1; k < c.edges.size(); ++k) {
    CHECK(c.signal_removed_min[k] >= c.signal_removed_min[k - 1]);
    CHECK(c.background_removed_min[k] >= c.background_removed_min[k - 1]);
    CHECK(c.signal_removed_max[k] <= c.signal_removed_max[k - 1]);
    CHECK(c.background_removed_max[k] <= c.background_removed_max[k - 1]);
  }
}

TEST_CASE("wilson interval basic properties") {
  auto [lo, hi] = wilson_interval(50, 100);
  CHECK(lo < 0.5);
  CHECK(hi > 0.5);
  CHECK(lo > 0.39);
  CHECK(hi < 0.61);
  auto [l0, h0] = wilson_interval(0, 100);
  CHECK(l0 < 1e-12);  // exactly 0 mathematically, rounding noise allowed
  CHECK(h0 > 0.0);
  auto [le, he] = wilson_interval(0, 0);
  CHECK(le == 0.0);
  CHECK(he == 1.0);
  // Intervals shrink with more trials.
  auto [l1, h1] = wilson_interval(500, 1000);
  CHECK(h1 - l1 < hi - lo);
}
