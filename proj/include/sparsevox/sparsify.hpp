#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"
#include "sparsevox/volume.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// HU range, keep-inside semantics with both endpoints inclusive.
// ---------------------------------------------------------------------------

struct HuRange {
  int lo = kHuMin;
  int hi = kHuMax;

  bool contains(int hu) const { return hu >= lo && hu <= hi; }
};

inline void to_json(nlohmann::json& j, const HuRange& r) {
  j = {{"lo", r.lo}, {"hi", r.hi}};
}
inline void from_json(const nlohmann::json& j, HuRange& r) {
  j.at("lo").get_to(r.lo);
  j.at("hi").get_to(r.hi);
}

// ---------------------------------------------------------------------------
// Sparse voxel set: the output of thresholding one volume. Sites are stored
// in lexicographic (z,y,x) order.
// ---------------------------------------------------------------------------

struct SparseVoxels {
  std::vector<std::array<std::int32_t, 3>> coords;  // x, y, z
  std::vector<std::int16_t> hu;
  std::vector<std::uint8_t> labels;  // empty when the volume had none

  std::size_t size() const { return coords.size(); }
  bool has_labels() const { return !labels.empty(); }
};

inline SparseVoxels apply_range(const DenseVolume& v, const HuRange& r) {
  SparseVoxels out;
  const bool lab = v.has_labels();
  std::size_t i = 0;
  for (std::int32_t z = 0; z < v.dims[2]; ++z)
    for (std::int32_t y = 0; y < v.dims[1]; ++y)
      for (std::int32_t x = 0; x < v.dims[0]; ++x, ++i) {
        if (!r.contains(v.hu[i])) continue;
        out.coords.push_back({x, y, z});
        out.hu.push_back(v.hu[i]);
        if (lab) out.labels.push_back(v.labels[i]);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Per-class HU histogram. Bin b covers [b*width, b*width + width - 1]; the
// bins span the full clamped HU range [-1024, 3071]. A range candidate
// (lo, hi) with both bounds bin-aligned keeps bins lo/width .. hi/width, so
// histogram-level statistics for (lo, hi) count HU in [lo, hi + width - 1].
// ---------------------------------------------------------------------------

struct HuHistogram {
  int bin_width = 10;
  int first_bin = 0;  // index of the bin containing kHuMin (floor division)
  std::vector<std::uint64_t> signal_counts;
  std::vector<std::uint64_t> background_counts;
  // Per-case totals, used for corpus-reduction reporting.
  std::vector<std::uint64_t> case_total;

  static HuHistogram make(int bin_width = 10) {
    HuHistogram h;
    h.bin_width = bin_width;
    h.first_bin = floor_div(kHuMin, bin_width);
    const int last = floor_div(kHuMax, bin_width);
    h.signal_counts.assign(static_cast<std::size_t>(last - h.first_bin + 1), 0);
    h.background_counts.assign(h.signal_counts.size(), 0);
    return h;
  }

  std::size_t bins() const { return signal_counts.size(); }
  int bin_lo(std::size_t b) const {
    return (first_bin + static_cast<int>(b)) * bin_width;
  }
  std::size_t bin_of(int hu) const {
    return static_cast<std::size_t>(floor_div(hu, bin_width) - first_bin);
  }

  void accumulate(const DenseVolume& v) {
    if (!v.has_labels())
      throw DataError("histogram requires a labeled volume");
    for (std::size_t i = 0; i < v.hu.size(); ++i) {
      auto& counts = v.labels[i] != 0 ? signal_counts : background_counts;
      ++counts[bin_of(v.hu[i])];
    }
    case_total.push_back(v.voxel_count());
  }

  void merge(const HuHistogram& other) {
    if (other.bin_width != bin_width || other.bins() != bins())
      throw ConfigError("histogram merge with mismatched binning");
    for (std::size_t b = 0; b < bins(); ++b) {
      signal_counts[b] += other.signal_counts[b];
      background_counts[b] += other.background_counts[b];
    }
    case_total.insert(case_total.end(), other.case_total.begin(),
                      other.case_total.end());
  }

  std::uint64_t signal_total() const {
    return std::accumulate(signal_counts.begin(), signal_counts.end(),
                           std::uint64_t{0});
  }
  std::uint64_t background_total() const {
    return std::accumulate(background_counts.begin(), background_counts.end(),
                           std::uint64_t{0});
  }
};

template <typename VolumeRange>
HuHistogram histogram(const VolumeRange& volumes, int bin_width = 10) {
  HuHistogram h = HuHistogram::make(bin_width);
  for (const auto& v : volumes) h.accumulate(v);
  return h;
}

inline void to_json(nlohmann::json& j, const HuHistogram& h) {
  j = {{"bin_width", h.bin_width},
       {"first_bin", h.first_bin},
       {"signal_counts", h.signal_counts},
       {"background_counts", h.background_counts},
       {"case_total", h.case_total}};
}
inline void from_json(const nlohmann::json& j, HuHistogram& h) {
  j.at("bin_width").get_to(h.bin_width);
  j.at("first_bin").get_to(h.first_bin);
  j.at("signal_counts").get_to(h.signal_counts);
  j.at("background_counts").get_to(h.background_counts);
  if (j.contains("case_total")) j.at("case_total").get_to(h.case_total);
}

// ---------------------------------------------------------------------------
// Sparsification statistics and the budget-constrained optimal range search.
// ---------------------------------------------------------------------------

struct SparsificationStats {
  double signal_loss = 0.0;         // fraction of signal voxels discarded
  double background_removed = 0.0;  // fraction of background voxels discarded
  std::uint64_t voxels_kept = 0;
};

inline void to_json(nlohmann::json& j, const SparsificationStats& s) {
  j = {{"signal_loss", s.signal_loss},
       {"background_removed", s.background_removed},
       {"voxels_kept", s.voxels_kept}};
}

struct RangeResult {
  HuRange range;
  SparsificationStats stats;
};

// Minimizes signal loss subject to voxels kept <= budget, searching all
// bin-aligned (lo, hi) pairs. Ties go to maximal background removal, then to
// the narrower range. Throws NumericError (reporting the minimal achievable
// kept count) when even a single bin exceeds the budget.
// per_case scales the budget by the number of accumulated cases, so the
// constraint reads "budget voxels per scan on average" for phantom-scale runs.
inline RangeResult optimize_range(const HuHistogram& h, std::uint64_t budget,
                                  bool per_case = false) {
  if (budget == 0) throw ConfigError("budget must be positive");
  if (per_case) {
    if (h.case_total.empty())
      throw ConfigError("per-case budget requires per-case histogram totals");
    budget *= h.case_total.size();
  }
  const std::size_t n = h.bins();
  std::vector<std::uint64_t> sig_pfx(n + 1, 0), bkg_pfx(n + 1, 0);
  for (std::size_t b = 0; b < n; ++b) {
    sig_pfx[b + 1] = sig_pfx[b] + h.signal_counts[b];
    bkg_pfx[b + 1] = bkg_pfx[b] + h.background_counts[b];
  }
  const std::uint64_t sig_total = sig_pfx[n];
  const std::uint64_t bkg_total = bkg_pfx[n];

  bool found = false;
  std::size_t best_lo = 0, best_hi = 0;
  std::uint64_t best_sig_kept = 0, best_bkg_kept = 0, best_kept = 0;
  std::uint64_t min_achievable = UINT64_MAX;

  for (std::size_t lo = 0; lo < n; ++lo) {
    for (std::size_t hi = lo; hi < n; ++hi) {
      const std::uint64_t sig_kept = sig_pfx[hi + 1] - sig_pfx[lo];
      const std::uint64_t bkg_kept = bkg_pfx[hi + 1] - bkg_pfx[lo];
      const std::uint64_t kept = sig_kept + bkg_kept;
      min_achievable = std::min(min_achievable, kept);
      if (kept > budget) continue;
      bool better;
      if (!found) {
        better = true;
      } else if (sig_kept != best_sig_kept) {
        better = sig_kept > best_sig_kept;  // less signal loss
      } else if (bkg_kept != best_bkg_kept) {
        better = bkg_kept < best_bkg_kept;  // more background removed
      } else {
        better = (hi - lo) < (best_hi - best_lo);  // narrower range
      }
      if (better) {
        found = true;
        best_lo = lo;
        best_hi = hi;
        best_sig_kept = sig_kept;
        best_bkg_kept = bkg_kept;
        best_kept = kept;
      }
    }
  }
  if (!found)
    throw NumericError(
        "no HU range fits the budget; minimal achievable kept count is " +
        std::to_string(min_achievable));

  RangeResult r;
  r.range.lo = h.bin_lo(best_lo);
  r.range.hi = h.bin_lo(best_hi);
  r.stats.voxels_kept = best_kept;
  r.stats.signal_loss =
      sig_total == 0 ? 0.0
                     : 1.0 - static_cast<double>(best_sig_kept) / sig_total;
  r.stats.background_removed =
      bkg_total == 0 ? 0.0
                     : 1.0 - static_cast<double>(best_bkg_kept) / bkg_total;
  return r;
}

// Stats for a fixed, already-chosen range, computed on the histogram with the
// same bin convention as optimize_range.
inline SparsificationStats range_stats(const HuHistogram& h, const HuRange& r) {
  const std::size_t lo = h.bin_of(r.lo);
  const std::size_t hi = h.bin_of(r.hi);
  std::uint64_t sig_kept = 0, bkg_kept = 0;
  for (std::size_t b = lo; b <= hi; ++b) {
    sig_kept += h.signal_counts[b];
    bkg_kept += h.background_counts[b];
  }
  const std::uint64_t sig_total = h.signal_total();
  const std::uint64_t bkg_total = h.background_total();
  SparsificationStats s;
  s.voxels_kept = sig_kept + bkg_kept;
  s.signal_loss =
      sig_total == 0 ? 0.0 : 1.0 - static_cast<double>(sig_kept) / sig_total;
  s.background_removed =
      bkg_total == 0 ? 0.0 : 1.0 - static_cast<double>(bkg_kept) / bkg_total;
  return s;
}

// ---------------------------------------------------------------------------
// Cumulative removal curves at bin edges. Entry k corresponds to the edge
// e_k = (first_bin + k) * bin_width, k = 0..bins. The min curve is the
// fraction removed by discarding HU < e_k; the max curve discards HU >= e_k.
// ---------------------------------------------------------------------------

struct CumulativeCurves {
  std::vector<int> edges;
  std::vector<double> signal_removed_min, background_removed_min;
  std::vector<double> signal_removed_max, background_removed_max;
};

inline CumulativeCurves cumulative_curves(const HuHistogram& h) {
  const std::uint64_t sig_total = h.signal_total();
  const std::uint64_t bkg_total = h.background_total();
  if (sig_total + bkg_total == 0)
    throw DataError("cumulative_curves on an empty histogram");

  CumulativeCurves c;
  const std::size_t n = h.bins();
  c.edges.resize(n + 1);
  c.signal_removed_min.resize(n + 1);
  c.background_removed_min.resize(n + 1);
  c.signal_removed_max.resize(n + 1);
  c.background_removed_max.resize(n + 1);

  std::uint64_t sig_below = 0, bkg_below = 0;
  for (std::size_t k = 0; k <= n; ++k) {
    c.edges[k] = h.bin_lo(0) + static_cast<int>(k) * h.bin_width;
    const auto frac = [](std::uint64_t num, std::uint64_t den) {
      return den == 0 ? 0.0 : static_cast<double>(num) / den;
    };
    c.signal_removed_min[k] = frac(sig_below, sig_total);
    c.background_removed_min[k] = frac(bkg_below, bkg_total);
    c.signal_removed_max[k] = frac(sig_total - sig_below, sig_total);
    c.background_removed_max[k] = frac(bkg_total - bkg_below, bkg_total);
    if (k < n) {
      sig_below += h.signal_counts[k];
      bkg_below += h.background_counts[k];
    }
  }
  return c;
}

// Wilson score interval for a binomial fraction; behaves well at extreme
// proportions. Reports label the construction explicitly as "wilson".
inline std::pair<double, double> wilson_interval(std::uint64_t successes,
                                                 std::uint64_t trials,
                                                 double z = 1.959963984540054) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

}  // namespace sparsevox
