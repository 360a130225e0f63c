#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"
#include "sparsevox/sparse_tensor.hpp"
#include "sparsevox/volume.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// RoiSpec: one full-resolution z range plus one inclusive rectangle per slice.
// Slices in the z range that had no predicted signal carry the global
// bounding rectangle of all predictions (the signal-preserving fallback).
// ---------------------------------------------------------------------------

struct Rect {
  int x_min = 0, x_max = 0, y_min = 0, y_max = 0;

  bool contains(int x, int y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
};

struct RoiSpec {
  int z_min = 0, z_max = -1;           // inclusive full-resolution slices
  std::map<int, Rect> rects;           // one per slice in [z_min, z_max]
  int margin = 0;
  int factor = 1;                      // quantization factor of the source preds
  std::array<int, 3> dims{0, 0, 0};    // full-resolution volume dims

  void validate() const {
    if (z_min > z_max) throw DataError("ROI z range is empty");
    for (int z = z_min; z <= z_max; ++z) {
      auto it = rects.find(z);
      if (it == rects.end())
        throw DataError("ROI is missing a rectangle for slice " +
                        std::to_string(z));
      const Rect& r = it->second;
      if (r.x_min > r.x_max || r.y_min > r.y_max)
        throw DataError("ROI rectangle degenerate at slice " +
                        std::to_string(z));
    }
  }

  // The same ROI with bounds grown by extra voxels/slices, clamped to dims.
  RoiSpec expanded(int extra) const {
    RoiSpec out = *this;
    out.margin = margin + extra;
    out.z_min = std::max(0, z_min - extra);
    out.z_max = std::min(dims[2] - 1, z_max + extra);
    Rect global{dims[0] - 1, 0, dims[1] - 1, 0};
    for (const auto& [z, r] : rects) {
      global.x_min = std::min(global.x_min, r.x_min);
      global.x_max = std::max(global.x_max, r.x_max);
      global.y_min = std::min(global.y_min, r.y_min);
      global.y_max = std::max(global.y_max, r.y_max);
    }
    std::map<int, Rect> grown;
    for (int z = out.z_min; z <= out.z_max; ++z) {
      auto it = rects.find(std::clamp(z, z_min, z_max));
      Rect r = it != rects.end() ? it->second : global;
      r.x_min = std::max(0, r.x_min - extra);
      r.x_max = std::min(dims[0] - 1, r.x_max + extra);
      r.y_min = std::max(0, r.y_min - extra);
      r.y_max = std::min(dims[1] - 1, r.y_max + extra);
      grown[z] = r;
    }
    out.rects = std::move(grown);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const Rect& r) {
  j = {{"x_min", r.x_min}, {"x_max", r.x_max},
       {"y_min", r.y_min}, {"y_max", r.y_max}};
}
inline void from_json(const nlohmann::json& j, Rect& r) {
  j.at("x_min").get_to(r.x_min);
  j.at("x_max").get_to(r.x_max);
  j.at("y_min").get_to(r.y_min);
  j.at("y_max").get_to(r.y_max);
}

inline void to_json(nlohmann::json& j, const RoiSpec& s) {
  nlohmann::json rects = nlohmann::json::object();
  for (const auto& [z, r] : s.rects) rects[std::to_string(z)] = r;
  j = {{"z_min", s.z_min}, {"z_max", s.z_max},   {"rects", rects},
       {"margin", s.margin}, {"factor", s.factor}, {"dims", s.dims}};
}
inline void from_json(const nlohmann::json& j, RoiSpec& s) {
  j.at("z_min").get_to(s.z_min);
  j.at("z_max").get_to(s.z_max);
  j.at("margin").get_to(s.margin);
  j.at("factor").get_to(s.factor);
  j.at("dims").get_to(s.dims);
  s.rects.clear();
  for (const auto& [k, v] : j.at("rects").items())
    s.rects[std::stoi(k)] = v.get<Rect>();
}

// ---------------------------------------------------------------------------
// extract_roi: predicted signal cells at quantized stride -> full-resolution
// per-slice rectangles plus z range, margin-expanded and clamped.
// ---------------------------------------------------------------------------

template <typename Real>
RoiSpec extract_roi(const SparseTensor<Real>& pred_tensor,
                    const std::vector<std::uint8_t>& pred_classes, int factor,
                    const std::array<int, 3>& dims, int margin) {
  if (pred_classes.size() != pred_tensor.size())
    throw DataError("prediction count does not match site count");
  if (pred_tensor.stride != factor)
    throw DataError("prediction tensor stride does not equal the factor");

  RoiSpec roi;
  roi.factor = factor;
  roi.dims = dims;
  roi.margin = 0;
  roi.z_min = dims[2];
  roi.z_max = -1;

  // Per-slice bounding boxes of predicted-signal cells, upscaled to stride 1.
  std::map<int, Rect> boxes;
  Rect global{dims[0] - 1, 0, dims[1] - 1, 0};
  bool any = false;
  for (std::size_t i = 0; i < pred_tensor.size(); ++i) {
    if (pred_classes[i] == 0) continue;
    any = true;
    const CoordRange cell = upscale_coord(pred_tensor.coords[i], factor);
    roi.z_min = std::min(roi.z_min, cell.lo[2]);
    roi.z_max = std::max(roi.z_max, cell.hi[2]);
    global.x_min = std::min(global.x_min, cell.lo[0]);
    global.x_max = std::max(global.x_max, cell.hi[0]);
    global.y_min = std::min(global.y_min, cell.lo[1]);
    global.y_max = std::max(global.y_max, cell.hi[1]);
    for (int z = cell.lo[2]; z <= cell.hi[2]; ++z) {
      auto [it, inserted] =
          boxes.try_emplace(z, Rect{cell.lo[0], cell.hi[0], cell.lo[1],
                                    cell.hi[1]});
      if (!inserted) {
        it->second.x_min = std::min(it->second.x_min, cell.lo[0]);
        it->second.x_max = std::max(it->second.x_max, cell.hi[0]);
        it->second.y_min = std::min(it->second.y_min, cell.lo[1]);
        it->second.y_max = std::max(it->second.y_max, cell.hi[1]);
      }
    }
  }
  if (!any)
    throw DataError(
        "no predicted signal sites: ROI is empty (caller decides fallback)");

  roi.z_min = std::max(0, roi.z_min);
  roi.z_max = std::min(dims[2] - 1, roi.z_max);
  for (int z = roi.z_min; z <= roi.z_max; ++z) {
    auto it = boxes.find(z);
    Rect r = it != boxes.end() ? it->second : global;
    r.x_min = std::max(0, r.x_min);
    r.x_max = std::min(dims[0] - 1, r.x_max);
    r.y_min = std::max(0, r.y_min);
    r.y_max = std::min(dims[1] - 1, r.y_max);
    roi.rects[z] = r;
  }
  roi.validate();
  return margin > 0 ? roi.expanded(margin) : roi;
}

// Full-volume fallback for cases where stage 1 predicted nothing.
inline RoiSpec full_volume_roi(const std::array<int, 3>& dims, int factor) {
  RoiSpec roi;
  roi.factor = factor;
  roi.dims = dims;
  roi.z_min = 0;
  roi.z_max = dims[2] - 1;
  for (int z = 0; z < dims[2]; ++z)
    roi.rects[z] = Rect{0, dims[0] - 1, 0, dims[1] - 1};
  return roi;
}

// ---------------------------------------------------------------------------
// Cropping. Slices outside the z range are dropped; within kept slices the
// x/y extent shrinks to the union of the rectangles and voxels outside a
// slice's own rectangle are set to the sentinel (below any sparsification
// minimum, so stage-2 thresholding discards them). The offset maps crop
// coordinates back to the original volume.
// ---------------------------------------------------------------------------

constexpr std::int16_t kCropSentinel = kHuMin;

struct CropResult {
  DenseVolume volume;
  std::array<int, 3> offset{0, 0, 0};
};

inline CropResult crop(const DenseVolume& v, const RoiSpec& roi) {
  roi.validate();
  if (roi.dims != v.dims)
    throw DataError("ROI dims do not match volume dims");
  if (roi.z_min < 0 || roi.z_max >= v.dims[2])
    throw DataError("ROI z range outside volume dims");

  Rect uni{v.dims[0] - 1, 0, v.dims[1] - 1, 0};
  for (int z = roi.z_min; z <= roi.z_max; ++z) {
    const Rect& r = roi.rects.at(z);
    if (r.x_max >= v.dims[0] || r.y_max >= v.dims[1] || r.x_min < 0 ||
        r.y_min < 0)
      throw DataError("ROI rectangle outside volume dims at slice " +
                      std::to_string(z));
    uni.x_min = std::min(uni.x_min, r.x_min);
    uni.x_max = std::max(uni.x_max, r.x_max);
    uni.y_min = std::min(uni.y_min, r.y_min);
    uni.y_max = std::max(uni.y_max, r.y_max);
  }

  CropResult out;
  out.offset = {uni.x_min, uni.y_min, roi.z_min};
  out.volume.dims = {uni.x_max - uni.x_min + 1, uni.y_max - uni.y_min + 1,
                     roi.z_max - roi.z_min + 1};
  out.volume.spacing = v.spacing;
  out.volume.hu.assign(out.volume.voxel_count(), kCropSentinel);
  if (v.has_labels()) out.volume.labels.assign(out.volume.voxel_count(), 0);

  for (int z = roi.z_min; z <= roi.z_max; ++z) {
    const Rect& r = roi.rects.at(z);
    for (int y = r.y_min; y <= r.y_max; ++y)
      for (int x = r.x_min; x <= r.x_max; ++x) {
        const std::size_t src = v.index(x, y, z);
        const std::size_t dst = out.volume.index(
            x - out.offset[0], y - out.offset[1], z - out.offset[2]);
        out.volume.hu[dst] = v.hu[src];
        if (v.has_labels()) out.volume.labels[dst] = v.labels[src];
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cropping effectiveness. The voxel basis counts truth-signal voxels inside
// the 3D ROI and background voxels outside it; the slice basis counts whole
// slices (signal slices kept by the z range, signal-free slices removed).
// ---------------------------------------------------------------------------

struct CropStats {
  double signal_kept_2d = 0.0;
  double background_removed_2d = 0.0;
  double signal_kept_slices = 0.0;
  double background_removed_slices = 0.0;
};

inline void to_json(nlohmann::json& j, const CropStats& s) {
  j = {{"signal_kept_2d", s.signal_kept_2d},
       {"background_removed_2d", s.background_removed_2d},
       {"signal_kept_slices", s.signal_kept_slices},
       {"background_removed_slices", s.background_removed_slices}};
}

inline CropStats crop_stats_single(const RoiSpec& roi, const DenseVolume& truth,
                                   int extra_margin) {
  if (!truth.has_labels())
    throw DataError("crop statistics require a labeled volume");
  const RoiSpec r = extra_margin > 0 ? roi.expanded(extra_margin) : roi;

  std::uint64_t sig_total = 0, sig_kept = 0, bkg_total = 0, bkg_removed = 0;
  std::uint64_t sig_slices = 0, sig_slices_kept = 0;
  std::uint64_t free_slices = 0, free_slices_removed = 0;

  std::size_t i = 0;
  for (int z = 0; z < truth.dims[2]; ++z) {
    const bool z_in = z >= r.z_min && z <= r.z_max;
    const Rect* rect = z_in ? &r.rects.at(z) : nullptr;
    bool slice_has_signal = false;
    for (int y = 0; y < truth.dims[1]; ++y)
      for (int x = 0; x < truth.dims[0]; ++x, ++i) {
        const bool inside = z_in && rect->contains(x, y);
        if (truth.labels[i] != 0) {
          slice_has_signal = true;
          ++sig_total;
          if (inside) ++sig_kept;
        } else {
          ++bkg_total;
          if (!inside) ++bkg_removed;
        }
      }
    if (slice_has_signal) {
      ++sig_slices;
      if (z_in) ++sig_slices_kept;
    } else {
      ++free_slices;
      if (!z_in) ++free_slices_removed;
    }
  }

  CropStats s;
  s.signal_kept_2d =
      sig_total == 0 ? 1.0 : static_cast<double>(sig_kept) / sig_total;
  s.background_removed_2d =
      bkg_total == 0 ? 0.0 : static_cast<double>(bkg_removed) / bkg_total;
  s.signal_kept_slices =
      sig_slices == 0 ? 1.0 : static_cast<double>(sig_slices_kept) / sig_slices;
  s.background_removed_slices =
      free_slices == 0 ? 0.0
                       : static_cast<double>(free_slices_removed) / free_slices;
  return s;
}

// Per-margin stats averaged over cases, one entry per margin in [0, max].
inline std::vector<CropStats> crop_stats(
    const std::vector<RoiSpec>& rois, const std::vector<const DenseVolume*>& truths,
    int max_margin) {
  if (rois.size() != truths.size())
    throw DataError("ROI and truth case counts differ");
  std::vector<CropStats> out(static_cast<std::size_t>(max_margin) + 1);
  if (rois.empty()) return out;
  for (int m = 0; m <= max_margin; ++m) {
    CropStats acc;
    for (std::size_t c = 0; c < rois.size(); ++c) {
      const CropStats s = crop_stats_single(rois[c], *truths[c], m);
      acc.signal_kept_2d += s.signal_kept_2d;
      acc.background_removed_2d += s.background_removed_2d;
      acc.signal_kept_slices += s.signal_kept_slices;
      acc.background_removed_slices += s.background_removed_slices;
    }
    const double n = static_cast<double>(rois.size());
    out[m] = {acc.signal_kept_2d / n, acc.background_removed_2d / n,
              acc.signal_kept_slices / n, acc.background_removed_slices / n};
  }
  return out;
}

}  // namespace sparsevox
