#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "sparsevox/roi.hpp"

using namespace sparsevox;

namespace {

// A prediction tensor at stride `factor` with the given signal cells.
SparseTensor<double> pred_tensor(const std::vector<Coord>& cells, int factor) {
  SparseTensor<double> t;
  t.channels = 1;
  t.stride = factor;
  t.coords = cells;
  std::sort(t.coords.begin(), t.coords.end(), coord_less);
  t.feats.assign(t.coords.size(), 0.0);
  t.rebuild_index();
  return t;
}

DenseVolume truth_volume(std::uint64_t seed, std::array<int, 3> dims,
                         double signal_frac) {
  Rng rng(seed);
  DenseVolume v;
  v.dims = dims;
  v.hu.assign(v.voxel_count(), 0);
  v.labels.resize(v.voxel_count());
  for (auto& l : v.labels) l = rng.uniform() < signal_frac ? 1 : 0;
  return v;
}

}  // namespace

TEST_CASE("a single signal cell maps to its factor-wide box") {
  // Cell (x=2, y=3, z=1)*factor with factor 3 covers x [6,8], y [9,11],
  // z [3,5] at full resolution.
  auto t = pred_tensor({{0, 6, 9, 3}}, 3);
  const RoiSpec roi = extract_roi(t, {1}, 3, {32, 32, 32}, 0);
  CHECK(roi.z_min == 3);
  CHECK(roi.z_max == 5);
  for (int z = 3; z <= 5; ++z) {
    const Rect& r = roi.rects.at(z);
    CHECK(r.x_min == 6);
    CHECK(r.x_max == 8);
    CHECK(r.y_min == 9);
    CHECK(r.y_max == 11);
  }
  CHECK_NOTHROW(roi.validate());
}

TEST_CASE("corner cells clamp to the volume bounds") {
  auto t = pred_tensor({{0, 30, 30, 30}}, 3);
  // Cell extends to 32, but dims are 32 so indices stop at 31.
  const RoiSpec roi = extract_roi(t, {1}, 3, {32, 32, 32}, 0);
  CHECK(roi.z_max == 31);
  CHECK(roi.rects.at(31).x_max == 31);
  // Margins also clamp.
  const RoiSpec grown = roi.expanded(100);
  CHECK(grown.z_min == 0);
  CHECK(grown.z_max == 31);
  CHECK(grown.rects.at(0).x_min == 0);
  CHECK(grown.rects.at(0).x_max == 31);
}

TEST_CASE("background-only cells are ignored; empty predictions throw") {
  auto t = pred_tensor({{0, 0, 0, 0}, {0, 6, 6, 6}}, 3);
  const RoiSpec roi = extract_roi(t, {0, 1}, 3, {32, 32, 32}, 0);
  CHECK(roi.z_min == 6);
  CHECK_THROWS_AS(extract_roi(t, {0, 0}, 3, {32, 32, 32}, 0), DataError);
  CHECK_THROWS_AS(extract_roi(t, {0}, 3, {32, 32, 32}, 0), DataError);
}

TEST_CASE("per-slice rectangles match a brute-force scan") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed);
    std::vector<Coord> cells;
    std::vector<std::uint8_t> classes;
    std::set<Coord> seen;
    for (int i = 0; i < 25; ++i) {
      Coord c = {0, static_cast<std::int32_t>(rng.below(8)) * 3,
                 static_cast<std::int32_t>(rng.below(8)) * 3,
                 static_cast<std::int32_t>(rng.below(8)) * 3};
      if (seen.insert(c).second) cells.push_back(c);
    }
    auto t = pred_tensor(cells, 3);
    classes.resize(t.size());
    bool any = false;
    for (auto& c : classes) {
      c = rng.uniform() < 0.4 ? 1 : 0;
      any |= c != 0;
    }
    if (!any) classes[0] = 1;
    const std::array<int, 3> dims = {24, 24, 24};
    const RoiSpec roi = extract_roi(t, classes, 3, dims, 0);

    // Brute force: mark every full-resolution voxel covered by a signal cell.
    std::vector<char> mark(static_cast<std::size_t>(24) * 24 * 24, 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (classes[i] == 0) continue;
      const CoordRange r = upscale_coord(t.coords[i], 3);
      for (int z = r.lo[2]; z <= std::min(r.hi[2], 23); ++z)
        for (int y = r.lo[1]; y <= std::min(r.hi[1], 23); ++y)
          for (int x = r.lo[0]; x <= std::min(r.hi[0], 23); ++x)
            mark[static_cast<std::size_t>(z) * 576 + y * 24 + x] = 1;
    }
    int zmin = 24, zmax = -1;
    for (int z = 0; z < 24; ++z) {
      int xmin = 24, xmax = -1, ymin = 24, ymax = -1;
      for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
          if (mark[static_cast<std::size_t>(z) * 576 + y * 24 + x]) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
          }
      if (xmax < 0) continue;
      zmin = std::min(zmin, z);
      zmax = std::max(zmax, z);
      const Rect& r = roi.rects.at(z);
      CHECK(r.x_min == xmin);
      CHECK(r.x_max == xmax);
      CHECK(r.y_min == ymin);
      CHECK(r.y_max == ymax);
    }
    CHECK(roi.z_min == zmin);
    CHECK(roi.z_max == zmax);
  }
}

TEST_CASE("expanded grows bounds by the margin and keeps containment") {
  auto t = pred_tensor({{0, 9, 9, 9}}, 3);
  const RoiSpec r0 = extract_roi(t, {1}, 3, {32, 32, 32}, 0);
  const RoiSpec r2 = r0.expanded(2);
  CHECK(r2.margin == 2);
  CHECK(r2.z_min == r0.z_min - 2);
  CHECK(r2.z_max == r0.z_max + 2);
  for (const auto& [z, rect] : r0.rects) {
    const Rect& g = r2.rects.at(z);
    CHECK(g.x_min == rect.x_min - 2);
    CHECK(g.x_max == rect.x_max + 2);
    CHECK(g.y_min == rect.y_min - 2);
    CHECK(g.y_max == rect.y_max + 2);
  }
  // New slices carry the nearest rectangle (grown), here the global box.
  CHECK(r2.rects.count(r0.z_min - 1) == 1);

  // extract_roi with margin equals expanding afterwards.
  const RoiSpec direct = extract_roi(t, {1}, 3, {32, 32, 32}, 2);
  CHECK(direct.z_min == r2.z_min);
  CHECK(direct.z_max == r2.z_max);
  for (const auto& [z, rect] : r2.rects) {
    const Rect& d = direct.rects.at(z);
    CHECK(d.x_min == rect.x_min);
    CHECK(d.x_max == rect.x_max);
    CHECK(d.y_min == rect.y_min);
    CHECK(d.y_max == rect.y_max);
  }
}

TEST_CASE("roi json round trip") {
  auto t = pred_tensor({{0, 3, 6, 9}, {0, 12, 3, 9}}, 3);
  const RoiSpec roi = extract_roi(t, {1, 1}, 3, {32, 32, 32}, 1);
  nlohmann::json j = roi;
  const RoiSpec back = j.get<RoiSpec>();
  CHECK(back.z_min == roi.z_min);
  CHECK(back.z_max == roi.z_max);
  CHECK(back.margin == roi.margin);
  CHECK(back.factor == roi.factor);
  CHECK(back.dims == roi.dims);
  REQUIRE(back.rects.size() == roi.rects.size());
  for (const auto& [z, r] : roi.rects) {
    const Rect& b = back.rects.at(z);
    CHECK(b.x_min == r.x_min);
    CHECK(b.x_max == r.x_max);
    CHECK(b.y_min == r.y_min);
    CHECK(b.y_max == r.y_max);
  }
}

TEST_CASE("crop keeps the ROI content and sentinels the rest") {
  DenseVolume v;
  v.dims = {8, 8, 8};
  v.hu.resize(v.voxel_count());
  v.labels.resize(v.voxel_count());
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    v.hu[i] = static_cast<std::int16_t>(i % 1000);
    v.labels[i] = i % 7 == 0 ? 1 : 0;
  }

  RoiSpec roi;
  roi.dims = v.dims;
  roi.factor = 1;
  roi.z_min = 2;
  roi.z_max = 4;
  roi.rects[2] = {1, 3, 2, 5};
  roi.rects[3] = {2, 6, 1, 4};
  roi.rects[4] = {1, 3, 2, 5};

  const CropResult cr = crop(v, roi);
  CHECK(cr.offset == std::array<int, 3>{1, 1, 2});
  CHECK(cr.volume.dims == std::array<int, 3>{6, 5, 3});

  for (int z = 0; z < cr.volume.dims[2]; ++z)
    for (int y = 0; y < cr.volume.dims[1]; ++y)
      for (int x = 0; x < cr.volume.dims[0]; ++x) {
        const int sx = x + cr.offset[0], sy = y + cr.offset[1],
                  sz = z + cr.offset[2];
        const Rect& r = roi.rects.at(sz);
        const auto got = cr.volume.hu[cr.volume.index(x, y, z)];
        if (r.contains(sx, sy)) {
          CHECK(got == v.hu[v.index(sx, sy, sz)]);
          CHECK(cr.volume.labels[cr.volume.index(x, y, z)] ==
                v.labels[v.index(sx, sy, sz)]);
        } else {
          CHECK(got == kCropSentinel);
          CHECK(cr.volume.labels[cr.volume.index(x, y, z)] == 0);
        }
      }
}

TEST_CASE("full-volume roi crop is the identity") {
  DenseVolume v = truth_volume(3, {6, 5, 4}, 0.2);
  Rng rng(4);
  for (auto& h : v.hu) h = clamp_hu(rng.uniform(-500, 500));
  const RoiSpec roi = full_volume_roi(v.dims, 3);
  const CropResult cr = crop(v, roi);
  CHECK(cr.offset == std::array<int, 3>{0, 0, 0});
  CHECK(cr.volume.dims == v.dims);
  CHECK(cr.volume.hu == v.hu);
  CHECK(cr.volume.labels == v.labels);
}

TEST_CASE("crop rejects mismatched dims") {
  DenseVolume v = truth_volume(5, {6, 6, 6}, 0.1);
  RoiSpec roi = full_volume_roi({7, 6, 6}, 1);
  CHECK_THROWS_AS(crop(v, roi), DataError);
}

TEST_CASE("crop stats on hand-countable input") {
  // 4x4x4 volume, signal only in slice z=1 within x,y in [1,2].
  DenseVolume v;
  v.dims = {4, 4, 4};
  v.hu.assign(v.voxel_count(), 0);
  v.labels.assign(v.voxel_count(), 0);
  for (int y = 1; y <= 2; ++y)
    for (int x = 1; x <= 2; ++x) v.labels[v.index(x, y, 1)] = 1;

  RoiSpec roi;
  roi.dims = v.dims;
  roi.factor = 1;
  roi.z_min = 1;
  roi.z_max = 1;
  roi.rects[1] = {1, 2, 1, 2};

  const CropStats s = crop_stats_single(roi, v, 0);
  CHECK(s.signal_kept_2d == 1.0);
  // Background: 64 - 4 signal = 60; kept background is the 12 sites of the
  // rectangle's slice minus the 4 signal = 12; wait: rect is 2x2=4, all
  // signal, so every background voxel is removed.
  CHECK(s.background_removed_2d == 1.0);
  CHECK(s.signal_kept_slices == 1.0);
  CHECK(s.background_removed_slices == 1.0);

  // A perfect-recall ROI that keeps one extra slice removes 2/3 of the
  // signal-free slices.
  RoiSpec wide = roi;
  wide.z_max = 2;
  wide.rects[2] = wide.rects.at(1);
  const CropStats w = crop_stats_single(wide, v, 0);
  CHECK(w.signal_kept_slices == 1.0);
  CHECK(w.background_removed_slices == doctest::Approx(2.0 / 3.0));

  // A miss: ROI off the signal slice loses all signal.
  RoiSpec miss = roi;
  miss.z_min = 3;
  miss.z_max = 3;
  miss.rects.clear();
  miss.rects[3] = {0, 3, 0, 3};
  const CropStats m = crop_stats_single(miss, v, 0);
  CHECK(m.signal_kept_2d == 0.0);
  CHECK(m.signal_kept_slices == 0.0);
}

TEST_CASE("crop stats against a direct counting oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DenseVolume v = truth_volume(seed, {12, 12, 12}, 0.1);
    Rng rng(seed + 50);
    std::vector<Coord> cells;
    std::set<Coord> seen;
    for (int i = 0; i < 10; ++i) {
      Coord c = {0, static_cast<std::int32_t>(rng.below(4)) * 3,
                 static_cast<std::int32_t>(rng.below(4)) * 3,
                 static_cast<std::int32_t>(rng.below(4)) * 3};
      if (seen.insert(c).second) cells.push_back(c);
    }
    auto t = pred_tensor(cells, 3);
    std::vector<std::uint8_t> classes(t.size(), 1);
    const RoiSpec roi = extract_roi(t, classes, 3, v.dims, 0);
    const CropStats s = crop_stats_single(roi, v, 1);
    const RoiSpec r1 = roi.expanded(1);

    std::uint64_t sig = 0, sig_in = 0, bkg = 0, bkg_out = 0;
    for (int z = 0; z < 12; ++z)
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
          const bool in = z >= r1.z_min && z <= r1.z_max &&
                          r1.rects.at(std::clamp(z, r1.z_min, r1.z_max))
                              .contains(x, y);
          if (v.labels[v.index(x, y, z)] != 0) {
            ++sig;
            if (in) ++sig_in;
          } else {
            ++bkg;
            if (!in) ++bkg_out;
          }
        }
    CHECK(s.signal_kept_2d ==
          doctest::Approx(static_cast<double>(sig_in) / sig));
    CHECK(s.background_removed_2d ==
          doctest::Approx(static_cast<double>(bkg_out) / bkg));
  }
}

TEST_CASE("crop stats are monotone in the margin") {
  std::vector<RoiSpec> rois;
  std::vector<DenseVolume> truths;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    truths.push_back(truth_volume(seed + 9, {15, 15, 15}, 0.08));
    Rng rng(seed);
    std::vector<Coord> cells;
    std::set<Coord> seen;
    for (int i = 0; i < 6; ++i) {
      Coord c = {0, static_cast<std::int32_t>(rng.below(5)) * 3,
                 static_cast<std::int32_t>(rng.below(5)) * 3,
                 static_cast<std::int32_t>(rng.below(5)) * 3};
      if (seen.insert(c).second) cells.push_back(c);
    }
    auto t = pred_tensor(cells, 3);
    rois.push_back(
        extract_roi(t, std::vector<std::uint8_t>(t.size(), 1), 3,
                    truths.back().dims, 0));
  }
  std::vector<const DenseVolume*> ptrs;
  for (const auto& t : truths) ptrs.push_back(&t);
  const auto stats = crop_stats(rois, ptrs, 10);
  REQUIRE(stats.size() == 11);
  for (std::size_t m = 1; m < stats.size(); ++m) {
    CHECK(stats[m].signal_kept_2d >= stats[m - 1].signal_kept_2d);
    CHECK(stats[m].background_removed_2d <=
          stats[m - 1].background_removed_2d);
    CHECK(stats[m].signal_kept_slices >= stats[m - 1].signal_kept_slices);
    CHECK(stats[m].background_removed_slices <=
          stats[m - 1].background_removed_slices);
  }
}
