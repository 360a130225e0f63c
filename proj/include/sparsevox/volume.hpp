#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"

namespace sparsevox {

// CT calibration range kept after ingestion (12-bit convention).
constexpr std::int16_t kHuMin = -1024;
constexpr std::int16_t kHuMax = 3071;

inline std::int16_t clamp_hu(double v) {
  if (v < kHuMin) return kHuMin;
  if (v > kHuMax) return kHuMax;
  return static_cast<std::int16_t>(v);
}

// ---------------------------------------------------------------------------
// DenseVolume: a dense 3D grid of HU intensities (x-fastest storage order)
// with voxel spacing and an optional aligned label grid
// (0=background, 1=kidney, 2=tumour, 3=cyst). Immutable by convention after
// construction; safe for concurrent reads.
// ---------------------------------------------------------------------------

struct DenseVolume {
  std::array<int, 3> dims{0, 0, 0};            // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::vector<std::int16_t> hu;                // nx*ny*nz, x-fastest
  std::vector<std::uint8_t> labels;            // empty or same size as hu

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  bool has_labels() const { return !labels.empty(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }

  void validate() const {
    if (hu.size() != voxel_count())
      throw DataError("intensity array size does not match dims");
    if (!labels.empty() && labels.size() != voxel_count())
      throw DataError("label array size does not match dims");
    for (double s : spacing)
      if (!(s > 0.0)) throw DataError("spacing components must be positive");
  }
};

enum class VolumeFormat { raw, nifti };

// ---------------------------------------------------------------------------
// Raw format: JSON header at <path>.json, flat little-endian int16 payload at
// <path>, x-fastest. Labels go to a sibling pair with "_seg" inserted before
// the extension (uint8 payload).
// ---------------------------------------------------------------------------

namespace detail {

inline std::string seg_sibling(const std::string& path) {
  std::filesystem::path p(path);
  std::string ext;
  // Peel .gz first so vol.nii.gz -> vol_seg.nii.gz.
  if (p.extension() == ".gz") {
    ext = p.extension().string();
    p.replace_extension();
  }
  ext = p.extension().string() + ext;
  p.replace_extension();
  return p.string() + "_seg" + ext;
}

}  // namespace detail

inline void save_raw(const DenseVolume& v, const std::string& path) {
  v.validate();
  nlohmann::json hdr = {
      {"dims", {v.dims[0], v.dims[1], v.dims[2]}},
      {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
      {"dtype", "int16"},
      {"byte_order", "little"},
  };
  {
    std::ofstream hs(path + ".json");
    if (!hs) throw DataError("cannot write raw header: " + path + ".json");
    hs << hdr.dump(2) << "\n";
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write raw payload: " + path);
  write_vec(os, v.hu);
  if (!os) throw DataError("short write on raw payload: " + path);

  if (v.has_labels()) {
    const std::string seg = detail::seg_sibling(path);
    nlohmann::json shdr = hdr;
    shdr["dtype"] = "uint8";
    std::ofstream ss(seg + ".json");
    if (!ss) throw DataError("cannot write raw header: " + seg + ".json");
    ss << shdr.dump(2) << "\n";
    std::ofstream so(seg, std::ios::binary);
    if (!so) throw DataError("cannot write raw payload: " + seg);
    write_vec(so, v.labels);
  }
}

inline DenseVolume load_raw(const std::string& path) {
  std::ifstream hs(path + ".json");
  if (!hs) throw DataError("missing raw header: " + path + ".json");
  nlohmann::json hdr;
  try {
    hs >> hdr;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed raw header " + path + ".json: " + e.what());
  }
  for (const char* field : {"dims", "spacing", "dtype", "byte_order"})
    if (!hdr.contains(field))
      throw DataError("raw header missing field '" + std::string(field) +
                      "': " + path + ".json");
  if (hdr["byte_order"] != "little")
    throw DataError("raw header field 'byte_order' must be \"little\": " +
                    path + ".json");
  if (hdr["dims"].size() != 3)
    throw DataError("raw header field 'dims' must have 3 entries: " + path +
                    ".json");

  DenseVolume v;
  for (int i = 0; i < 3; ++i) {
    v.dims[i] = hdr["dims"][i].get<int>();
    v.spacing[i] = hdr["spacing"][i].get<double>();
  }
  const std::string dtype = hdr["dtype"].get<std::string>();
  if (dtype != "int16")
    throw DataError("raw header field 'dtype' unsupported (" + dtype +
                    "): " + path + ".json");

  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing raw payload: " + path);
  read_vec(is, v.hu, v.voxel_count());
  if (v.voxel_count() > 0 && !is)
    throw DataError("raw payload truncated: " + path);
  for (auto& h : v.hu) h = clamp_hu(h);

  const std::string seg = detail::seg_sibling(path);
  if (std::filesystem::exists(seg)) {
    std::ifstream shs(seg + ".json");
    if (!shs) throw DataError("missing raw header: " + seg + ".json");
    nlohmann::json shdr;
    shs >> shdr;
    if (shdr["dims"] != hdr["dims"])
      throw DataError("label dims do not match image dims: " + seg);
    std::ifstream ss(seg, std::ios::binary);
    read_vec(ss, v.labels, v.voxel_count());
    if (v.voxel_count() > 0 && !ss)
      throw DataError("label payload truncated: " + seg);
  }
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Synthetic phantom: noisy background, air/bone clutter outside the usual
// soft-tissue band, and labeled ellipsoid organs. Deterministic in the seed.
// ---------------------------------------------------------------------------

struct EllipsoidOrgan {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  double hu_mean = 150.0;
  double hu_stddev = 15.0;
  int class_id = 1;  // 1=kidney, 2=tumour, 3=cyst
};

struct PhantomSpec {
  std::array<int, 3> dims{32, 32, 32};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double background_mean = 20.0;
  double background_stddev = 30.0;
  std::vector<EllipsoidOrgan> organs;
  double clutter_fraction = 0.05;  // air-like (<-200) or bone-like (>500)
  std::uint64_t seed = 0;

  void validate() const {
    for (int d : dims)
      if (d < 0) throw ConfigError("phantom dims must be non-negative");
    if (clutter_fraction < 0.0 || clutter_fraction > 1.0)
      throw ConfigError("clutter_fraction must lie in [0,1]");
    for (const auto& o : organs) {
      if (o.class_id < 1 || o.class_id > 3)
        throw ConfigError("organ class_id must be in {1,2,3}");
      for (int a = 0; a < 3; ++a) {
        if (o.radii[a] <= 0.0) throw ConfigError("organ radii must be positive");
        if (o.center[a] - o.radii[a] < 0.0 ||
            o.center[a] + o.radii[a] > dims[a] - 1)
          throw ConfigError("organ ellipsoid extends outside volume dims");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const EllipsoidOrgan& o) {
  j = {{"center", o.center}, {"radii", o.radii},  {"hu_mean", o.hu_mean},
       {"hu_stddev", o.hu_stddev}, {"class_id", o.class_id}};
}

inline void from_json(const nlohmann::json& j, EllipsoidOrgan& o) {
  j.at("center").get_to(o.center);
  j.at("radii").get_to(o.radii);
  j.at("hu_mean").get_to(o.hu_mean);
  j.at("hu_stddev").get_to(o.hu_stddev);
  j.at("class_id").get_to(o.class_id);
}

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"dims", s.dims},
       {"spacing", s.spacing},
       {"background_mean", s.background_mean},
       {"background_stddev", s.background_stddev},
       {"organs", s.organs},
       {"clutter_fraction", s.clutter_fraction},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
  j.at("dims").get_to(s.dims);
  if (j.contains("spacing")) j.at("spacing").get_to(s.spacing);
  j.at("background_mean").get_to(s.background_mean);
  j.at("background_stddev").get_to(s.background_stddev);
  j.at("organs").get_to(s.organs);
  j.at("clutter_fraction").get_to(s.clutter_fraction);
  j.at("seed").get_to(s.seed);
}

// Organ HU is drawn from a normal truncated at mean +/- 3 stddev, so every
// labeled voxel stays within the organ's declared support. Overlapping
// organs: the later organ in the list wins.
inline DenseVolume generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  DenseVolume v;
  v.dims = spec.dims;
  v.spacing = spec.spacing;
  v.hu.resize(v.voxel_count());
  v.labels.assign(v.voxel_count(), 0);

  Rng rng(spec.seed);
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    double hu;
    if (spec.clutter_fraction > 0.0 && rng.uniform() < spec.clutter_fraction) {
      hu = rng.uniform() < 0.5 ? rng.uniform(-1000.0, -300.0)
                               : rng.uniform(600.0, 1500.0);
    } else {
      hu = rng.normal(spec.background_mean, spec.background_stddev);
    }
    v.hu[i] = clamp_hu(hu);
  }

  for (const auto& o : spec.organs) {
    const int x0 = static_cast<int>(std::floor(o.center[0] - o.radii[0]));
    const int x1 = static_cast<int>(std::ceil(o.center[0] + o.radii[0]));
    const int y0 = static_cast<int>(std::floor(o.center[1] - o.radii[1]));
    const int y1 = static_cast<int>(std::ceil(o.center[1] + o.radii[1]));
    const int z0 = static_cast<int>(std::floor(o.center[2] - o.radii[2]));
    const int z1 = static_cast<int>(std::ceil(o.center[2] + o.radii[2]));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double dx = (x - o.center[0]) / o.radii[0];
          const double dy = (y - o.center[1]) / o.radii[1];
          const double dz = (z - o.center[2]) / o.radii[2];
          if (dx * dx + dy * dy + dz * dz > 1.0) continue;
          double hu = rng.normal(o.hu_mean, o.hu_stddev);
          const double lo = o.hu_mean - 3.0 * o.hu_stddev;
          const double hi = o.hu_mean + 3.0 * o.hu_stddev;
          hu = std::clamp(hu, lo, hi);
          const std::size_t i = v.index(x, y, z);
          v.hu[i] = clamp_hu(hu);
          v.labels[i] = static_cast<std::uint8_t>(o.class_id);
        }
  }
  return v;
}

}  // namespace sparsevox
