#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"
#include "sparsevox/sparsify.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// Batched coordinate-hashed sparse tensor. Sites are unique (b,x,y,z)
// coordinates in canonical (b,z,y,x) lexicographic order, every coordinate a
// multiple of the tensor stride, with a C-wide feature row per site.
// Immutable after construction.
// ---------------------------------------------------------------------------

template <typename Real>
struct SparseTensor {
  std::vector<Coord> coords;
  std::vector<Real> feats;  // row-major, coords.size() x channels
  int channels = 0;
  std::int32_t stride = 1;
  std::unordered_map<Coord, std::int32_t, CoordHash> index;

  std::size_t size() const { return coords.size(); }

  const Real* row(std::size_t i) const { return feats.data() + i * channels; }
  Real* row(std::size_t i) { return feats.data() + i * channels; }

  // -1 when the coordinate is not a site.
  std::int32_t lookup(const Coord& c) const {
    auto it = index.find(c);
    return it == index.end() ? -1 : it->second;
  }

  void rebuild_index() {
    index.clear();
    index.reserve(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
      auto [it, inserted] =
          index.emplace(coords[i], static_cast<std::int32_t>(i));
      if (!inserted)
        throw DataError("duplicate sparse-tensor coordinate (" +
                        std::to_string(coords[i][0]) + "," +
                        std::to_string(coords[i][1]) + "," +
                        std::to_string(coords[i][2]) + "," +
                        std::to_string(coords[i][3]) + ")");
    }
  }

  void validate() const {
    if (feats.size() != coords.size() * static_cast<std::size_t>(channels))
      throw DataError("feature row count does not match site count");
    for (const Coord& c : coords)
      for (int a = 1; a < 4; ++a)
        if (c[a] % stride != 0)
          throw DataError("coordinate not a multiple of the tensor stride");
  }
};

// Normalizes HU affinely onto [0,1] over the active sparsification range.
template <typename Real>
Real normalize_hu(std::int16_t hu, const HuRange& r) {
  return static_cast<Real>(hu - r.lo) / static_cast<Real>(r.hi - r.lo);
}

// Builds a stride-1 single-channel tensor from a thresholded voxel set.
// Returns the tensor plus per-site class labels (empty when the voxels carry
// none). Input order is preserved only up to the canonical sort.
template <typename Real>
std::pair<SparseTensor<Real>, std::vector<std::uint8_t>> from_voxels(
    const SparseVoxels& vox, std::int32_t batch_id, const HuRange& norm) {
  const std::size_t n = vox.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Coord> cs(n);
  for (std::size_t i = 0; i < n; ++i)
    cs[i] = {batch_id, vox.coords[i][0], vox.coords[i][1], vox.coords[i][2]};
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return coord_less(cs[a], cs[b]);
  });

  SparseTensor<Real> t;
  t.channels = 1;
  t.stride = 1;
  t.coords.resize(n);
  t.feats.resize(n);
  std::vector<std::uint8_t> labels;
  if (vox.has_labels()) labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = order[i];
    t.coords[i] = cs[s];
    t.feats[i] = normalize_hu<Real>(vox.hu[s], norm);
    if (vox.has_labels()) labels[i] = vox.labels[s];
  }
  t.rebuild_index();
  return {std::move(t), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Quantization: coordinates collapse to floor(c/factor)*factor cells, merging
// features and labels per policy. Idempotent at a fixed factor.
// ---------------------------------------------------------------------------

struct QuantizationPolicy {
  int factor = 3;
  enum class FeatureRule { mean, first } feature_rule = FeatureRule::mean;
  enum class LabelRule { any_signal, majority } label_rule =
      LabelRule::any_signal;

  void validate() const {
    if (factor < 1) throw ConfigError("quantization factor must be >= 1");
  }
};

template <typename Real>
std::pair<SparseTensor<Real>, std::vector<std::uint8_t>> quantize(
    const SparseTensor<Real>& t, const QuantizationPolicy& p,
    const std::vector<std::uint8_t>& labels) {
  p.validate();
  if (!labels.empty() && labels.size() != t.size())
    throw DataError("label count does not match site count");
  const std::int32_t f = p.factor;

  struct Cell {
    std::vector<Real> feat_sum;
    std::size_t n = 0;
    std::size_t first = 0;      // input row of the first site seen
    bool any_signal = false;
    std::array<std::uint32_t, 4> class_votes{};  // for majority rule
  };
  std::unordered_map<Coord, Cell, CoordHash> cells;
  cells.reserve(t.size());

  for (std::size_t i = 0; i < t.size(); ++i) {
    Coord c = t.coords[i];
    for (int a = 1; a < 4; ++a) c[a] = floor_div(c[a], f) * f;
    auto [it, inserted] = cells.try_emplace(c);
    Cell& cell = it->second;
    if (inserted) {
      cell.feat_sum.assign(static_cast<std::size_t>(t.channels), Real(0));
      cell.first = i;
    }
    for (int ch = 0; ch < t.channels; ++ch)
      cell.feat_sum[ch] += t.row(i)[ch];
    ++cell.n;
    if (!labels.empty()) {
      const std::uint8_t lab = labels[i];
      if (lab != 0) cell.any_signal = true;
      if (lab < 4) ++cell.class_votes[lab];
    }
  }

  SparseTensor<Real> out;
  out.channels = t.channels;
  out.stride = t.stride * f;
  out.coords.reserve(cells.size());
  for (const auto& [c, cell] : cells) out.coords.push_back(c);
  std::sort(out.coords.begin(), out.coords.end(), coord_less);

  out.feats.resize(out.coords.size() * static_cast<std::size_t>(t.channels));
  std::vector<std::uint8_t> out_labels;
  if (!labels.empty()) out_labels.resize(out.coords.size());

  for (std::size_t j = 0; j < out.coords.size(); ++j) {
    const Cell& cell = cells.at(out.coords[j]);
    for (int ch = 0; ch < t.channels; ++ch) {
      out.row(j)[ch] = p.feature_rule == QuantizationPolicy::FeatureRule::mean
                           ? cell.feat_sum[ch] / static_cast<Real>(cell.n)
                           : t.row(cell.first)[ch];
    }
    if (!labels.empty()) {
      if (p.label_rule == QuantizationPolicy::LabelRule::any_signal) {
        out_labels[j] = cell.any_signal ? 1 : 0;
      } else {
        std::size_t best = 0;
        for (std::size_t k = 1; k < cell.class_votes.size(); ++k)
          if (cell.class_votes[k] > cell.class_votes[best]) best = k;
        out_labels[j] = static_cast<std::uint8_t>(best);
      }
    }
  }
  out.rebuild_index();
  return {std::move(out), std::move(out_labels)};
}

// A stride-s cell covers the closed per-axis range [c, c+factor-1] at
// stride 1.
struct CoordRange {
  std::array<std::int32_t, 3> lo;  // x, y, z
  std::array<std::int32_t, 3> hi;
};

inline CoordRange upscale_coord(const Coord& c, std::int32_t factor) {
  CoordRange r;
  for (int a = 0; a < 3; ++a) {
    r.lo[a] = c[a + 1];
    r.hi[a] = c[a + 1] + factor - 1;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Raw-format sidecar serialization for pipeline checkpoints: JSON header at
// <path>.json, payload at <path> with coords as int32 LE rows then feats as
// float32 LE rows.
// ---------------------------------------------------------------------------

template <typename Real>
void save_sparse(const SparseTensor<Real>& t, const std::string& path) {
  nlohmann::json hdr = {{"sites", t.size()},
                        {"channels", t.channels},
                        {"stride", t.stride},
                        {"coord_dtype", "int32"},
                        {"feat_dtype", "float32"},
                        {"byte_order", "little"}};
  std::ofstream hs(path + ".json");
  if (!hs) throw DataError("cannot write sparse header: " + path + ".json");
  hs << hdr.dump(2) << "\n";

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write sparse payload: " + path);
  for (const Coord& c : t.coords) write_pod(os, c);
  for (Real f : t.feats) write_pod(os, static_cast<float>(f));
  if (!os) throw DataError("short write on sparse payload: " + path);
}

template <typename Real>
SparseTensor<Real> load_sparse(const std::string& path) {
  std::ifstream hs(path + ".json");
  if (!hs) throw DataError("missing sparse header: " + path + ".json");
  nlohmann::json hdr;
  hs >> hdr;
  SparseTensor<Real> t;
  const std::size_t n = hdr.at("sites").get<std::size_t>();
  t.channels = hdr.at("channels").get<int>();
  t.stride = hdr.at("stride").get<std::int32_t>();

  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing sparse payload: " + path);
  t.coords.resize(n);
  for (Coord& c : t.coords) read_pod(is, c);
  t.feats.resize(n * static_cast<std::size_t>(t.channels));
  for (Real& f : t.feats) {
    float v;
    read_pod(is, v);
    f = static_cast<Real>(v);
  }
  if (!is) throw DataError("sparse payload truncated: " + path);
  t.rebuild_index();
  return t;
}

// Concatenates per-case tensors into one batch; batch ids are overwritten
// with the tensor's position in the list.
template <typename Real>
std::pair<SparseTensor<Real>, std::vector<std::uint8_t>> make_batch(
    const std::vector<const SparseTensor<Real>*>& parts,
    const std::vector<const std::vector<std::uint8_t>*>& labels) {
  SparseTensor<Real> out;
  std::vector<std::uint8_t> out_labels;
  if (parts.empty()) return {std::move(out), std::move(out_labels)};
  out.channels = parts[0]->channels;
  out.stride = parts[0]->stride;
  for (std::size_t b = 0; b < parts.size(); ++b) {
    const auto& t = *parts[b];
    if (t.channels != out.channels || t.stride != out.stride)
      throw DataError("batch members disagree on channels or stride");
    for (const Coord& c : t.coords)
      out.coords.push_back({static_cast<std::int32_t>(b), c[1], c[2], c[3]});
    out.feats.insert(out.feats.end(), t.feats.begin(), t.feats.end());
    if (labels[b])
      out_labels.insert(out_labels.end(), labels[b]->begin(),
                        labels[b]->end());
  }
  out.rebuild_index();
  return {std::move(out), std::move(out_labels)};
}

}  // namespace sparsevox
