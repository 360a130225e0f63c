#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "sparsevox/sparse_tensor.hpp"

using namespace sparsevox;
namespace fs = std::filesystem;

namespace {

SparseTensor<double> random_tensor(std::uint64_t seed, std::size_t sites,
                                   int channels, std::int32_t span) {
  Rng rng(seed);
  SparseTensor<double> t;
  t.channels = channels;
  t.stride = 1;
  std::unordered_map<Coord, bool, CoordHash> seen;
  while (t.coords.size() < sites) {
    Coord c = {0, static_cast<std::int32_t>(rng.below(span)) - span / 2,
               static_cast<std::int32_t>(rng.below(span)) - span / 2,
               static_cast<std::int32_t>(rng.below(span)) - span / 2};
    if (seen.emplace(c, true).second) t.coords.push_back(c);
  }
  std::sort(t.coords.begin(), t.coords.end(), coord_less);
  t.feats.resize(sites * channels);
  for (auto& f : t.feats) f = rng.uniform(-1.0, 1.0);
  t.rebuild_index();
  return t;
}

// Brute-force quantization reference: group rows by quantized cell with an
// ordered map, average features, any_signal labels.
std::pair<std::vector<Coord>, std::vector<std::uint8_t>> oracle_cells(
    const SparseTensor<double>& t, int factor,
    const std::vector<std::uint8_t>& labels,
    std::vector<std::vector<double>>* mean_feats) {
  struct Acc {
    std::vector<double> sum;
    std::size_t n = 0;
    bool any = false;
  };
  auto cmp = [](const Coord& a, const Coord& b) { return coord_less(a, b); };
  std::map<Coord, Acc, decltype(cmp)> groups(cmp);
  for (std::size_t i = 0; i < t.size(); ++i) {
    Coord c = t.coords[i];
    for (int a = 1; a < 4; ++a) c[a] = floor_div(c[a], factor) * factor;
    Acc& g = groups[c];
    if (g.sum.empty()) g.sum.assign(t.channels, 0.0);
    for (int ch = 0; ch < t.channels; ++ch) g.sum[ch] += t.row(i)[ch];
    ++g.n;
    if (!labels.empty() && labels[i] != 0) g.any = true;
  }
  std::vector<Coord> cells;
  std::vector<std::uint8_t> labs;
  for (auto& [c, g] : groups) {
    cells.push_back(c);
    labs.push_back(g.any ? 1 : 0);
    if (mean_feats) {
      std::vector<double> m = g.sum;
      for (auto& x : m) x /= static_cast<double>(g.n);
      mean_feats->push_back(std::move(m));
    }
  }
  return {cells, labs};
}

}  // namespace

TEST_CASE("normalize_hu maps the range endpoints to 0 and 1") {
  const HuRange r{-30, 350};
  CHECK(normalize_hu<double>(-30, r) == 0.0);
  CHECK(normalize_hu<double>(350, r) == 1.0);
  CHECK(normalize_hu<double>(160, r) == doctest::Approx(0.5));
}

TEST_CASE("from_voxels produces sorted, indexed, normalized sites") {
  SparseVoxels vox;
  vox.coords = {{2, 0, 1}, {0, 0, 0}, {1, 1, 0}};
  vox.hu = {350, -30, 160};
  vox.labels = {1, 0, 2};
  const HuRange r{-30, 350};
  auto [t, labels] = from_voxels<double>(vox, 3, r);
  REQUIRE(t.size() == 3);
  CHECK(t.channels == 1);
  CHECK(t.stride == 1);
  // Canonical (b,z,y,x) order.
  CHECK(t.coords[0] == Coord{3, 0, 0, 0});
  CHECK(t.coords[1] == Coord{3, 1, 1, 0});
  CHECK(t.coords[2] == Coord{3, 2, 0, 1});
  CHECK(t.feats[0] == 0.0);
  CHECK(t.feats[1] == doctest::Approx(0.5));
  CHECK(t.feats[2] == 1.0);
  CHECK(labels == std::vector<std::uint8_t>{0, 2, 1});
  CHECK(t.lookup({3, 1, 1, 0}) == 1);
  CHECK(t.lookup({3, 9, 9, 9}) == -1);
}

TEST_CASE("duplicate coordinates are rejected with the offender named") {
  SparseTensor<double> t;
  t.channels = 1;
  t.coords = {{0, 1, 2, 3}, {0, 1, 2, 3}};
  t.feats = {0.0, 0.0};
  CHECK_THROWS_WITH_AS(t.rebuild_index(),
                       doctest::Contains("(0,1,2,3)"), DataError);
}

TEST_CASE("validate catches stride and size violations") {
  SparseTensor<double> t;
  t.channels = 2;
  t.stride = 2;
  t.coords = {{0, 2, 4, 6}};
  t.feats = {1.0};
  CHECK_THROWS_AS(t.validate(), DataError);
  t.feats = {1.0, 2.0};
  CHECK_NOTHROW(t.validate());
  t.coords[0][1] = 3;
  CHECK_THROWS_AS(t.validate(), DataError);
}

TEST_CASE("quantize matches the brute-force group-by oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SparseTensor<double> t = random_tensor(seed, 80, 2, 12);
    std::vector<std::uint8_t> labels(t.size());
    Rng rng(seed + 1000);
    for (auto& l : labels) l = rng.uniform() < 0.3 ? 1 : 0;

    QuantizationPolicy p;
    p.factor = 3;
    auto [q, qlabels] = quantize(t, p, labels);

    std::vector<std::vector<double>> mean_feats;
    auto [cells, cell_labels] = oracle_cells(t, 3, labels, &mean_feats);

    REQUIRE(q.size() == cells.size());
    CHECK(q.stride == 3);
    for (std::size_t j = 0; j < cells.size(); ++j) {
      CHECK(q.coords[j] == cells[j]);
      CHECK(qlabels[j] == cell_labels[j]);
      for (int ch = 0; ch < t.channels; ++ch)
        CHECK(q.row(j)[ch] == doctest::Approx(mean_feats[j][ch]));
    }
  }
}

TEST_CASE("quantize first rule picks the first input row of each cell") {
  SparseTensor<double> t;
  t.channels = 1;
  t.stride = 1;
  t.coords = {{0, 0, 0, 0}, {0, 1, 0, 0}, {0, 4, 0, 0}};
  t.feats = {10.0, 20.0, 30.0};
  t.rebuild_index();
  QuantizationPolicy p;
  p.factor = 3;
  p.feature_rule = QuantizationPolicy::FeatureRule::first;
  auto [q, labels] = quantize(t, p, {});
  REQUIRE(q.size() == 2);
  CHECK(q.row(0)[0] == 10.0);  // cell (0,0,0): first site seen is row 0
  CHECK(q.row(1)[0] == 30.0);  // cell (3,0,0)
  CHECK(labels.empty());
}

TEST_CASE("quantize majority label rule") {
  SparseTensor<double> t;
  t.channels = 1;
  t.stride = 1;
  t.coords = {{0, 0, 0, 0}, {0, 1, 0, 0}, {0, 2, 0, 0}};
  t.feats = {0.0, 0.0, 0.0};
  t.rebuild_index();
  QuantizationPolicy p;
  p.factor = 3;
  p.label_rule = QuantizationPolicy::LabelRule::majority;
  {
    auto [q, labels] = quantize(t, p, {2, 2, 1});
    CHECK(labels == std::vector<std::uint8_t>{2});
  }
  {
    // A 2-1 background majority wins over any_signal.
    auto [q, labels] = quantize(t, p, {0, 0, 1});
    CHECK(labels == std::vector<std::uint8_t>{0});
  }
}

TEST_CASE("quantize handles negative coordinates with floor semantics") {
  SparseTensor<double> t;
  t.channels = 1;
  t.stride = 1;
  t.coords = {{0, -1, 0, 0}, {0, -3, 0, 0}};
  t.feats = {1.0, 3.0};
  t.rebuild_index();
  QuantizationPolicy p;
  p.factor = 3;
  auto [q, labels] = quantize(t, p, {});
  REQUIRE(q.size() == 1);
  CHECK(q.coords[0] == Coord{0, -3, 0, 0});
  CHECK(q.row(0)[0] == doctest::Approx(2.0));
}

TEST_CASE("quantization is idempotent and factor 1 is the identity") {
  SparseTensor<double> t = random_tensor(3, 60, 1, 10);
  std::vector<std::uint8_t> labels(t.size(), 0);
  labels[5] = 1;
  QuantizationPolicy p;
  p.factor = 3;
  auto [q1, l1] = quantize(t, p, labels);
  auto [q2, l2] = quantize(q1, p, l1);
  CHECK(q2.coords == q1.coords);
  CHECK(l2 == l1);
  for (std::size_t i = 0; i < q1.feats.size(); ++i)
    CHECK(q2.feats[i] == doctest::Approx(q1.feats[i]));
  CHECK(q2.stride == 9);  // stride still multiplies; coordinates are fixed

  QuantizationPolicy id;
  id.factor = 1;
  auto [qi, li] = quantize(t, id, labels);
  CHECK(qi.coords == t.coords);
  CHECK(qi.feats == t.feats);
  CHECK(li == labels);
}

TEST_CASE("upscale_coord covers exactly the factor-wide cell") {
  const CoordRange r = upscale_coord({0, 6, 9, 3}, 3);
  CHECK(r.lo == std::array<std::int32_t, 3>{6, 9, 3});
  CHECK(r.hi == std::array<std::int32_t, 3>{8, 11, 5});
  // Every stride-1 coordinate in the cell quantizes back to the cell origin.
  for (int x = r.lo[0]; x <= r.hi[0]; ++x)
    CHECK(floor_div(x, 3) * 3 == 6);
}

TEST_CASE("sparse tensor sidecar serialization round trip") {
  const fs::path d = fs::temp_directory_path() / "sparsevox_test_sidecar";
  fs::remove_all(d);
  fs::create_directories(d);
  SparseTensor<double> t = random_tensor(8, 40, 3, 9);
  t.stride = 1;
  const std::string path = (d / "t.sparse").string();
  save_sparse(t, path);
  SparseTensor<double> r = load_sparse<double>(path);
  CHECK(r.coords == t.coords);
  CHECK(r.channels == t.channels);
  CHECK(r.stride == t.stride);
  REQUIRE(r.feats.size() == t.feats.size());
  for (std::size_t i = 0; i < t.feats.size(); ++i)
    CHECK(r.feats[i] == doctest::Approx(t.feats[i]).epsilon(1e-6));
  CHECK_THROWS_AS(load_sparse<double>((d / "absent").string()), DataError);
  fs::remove_all(d);
}

TEST_CASE("make_batch renumbers batch ids by list position") {
  SparseTensor<double> a = random_tensor(1, 10, 2, 6);
  SparseTensor<double> b = random_tensor(2, 12, 2, 6);
  std::vector<std::uint8_t> la(a.size(), 1), lb(b.size(), 0);
  auto [batch, labels] = make_batch<double>({&a, &b}, {&la, &lb});
  REQUIRE(batch.size() == a.size() + b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(batch.coords[i][0] == 0);
    CHECK(labels[i] == 1);
  }
  for (std::size_t i = a.size(); i < batch.size(); ++i) {
    CHECK(batch.coords[i][0] == 1);
    CHECK(labels[i] == 0);
  }
  SparseTensor<double> c = random_tensor(3, 5, 1, 6);
  std::vector<std::uint8_t> lc(c.size(), 0);
  CHECK_THROWS_AS((make_batch<double>({&a, &c}, {&la, &lc})), DataError);
}
