#include "align/roi.hpp"
#include "align/synth.hpp"

#include "doctest.h"
#include "reference.hpp"

#include <algorithm>
#include <numeric>

using align::GridDims;
using align::LabelVolume;
using align::MapVolume;

namespace {

// 12^3 grid of 3^3 blocks, each labeled with a random area (or background).
LabelVolume random_atlas(std::uint64_t seed, int areas = 30)
{
  align::Rng rng(seed);
  LabelVolume atlas(GridDims{12, 12, 12}, 0);
  for (int bx = 0; bx < 4; ++bx)
    for (int by = 0; by < 4; ++by)
      for (int bz = 0; bz < 4; ++bz) {
        const int label = rng.below(8) == 0 ? 0 : 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(areas)));
        for (int x = 0; x < 3; ++x)
          for (int y = 0; y < 3; ++y)
            for (int z = 0; z < 3; ++z) atlas(3 * bx + x, 3 * by + y, 3 * bz + z) = label;
      }
  return atlas;
}

align::AreaValues random_values(const LabelVolume& atlas, std::uint64_t seed)
{
  align::Rng rng(seed);
  align::AreaValues v;
  for (const auto& [a, n] : align::area_voxel_counts(atlas)) v[a] = rng.uniform() * 0.2;
  return v;
}

// Components by flood fill over voxels of kept areas, an independent route to the clusters.
std::vector<std::set<int>> flood_components(const LabelVolume& atlas, const std::set<int>& kept)
{
  const GridDims g = atlas.dims;
  std::vector<int> comp(static_cast<std::size_t>(g.size()), -1);
  std::vector<std::set<int>> out;
  for (std::int64_t start = 0; start < g.size(); ++start) {
    if (comp[static_cast<std::size_t>(start)] >= 0 || !kept.count(atlas.data(start))) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::vector<std::int64_t> stack{start};
    comp[static_cast<std::size_t>(start)] = id;
    while (!stack.empty()) {
      const auto v = stack.back();
      stack.pop_back();
      out.back().insert(atlas.data(v));
      const auto [x, y, z] = g.coords(v);
      const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& n : nb) {
        if (!g.contains(n[0], n[1], n[2])) continue;
        const auto w = g.index(n[0], n[1], n[2]);
        if (comp[static_cast<std::size_t>(w)] >= 0 || !kept.count(atlas.data(w))) continue;
        comp[static_cast<std::size_t>(w)] = id;
        stack.push_back(w);
      }
    }
  }
  // An area split across several voxel blobs joins every blob it touches.
  bool merged = true;
  while (merged) {
    merged = false;
    for (std::size_t i = 0; i < out.size() && !merged; ++i)
      for (std::size_t j = i + 1; j < out.size() && !merged; ++j) {
        std::vector<int> common;
        std::set_intersection(out[i].begin(), out[i].end(), out[j].begin(), out[j].end(), std::back_inserter(common));
        if (!common.empty()) {
          out[i].insert(out[j].begin(), out[j].end());
          out.erase(out.begin() + static_cast<std::ptrdiff_t>(j));
          merged = true;
        }
      }
  }
  return out;
}

std::set<std::set<int>> roi_sets(const std::vector<align::RoiDefinition>& rois)
{
  std::set<std::set<int>> out;
  for (const auto& r : rois) out.insert(std::set<int>(r.areas.begin(), r.areas.end()));
  return out;
}

}  // namespace

TEST_CASE("area averages")
{
  LabelVolume atlas(GridDims{2, 2, 2}, 1);
  for (int z = 0; z < 2; ++z) {
    atlas(1, 1, z) = 2;
    atlas(1, 0, z) = 2;
  }
  MapVolume constant(atlas.dims, 0.2);
  for (const auto& [a, v] : align::area_average(constant, atlas)) CHECK(v == doctest::Approx(0.2));

  MapVolume map(atlas.dims, 0.0);
  map(1, 1, 0) = 1.0 / 17.0;
  map(1, 0, 1) = 1.0 / 17.0;
  const auto values = align::area_average(map, atlas);
  CHECK(values.at(2) == doctest::Approx(1.0 / 34.0));
  CHECK(values.at(1) == 0.0);

  const std::vector<int> missing{2, 9};
  CHECK_THROWS_WITH(align::area_average(map, atlas, missing), doctest::Contains("9"));
  CHECK_THROWS(align::area_average(MapVolume(GridDims{2, 2, 1}, 0.0), atlas));
}

TEST_CASE("area values weighted by size give the labeled-voxel mean")
{
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto atlas = random_atlas(seed);
    MapVolume map(atlas.dims, 0.0);
    map.data = ref::gaussian_vector(atlas.dims.size(), seed + 100);
    const auto values = align::area_average(map, atlas);
    const auto counts = align::area_voxel_counts(atlas);
    double weighted = 0.0, total = 0.0;
    for (const auto& [a, v] : values) {
      weighted += v * static_cast<double>(counts.at(a));
      total += static_cast<double>(counts.at(a));
    }
    double direct = 0.0, labeled = 0.0;
    for (Eigen::Index i = 0; i < map.data.size(); ++i)
      if (atlas.data(i) != 0) {
        direct += map.data(i);
        labeled += 1;
      }
    CHECK(weighted / total == doctest::Approx(direct / labeled).epsilon(1e-12));
  }
}

TEST_CASE("atlas validation")
{
  LabelVolume atlas(GridDims{2, 1, 1}, 360);
  CHECK(align::validate_atlas(atlas).ok());
  atlas.data(1) = 361;
  CHECK_FALSE(align::validate_atlas(atlas).ok());
  atlas.data(1) = -2;
  CHECK_FALSE(align::validate_atlas(atlas).ok());
}

TEST_CASE("adjacency uses shared faces only")
{
  LabelVolume atlas(GridDims{2, 2, 1}, 0);
  atlas(0, 0, 0) = 1;
  atlas(1, 1, 0) = 2;  // diagonal to area 1
  atlas(0, 1, 0) = 3;  // face neighbour of both
  const auto adj = align::area_adjacency(atlas);
  CHECK(adj.at(1) == std::set<int>{3});
  CHECK(adj.at(3) == std::set<int>{1, 2});
  CHECK_FALSE(adj.at(2).count(1));
}

TEST_CASE("two planted clusters of 700 and 400 voxels give one ROI")
{
  const align::SynthModel model(align::default_synth_config());
  const auto& atlas = model.atlas();
  align::AreaValues values;
  for (const auto& [a, n] : align::area_voxel_counts(atlas)) values[a] = 0.0;
  values[1] = values[2] = values[3] = 0.2;
  const auto rois = align::select_rois(values, atlas);
  REQUIRE(rois.size() == 1);
  CHECK(rois[0].id == 1);
  CHECK(rois[0].areas == std::vector<int>{1, 2});
  CHECK(rois[0].voxel_count == 700);
  CHECK(rois[0].voxels.size() == 700);

  SUBCASE("threshold is inclusive at 1/17")
  {
    values[1] = values[2] = 1.0 / 17.0;
    CHECK(align::select_rois(values, atlas).size() == 1);
    values[2] = 1.0 / 17.0 - 1e-6;
    CHECK(align::select_rois(values, atlas).empty());
  }
  SUBCASE("size filter is strict")
  {
    CHECK(align::select_rois(values, atlas, {1.0 / 17.0, 699}).size() == 1);
    CHECK(align::select_rois(values, atlas, {1.0 / 17.0, 700}).empty());
    const auto both = align::select_rois(values, atlas, {1.0 / 17.0, 300});
    REQUIRE(both.size() == 2);
    CHECK(both[0].voxel_count == 700);
    CHECK(both[1].voxel_count == 400);
    CHECK(both[1].id == 2);
  }
  SUBCASE("everything below threshold")
  {
    for (auto& [a, v] : values) v = 0.01;
    CHECK(align::select_rois(values, atlas).empty());
  }
  SUBCASE("save and load")
  {
    const auto dir = ref::temp_dir("roi");
    align::save_rois(rois, {}, dir / "rois.json");
    const auto back = align::load_rois(dir / "rois.json", atlas);
    REQUIRE(back.size() == 1);
    CHECK(back[0].areas == rois[0].areas);
    CHECK(back[0].voxels == rois[0].voxels);
  }
  values.erase(5);
  CHECK_THROWS(align::select_rois(values, atlas));
}

TEST_CASE("ROIs partition the supra-threshold areas of large components")
{
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto atlas = random_atlas(seed);
    const auto values = random_values(atlas, seed + 7);
    const align::RoiOptions opts{0.08, 60};
    const auto rois = align::select_rois(values, atlas, opts);
    const auto counts = align::area_voxel_counts(atlas);

    std::set<int> kept;
    for (const auto& [a, v] : values)
      if (v >= opts.threshold) kept.insert(a);
    std::set<std::set<int>> expected;
    for (const auto& comp : flood_components(atlas, kept)) {
      std::int64_t n = 0;
      for (int a : comp) n += counts.at(a);
      if (n > opts.min_voxels) expected.insert(comp);
    }
    CHECK(roi_sets(rois) == expected);

    std::set<int> seen;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      const auto& r = rois[i];
      CHECK(r.id == static_cast<int>(i) + 1);
      CHECK(std::is_sorted(r.areas.begin(), r.areas.end()));
      CHECK(std::is_sorted(r.voxels.begin(), r.voxels.end()));
      std::int64_t n = 0;
      for (int a : r.areas) {
        CHECK(seen.insert(a).second);
        n += counts.at(a);
      }
      CHECK(r.voxel_count == n);
      CHECK(static_cast<std::int64_t>(r.voxels.size()) == n);
      if (i > 0) CHECK(rois[i - 1].voxel_count >= r.voxel_count);
    }
  }
}

TEST_CASE("stricter settings never introduce new ROIs")
{
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto atlas = random_atlas(seed);
    const auto values = random_values(atlas, seed + 50);
    const auto loose = align::select_rois(values, atlas, {0.05, 40});
    auto inside_loose = [&](const align::RoiDefinition& r) {
      return std::any_of(loose.begin(), loose.end(), [&](const align::RoiDefinition& l) {
        return std::includes(l.areas.begin(), l.areas.end(), r.areas.begin(), r.areas.end());
      });
    };
    for (const auto& r : align::select_rois(values, atlas, {0.1, 40})) CHECK(inside_loose(r));
    const auto bigger = align::select_rois(values, atlas, {0.05, 100});
    CHECK(bigger.size() <= loose.size());
    for (const auto& r : bigger) CHECK(roi_sets(loose).count(std::set<int>(r.areas.begin(), r.areas.end())));
  }
}

TEST_CASE("clustering is invariant to area relabeling")
{
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto atlas = random_atlas(seed);
    const auto values = random_values(atlas, seed + 3);
    std::vector<int> perm(361);
    std::iota(perm.begin(), perm.end(), 0);
    align::Rng rng(seed);
    std::span<int> labels(perm.data() + 1, 360);
    rng.shuffle(labels);
    LabelVolume relabeled = atlas;
    for (Eigen::Index i = 0; i < atlas.data.size(); ++i) relabeled.data(i) = perm[static_cast<std::size_t>(atlas.data(i))];
    align::AreaValues moved;
    for (const auto& [a, v] : values) moved[perm[static_cast<std::size_t>(a)]] = v;

    const align::RoiOptions opts{0.08, 60};
    std::set<std::set<int>> mapped;
    for (const auto& r : align::select_rois(values, atlas, opts)) {
      std::set<int> s;
      for (int a : r.areas) s.insert(perm[static_cast<std::size_t>(a)]);
      mapped.insert(s);
    }
    CHECK(roi_sets(align::select_rois(moved, relabeled, opts)) == mapped);
  }
}

TEST_CASE("ROI voxels with and without a mask")
{
  const align::SynthModel model(align::default_synth_config());
  const auto& atlas = model.atlas();
  align::RoiDefinition roi;
  roi.areas = {1, 2};
  const auto all = align::roi_voxels(roi, atlas);
  CHECK(all.size() == 700);

  align::MaskVolume full(atlas.dims, 1);
  CHECK(align::roi_voxels(roi, atlas, &full) == all);

  align::MaskVolume sparse(atlas.dims, 0);
  std::vector<std::int64_t> chosen;
  for (std::size_t i = 0; i < all.size(); i += 70) chosen.push_back(all[i]);
  REQUIRE(chosen.size() == 10);
  for (auto v : chosen) sparse.data(v) = 1;
  // Mask voxels outside the ROI are ignored.
  for (Eigen::Index v = 0; v < atlas.data.size(); ++v)
    if (atlas.data(v) == 40) sparse.data(v) = 1;
  CHECK(align::roi_voxels(roi, atlas, &sparse) == chosen);

  align::MaskVolume empty(atlas.dims, 0);
  CHECK(align::roi_voxels(roi, atlas, &empty).empty());
  align::MaskVolume wrong(GridDims{2, 2, 2}, 1);
  CHECK_THROWS(align::roi_voxels(roi, atlas, &wrong));
}
