#include "align/roi.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

namespace align {
namespace {

// Absorbs rounding in area means of maps that are exact multiples of 1/P.
constexpr double kThresholdSlack = 1e-12;

class DisjointSets {
public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }

  std::size_t find(std::size_t x)
  {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::size_t a, std::size_t b)
  {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

private:
  std::vector<std::size_t> parent_;
};

}  // namespace

ValidationReport validate_atlas(const LabelVolume& atlas)
{
  ValidationReport report;
  for (Eigen::Index i = 0; i < atlas.data.size(); ++i) {
    const int label = atlas.data(i);
    if (label < 0 || label > kAreaCount) {
      report.violations.push_back("voxel " + std::to_string(i) + " has label " + std::to_string(label) +
                                  " outside [0, " + std::to_string(kAreaCount) + "]");
      if (report.violations.size() >= 20) break;
    }
  }
  return report;
}

std::map<int, std::int64_t> area_voxel_counts(const LabelVolume& atlas)
{
  std::map<int, std::int64_t> counts;
  for (Eigen::Index i = 0; i < atlas.data.size(); ++i) {
    if (atlas.data(i) != 0) ++counts[atlas.data(i)];
  }
  return counts;
}

AreaValues area_average(const MapVolume& map, const LabelVolume& atlas)
{
  if (!(map.dims == atlas.dims)) throw std::invalid_argument("area_average: map and atlas grids differ");
  std::map<int, std::pair<double, std::int64_t>> acc;
  for (Eigen::Index i = 0; i < atlas.data.size(); ++i) {
    const int a = atlas.data(i);
    if (a == 0) continue;
    auto& [sum, n] = acc[a];
    sum += map.data(i);
    ++n;
  }
  AreaValues out;
  for (const auto& [a, sn] : acc) out[a] = sn.first / static_cast<double>(sn.second);
  return out;
}

AreaValues area_average(const MapVolume& map, const LabelVolume& atlas, std::span<const int> areas)
{
  const AreaValues all = area_average(map, atlas);
  AreaValues out;
  std::vector<int> empty;
  for (int a : areas) {
    auto it = all.find(a);
    if (it == all.end()) {
      empty.push_back(a);
    } else {
      out[a] = it->second;
    }
  }
  if (!empty.empty()) {
    std::string ids;
    for (int a : empty) ids += (ids.empty() ? "" : ", ") + std::to_string(a);
    throw std::runtime_error("area_average: no voxels for area(s) " + ids);
  }
  return out;
}

std::map<int, std::set<int>> area_adjacency(const LabelVolume& atlas)
{
  const GridDims g = atlas.dims;
  std::map<int, std::set<int>> adj;
  for (int x = 0; x < g.nx; ++x) {
    for (int y = 0; y < g.ny; ++y) {
      for (int z = 0; z < g.nz; ++z) {
        const int a = atlas(x, y, z);
        if (a == 0) continue;
        adj[a];
        // Forward neighbours suffice; the relation is symmetrized below.
        const int nb[3][3] = {{x + 1, y, z}, {x, y + 1, z}, {x, y, z + 1}};
        for (const auto& n : nb) {
          if (!g.contains(n[0], n[1], n[2])) continue;
          const int b = atlas(n[0], n[1], n[2]);
          if (b != 0 && b != a) {
            adj[a].insert(b);
            adj[b].insert(a);
          }
        }
      }
    }
  }
  return adj;
}

std::vector<RoiDefinition> select_rois(const AreaValues& area_values, const LabelVolume& atlas, const RoiOptions& options)
{
  const auto counts = area_voxel_counts(atlas);
  for (const auto& [a, n] : counts) {
    if (!area_values.contains(a)) throw std::invalid_argument("select_rois: no value for area " + std::to_string(a));
  }

  std::vector<int> kept;
  for (const auto& [a, n] : counts) {
    if (area_values.at(a) >= options.threshold - kThresholdSlack) kept.push_back(a);
  }
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < kept.size(); ++i) slot[kept[i]] = i;

  DisjointSets sets(kept.size());
  for (const auto& [a, neighbours] : area_adjacency(atlas)) {
    auto ia = slot.find(a);
    if (ia == slot.end()) continue;
    for (int b : neighbours) {
      auto ib = slot.find(b);
      if (ib != slot.end()) sets.unite(ia->second, ib->second);
    }
  }

  std::map<std::size_t, RoiDefinition> components;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    auto& roi = components[sets.find(i)];
    roi.areas.push_back(kept[i]);
    roi.voxel_count += counts.at(kept[i]);
  }

  std::vector<RoiDefinition> rois;
  for (auto& [root, roi] : components) {
    if (roi.voxel_count > options.min_voxels) rois.push_back(std::move(roi));
  }
  std::sort(rois.begin(), rois.end(), [](const RoiDefinition& a, const RoiDefinition& b) {
    if (a.voxel_count != b.voxel_count) return a.voxel_count > b.voxel_count;
    return a.areas.front() < b.areas.front();
  });
  for (std::size_t i = 0; i < rois.size(); ++i) {
    rois[i].id = static_cast<int>(i) + 1;
    rois[i].voxels = roi_voxels(rois[i], atlas);
  }
  return rois;
}

std::vector<std::int64_t> roi_voxels(const RoiDefinition& roi, const LabelVolume& atlas, const MaskVolume* restrict_to)
{
  if (restrict_to != nullptr && !(restrict_to->dims == atlas.dims))
    throw std::invalid_argument("roi_voxels: mask and atlas grids differ");
  const std::set<int> members(roi.areas.begin(), roi.areas.end());
  std::vector<std::int64_t> out;
  for (Eigen::Index i = 0; i < atlas.data.size(); ++i) {
    if (!members.contains(atlas.data(i))) continue;
    if (restrict_to != nullptr && restrict_to->data(i) == 0) continue;
    out.push_back(i);
  }
  return out;
}

void save_rois(const std::vector<RoiDefinition>& rois, const RoiOptions& options, const std::filesystem::path& path)
{
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : rois) list.push_back({{"id", r.id}, {"areas", r.areas}, {"voxel_count", r.voxel_count}});
  const nlohmann::json j{{"schema_version", 1},
                         {"threshold", options.threshold},
                         {"min_voxels", options.min_voxels},
                         {"rois", std::move(list)}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

std::vector<RoiDefinition> load_rois(const std::filesystem::path& path, const LabelVolume& atlas)
{
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto j = nlohmann::json::parse(in);
  std::vector<RoiDefinition> rois;
  for (const auto& r : j.at("rois")) {
    RoiDefinition roi;
    roi.id = r.at("id").get<int>();
    roi.areas = r.at("areas").get<std::vector<int>>();
    roi.voxels = roi_voxels(roi, atlas);
    roi.voxel_count = static_cast<std::int64_t>(roi.voxels.size());
    if (roi.voxel_count != r.at("voxel_count").get<std::int64_t>())
      throw std::runtime_error("ROI " + std::to_string(roi.id) + " voxel count does not match the atlas");
    rois.push_back(std::move(roi));
  }
  return rois;
}

}  // namespace align
